//! Slow, definition-level reference implementations.

/// AP from its definition: the mean over positives of the precision at that
/// positive's score, counting every item scored at least as high.
pub fn brute_ap(scores: &[f32], targets: &[bool]) -> Option<f64> {
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| targets[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
            above.iter().filter(|&&j| targets[j]).count() as f64 / above.len() as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

/// AUC as the fraction of positive/negative pairs ordered correctly, ties
/// worth one half.
pub fn brute_auc(scores: &[f32], targets: &[bool]) -> Option<f64> {
    let mut wins = 0f64;
    let mut pairs = 0usize;
    for i in (0..scores.len()).filter(|&i| targets[i]) {
        for j in (0..scores.len()).filter(|&j| !targets[j]) {
            pairs += 1;
            wins += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Standard normal CDF from the Maclaurin series of the error function,
/// `1/2 + (1/sqrt(2 pi)) sum (-1)^n x^(2n+1) / (2^n n! (2n+1))`. Good to
/// ~1e-13 for `|x| <= 4`.
pub fn normal_cdf_series(x: f64) -> f64 {
    let mut sum = 0f64;
    // x^(2n+1) / (2^n n!)
    let mut power = x;
    for n in 0..400 {
        let term = power / (2 * n + 1) as f64;
        sum += if n % 2 == 0 { term } else { -term };
        if term.abs() < 1e-18 {
            break;
        }
        power *= x * x / (2.0 * (n + 1) as f64);
    }
    0.5 + sum / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverts [`normal_cdf_series`] by bisection.
pub fn inverse_normal_series(p: f64) -> f64 {
    let (mut lo, mut hi) = (-5.0f64, 5.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf_series(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Kolmogorov-Smirnov distance between a sample and U(0, 1).
pub fn ks_uniform(sample: &mut [f64]) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    sample
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - i as f64 / n).abs().max(((i + 1) as f64 / n - v).abs()))
        .fold(0.0, f64::max)
}
