//! Finite-difference gradient suite and independent oracles shared by the
//! integration tests and the acceptance report.

#![allow(dead_code)]

pub mod oracles;

use dsc_core::gradcheck::{numerical_gradient, relative_error, tolerance_for, weighted_sum};
use dsc_core::model::{ForwardCtx, Model, ModelConfig, ParamKind};
use dsc_core::ops::{self, ConvSpec, NormParams, PoolMode};
use dsc_core::trainer::bce_with_logits;
use dsc_core::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: usize = 20;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.cases > 0 && self.worst < self.tolerance
    }
}

pub fn random<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_values(shape, (0..n).map(|_| T::of(rng.gen_range(lo..hi))).collect()).unwrap()
}

/// Values in `[-1, 1]` kept at least `gap` away from zero.
fn away_from_zero<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng, gap: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            T::of(if rng.gen_bool(0.5) { m } else { -m })
        })
        .collect();
    Tensor::from_values(shape, v).unwrap()
}

fn shape4(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(2..=5), rng.gen_range(2..=5)]
}

struct Suite<T: Real> {
    checks: Vec<Check>,
    rng: ChaCha8Rng,
    _t: std::marker::PhantomData<T>,
}

impl<T: Real> Suite<T> {
    /// Runs `CASES` cases; each returns the worst relative error over the
    /// gradients it checks.
    fn run(&mut self, name: &str, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) {
        let worst = (0..CASES).map(|_| case(&mut self.rng)).fold(0.0, f64::max);
        self.checks.push(Check {
            name: name.to_string(),
            cases: CASES,
            worst,
            tolerance: tolerance_for::<T>(),
        });
    }
}

/// Checks the analytic gradient of `sum(f(x) * r)` for an elementwise or
/// shape-changing unary op.
fn unary<T: Real>(
    x: &Tensor<T>,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&Tensor<T>) -> Tensor<T>,
    back: impl Fn(&Tensor<T>, &Tensor<T>) -> Tensor<T>,
) -> f64 {
    let y = f(x);
    let r = random::<T>(y.shape(), rng, -1.0, 1.0);
    let g = back(x, &r);
    let num = numerical_gradient(x, |xp| weighted_sum(&f(xp), &r));
    relative_error(&g, &num)
}

pub fn op_suite<T: Real>(seed: u64) -> Vec<Check> {
    let mut s = Suite::<T> {
        checks: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        _t: Default::default(),
    };

    let conv_case = |spec: ConvSpec, n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng| -> f64 {
        let x = random::<T>(&[n, spec.in_channels, h, w], rng, -1.0, 1.0);
        let wt = random::<T>(&spec.weight_shape(), rng, -0.5, 0.5);
        let b = random::<T>(&[spec.out_channels], rng, -0.5, 0.5);
        let bias = spec.bias.then_some(&b);
        let y = ops::conv2d(&x, &wt, bias, &spec).unwrap();
        let r = random::<T>(y.shape(), rng, -1.0, 1.0);
        let g = ops::conv2d_backward(&x, &wt, &spec, &r).unwrap();
        let nx = numerical_gradient(&x, |xp| weighted_sum(&ops::conv2d(xp, &wt, bias, &spec).unwrap(), &r));
        let nw = numerical_gradient(&wt, |wp| weighted_sum(&ops::conv2d(&x, wp, bias, &spec).unwrap(), &r));
        let mut worst = relative_error(&g.input, &nx).max(relative_error(&g.weight, &nw));
        if spec.bias {
            let nb = numerical_gradient(&b, |bp| weighted_sum(&ops::conv2d(&x, &wt, Some(bp), &spec).unwrap(), &r));
            worst = worst.max(relative_error(g.bias.as_ref().unwrap(), &nb));
        }
        worst
    };

    s.run("conv2d", |rng| {
        let groups = [1, 2][rng.gen_range(0..2)];
        let k = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let mut spec = ConvSpec::new(groups * rng.gen_range(1..=2), groups * rng.gen_range(1..=2), k)
            .with_groups(groups)
            .with_stride((rng.gen_range(1..=2), rng.gen_range(1..=2)))
            .with_padding((rng.gen_range(0..=1), rng.gen_range(0..=1)));
        spec.bias = rng.gen_bool(0.5);
        conv_case(spec, rng.gen_range(1..=2), rng.gen_range(3..=6), rng.gen_range(3..=6), rng)
    });
    s.run("depthwise conv2d", |rng| {
        let c = rng.gen_range(1..=3);
        let spec = ConvSpec::depthwise(c, rng.gen_range(1..=2), [3, 5, 7][rng.gen_range(0..3)]);
        conv_case(spec, rng.gen_range(1..=2), rng.gen_range(2..=6), rng.gen_range(2..=6), rng)
    });
    s.run("pointwise", |rng| {
        let spec = ConvSpec::pointwise(rng.gen_range(1..=4), rng.gen_range(1..=6));
        conv_case(spec, rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4), rng)
    });

    for training in [true, false] {
        let name = if training { "batch_norm2d (training)" } else { "batch_norm2d (inference)" };
        s.run(name, |rng| {
            let mut shape = shape4(rng);
            shape[0] = shape[0].max(2);
            let c = shape[1];
            let x = random::<T>(&shape, rng, -2.0, 2.0);
            let p = NormParams {
                gamma: random::<T>(&[c], rng, 0.5, 1.5),
                beta: random::<T>(&[c], rng, -0.5, 0.5),
                running_mean: random::<T>(&[c], rng, -0.5, 0.5),
                running_var: random::<T>(&[c], rng, 0.5, 2.0),
                eps: ops::BN_EPS,
            };
            let fwd = |x: &Tensor<T>, p: &NormParams<T>| ops::batch_norm2d(x, p, training).unwrap().0;
            let (y, saved, _) = ops::batch_norm2d(&x, &p, training).unwrap();
            let r = random::<T>(y.shape(), rng, -1.0, 1.0);
            let g = ops::batch_norm2d_backward(&saved, &p.gamma, &r).unwrap();
            let nx = numerical_gradient(&x, |xp| weighted_sum(&fwd(xp, &p), &r));
            let ng = numerical_gradient(&p.gamma, |gp| {
                weighted_sum(&fwd(&x, &NormParams { gamma: gp.clone(), ..p.clone() }), &r)
            });
            let nb = numerical_gradient(&p.beta, |bp| {
                weighted_sum(&fwd(&x, &NormParams { beta: bp.clone(), ..p.clone() }), &r)
            });
            relative_error(&g.input, &nx)
                .max(relative_error(&g.gamma, &ng))
                .max(relative_error(&g.beta, &nb))
        });
    }

    s.run("layer_norm_channels", |rng| {
        let shape = shape4(rng);
        let c = shape[1].max(3);
        let shape = [shape[0], c, shape[2], shape[3]];
        let x = random::<T>(&shape, rng, -2.0, 2.0);
        let gamma = random::<T>(&[c], rng, 0.5, 1.5);
        let beta = random::<T>(&[c], rng, -0.5, 0.5);
        let fwd = |x: &Tensor<T>, g: &Tensor<T>, b: &Tensor<T>| ops::layer_norm_channels(x, g, b, ops::LN_EPS).unwrap().0;
        let (y, saved) = ops::layer_norm_channels(&x, &gamma, &beta, ops::LN_EPS).unwrap();
        let r = random::<T>(y.shape(), rng, -1.0, 1.0);
        let g = ops::layer_norm_channels_backward(&saved, &gamma, &r).unwrap();
        let nx = numerical_gradient(&x, |xp| weighted_sum(&fwd(xp, &gamma, &beta), &r));
        let ng = numerical_gradient(&gamma, |gp| weighted_sum(&fwd(&x, gp, &beta), &r));
        let nb = numerical_gradient(&beta, |bp| weighted_sum(&fwd(&x, &gamma, bp), &r));
        relative_error(&g.input, &nx)
            .max(relative_error(&g.gamma, &ng))
            .max(relative_error(&g.beta, &nb))
    });

    s.run("gelu", |rng| {
        let x = random::<T>(&shape4(rng), rng, -3.0, 3.0);
        unary(&x, rng, ops::gelu, |x, r| ops::gelu_backward(x, r).unwrap())
    });
    s.run("relu", |rng| {
        let x = away_from_zero::<T>(&shape4(rng), rng, 0.05);
        unary(&x, rng, ops::relu, |x, r| ops::relu_backward(x, r).unwrap())
    });
    s.run("sigmoid", |rng| {
        let x = random::<T>(&shape4(rng), rng, -4.0, 4.0);
        unary(&x, rng, ops::sigmoid, |x, r| ops::sigmoid_backward(&ops::sigmoid(x), r).unwrap())
    });
    s.run("avg_pool2x2", |rng| {
        let x = random::<T>(&shape4(rng), rng, -1.0, 1.0);
        unary(
            &x,
            rng,
            |x| ops::avg_pool2x2(x).unwrap(),
            |x, r| ops::avg_pool2x2_backward(x.shape(), r).unwrap(),
        )
    });
    for mode in [PoolMode::Gap, PoolMode::Pann] {
        let name = format!("global_pool ({mode:?})");
        s.run(&name, |rng| {
            // Separate row sums so the time max is stable under the probe.
            let mut shape = shape4(rng);
            let x = loop {
                let x = random::<T>(&shape, rng, -1.0, 1.0);
                let (n, c, h, w) = x.dims4().unwrap();
                let ok = x.data().chunks(h * w).all(|plane| {
                    let mut rows: Vec<f64> = plane.chunks(w).map(|r| r.iter().map(|v| v.f64()).sum()).collect();
                    rows.sort_by(|a, b| b.total_cmp(a));
                    rows.len() < 2 || rows[0] - rows[1] > 0.05
                });
                if ok || mode == PoolMode::Gap {
                    let _ = (n, c);
                    break x;
                }
                shape = shape4(rng);
            };
            unary(
                &x,
                rng,
                |x| ops::global_pool(x, mode).unwrap(),
                |x, r| ops::global_pool_backward(x, mode, r).unwrap(),
            )
        });
    }
    s.run("linear", |rng| {
        let (n, d, o) = (rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(1..=5));
        let x = random::<T>(&[n, d], rng, -1.0, 1.0);
        let w = random::<T>(&[o, d], rng, -1.0, 1.0);
        let b = random::<T>(&[o], rng, -1.0, 1.0);
        let r = random::<T>(&[n, o], rng, -1.0, 1.0);
        let g = ops::linear_backward(&x, &w, &r).unwrap();
        let f = |x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>| weighted_sum(&ops::linear(x, w, Some(b)).unwrap(), &r);
        relative_error(&g.input, &numerical_gradient(&x, |p| f(p, &w, &b)))
            .max(relative_error(&g.weight, &numerical_gradient(&w, |p| f(&x, p, &b))))
            .max(relative_error(&g.bias, &numerical_gradient(&b, |p| f(&x, &w, p))))
    });
    s.run("drop_path", |rng| {
        let shape = shape4(rng);
        let x = random::<T>(&shape, rng, -1.0, 1.0);
        let keep: Vec<bool> = (0..shape[0]).map(|_| rng.gen_bool(0.6)).collect();
        let rate = rng.gen_range(0.0..0.9);
        let (_, factors) = ops::drop_path_with_mask(&x, rate, &keep).unwrap();
        unary(
            &x,
            rng,
            |x| ops::drop_path_with_mask(x, rate, &keep).unwrap().0,
            |_, r| ops::apply_factors(r, &factors).unwrap(),
        )
    });
    s.run("channel_scale", |rng| {
        let shape = shape4(rng);
        let x = random::<T>(&shape, rng, -1.0, 1.0);
        let k = random::<T>(&[shape[1]], rng, -1.0, 1.0);
        let y = ops::channel_scale(&x, &k).unwrap();
        let r = random::<T>(y.shape(), rng, -1.0, 1.0);
        let (gx, gk) = ops::channel_scale_backward(&x, &k, &r).unwrap();
        let nx = numerical_gradient(&x, |p| weighted_sum(&ops::channel_scale(p, &k).unwrap(), &r));
        let nk = numerical_gradient(&k, |p| weighted_sum(&ops::channel_scale(&x, p).unwrap(), &r));
        relative_error(&gx, &nx).max(relative_error(&gk, &nk))
    });
    s.run("swap_channel_freq", |rng| {
        let x = random::<T>(&shape4(rng), rng, -1.0, 1.0);
        unary(
            &x,
            rng,
            |x| ops::swap_channel_freq(x).unwrap(),
            |_, r| ops::swap_channel_freq(r).unwrap(),
        )
    });
    s.run("bce_with_logits", |rng| {
        let shape = [rng.gen_range(1..=4), rng.gen_range(1..=6)];
        let z = random::<T>(&shape, rng, -4.0, 4.0);
        let t = random::<T>(&shape, rng, 0.0, 1.0);
        let (_, g) = bce_with_logits(&z, &t).unwrap();
        relative_error(&g, &numerical_gradient(&z, |zp| bce_with_logits(zp, &t).unwrap().0))
    });
    s.checks
}

/// Two-block ConvNeXt small enough for per-parameter finite differences.
/// Layer scale starts at 0.5 so the residual branches carry gradient that
/// is measurable above rounding noise.
pub fn tiny_convnext() -> ModelConfig {
    ModelConfig {
        name: "tiny-convnext".into(),
        input: (8, 8),
        depths: vec![1, 1],
        channels: vec![4, 8],
        num_classes: 3,
        layer_scale: Some(0.5),
        drop_path: 0.0,
        ..ModelConfig::convnext_tiny()
    }
}

/// Two-block PANN-family models (BN, ReLU, pooling heads).
pub fn tiny_panns() -> Vec<ModelConfig> {
    let base = ModelConfig {
        input: (8, 8),
        depths: vec![1, 1],
        channels: vec![4, 8],
        hidden_fc: Some(5),
        num_classes: 3,
        ..ModelConfig::cnn6()
    };
    vec![
        ModelConfig {
            name: "tiny-cnn6".into(),
            kernel: 3,
            ..base.clone()
        },
        ModelConfig {
            name: "tiny-cnn6next".into(),
            ..ModelConfig {
                input: (8, 8),
                ..ModelConfig::cnn6next()
            }
        }
        .with_size(&base),
        ModelConfig {
            name: "tiny-cnn14sep".into(),
            ..ModelConfig {
                input: (8, 8),
                ..ModelConfig::cnn14sep()
            }
        }
        .with_size(&base),
    ]
}

trait WithSize {
    fn with_size(self, base: &ModelConfig) -> ModelConfig;
}

impl WithSize for ModelConfig {
    fn with_size(self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            depths: base.depths.clone(),
            channels: base.channels.clone(),
            hidden_fc: base.hidden_fc,
            num_classes: base.num_classes,
            pool_after_last: false,
            ..self
        }
    }
}

/// End-to-end BCE loss gradient against finite differences for every
/// learnable tensor, in training mode with batch statistics.
pub fn model_check<T: Real>(cfg: &ModelConfig, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::build(cfg, &mut rng).unwrap();
    let mut store = model.params.cast::<T>();
    // Fan-in scaled weights keep early-layer gradients far above rounding
    // noise; the 0.02 training init would bury them. Zero-initialized
    // biases and shifts are perturbed so they are generic.
    for (_, e) in store.iter_mut() {
        match e.kind {
            ParamKind::Weight => {
                let fan_in: usize = e.value.shape()[1..].iter().product();
                let a = (3.0 / fan_in as f64).sqrt();
                e.value = random::<T>(e.value.shape(), &mut rng, -a, a);
            }
            ParamKind::NoDecay => {
                let noise = random::<T>(e.value.shape(), &mut rng, -0.2, 0.2);
                e.value.add_assign(&noise).unwrap();
            }
            _ => {}
        }
    }
    let (h, w) = cfg.input;
    let x = random::<T>(&[2, 1, h, w], &mut rng, -1.0, 1.0);
    let y = Tensor::from_values(
        &[2, cfg.num_classes],
        (0..2 * cfg.num_classes).map(|_| T::of(rng.gen_range(0..2) as f64)).collect(),
    )
    .unwrap();
    let loss = |store: &dsc_core::model::ParamStore<T>| {
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::training(&mut dummy);
        ctx.record = false;
        let (z, _) = model.network.forward(store, x.clone(), &mut ctx).unwrap();
        bce_with_logits(&z, &y).unwrap().0
    };
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = ForwardCtx::training(&mut dummy);
    let (z, tape) = model.network.forward(&store, x.clone(), &mut ctx).unwrap();
    drop(ctx);
    let (_, gz) = bce_with_logits(&z, &y).unwrap();
    let (_, grads) = model.network.backward(&store, tape.unwrap(), gz).unwrap();

    let ids: Vec<_> = store.iter().filter(|(_, e)| e.kind.is_learnable()).map(|(id, _)| id).collect();
    let mut worst = 0f64;
    for id in ids {
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()).unwrap());
        let base = store.get(id).clone();
        let probe = std::cell::RefCell::new(store.clone());
        let num = numerical_gradient(&base, |p| {
            probe.borrow_mut().replace(id, p.clone()).unwrap();
            loss(&probe.borrow())
        });
        let err = relative_error(&analytic, &num);
        worst = worst.max(err);
        if err >= tolerance_for::<T>() {
            eprintln!("{}: {} relative error {err:.3e}", cfg.name, store.entry(id).name);
        }
    }
    Check {
        name: format!("{} end-to-end (seed {seed})", cfg.name),
        cases: 1,
        worst,
        tolerance: tolerance_for::<T>(),
    }
}
