//! Inputs shared by the kernel benchmarks.

use dsc_core::ops::ConvSpec;
use dsc_core::Tensor;

/// Deterministic, non-constant values in [-1, 1].
pub fn filled(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|i| ((i as f32) * 0.618_034).sin()).collect();
    Tensor::from_values(shape, values).expect("shape matches value count")
}

/// Weight tensor for `spec`, scaled like a fan-in init.
pub fn weights(spec: &ConvSpec) -> Tensor {
    let shape = [
        spec.out_channels,
        spec.in_channels / spec.groups,
        spec.kernel.0,
        spec.kernel.1,
    ];
    let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
    filled(&shape).scale(fan_in.sqrt().recip())
}
