//! Shared fixtures for the benchmarks.

use volfuse_core::tensor::Tensor;

/// Deterministic non-constant values, so no kernel sees a degenerate input.
pub fn ramp(shape: &[usize], scale: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| scale * (((i * 7919) % 1000) as f32 / 500.0 - 1.0)).collect();
    Tensor::from_vec(shape, data).expect("shape and length agree")
}
