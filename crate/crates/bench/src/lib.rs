//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swiftsr::nn::ConvParams;
use swiftsr::{Shape, Tensor};

/// Uniform values in `[0, 1)`.
pub fn random_tensor(shape: impl Into<Shape>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen())
}

/// A `k`×`k` convolution with small random weights and zero bias.
pub fn random_conv(out_c: usize, in_c: usize, k: usize, stride: usize, seed: u64) -> ConvParams {
    let w = random_tensor((out_c, in_c, k, k), seed).map(|v| (v - 0.5) * 0.2);
    ConvParams::new(w, Some(vec![0.0; out_c]), stride, k / 2).expect("valid conv params")
}

/// Depthwise then pointwise stages equivalent in shape to [`random_conv`].
pub fn random_separable(out_c: usize, in_c: usize, k: usize, stride: usize, seed: u64) -> (ConvParams, ConvParams) {
    let dw = random_tensor((in_c, 1, k, k), seed).map(|v| (v - 0.5) * 0.2);
    let pw = random_tensor((out_c, in_c, 1, 1), seed + 1).map(|v| (v - 0.5) * 0.2);
    (
        ConvParams::new(dw, Some(vec![0.0; in_c]), stride, k / 2).expect("valid depthwise params"),
        ConvParams::new(pw, Some(vec![0.0; out_c]), 1, 0).expect("valid pointwise params"),
    )
}
