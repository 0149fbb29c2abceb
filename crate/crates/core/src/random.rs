//! Seeded random operands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionInputs;
use crate::planner::AttentionDims;
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// FP32 tensor with elements drawn uniformly from `[lo, hi)`.
pub fn uniform_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f32(shape, values).expect("positive shape")
}

/// FP32 attention operands in `[-1, 1)` with the default `1/√d` scale.
pub fn attention_inputs(dims: AttentionDims, seed: u64) -> AttentionInputs {
    let mut r = rng(seed);
    let q = uniform_tensor(&mut r, vec![dims.n_q, dims.d], -1.0, 1.0);
    let k = uniform_tensor(&mut r, vec![dims.n_k, dims.d], -1.0, 1.0);
    let v = uniform_tensor(&mut r, vec![dims.n_k, dims.d], -1.0, 1.0);
    AttentionInputs::new(q, k, v).expect("consistent shapes")
}
