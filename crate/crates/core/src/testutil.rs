use crate::attention::AttentionInputs;
use crate::planner::AttentionDims;
use crate::tensor::Tensor;

pub fn random_inputs(n_q: usize, n_k: usize, d: usize, seed: u64) -> AttentionInputs {
    crate::random::attention_inputs(AttentionDims::new(n_q, n_k, d), seed)
}

pub fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    match (a.as_f32(), b.as_f32()) {
        (Some(x), Some(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()),
        _ => false,
    }
}
