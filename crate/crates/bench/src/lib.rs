//! Shared fixtures for the criterion benches.

use mltile::quant::{calibrate, make_params, quantize, BitWidth, Granularity, QuantParams, Scheme};
use mltile::random::{attention_inputs, rng, uniform_tensor};
use mltile::{AttentionDims, AttentionInputs, Tensor};

/// Cross-attention shapes of the illustrative UNet descriptor.
pub const UNET_BLOCKS: [AttentionDims; 4] = [
    AttentionDims::new(4096, 77, 40),
    AttentionDims::new(1024, 77, 80),
    AttentionDims::new(256, 77, 160),
    AttentionDims::new(64, 77, 160),
];

pub fn label(dims: AttentionDims) -> String {
    format!("{}x{}x{}", dims.n_q, dims.n_k, dims.d)
}

pub fn inputs(dims: AttentionDims) -> AttentionInputs {
    attention_inputs(dims, 42)
}

/// Quantized operands for `x (m×k) · w (k×n)`: INT8 per-column weights and
/// INT16 per-tensor activations.
pub struct QuantOperands {
    pub wq: Tensor,
    pub xq: Tensor,
    pub wp: QuantParams,
    pub xp: QuantParams,
}

pub fn quant_operands(m: usize, k: usize, n: usize) -> QuantOperands {
    let mut r = rng(7);
    let w = uniform_tensor(&mut r, vec![k, n], -1.0, 1.0);
    let x = uniform_tensor(&mut r, vec![m, k], -1.0, 1.0);
    let wp = make_params(
        &calibrate(std::slice::from_ref(&w), Granularity::PerChannel { axis: 1 }).expect("2-d weights"),
        Scheme::Symmetric,
        BitWidth::Int8,
    );
    let xp = make_params(
        &calibrate(std::slice::from_ref(&x), Granularity::PerTensor).expect("non-empty"),
        Scheme::Asymmetric,
        BitWidth::Int16,
    );
    QuantOperands {
        wq: quantize(&w, &wp).expect("float weights"),
        xq: quantize(&x, &xp).expect("float activations"),
        wp,
        xp,
    }
}
