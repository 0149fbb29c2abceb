//! Cross-attention executors.
//!
//! [`attention_reference`] materializes the whole `n_q × n_k` score matrix;
//! [`attention_tiled`] runs the score, softmax and value product for one
//! query tile at a time so the score slice never leaves the tile. Both go
//! through the same per-row kernels, so in FP32 the results are bitwise
//! equal for any plan.

use std::thread;

use crate::dtype::ElementType;
use crate::error::AttentionError;
use crate::ops;
use crate::planner::{AttentionDims, TilePlan, TileSpan};
use crate::tensor::Tensor;

/// Operands of one attention block. `q` is `n_q × d`, `k` and `v` are
/// `n_k × d`, and `scale` multiplies every `q · kᵀ` score.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub scale: f32,
}

impl AttentionInputs {
    /// Inputs with the conventional `1/√d` score scale.
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<AttentionInputs, AttentionError> {
        let (_, d) = q.dims2()?;
        AttentionInputs::with_scale(q, k, v, 1.0 / (d as f32).sqrt())
    }

    pub fn with_scale(q: Tensor, k: Tensor, v: Tensor, scale: f32) -> Result<AttentionInputs, AttentionError> {
        let inputs = AttentionInputs { q, k, v, scale };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<AttentionDims, AttentionError> {
        let bad = |msg: String| Err(AttentionError::Operands(msg));
        let (n_q, d) = self.q.dims2()?;
        let (n_k, dk) = self.k.dims2()?;
        let (n_v, dv) = self.v.dims2()?;
        if dk != d || dv != d {
            return bad(format!("head dims differ: q {d}, k {dk}, v {dv}"));
        }
        if n_v != n_k {
            return bad(format!("k has {n_k} rows but v has {n_v}"));
        }
        let dtype = self.q.dtype();
        if self.k.dtype() != dtype || self.v.dtype() != dtype {
            return bad(format!(
                "dtypes differ: q {dtype}, k {}, v {}",
                self.k.dtype(),
                self.v.dtype()
            ));
        }
        if !dtype.is_float() {
            return bad(format!("attention needs floating operands, got {dtype}"));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        Ok(AttentionDims::new(n_q, n_k, d))
    }

    pub fn dims(&self) -> Result<AttentionDims, AttentionError> {
        self.validate()
    }

    pub fn dtype(&self) -> ElementType {
        self.q.dtype()
    }
}

/// `scale · q · kᵀ` given the transposed keys (`d × n_k`).
pub fn scores(q: &Tensor, k_t: &Tensor, scale: f32) -> Result<Tensor, AttentionError> {
    let s = ops::matmul(q, k_t, ElementType::Fp32)?;
    Ok(ops::scale(&s, scale)?)
}

/// `s_out · v`.
pub fn weighted_values(s_out: &Tensor, v: &Tensor) -> Result<Tensor, AttentionError> {
    Ok(ops::matmul(s_out, v, ElementType::Fp32)?)
}

/// Intermediates of one executed tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileOutput {
    pub span: TileSpan,
    pub s_out: Tensor,
    pub output: Tensor,
}

/// Runs the full score → softmax → value pipeline for one query tile.
pub fn execute_tile(inputs: &AttentionInputs, k_t: &Tensor, span: TileSpan) -> Result<TileOutput, AttentionError> {
    let q_tile = inputs.q.slice_rows(span.row_start, span.row_count)?;
    let s_in = scores(&q_tile, k_t, inputs.scale)?;
    let s_out = ops::softmax_rows(&s_in)?;
    let output = weighted_values(&s_out, &inputs.v)?;
    Ok(TileOutput { span, s_out, output })
}

/// Untiled attention with the full score matrix materialized.
pub fn attention_reference(inputs: &AttentionInputs) -> Result<Tensor, AttentionError> {
    inputs.validate()?;
    let s_in = scores(&inputs.q, &inputs.k.transpose()?, inputs.scale)?;
    let s_out = ops::softmax_rows(&s_in)?;
    weighted_values(&s_out, &inputs.v)
}

fn check_plan(inputs: &AttentionInputs, plan: &TilePlan) -> Result<(), AttentionError> {
    let dims = inputs.validate()?;
    if plan.dims != dims {
        return Err(AttentionError::PlanMismatch(format!(
            "plan is for {:?}, inputs are {:?}",
            plan.dims, dims
        )));
    }
    plan.check_partition()
        .map_err(|e| AttentionError::PlanMismatch(e.to_string()))
}

/// Query-tiled attention executing tiles in plan order.
pub fn attention_tiled(inputs: &AttentionInputs, plan: &TilePlan) -> Result<Tensor, AttentionError> {
    let order: Vec<usize> = (0..plan.spans.len()).collect();
    attention_tiled_in_order(inputs, plan, &order)
}

/// Query-tiled attention executing tiles in the given order. `order` must
/// be a permutation of the tile indices; the result does not depend on it.
pub fn attention_tiled_in_order(
    inputs: &AttentionInputs,
    plan: &TilePlan,
    order: &[usize],
) -> Result<Tensor, AttentionError> {
    check_plan(inputs, plan)?;
    let mut seen = vec![false; plan.spans.len()];
    for &i in order {
        if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
            return Err(AttentionError::PlanMismatch(format!(
                "order {order:?} is not a permutation"
            )));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(AttentionError::PlanMismatch(format!(
            "order {order:?} is not a permutation"
        )));
    }
    let k_t = inputs.k.transpose()?;
    let mut outputs: Vec<Option<Tensor>> = vec![None; plan.spans.len()];
    for &i in order {
        outputs[i] = Some(execute_tile(inputs, &k_t, plan.spans[i])?.output);
    }
    let parts: Vec<Tensor> = outputs.into_iter().map(|o| o.expect("every tile ran")).collect();
    Ok(Tensor::concat_rows(&parts)?)
}

/// Query-tiled attention with tiles spread over up to `workers` threads.
pub fn attention_tiled_parallel(
    inputs: &AttentionInputs,
    plan: &TilePlan,
    workers: usize,
) -> Result<Tensor, AttentionError> {
    check_plan(inputs, plan)?;
    let k_t = inputs.k.transpose()?;
    let workers = workers.clamp(1, plan.spans.len());
    let chunk = plan.spans.len().div_ceil(workers);
    let results: Vec<Result<Vec<Tensor>, AttentionError>> = thread::scope(|scope| {
        let handles: Vec<_> = plan
            .spans
            .chunks(chunk)
            .map(|spans| {
                let k_t = &k_t;
                scope.spawn(move || {
                    spans
                        .iter()
                        .map(|&s| execute_tile(inputs, k_t, s).map(|t| t.output))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("tile worker panicked"))
            .collect()
    });
    let mut parts = Vec::with_capacity(plan.spans.len());
    for r in results {
        parts.extend(r?);
    }
    Ok(Tensor::concat_rows(&parts)?)
}
