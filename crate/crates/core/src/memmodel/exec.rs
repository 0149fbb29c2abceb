//! Executes an [`AttentionGraph`] over real tensors.
//!
//! The interpreter keeps explicit DRAM and SRAM operand maps. Calc nodes
//! may only read operands resident in SRAM, stores move operands out of
//! SRAM, and the block output is whatever the `A` stores leave in DRAM. A
//! graph that forgets a load or store therefore fails instead of silently
//! computing the right answer.

use std::collections::BTreeMap;

use crate::attention::{scores, weighted_values, AttentionInputs};
use crate::error::GraphError;
use crate::memmodel::graph::{AttentionGraph, OpKind, Role};
use crate::ops;
use crate::planner::{TilePlan, TileSpan};
use crate::tensor::Tensor;

fn missing(role: Role, place: &str) -> GraphError {
    GraphError::Execution(format!("{} is not in {place}", role.name()))
}

pub fn execute_graph(g: &AttentionGraph, inputs: &AttentionInputs) -> Result<Tensor, GraphError> {
    let dims = inputs.validate()?;
    if dims != g.dims {
        return Err(GraphError::PlanMismatch(format!(
            "graph is for {:?}, inputs are {:?}",
            g.dims, dims
        )));
    }
    let spans = match &g.tiled_with {
        Some(TilePlan { spans, .. }) => spans.clone(),
        None => vec![TileSpan {
            row_start: 0,
            row_count: dims.n_q,
        }],
    };
    let k_t = inputs.k.transpose().map_err(crate::error::AttentionError::from)?;
    let mut outputs = Vec::with_capacity(spans.len());
    for span in spans {
        let mut dram: BTreeMap<Role, Tensor> = BTreeMap::new();
        dram.insert(
            Role::Query,
            inputs
                .q
                .slice_rows(span.row_start, span.row_count)
                .map_err(crate::error::AttentionError::from)?,
        );
        dram.insert(Role::Key, k_t.clone());
        dram.insert(Role::Value, inputs.v.clone());
        let mut sram: BTreeMap<Role, Tensor> = BTreeMap::new();

        for node in &g.nodes {
            match node.kind {
                OpKind::DmaLoad => {
                    for &r in &node.operand_roles {
                        let t = dram.get(&r).ok_or_else(|| missing(r, "DRAM"))?;
                        sram.insert(r, t.clone());
                    }
                }
                OpKind::DmaStore => {
                    for &r in &node.operand_roles {
                        let t = sram.remove(&r).ok_or_else(|| missing(r, "SRAM"))?;
                        dram.insert(r, t);
                    }
                }
                OpKind::TensorCalc if node.has_role(Role::Key) => {
                    let q = sram.get(&Role::Query).ok_or_else(|| missing(Role::Query, "SRAM"))?;
                    let k = sram.get(&Role::Key).ok_or_else(|| missing(Role::Key, "SRAM"))?;
                    let s = scores(q, k, inputs.scale)?;
                    sram.insert(Role::SIn, s);
                }
                OpKind::VectorCalc => {
                    let s = sram.remove(&Role::SIn).ok_or_else(|| missing(Role::SIn, "SRAM"))?;
                    let p = ops::softmax_rows(&s).map_err(crate::error::AttentionError::from)?;
                    sram.insert(Role::SOut, p);
                }
                OpKind::TensorCalc => {
                    let p = sram.remove(&Role::SOut).ok_or_else(|| missing(Role::SOut, "SRAM"))?;
                    let v = sram.get(&Role::Value).ok_or_else(|| missing(Role::Value, "SRAM"))?;
                    sram.insert(Role::A, weighted_values(&p, v)?);
                }
            }
        }
        outputs.push(dram.remove(&Role::A).ok_or_else(|| missing(Role::A, "DRAM"))?);
    }
    Tensor::concat_rows(&outputs).map_err(|e| GraphError::Attention(e.into()))
}
