use serde::{Deserialize, Serialize};

use crate::dtype::ElementType;
use crate::error::GraphError;
use crate::planner::{AttentionDims, TilePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    DmaLoad,
    DmaStore,
    TensorCalc,
    VectorCalc,
}

impl OpKind {
    pub fn is_dma(self) -> bool {
        matches!(self, OpKind::DmaLoad | OpKind::DmaStore)
    }

    pub fn engine(self) -> Engine {
        match self {
            OpKind::DmaLoad | OpKind::DmaStore => Engine::Dma,
            OpKind::TensorCalc => Engine::Tensor,
            OpKind::VectorCalc => Engine::Vector,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Dma,
    Tensor,
    Vector,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Dma => "dma",
            Engine::Tensor => "tensor",
            Engine::Vector => "vector",
        }
    }
}

/// Operand of the attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Query,
    Key,
    Value,
    /// Scores entering the softmax.
    #[serde(rename = "S_in")]
    SIn,
    /// Softmax output.
    #[serde(rename = "S_out")]
    SOut,
    /// Block output.
    A,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Query => "Query",
            Role::Key => "Key",
            Role::Value => "Value",
            Role::SIn => "S_in",
            Role::SOut => "S_out",
            Role::A => "A",
        }
    }

    pub fn is_score(self) -> bool {
        matches!(self, Role::SIn | Role::SOut)
    }
}

/// One row of the attention cost table.
///
/// DMA nodes carry bytes and a transfer count (for per-transfer setup
/// cost); calc nodes carry work: MACs for the tensor engine, elements for
/// the vector engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpNode {
    pub kind: OpKind,
    pub operand_roles: Vec<Role>,
    pub bytes_moved: u64,
    pub work: u64,
    pub transfers: u64,
    /// Set on calc nodes inside a fused score/softmax/value region.
    pub fused: bool,
}

impl OpNode {
    fn dma(kind: OpKind, roles: &[Role], bytes: u64, transfers: u64) -> OpNode {
        OpNode {
            kind,
            operand_roles: roles.to_vec(),
            bytes_moved: bytes,
            work: 0,
            transfers,
            fused: false,
        }
    }

    fn calc(kind: OpKind, roles: &[Role], work: u64, fused: bool) -> OpNode {
        OpNode {
            kind,
            operand_roles: roles.to_vec(),
            bytes_moved: 0,
            work,
            transfers: 0,
            fused,
        }
    }

    pub fn touches_scores(&self) -> bool {
        self.operand_roles.iter().any(|r| r.is_score())
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.operand_roles.contains(&role)
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = self.operand_roles.iter().map(|r| r.name()).collect();
        match self.kind {
            OpKind::DmaLoad => format!("DMA load: {}", names.join("+")),
            OpKind::DmaStore => format!("DMA store: {}", names.join("+")),
            OpKind::TensorCalc if self.has_role(Role::Key) => "Tensor calc: Query x Key^T = S_in".into(),
            OpKind::TensorCalc => "Tensor calc: S_out x Value = A".into(),
            OpKind::VectorCalc => "Vector calc: Softmax(S_in) = S_out".into(),
        }
    }

    pub fn check(&self) -> Result<(), GraphError> {
        let ok = if self.kind.is_dma() {
            self.bytes_moved > 0 && self.work == 0 && self.transfers > 0
        } else {
            self.work > 0 && self.bytes_moved == 0
        };
        if ok {
            Ok(())
        } else {
            Err(GraphError::InvalidDims(format!("malformed node {}", self.label())))
        }
    }
}

/// How often V crosses DRAM → SRAM in a tiled graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueReload {
    /// Once per tile; an upper bound.
    #[default]
    PerTile,
    /// Once for the whole block.
    Resident,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionGraph {
    pub nodes: Vec<OpNode>,
    pub dims: AttentionDims,
    pub dtype: ElementType,
    pub tiled_with: Option<TilePlan>,
}

impl AttentionGraph {
    /// DMA bytes over nodes that carry `role`.
    pub fn dma_bytes_with(&self, role: Role) -> u64 {
        self.nodes
            .iter()
            .filter(|n| n.kind.is_dma() && n.has_role(role))
            .map(|n| n.bytes_moved)
            .sum()
    }

    pub fn total_dma_bytes(&self) -> u64 {
        self.nodes
            .iter()
            .filter(|n| n.kind.is_dma())
            .map(|n| n.bytes_moved)
            .sum()
    }

    pub fn is_fused(&self) -> bool {
        self.nodes.iter().all(|n| !(n.kind.is_dma() && n.touches_scores()))
            && self.nodes.iter().filter(|n| !n.kind.is_dma()).all(|n| n.fused)
    }
}

struct Sizes {
    q: u64,
    k: u64,
    v: u64,
    s: u64,
    a: u64,
    macs: u64,
    softmax: u64,
}

fn sizes(dims: AttentionDims, dtype: ElementType) -> Sizes {
    let (n_q, n_k, d) = (dims.n_q as u64, dims.n_k as u64, dims.d as u64);
    Sizes {
        q: dtype.bytes(n_q * d),
        k: dtype.bytes(n_k * d),
        v: dtype.bytes(n_k * d),
        s: dtype.bytes(n_q * n_k),
        a: dtype.bytes(n_q * d),
        macs: n_q * n_k * d,
        softmax: n_q * n_k,
    }
}

/// Attention graph with the default per-tile V reload.
pub fn build_attention_graph(
    dims: AttentionDims,
    dtype: ElementType,
    plan: Option<&TilePlan>,
) -> Result<AttentionGraph, GraphError> {
    build_attention_graph_with(dims, dtype, plan, ValueReload::PerTile)
}

/// Builds the attention operation graph.
///
/// Without a plan this is the nine-row untiled pipeline, where both score
/// matrices round-trip through DRAM. With a plan the score matrices stay in
/// SRAM: their DMA rows disappear, Q loads and A stores are split per tile,
/// K is loaded once and V according to `reload`.
pub fn build_attention_graph_with(
    dims: AttentionDims,
    dtype: ElementType,
    plan: Option<&TilePlan>,
    reload: ValueReload,
) -> Result<AttentionGraph, GraphError> {
    dims.validate().map_err(|e| GraphError::InvalidDims(e.to_string()))?;
    let sz = sizes(dims, dtype);
    use OpKind::*;
    use Role::*;
    let nodes = match plan {
        None => vec![
            OpNode::dma(DmaLoad, &[Query, Key], sz.q + sz.k, 2),
            OpNode::calc(TensorCalc, &[Query, Key, SIn], sz.macs, false),
            OpNode::dma(DmaStore, &[SIn], sz.s, 1),
            OpNode::dma(DmaLoad, &[SIn], sz.s, 1),
            OpNode::calc(VectorCalc, &[SIn, SOut], sz.softmax, false),
            OpNode::dma(DmaStore, &[SOut], sz.s, 1),
            OpNode::dma(DmaLoad, &[SOut, Value], sz.s + sz.v, 2),
            OpNode::calc(TensorCalc, &[SOut, Value, A], sz.macs, false),
            OpNode::dma(DmaStore, &[A], sz.a, 1),
        ],
        Some(plan) => {
            if plan.dims != dims || plan.dtype != dtype {
                return Err(GraphError::PlanMismatch(format!(
                    "plan is for {:?}/{}, graph is {:?}/{}",
                    plan.dims, plan.dtype, dims, dtype
                )));
            }
            plan.check_partition()
                .map_err(|e| GraphError::PlanMismatch(e.to_string()))?;
            let tiles = plan.tile_count as u64;
            let (v_bytes, v_transfers) = match reload {
                ValueReload::PerTile => (sz.v * tiles, tiles),
                ValueReload::Resident => (sz.v, 1),
            };
            vec![
                OpNode::dma(DmaLoad, &[Query, Key], sz.q + sz.k, tiles + 1),
                OpNode::calc(TensorCalc, &[Query, Key, SIn], sz.macs, true),
                OpNode::calc(VectorCalc, &[SIn, SOut], sz.softmax, true),
                OpNode::dma(DmaLoad, &[Value], v_bytes, v_transfers),
                OpNode::calc(TensorCalc, &[SOut, Value, A], sz.macs, true),
                OpNode::dma(DmaStore, &[A], sz.a, tiles),
            ]
        }
    };
    Ok(AttentionGraph {
        nodes,
        dims,
        dtype,
        tiled_with: plan.cloned(),
    })
}

/// Fuses the score → softmax → value chain so its intermediates stay
/// on-chip: DMA nodes of S_in/S_out are dropped, a combined S_out+V load
/// keeps only V, and calc nodes are marked fused. Idempotent.
pub fn fuse_attention(g: &AttentionGraph) -> AttentionGraph {
    let v_bytes = g.dtype.bytes((g.dims.n_k * g.dims.d) as u64);
    let nodes = g
        .nodes
        .iter()
        .filter_map(|n| {
            let mut n = n.clone();
            if n.kind.is_dma() {
                if !n.touches_scores() {
                    return Some(n);
                }
                let kept: Vec<Role> = n.operand_roles.iter().copied().filter(|r| !r.is_score()).collect();
                if kept.is_empty() {
                    return None;
                }
                debug_assert_eq!(kept, vec![Role::Value]);
                n.operand_roles = kept;
                n.bytes_moved = v_bytes;
                n.transfers = 1;
            } else {
                n.fused = true;
            }
            Some(n)
        })
        .collect();
    AttentionGraph {
        nodes,
        dims: g.dims,
        dtype: g.dtype,
        tiled_with: g.tiled_with.clone(),
    }
}
