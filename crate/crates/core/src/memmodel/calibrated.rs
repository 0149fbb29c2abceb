//! Cost model fitted to a measured untiled breakdown.
//!
//! Each of the nine untiled rows gets its own coefficient (µs per byte for
//! DMA rows, µs per MAC or element for calc rows) so that simulating the
//! reference block reproduces the baseline table exactly. Other graphs then
//! reuse the coefficient of the row they descend from: the V-only load of a
//! fused or tiled graph is charged at the S_out+V load rate, for instance.

use serde::{Deserialize, Serialize};

use crate::dtype::ElementType;
use crate::error::GraphError;
use crate::memmodel::baseline::{row, BaselineCostTable};
use crate::memmodel::graph::{build_attention_graph, AttentionGraph, OpKind, OpNode, Role};
use crate::memmodel::simulate::{simulate_with, SimOptions, TrafficReport, TrafficRow};
use crate::planner::{AttentionDims, HardwareProfile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedCosts {
    pub reference: AttentionDims,
    pub dtype: ElementType,
    pub reference_total_us: f64,
    /// Cost per byte or per work unit of each untiled row.
    pub coefficients: [f64; 9],
}

/// Untiled row a node is charged as.
pub fn row_class(node: &OpNode) -> usize {
    match node.kind {
        OpKind::DmaLoad if node.has_role(Role::Query) => row::LOAD_QK,
        OpKind::DmaLoad if node.has_role(Role::SIn) => row::LOAD_S_IN,
        OpKind::DmaLoad => row::LOAD_S_OUT_V,
        OpKind::DmaStore if node.has_role(Role::SIn) => row::STORE_S_IN,
        OpKind::DmaStore if node.has_role(Role::SOut) => row::STORE_S_OUT,
        OpKind::DmaStore => row::STORE_A,
        OpKind::TensorCalc if node.has_role(Role::Key) => row::CALC_QK,
        OpKind::TensorCalc => row::CALC_SV,
        OpKind::VectorCalc => row::SOFTMAX,
    }
}

fn quantity(node: &OpNode) -> f64 {
    if node.kind.is_dma() {
        node.bytes_moved as f64
    } else {
        node.work as f64
    }
}

impl CalibratedCosts {
    /// Fits coefficients so the untiled `reference` block costs
    /// `reference_total_us` split according to `table`.
    pub fn fit(
        table: &BaselineCostTable,
        reference: AttentionDims,
        dtype: ElementType,
        reference_total_us: f64,
    ) -> Result<CalibratedCosts, GraphError> {
        table.validate()?;
        if !(reference_total_us.is_finite() && reference_total_us > 0.0) {
            return Err(GraphError::InvalidDims("reference total must be positive".into()));
        }
        let g = build_attention_graph(reference, dtype, None)?;
        let table_total = table.total();
        let mut coefficients = [0.0; 9];
        for (i, node) in g.nodes.iter().enumerate() {
            let share = table.percent(i) / table_total;
            coefficients[i] = share * reference_total_us / quantity(node);
        }
        Ok(CalibratedCosts {
            reference,
            dtype,
            reference_total_us,
            coefficients,
        })
    }

    /// Fit whose absolute scale is the untiled reference block simulated on
    /// `hw`.
    pub fn fit_to_profile(
        table: &BaselineCostTable,
        reference: AttentionDims,
        dtype: ElementType,
        hw: &HardwareProfile,
    ) -> Result<CalibratedCosts, GraphError> {
        let g = build_attention_graph(reference, dtype, None)?;
        let total = simulate_with(&g, hw, &SimOptions::default()).total_time_us;
        CalibratedCosts::fit(table, reference, dtype, total)
    }

    /// Block shape and table of the measured SD cross-attention breakdown.
    pub fn measured(hw: &HardwareProfile, dtype: ElementType) -> Result<CalibratedCosts, GraphError> {
        CalibratedCosts::fit_to_profile(
            &BaselineCostTable::measured(),
            AttentionDims::new(4096, 77, 40),
            dtype,
            hw,
        )
    }
}

/// Simulates `g` with calibrated per-row coefficients. Calc rows of tiled
/// graphs carry the tile overhead as in [`simulate_with`].
pub fn simulate_calibrated(g: &AttentionGraph, costs: &CalibratedCosts, opts: &SimOptions) -> TrafficReport {
    let overhead = if g.tiled_with.is_some() {
        1.0 + opts.tile_compute_overhead
    } else {
        1.0
    };
    let rows: Vec<TrafficRow> = g
        .nodes
        .iter()
        .map(|n| {
            let mut time_us = costs.coefficients[row_class(n)] * quantity(n);
            if !n.kind.is_dma() {
                time_us *= overhead;
            }
            TrafficRow {
                label: n.label(),
                bytes: n.bytes_moved,
                engine: n.kind.engine(),
                time_us,
                relative_pct: 0.0,
            }
        })
        .collect();
    let total_time_us: f64 = rows.iter().map(|r| r.time_us).sum();
    TrafficReport {
        baseline: "self".into(),
        total_bytes: rows.iter().map(|r| r.bytes).sum(),
        total_time_us,
        rows,
        total_relative_pct: 0.0,
    }
    .rebased("self", total_time_us)
}
