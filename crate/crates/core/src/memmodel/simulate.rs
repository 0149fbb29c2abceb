use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::memmodel::graph::{AttentionGraph, Engine, OpKind};
use crate::planner::HardwareProfile;

/// Default slowdown of calc rows in a tiled graph.
pub const DEFAULT_TILE_COMPUTE_OVERHEAD: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Fractional slowdown applied to calc rows of tiled graphs.
    pub tile_compute_overhead: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            tile_compute_overhead: DEFAULT_TILE_COMPUTE_OVERHEAD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficRow {
    pub label: String,
    pub bytes: u64,
    pub engine: Engine,
    pub time_us: f64,
    pub relative_pct: f64,
}

/// Per-row time accounting of one simulated graph, with percentages
/// relative to the total of a named baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub baseline: String,
    pub rows: Vec<TrafficRow>,
    pub total_bytes: u64,
    pub total_time_us: f64,
    pub total_relative_pct: f64,
}

/// Serial cost model: DMA rows cost setup per transfer plus bytes over
/// bandwidth, tensor rows MACs over tensor rate, vector rows elements over
/// vector rate. Rows of a tiled graph's calc nodes are scaled by
/// `1 + tile_compute_overhead`. Percentages are relative to the graph itself.
pub fn simulate_with(g: &AttentionGraph, hw: &HardwareProfile, opts: &SimOptions) -> TrafficReport {
    let overhead = if g.tiled_with.is_some() {
        1.0 + opts.tile_compute_overhead
    } else {
        1.0
    };
    let rows: Vec<TrafficRow> = g
        .nodes
        .iter()
        .map(|n| {
            let time_us = match n.kind {
                OpKind::DmaLoad | OpKind::DmaStore => {
                    n.transfers as f64 * hw.dma_setup_us + n.bytes_moved as f64 / hw.dram_bandwidth_bytes_per_us
                }
                OpKind::TensorCalc => n.work as f64 / hw.tensor_engine_macs_per_us * overhead,
                OpKind::VectorCalc => n.work as f64 / hw.vector_engine_elems_per_us * overhead,
            };
            TrafficRow {
                label: n.label(),
                bytes: n.bytes_moved,
                engine: n.kind.engine(),
                time_us,
                relative_pct: 0.0,
            }
        })
        .collect();
    let report = TrafficReport {
        baseline: "self".into(),
        total_bytes: rows.iter().map(|r| r.bytes).sum(),
        total_time_us: rows.iter().map(|r| r.time_us).sum(),
        rows,
        total_relative_pct: 0.0,
    };
    let total = report.total_time_us;
    report.rebased("self", total)
}

pub fn simulate(g: &AttentionGraph, hw: &HardwareProfile) -> TrafficReport {
    simulate_with(g, hw, &SimOptions::default())
}

fn percent(time: f64, base: f64) -> f64 {
    if base > 0.0 {
        time / base * 100.0
    } else {
        0.0
    }
}

impl TrafficReport {
    /// Recomputes every percentage against `baseline_total_us`.
    pub fn rebased(mut self, baseline: &str, baseline_total_us: f64) -> TrafficReport {
        for r in &mut self.rows {
            r.relative_pct = percent(r.time_us, baseline_total_us);
        }
        self.total_relative_pct = percent(self.total_time_us, baseline_total_us);
        self.baseline = baseline.to_string();
        self
    }

    /// Percentages relative to another report's total time.
    pub fn relative_to(self, baseline: &TrafficReport, name: &str) -> TrafficReport {
        self.rebased(name, baseline.total_time_us)
    }

    /// Rows plus a closing `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,bytes,engine,time_us,relative_pct\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.label,
                r.bytes,
                r.engine.name(),
                r.time_us,
                r.relative_pct
            );
        }
        let _ = writeln!(
            out,
            "total,{},-,{},{}",
            self.total_bytes, self.total_time_us, self.total_relative_pct
        );
        out
    }
}
