//! SRAM-budgeted query-axis tiling for cross-attention.
//!
//! A tile of `t` query rows keeps its Q slice, the full K and V, its
//! `t × n_k` score slice and its output rows resident at once. The planner
//! picks the largest `t` whose working set fits the budget, which gives the
//! fewest tiles, then spreads `n_q` over that many tiles as evenly as
//! possible.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dtype::ElementType;
use crate::error::PlanError;

/// Shape of one cross-attention block: `n_q` queries attending over `n_k`
/// keys with head dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionDims {
    pub n_q: usize,
    pub n_k: usize,
    pub d: usize,
}

impl AttentionDims {
    pub const fn new(n_q: usize, n_k: usize, d: usize) -> AttentionDims {
        AttentionDims { n_q, n_k, d }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.n_q == 0 || self.n_k == 0 || self.d == 0 {
            return Err(PlanError::InvalidDims {
                n_q: self.n_q,
                n_k: self.n_k,
                d: self.d,
            });
        }
        Ok(())
    }
}

fn default_utilization() -> f64 {
    0.9
}

/// On-chip memory and engine rates of the target accelerator.
///
/// Times are in microseconds. `dma_setup_us` may be zero; every other rate
/// and capacity must be strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub sram_bytes: u64,
    #[serde(default = "default_utilization")]
    pub utilization_target: f64,
    pub dram_bandwidth_bytes_per_us: f64,
    pub dma_setup_us: f64,
    pub tensor_engine_macs_per_us: f64,
    pub vector_engine_elems_per_us: f64,
}

impl HardwareProfile {
    /// Illustrative NPU-like profile: 1 MiB scratchpad, 50 GB/s DRAM, a
    /// 17K-MAC tensor engine near 1.2 GHz and a narrower vector engine.
    /// These are editable example numbers, not measurements of any device.
    pub fn npu_proxy() -> HardwareProfile {
        HardwareProfile {
            sram_bytes: 1 << 20,
            utilization_target: 0.9,
            dram_bandwidth_bytes_per_us: 50_000.0,
            dma_setup_us: 0.0,
            tensor_engine_macs_per_us: 20_000_000.0,
            vector_engine_elems_per_us: 2_000_000.0,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |what: &str| Err(PlanError::InvalidProfile(what.to_string()));
        if self.sram_bytes == 0 {
            return bad("sram_bytes must be positive");
        }
        if !(self.utilization_target > 0.0 && self.utilization_target <= 1.0) {
            return bad("utilization_target must lie in (0, 1]");
        }
        for (name, v) in [
            ("dram_bandwidth_bytes_per_us", self.dram_bandwidth_bytes_per_us),
            ("tensor_engine_macs_per_us", self.tensor_engine_macs_per_us),
            ("vector_engine_elems_per_us", self.vector_engine_elems_per_us),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be finite and positive"));
            }
        }
        if !(self.dma_setup_us.is_finite() && self.dma_setup_us >= 0.0) {
            return bad("dma_setup_us must be finite and non-negative");
        }
        Ok(())
    }

    /// Bytes of SRAM the planner may fill.
    pub fn sram_budget_bytes(&self) -> u64 {
        (self.utilization_target * self.sram_bytes as f64).floor() as u64
    }

    pub fn from_json(text: &str) -> Result<HardwareProfile, PlanError> {
        let hw: HardwareProfile = serde_json::from_str(text).map_err(|e| PlanError::InvalidProfile(e.to_string()))?;
        hw.validate()?;
        Ok(hw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<HardwareProfile, PlanError> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| PlanError::InvalidProfile(format!("{}: {e}", path.display())))?;
        HardwareProfile::from_json(&text)
    }

    /// Copy with every rate multiplied by `factor`.
    pub fn with_rates_scaled(&self, factor: f64) -> HardwareProfile {
        HardwareProfile {
            dram_bandwidth_bytes_per_us: self.dram_bandwidth_bytes_per_us * factor,
            tensor_engine_macs_per_us: self.tensor_engine_macs_per_us * factor,
            vector_engine_elems_per_us: self.vector_engine_elems_per_us * factor,
            dma_setup_us: self.dma_setup_us / factor,
            ..self.clone()
        }
    }
}

/// Contiguous block of query rows processed as one tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpan {
    pub row_start: usize,
    pub row_count: usize,
}

impl TileSpan {
    pub fn end(&self) -> usize {
        self.row_start + self.row_count
    }
}

/// Query-axis partition of one attention block with its SRAM accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub dims: AttentionDims,
    pub dtype: ElementType,
    pub spans: Vec<TileSpan>,
    pub tile_count: usize,
    /// Resident bytes of the largest tile.
    pub working_set_bytes: u64,
    pub sram_budget_bytes: u64,
}

/// Bytes resident while one tile of `t_rows` queries executes: Q tile, K, V,
/// score tile and output tile.
pub fn working_set(t_rows: usize, n_k: usize, d: usize, dtype: ElementType) -> u64 {
    let (t, n_k, d) = (t_rows as u64, n_k as u64, d as u64);
    dtype.bytes(t * d + 2 * n_k * d + t * n_k + t * d)
}

/// `count` spans covering `[0, n_q)` whose sizes differ by at most one row,
/// larger spans first.
pub fn balanced_spans(n_q: usize, count: usize) -> Vec<TileSpan> {
    assert!(count >= 1 && count <= n_q, "tile count {count} invalid for {n_q} rows");
    let base = n_q / count;
    let extra = n_q % count;
    let mut start = 0;
    (0..count)
        .map(|i| {
            let row_count = base + usize::from(i < extra);
            let span = TileSpan {
                row_start: start,
                row_count,
            };
            start += row_count;
            span
        })
        .collect()
}

impl TilePlan {
    fn from_spans(dims: AttentionDims, dtype: ElementType, spans: Vec<TileSpan>, budget: u64) -> TilePlan {
        let largest = spans.iter().map(|s| s.row_count).max().unwrap_or(0);
        TilePlan {
            dims,
            dtype,
            tile_count: spans.len(),
            working_set_bytes: working_set(largest, dims.n_k, dims.d, dtype),
            sram_budget_bytes: budget,
            spans,
        }
    }

    /// Balanced plan with an explicit tile count, ignoring any SRAM limit.
    /// The recorded budget equals the working set of the largest tile.
    pub fn with_tile_count(dims: AttentionDims, dtype: ElementType, tile_count: usize) -> Result<TilePlan, PlanError> {
        dims.validate()?;
        if tile_count == 0 || tile_count > dims.n_q {
            return Err(PlanError::InvalidSpans(format!(
                "tile count {tile_count} outside 1..={}",
                dims.n_q
            )));
        }
        let mut plan = TilePlan::from_spans(dims, dtype, balanced_spans(dims.n_q, tile_count), 0);
        plan.sram_budget_bytes = plan.working_set_bytes;
        Ok(plan)
    }

    /// Checks that spans are sorted, disjoint, non-empty and cover `[0, n_q)`.
    pub fn check_partition(&self) -> Result<(), PlanError> {
        if self.spans.len() != self.tile_count {
            return Err(PlanError::InvalidSpans("tile_count differs from span count".into()));
        }
        let mut next = 0;
        for s in &self.spans {
            if s.row_start != next || s.row_count == 0 {
                return Err(PlanError::InvalidSpans(format!(
                    "span {s:?} does not continue at row {next}"
                )));
            }
            next = s.end();
        }
        if next != self.dims.n_q {
            return Err(PlanError::InvalidSpans(format!(
                "spans cover {next} of {} rows",
                self.dims.n_q
            )));
        }
        Ok(())
    }

    pub fn largest_span(&self) -> usize {
        self.spans.iter().map(|s| s.row_count).max().unwrap_or(0)
    }
}

/// Largest tile height whose working set fits `budget`, capped at `n_q`.
pub fn max_tile_rows(dims: AttentionDims, dtype: ElementType, budget: u64) -> Result<usize, PlanError> {
    dims.validate()?;
    let required = working_set(1, dims.n_k, dims.d, dtype);
    if required > budget {
        return Err(PlanError::Infeasible {
            required,
            available: budget,
        });
    }
    let fixed = dtype.bytes(2 * (dims.n_k * dims.d) as u64);
    let per_row = dtype.bytes((2 * dims.d + dims.n_k) as u64);
    let rows = (budget - fixed) / per_row;
    Ok(usize::try_from(rows).unwrap_or(usize::MAX).min(dims.n_q))
}

/// Fewest balanced tiles whose largest working set fits the profile's SRAM
/// budget.
pub fn plan_tiles(dims: AttentionDims, dtype: ElementType, hw: &HardwareProfile) -> Result<TilePlan, PlanError> {
    hw.validate()?;
    let budget = hw.sram_budget_bytes();
    let t_max = max_tile_rows(dims, dtype, budget)?;
    let tile_count = dims.n_q.div_ceil(t_max);
    Ok(TilePlan::from_spans(
        dims,
        dtype,
        balanced_spans(dims.n_q, tile_count),
        budget,
    ))
}
