use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::memmodel::simulate::TrafficReport;

/// Row positions in a nine-row untiled cost table.
pub mod row {
    pub const LOAD_QK: usize = 0;
    pub const CALC_QK: usize = 1;
    pub const STORE_S_IN: usize = 2;
    pub const LOAD_S_IN: usize = 3;
    pub const SOFTMAX: usize = 4;
    pub const STORE_S_OUT: usize = 5;
    pub const LOAD_S_OUT_V: usize = 6;
    pub const CALC_SV: usize = 7;
    pub const STORE_A: usize = 8;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub label: String,
    pub percent: f64,
}

/// Relative time of each untiled attention row, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineCostTable {
    pub entries: Vec<BaselineEntry>,
}

/// Measured untiled cross-attention breakdown on the reference NPU.
const MEASURED_UNTILED: [(&str, f64); 9] = [
    ("DMA load: Query+Key", 0.6),
    ("Tensor calc: Query x Key^T = S_in", 6.9),
    ("DMA store: S_in", 19.1),
    ("DMA load: S_in", 18.2),
    ("Vector calc: Softmax(S_in) = S_out", 11.0),
    ("DMA store: S_out", 18.5),
    ("DMA load: S_out+Value", 19.5),
    ("Tensor calc: S_out x Value = A", 5.4),
    ("DMA store: A", 0.7),
];

/// Calc rows measured on the same NPU after tiling, in table order
/// (Q×Kᵀ, softmax, S_out×V).
pub const MEASURED_TILED_COMPUTE: [f64; 3] = [7.2, 11.6, 5.7];

/// V-only load row measured after tiling.
pub const MEASURED_TILED_V_LOAD: f64 = 0.8;

/// How the calc rows change once the block is tiled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiledCompute {
    /// Baseline calc percentages scaled by `1 + overhead`.
    Overhead(f64),
    /// Explicit Q×Kᵀ, softmax and S_out×V percentages.
    Explicit([f64; 3]),
}

impl BaselineCostTable {
    pub fn new(entries: Vec<BaselineEntry>) -> Result<BaselineCostTable, GraphError> {
        let t = BaselineCostTable { entries };
        t.validate()?;
        Ok(t)
    }

    /// The nine-row untiled breakdown measured on the reference NPU.
    pub fn measured() -> BaselineCostTable {
        BaselineCostTable {
            entries: MEASURED_UNTILED
                .iter()
                .map(|&(label, percent)| BaselineEntry {
                    label: label.into(),
                    percent,
                })
                .collect(),
        }
    }

    /// Table built from an untiled simulated report.
    pub fn from_report(report: &TrafficReport) -> Result<BaselineCostTable, GraphError> {
        BaselineCostTable::new(
            report
                .rows
                .iter()
                .map(|r| BaselineEntry {
                    label: r.label.clone(),
                    percent: r.relative_pct,
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: String| Err(GraphError::InvalidDims(m));
        if self.entries.len() != 9 {
            return bad(format!("baseline table needs 9 rows, got {}", self.entries.len()));
        }
        if self
            .entries
            .iter()
            .any(|e| !(e.percent.is_finite() && e.percent >= 0.0))
        {
            return bad("baseline percentages must be finite and non-negative".into());
        }
        let sum = self.total();
        if sum != 0.0 && (sum - 100.0).abs() > 0.2 {
            return bad(format!("baseline rows sum to {sum}, expected 100 ± 0.2"));
        }
        Ok(())
    }

    pub fn percent(&self, row: usize) -> f64 {
        self.entries[row].percent
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.percent).sum()
    }
}

/// Predicted tiled total with unchanged calc rows.
pub fn apply_mlt_to_baseline(tbl: &BaselineCostTable, v_load_percent: f64) -> Result<f64, GraphError> {
    apply_mlt_with(tbl, v_load_percent, TiledCompute::Overhead(0.0))
}

/// Predicted tiled total as a percentage of the untiled baseline.
///
/// The S_in store, S_in load and S_out store rows vanish, the S_out+V load
/// is replaced by `v_load_percent`, and the calc rows follow `compute`.
pub fn apply_mlt_with(tbl: &BaselineCostTable, v_load_percent: f64, compute: TiledCompute) -> Result<f64, GraphError> {
    tbl.validate()?;
    let limit = tbl.percent(row::LOAD_S_OUT_V);
    if !(0.0..=limit).contains(&v_load_percent) {
        return Err(GraphError::InvalidDims(format!(
            "v_load_percent {v_load_percent} outside [0, {limit}]"
        )));
    }
    let calc = match compute {
        TiledCompute::Overhead(eps) => {
            if !(eps.is_finite() && eps >= 0.0) {
                return Err(GraphError::InvalidDims(format!("overhead {eps} must be non-negative")));
            }
            [row::CALC_QK, row::SOFTMAX, row::CALC_SV].map(|r| tbl.percent(r) * (1.0 + eps))
        }
        TiledCompute::Explicit(values) => values,
    };
    Ok(tbl.percent(row::LOAD_QK) + calc[0] + calc[1] + v_load_percent + calc[2] + tbl.percent(row::STORE_A))
}
