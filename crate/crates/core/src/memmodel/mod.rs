//! Attention operation graph, kernel fusion and the serial DMA/compute cost
//! model.

mod baseline;
mod calibrated;
mod exec;
mod graph;
mod simulate;

pub use baseline::{
    apply_mlt_to_baseline, apply_mlt_with, row, BaselineCostTable, BaselineEntry, TiledCompute, MEASURED_TILED_COMPUTE,
    MEASURED_TILED_V_LOAD,
};
pub use calibrated::{row_class, simulate_calibrated, CalibratedCosts};
pub use exec::execute_graph;
pub use graph::{
    build_attention_graph, build_attention_graph_with, fuse_attention, AttentionGraph, Engine, OpKind, OpNode, Role,
    ValueReload,
};
pub use simulate::{simulate, simulate_with, SimOptions, TrafficReport, TrafficRow, DEFAULT_TILE_COMPUTE_OVERHEAD};
