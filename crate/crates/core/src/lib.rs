//! Memory-hierarchy-aware cross-attention for NPU-class accelerators.
//!
//! The crate covers the whole deployment path of one attention block:
//!
//! * [`tensor`] / [`ops`]: a small dense tensor type with matmul, row
//!   softmax and binary16-exact casts.
//! * [`planner`]: picks the query-tile size that fits an SRAM budget.
//! * [`attention`]: untiled and tiled executors that agree bitwise.
//! * [`memmodel`]: the DMA/compute operation graph, kernel fusion and a
//!   serial cost simulator.
//! * [`quant`]: W8A16 post-training quantization and fidelity metrics.
//! * [`pipeline`]: a multi-stage model harness producing benchmark reports.

pub mod attention;
pub mod dtype;
pub mod error;
pub mod io;
pub mod memmodel;
pub mod ops;
pub mod pipeline;
pub mod planner;
pub mod quant;
pub mod random;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use attention::{attention_reference, attention_tiled, AttentionInputs};
pub use dtype::ElementType;
pub use error::{AttentionError, GraphError, PipelineError, PlanError, QuantError, TensorError};
pub use memmodel::{build_attention_graph, fuse_attention, simulate, AttentionGraph, TrafficReport};
pub use planner::{plan_tiles, working_set, AttentionDims, HardwareProfile, TilePlan, TileSpan};
pub use tensor::Tensor;
