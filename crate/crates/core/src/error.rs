use thiserror::Error;

use crate::dtype::ElementType;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {expected} elements, buffer has {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("expected a rank-2 tensor, got shape {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: incompatible element types {lhs} and {rhs}")]
    DtypeMismatch {
        op: &'static str,
        lhs: ElementType,
        rhs: ElementType,
    },
    #[error("{op} requires a floating element type, got {dtype}")]
    NotFloating { op: &'static str, dtype: ElementType },
    #[error("{op}: accumulator type {dtype} does not match operand class")]
    BadAccumulator { op: &'static str, dtype: ElementType },
    #[error("{dtype} accumulator overflow at output ({row}, {col})")]
    AccumulatorOverflow { dtype: ElementType, row: usize, col: usize },
    #[error("cannot cast non-integral value {value} to {to}; quantize it instead")]
    NonIntegralCast { value: f64, to: ElementType },
    #[error("row range {start}+{count} outside 0..{rows}")]
    RowRange { start: usize, count: usize, rows: usize },
    #[error("empty tensor list")]
    Empty,
    #[error("malformed TNSR1 data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("attention operands: {0}")]
    Operands(String),
    #[error("tile plan does not match attention inputs: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("infeasible tiling: one query row needs {required} bytes, SRAM budget is {available} bytes")]
    Infeasible { required: u64, available: u64 },
    #[error("invalid attention dimensions ({n_q}, {n_k}, {d}): all must be positive")]
    InvalidDims { n_q: usize, n_k: usize, d: usize },
    #[error("invalid hardware profile: {0}")]
    InvalidProfile(String),
    #[error("invalid tile spans: {0}")]
    InvalidSpans(String),
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("tile plan does not match graph dimensions: {0}")]
    PlanMismatch(String),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("graph execution: {0}")]
    Execution(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("calibration needs at least one sample")]
    NoSamples,
    #[error("calibration sample shape {actual:?} differs from {expected:?}")]
    SampleShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("per-channel axis {axis} out of range for shape {shape:?}")]
    BadAxis { axis: usize, shape: Vec<usize> },
    #[error("quantization parameters do not fit tensor: {0}")]
    ParamMismatch(String),
    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),
    #[error("expected {expected} input, got {actual}")]
    WrongDtype {
        expected: &'static str,
        actual: ElementType,
    },
    #[error("fidelity metrics undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid model descriptor: {0}")]
    Descriptor(String),
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("precision {precision} is not supported for stage `{stage}`")]
    InvalidPrecision { stage: String, precision: String },
    #[error("runs are not comparable: {0}")]
    Incomparable(String),
    #[error("stage `{stage}` block {block}: {source}")]
    Plan {
        stage: String,
        block: usize,
        #[source]
        source: PlanError,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
