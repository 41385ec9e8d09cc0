use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid macro config: {0}")]
    InvalidMacro(String),

    #[error("kernel exceeds macro depth: {kernel}x{kernel} kernel needs {needed} wordlines, macro has {wordlines}")]
    KernelExceedsDepth {
        kernel: usize,
        needed: usize,
        wordlines: usize,
    },

    #[error("invalid bit width {0}: must be at least 2")]
    InvalidBits(u32),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph: {0}")]
    Graph(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("layer {layer} is not a convolution")]
    NotConv { layer: String },

    #[error("batchnorm missing for conv layer {0}")]
    MissingBatchNorm(String),

    #[error("plan exceeds budget: macro usage {usage:.4} > 1 (target {target_bl} bitlines)")]
    PlanExceedsBudget { usage: f64, target_bl: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("not a checkpoint")]
    NotACheckpoint,

    #[error("not an integer model file")]
    NotAnIntegerModel,

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("scale out of range for layer {layer}: |log2 s| = {log2:.3} > 31")]
    ScaleOutOfRange { layer: String, log2: f64 },

    #[error("accumulator overflow in layer {layer}: {value}")]
    AccumulatorOverflow { layer: String, value: i64 },

    #[error("missing {path}: run the `{stage}` stage first")]
    MissingStage { stage: String, path: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
