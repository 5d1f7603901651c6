use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("variable from tape {found} used on tape {expected}")]
    CrossTape { expected: u64, found: u64 },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar((usize, usize)),

    #[error("timestep {t} is out of range (last valid step {last})")]
    OutOfRange { t: usize, last: usize },

    #[error("action kind {found:?} does not match dynamics model {expected:?}")]
    ActionKind {
        expected: crate::types::DynamicsModel,
        found: crate::types::DynamicsModel,
    },

    #[error("missing action for controlled agent {0}")]
    MissingAction(usize),

    #[error("all agents are masked out")]
    AllMasked,

    #[error("empty mask: nothing to average over")]
    EmptyMask,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at timestep {t}")]
    NanLoss { t: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("infeasible generator spec: {0}")]
    Infeasible(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("invariant violated at `{field}`: {msg}")]
    Invariant { field: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invariant(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Invariant {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain { op, msg: msg.into() }
    }
}
