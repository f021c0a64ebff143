use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: tp*pp*dp = {ranks} but cluster has {gpus} GPUs")]
    DimensionMismatch { ranks: usize, gpus: usize },
    #[error("tensor-parallel group {group} spans nodes {nodes:?}")]
    TpSpansNodes { group: usize, nodes: Vec<usize> },
    #[error("{what} out of range: {value} (limit {limit})")]
    OutOfRange { what: &'static str, value: usize, limit: usize },
    #[error("graph is not in serialized layer form: {0}")]
    NotSerializedForm(String),
    #[error("transform `{0}` already applied")]
    AlreadyTransformed(&'static str),
    #[error("dependency cycle through event {0}")]
    Cycle(usize),
    #[error("window {w} larger than sequence length {s}")]
    WindowTooLarge { w: u64, s: u64 },
    #[error("unknown dimension `{0}`")]
    UnknownDimension(String),
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("need at least {need} steps of data, have {have}")]
    InsufficientSteps { need: usize, have: usize },
    #[error("no timeout records in log")]
    NoTimeoutLogs,
    #[error("diagnostic ordering violation on node {0}: intra-host test has not passed")]
    OrderingViolation(usize),
    #[error("insufficient healthy nodes: need {need}, have {have} (deficit {deficit})")]
    Shortage { need: usize, have: usize, deficit: usize },
    #[error("illegal recovery transition {from} -> {to}")]
    IllegalTransition { from: String, to: String },
    #[error("recovery already in progress (state {0})")]
    AlreadyRecovering(String),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("checkpoint {ckpt} missing partition {partition}")]
    MissingPartition { ckpt: u64, partition: usize },
    #[error("checkpoint {0} is not durable")]
    NotDurable(u64),
    #[error("no durable checkpoint available")]
    NoCheckpoint,
    #[error("elapsed time is zero")]
    ZeroElapsed,
    #[error("io error: {0}")]
    Io(String),
    #[error("parse error at {path}: {msg}")]
    Parse { path: String, msg: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
