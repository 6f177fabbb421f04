use crate::graph::NodeId;

/// Every fallible operation in the crate returns this error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("node {node}: operand {operand} does not refer to a declared node")]
    DanglingOperand { node: NodeId, operand: NodeId },
    #[error("cycle through node {0} outside a loop block")]
    Cycle(NodeId),
    #[error("duplicate leaf name `{0}`")]
    DuplicateLeaf(String),
    #[error("node {node}: {op} expects {expected} operand(s), got {got}")]
    Arity {
        node: NodeId,
        op: &'static str,
        expected: String,
        got: usize,
    },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("domain error at node {node} ({op}): {detail}")]
    Domain {
        node: NodeId,
        op: &'static str,
        detail: String,
    },
    #[error("loop block at node {node} hit its iteration cap of {cap}")]
    LoopCap { node: NodeId, cap: usize },
    #[error("node {node} did not converge: residual {residual:e} exceeds tolerance")]
    NotConverged { node: NodeId, residual: f64 },
    #[error("inside loop block at node {node}: {source}")]
    InLoop { node: NodeId, source: Box<Error> },
    #[error("unbound {what} `{name}`")]
    Unbound { what: &'static str, name: String },
    #[error("expected {expected} {what} value(s), got {got}")]
    BindingCount {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("tape was not produced by this graph")]
    TapeMismatch,
    #[error("loop stack of node {0} is empty; run forward again before another backward pass")]
    EmptyLoopStack(NodeId),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("finite-difference step for `{0}` must be non-zero")]
    ZeroStep(String),
    #[error("unknown model `{name}`; registered models: {known}")]
    UnknownModel { name: String, known: String },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid parameter `{name}`: {detail}")]
    InvalidParam { name: String, detail: String },
    #[error("line {line}: {detail}")]
    Parse { line: u64, detail: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("estimation failed: {0}")]
    Estimate(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("normal equations could not be factorized at any damping level")]
    Singular,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
