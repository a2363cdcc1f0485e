use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("input port `{port}`: {reason}")]
    PortMismatch { port: String, reason: String },
    #[error("node {node}: {reason}")]
    BadNode { node: usize, reason: String },
    #[error("parameter `{0}` is missing")]
    MissingParameter(String),
    #[error("parameter `{0}` is not reachable from any output")]
    UnreachableParameter(String),
    #[error("unknown loss head `{0}`")]
    UnknownHead(String),
    #[error("label {label} out of range for {classes} classes at row {row}")]
    BadLabel { row: usize, label: f64, classes: usize },
    #[error("non-finite value produced at node {0}")]
    NonFinite(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("gradient for `{0}` contains a non-finite value")]
    NonFiniteGradient(String),
    #[error("gradient for `{name}` has shape {got:?}, parameter has {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("no gradient supplied for parameter `{0}`")]
    MissingGradient(String),
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty dataset file")]
    Empty,
    #[error("malformed dataset at byte {offset}: {reason}")]
    MalformedBinary { offset: usize, reason: String },
    #[error("malformed dataset at line {line}: {reason}")]
    MalformedText { line: usize, reason: String },
    #[error("label {label} at sample {index} is not below class count {classes}")]
    LabelOutOfRange { index: usize, label: u32, classes: u32 },
    #[error("invalid dataset parameters: {0}")]
    InvalidParameters(String),
    #[error("batch [{cursor}, {cursor}+{batch}) exceeds dataset of {len} samples")]
    OutOfRange { cursor: usize, batch: usize, len: usize },
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("out of memory: demand {demand} B exceeds capacity {capacity} B by {deficit} B")]
    OutOfMemory { demand: u64, capacity: u64, deficit: u64 },
    #[error("profile line {line}: {reason}")]
    Profile { line: usize, reason: String },
    #[error("profile is missing key `{0}`")]
    MissingKey(String),
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error("invalid simulation input: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum PackError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("duplicate model id `{0}`")]
    DuplicateModel(String),
    #[error("unknown model id `{0}`")]
    UnknownModel(String),
    #[error("cannot pack an empty member list")]
    Empty,
    #[error("invalid model handle `{model_id}`: {reason}")]
    InvalidHandle { model_id: String, reason: String },
    #[error("no active member can take another step")]
    NothingToTrain,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Error)]
pub enum TunerError {
    #[error("cannot sample {requested} configurations from a space of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("configuration {config_id} alone needs {demand} B, device capacity is {capacity} B")]
    ConfigTooLarge { config_id: usize, demand: u64, capacity: u64 },
    #[error("invalid hyperband parameters: {0}")]
    InvalidParameters(String),
    #[error("executor out of memory: {0}")]
    ExecutorOom(String),
    #[error("executor failed: {0}")]
    Executor(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pack(#[from] PackError),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("spec field `{field}`: {message}")]
    Spec { field: String, message: String },
    #[error("out of memory: {0}")]
    OutOfMemory(String),
    #[error("{0}")]
    Io(String),
}

impl ExperimentError {
    pub fn spec(field: impl Into<String>, message: impl ToString) -> Self {
        ExperimentError::Spec { field: field.into(), message: message.to_string() }
    }
}
