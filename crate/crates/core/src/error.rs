use std::fmt;

use thiserror::Error;

/// Threat classes from the adversary model. Verification failures map onto
/// exactly one of these so that a test matrix can be keyed by them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Threat {
    /// Out-of-policy or non-committed examples in a batch.
    OutOfPolicy,
    /// Hyperparameter or program constant altered.
    AlteredHyperparameters,
    /// Skipped, duplicated or reordered steps.
    StepOrder,
    /// Optimizer state or parameter tampering.
    OptimizerState,
    /// Approximation budgets exceeded.
    Budget,
}

impl fmt::Display for Threat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Threat::OutOfPolicy => "A1",
            Threat::AlteredHyperparameters => "A2",
            Threat::StepOrder => "A3",
            Threat::OptimizerState => "A4",
            Threat::Budget => "A5",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("fixed-point range overflow in {0}")]
    RangeOverflow(&'static str),

    #[error("invalid fixed-point format: {0}")]
    InvalidFormat(String),

    #[error("{function} lookup input {value} outside table domain [{lo}, {hi}]")]
    TableDomain {
        function: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: u64, len: u64 },

    #[error("unknown bin `{0}`")]
    UnknownBin(String),

    #[error("batch of {batch} exceeds sampling universe of {universe}")]
    BatchTooLarge { batch: u64, universe: u64 },

    #[error("epoch {0} is closed")]
    EpochClosed(u64),

    #[error("{clients} clients requested for {examples} examples")]
    TooManyClients { clients: usize, examples: usize },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("manifest mismatch on `{field}`")]
    ManifestMismatch { field: String },

    #[error("out-of-policy batch: {0}")]
    OutOfPolicyBatch(String),

    #[error("chain break: {0}")]
    ChainBreak(String),

    #[error("constraint violation in {tensor} at coordinate {coordinate}")]
    ConstraintViolation { tensor: String, coordinate: usize },

    #[error("budget exceeded: {what} bound {bound:e} > budget {budget:e}")]
    BudgetExceeded { what: String, bound: f64, budget: f64 },

    #[error("boundary mismatch: {0}")]
    BoundaryMismatch(String),

    #[error("quota violation in bin `{bin}`: {count} > {ceiling}")]
    QuotaViolation { bin: String, count: u64, ceiling: u64 },

    #[error("certificate mismatch: {0}")]
    CertificateMismatch(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("epoch {epoch} step {step}: {source}")]
    At {
        epoch: u64,
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn at(self, epoch: u64, step: u64) -> Error {
        match self {
            e @ Error::At { .. } => e,
            e => Error::At {
                epoch,
                step,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with any step location stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::At { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn location(&self) -> Option<(u64, u64)> {
        match self {
            Error::At { epoch, step, .. } => Some((*epoch, *step)),
            _ => None,
        }
    }

    pub fn threat(&self) -> Option<Threat> {
        match self.root() {
            Error::OutOfPolicyBatch(_) => Some(Threat::OutOfPolicy),
            Error::ManifestMismatch { .. } => Some(Threat::AlteredHyperparameters),
            Error::ChainBreak(_) | Error::BoundaryMismatch(_) => Some(Threat::StepOrder),
            Error::ConstraintViolation { .. } => Some(Threat::OptimizerState),
            Error::BudgetExceeded { .. } => Some(Threat::Budget),
            _ => None,
        }
    }

    /// Short stable name of the error kind, used in reports.
    pub fn kind_name(&self) -> &'static str {
        match self.root() {
            Error::RangeOverflow(_) => "RangeOverflow",
            Error::InvalidFormat(_) => "InvalidFormat",
            Error::TableDomain { .. } => "TableDomainError",
            Error::Shape(_) => "ShapeMismatch",
            Error::EmptyDataset => "EmptyDataset",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::UnknownBin(_) => "UnknownBin",
            Error::BatchTooLarge { .. } => "BatchTooLarge",
            Error::EpochClosed(_) => "EpochClosed",
            Error::TooManyClients { .. } => "TooManyClients",
            Error::Schema(_) => "SchemaError",
            Error::ManifestMismatch { .. } => "ManifestMismatch",
            Error::OutOfPolicyBatch(_) => "OutOfPolicyBatch",
            Error::ChainBreak(_) => "ChainBreak",
            Error::ConstraintViolation { .. } => "ConstraintViolation",
            Error::BudgetExceeded { .. } => "BudgetExceeded",
            Error::BoundaryMismatch(_) => "BoundaryMismatch",
            Error::QuotaViolation { .. } => "QuotaViolation",
            Error::CertificateMismatch(_) => "CertificateMismatch",
            Error::Decode(_) => "DecodeError",
            Error::Io(_) => "IoError",
            Error::At { .. } => unreachable!("root() strips locations"),
        }
    }
}
