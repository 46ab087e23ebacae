use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("gradient root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("gradient root does not depend on any trainable leaf")]
    DetachedRoot,
    #[error("no convergence: {0}")]
    ConvergenceFailure(String),

    #[error("spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checksum mismatch for entry `{0}`")]
    ChecksumMismatch(String),
    #[error("unknown hook `{0}`")]
    UnknownHook(String),
    #[error("unknown parameter path `{0}`")]
    UnknownPath(String),
    #[error("bad path pattern `{pattern}`: {reason}")]
    BadPattern { pattern: String, reason: String },

    #[error(transparent)]
    Parse(#[from] crate::architect::dsl::ParseError),
    #[error("pattern `{0}` matched no adaptable site")]
    NoMatchingSite(String),
    #[error("incompatible site `{site}`: {reason}")]
    IncompatibleSite { site: String, reason: String },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparam(String),
    #[error("plan does not match model: {0}")]
    PlanMismatch(String),
    #[error("injection `{0}` cannot be merged by re-parameterization")]
    NotMergeable(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("missing hook `{0}` in activation trace")]
    MissingHook(String),
    #[error("width mismatch: {0}")]
    WidthMismatch(String),
    #[error("batch mismatch: {0}")]
    BatchMismatch(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("reference mismatch: {0}")]
    RefMismatch(String),
    #[error("`{0}` is not a matrix")]
    NotAMatrix(String),
    #[error("k = {k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("non-finite loss in term `{term}`: {detail}")]
    NonFiniteLoss { term: String, detail: String },
    #[error("configuration error: {0}")]
    Config(String),

    #[error("no inputs given")]
    EmptyInput,
    #[error("operation not supported for model kind `{0}`")]
    NotSupportedKind(String),
    #[error("ambiguous assignment: {0}")]
    AmbiguousAssignment(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("class count mismatch: {0}")]
    ClassCountMismatch(String),
    #[error("non-finite cost matrix")]
    NonFiniteCost,
    #[error("sinkhorn did not converge: marginal violation {0:e}")]
    NoConvergence(f64),

    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("malformed csv at row {row}, column {col}: {reason}")]
    MalformedCsv { row: usize, col: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
