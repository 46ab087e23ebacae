//! Command implementations behind the `zj` binary: plan, train, merge, eval
//! and inspect, all driven by a flat [`RunConfig`].

pub mod commands;
pub mod config;

pub use commands::{cmd_eval, cmd_inspect, cmd_merge, cmd_plan, cmd_train, load_dataset};
pub use config::RunConfig;

use std::path::{Path, PathBuf};

use zj_core::architect::ParseError;
use zj_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] Error),
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: Error },
    #[error("architect.config: {err}\n{caret}")]
    Dsl { err: ParseError, caret: String },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn file(path: &Path, source: Error) -> Self {
        CliError::File { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) | CliError::File { source: e, .. } => exit_code(e),
            CliError::Dsl { .. } => 2,
        }
    }
}

/// Process exit status for a library error.
pub fn exit_code(e: &Error) -> u8 {
    use Error::*;
    match e {
        Parse(_) | BadPattern { .. } => 2,
        Config(_) | InvalidHyperparam(_) | NoMatchingSite(_) | IncompatibleSite { .. } | UnknownHook(_)
        | UnknownPath(_) | InvalidSpec(_) | MissingHook(_) | KOutOfRange { .. } | NotAMatrix(_)
        | WidthMismatch(_) | BatchMismatch(_) | DegenerateBatch(_) | NotMergeable(_) => 3,
        SpecMismatch(_) | PlanMismatch(_) | ShapeMismatch(_) | RefMismatch(_) => 4,
        Io(_) | CorruptCheckpoint(_) | ChecksumMismatch(_) => 5,
        NonFiniteValue(_) | NonFiniteLoss { .. } | ConvergenceFailure(_) | NonFiniteCost | NoConvergence(_) => 6,
        BadMagic { .. } | LabelMismatch(_) | MalformedCsv { .. } | LabelOutOfRange { .. } | EmptyClass(_) => 7,
        EmptyInput | NotSupportedKind(_) | AmbiguousAssignment(_) | SizeMismatch(_) | ClassCountMismatch(_) => 8,
        NotScalar(_) | DetachedRoot => 9,
    }
}
