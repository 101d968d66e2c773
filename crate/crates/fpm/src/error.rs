use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use fpm_core::derivation::DerivationError;
use fpm_core::{ParseError, StorePath, StorePathError};
use thiserror::Error;

use crate::buildlang::EvalError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Where a package was defined.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Location {
    pub file: PathBuf,
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.file.display(), self.line, self.column)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    StorePath(#[from] StorePathError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("closure violation: {0}")]
    ClosureViolation(String),
    #[error("store is busy: could not lock {} within {timeout:?}", path.display())]
    StoreBusy { path: PathBuf, timeout: Duration },
    #[error(transparent)]
    Derivation(#[from] DerivationError),
    #[error("{} parse error: {error}", file.display())]
    Parse { file: PathBuf, error: ParseError },
    #[error("dependency cycle: {}", .0.join(" -> "))]
    DependencyCycle(Vec<String>),
    #[error("build of {drv} failed: {reason}")]
    BuildFailed { drv: StorePath, reason: String, log: Option<PathBuf> },
    #[error("builder of {drv} did not produce {output}")]
    MissingOutput { drv: StorePath, output: StorePath },
    #[error("impurity detected while building {drv}: {}", paths.join(", "))]
    ImpurityDetected { drv: StorePath, paths: Vec<String> },
    #[error("builder {} is not executable", .0.display())]
    BuilderNotExecutable(PathBuf),
    #[error("hash mismatch for {what}: expected {expected}, got {actual}")]
    HashMismatch { what: String, expected: String, actual: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("expression cannot be serialized: {0}")]
    NotSerializable(String),
    #[error("invalid build arguments: {0}")]
    ArgumentError(String),
    #[error("key not found: {0}")]
    KeyNotFound(String),
    #[error("module {0:?} not found in the module search path")]
    ModuleNotFound(String),
    #[error("unknown build system {0:?}")]
    UnknownBuildSystem(String),
    #[error("{location}: package lacks required field {field:?}")]
    MissingField { field: String, location: Location },
    #[error("{location}: unknown field {field:?}")]
    UnknownField { field: String, location: Location },
    #[error("{location}: {message}")]
    PackageSyntax { message: String, location: Location },
    #[error("duplicate package {0}")]
    DuplicatePackage(String),
    #[error("package not found: {0}")]
    PackageNotFound(String),
    #[error("package {0:?} is not installed")]
    NotInstalled(String),
    #[error("empty transaction")]
    EmptyTransaction,
    #[error("no previous generation to roll back to")]
    NothingToRollBack,
    #[error("injected fault at {0}")]
    FaultInjected(String),
    #[error("corrupt state: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Regex(#[from] regex::Error),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Error {
        Error::Io { path: path.into(), source }
    }

    /// Whether the error comes from running a build rather than from the
    /// request itself. The command line maps these to exit status 2.
    pub fn is_build_failure(&self) -> bool {
        matches!(
            self,
            Error::BuildFailed { .. }
                | Error::MissingOutput { .. }
                | Error::ImpurityDetected { .. }
                | Error::BuilderNotExecutable(_)
                | Error::HashMismatch { .. }
        )
    }
}

/// Attaches a path to `io::Error`s.
pub trait IoContext<T> {
    fn at(self, path: impl AsRef<Path>) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl AsRef<Path>) -> Result<T> {
        self.map_err(|e| Error::io(path.as_ref(), e))
    }
}
