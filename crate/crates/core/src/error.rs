use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::builder::BuilderError;
use crate::ids::OpId;
use crate::tablestring::TableStringError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("path {0} is not empty")]
    PathOccupied(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: corrupt file: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("not a vault: {0}")]
    NotAVault(PathBuf),
    #[error("invalid name: {0}")]
    InvalidName(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no such table: {0}")]
    NoSuchTable(String),
    #[error("table {0} already exists")]
    TableExists(String),
    #[error("table {0} has been deleted")]
    TableDeleted(String),
    #[error("no such instance {instance} in table {table}")]
    NoSuchInstance { table: String, instance: String },
    #[error("origin instance {instance} not found in table {table}")]
    NoSuchOrigin { table: String, instance: String },
    #[error("external id {0} already used in this table")]
    DuplicateExternalId(String),
    #[error("instance {table}/{instance} is not materialized")]
    NotMaterialized { table: String, instance: String },
    #[error("instance {table}/{instance} is not editable (phase {phase})")]
    InstanceNotEditable { table: String, instance: String, phase: String },
    #[error("{0} is busy with a running operation")]
    TargetBusy(String),
    #[error("table {0} does not allow concurrent executions and one is running")]
    ConcurrentExecForbidden(String),

    #[error("operation {op} does not hold a lock covering {target}")]
    LockNotHeld { op: OpId, target: String },
    #[error("column {column}: expected dtype {expected}, found {found}")]
    DtypeMismatch { column: String, expected: String, found: String },
    #[error("artifact path {0} is occupied by different content")]
    DuplicateArtifact(String),
    #[error("artifact {0} is missing")]
    ArtifactMissing(String),
    #[error("artifact path {0} escapes the instance artifact folder")]
    PathEscape(String),
    #[error("snapshot for {0} is missing")]
    SnapshotMissing(OpId),

    #[error("timed out waiting for {mode} lock on {target} for {op}")]
    Timeout { op: OpId, target: String, mode: String },
    #[error("{0} already released locks and cannot acquire more")]
    ShrinkPhaseViolation(OpId),
    #[error("deadlock detected; {victim} aborted (cycle: {cycle})")]
    Deadlock { victim: OpId, cycle: String },

    #[error("no such active operation: {0}")]
    NoSuchOp(String),
    #[error("operation {op} is already running in live process {pid}")]
    AlreadyRunning { op: OpId, pid: u32 },
    #[error("operation {op} is in state {state}, expected {expected}")]
    WrongState { op: OpId, state: String, expected: String },
    #[error("operation {0} cannot be resumed")]
    NotResumable(OpId),
    #[error("operation {0} was interrupted before finishing")]
    Interrupted(OpId),
    #[error("operation {op} was stopped{}", if *keep_progress { " (progress kept)" } else { "" })]
    Stopped { op: OpId, keep_progress: bool },

    #[error(transparent)]
    Builder(#[from] BuilderError),
    #[error(transparent)]
    TableString(#[from] TableStringError),

    #[error("dependency table {0} has no materialized instance")]
    DependencyNotMaterialized(String),
    #[error("builder cycle: {}", .0.join(" -> "))]
    BuilderCycle(Vec<String>),
    #[error("executor failed in builder {builder}{}: {cause}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    ExecutorFailure { builder: String, row: Option<usize>, cause: String },
    #[error("column {column}{}: {detail}", row.map(|r| format!(" row {r}")).unwrap_or_default())]
    DtypeViolation { column: String, row: Option<usize>, detail: String },
    #[error("generator produced duplicate row key {0}")]
    DuplicateRowKey(String),
    #[error("executor kind {0} is already registered")]
    DuplicateKind(String),
    #[error("no checkpoint for {0}")]
    NoCheckpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub(crate) fn corrupt(path: impl AsRef<Path>, reason: impl ToString) -> Self {
        Error::Corrupt { path: path.as_ref().to_path_buf(), reason: reason.to_string() }
    }

    /// Stable machine-readable name of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::PathOccupied(_) => "PathOccupied",
            Error::Io { .. } => "IoFailure",
            Error::Corrupt { .. } => "Corrupt",
            Error::NotAVault(_) => "NotAVault",
            Error::InvalidName(_) => "InvalidName",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::NoSuchTable(_) => "NoSuchTable",
            Error::TableExists(_) => "TableExists",
            Error::TableDeleted(_) => "TableDeleted",
            Error::NoSuchInstance { .. } => "NoSuchInstance",
            Error::NoSuchOrigin { .. } => "NoSuchOrigin",
            Error::DuplicateExternalId(_) => "DuplicateExternalId",
            Error::NotMaterialized { .. } => "NotMaterialized",
            Error::InstanceNotEditable { .. } => "InstanceNotEditable",
            Error::TargetBusy(_) => "TargetBusy",
            Error::ConcurrentExecForbidden(_) => "ConcurrentExecForbidden",
            Error::LockNotHeld { .. } => "LockNotHeld",
            Error::DtypeMismatch { .. } => "DtypeMismatch",
            Error::DuplicateArtifact(_) => "DuplicateArtifact",
            Error::ArtifactMissing(_) => "ArtifactMissing",
            Error::PathEscape(_) => "PathEscape",
            Error::SnapshotMissing(_) => "SnapshotMissing",
            Error::Timeout { .. } => "Timeout",
            Error::ShrinkPhaseViolation(_) => "ShrinkPhaseViolation",
            Error::Deadlock { .. } => "Deadlock",
            Error::NoSuchOp(_) => "NoSuchOp",
            Error::AlreadyRunning { .. } => "AlreadyRunning",
            Error::WrongState { .. } => "WrongState",
            Error::NotResumable(_) => "NotResumable",
            Error::Interrupted(_) => "Interrupted",
            Error::Stopped { .. } => "Stopped",
            Error::Builder(e) => e.code(),
            Error::TableString(e) => e.code(),
            Error::DependencyNotMaterialized(_) => "DependencyNotMaterialized",
            Error::BuilderCycle(_) => "BuilderCycle",
            Error::ExecutorFailure { .. } => "ExecutorFailure",
            Error::DtypeViolation { .. } => "DtypeViolation",
            Error::DuplicateRowKey(_) => "DuplicateRowKey",
            Error::DuplicateKind(_) => "DuplicateKind",
            Error::NoCheckpoint(_) => "NoCheckpoint",
        }
    }

    /// Errors caused by lock contention rather than by the operation itself.
    pub fn is_transient(&self) -> bool {
        matches!(self, Error::Timeout { .. } | Error::Deadlock { .. })
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl AsRef<Path>) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl AsRef<Path>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
