use thiserror::Error;

use crate::heap::HeapError;
use crate::ids::NodeId;
use crate::migrate::MigrateError;
use crate::registry::RegistryError;
use crate::snapshot::SnapshotError;
use crate::strings::StringError;
use crate::weaver::WeaveError;
use crate::wof::asm::AsmError;
use crate::wof::WofError;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error(transparent)]
    Wof(#[from] WofError),
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Weave(#[from] WeaveError),
    #[error(transparent)]
    Heap(#[from] HeapError),
    #[error(transparent)]
    String(#[from] StringError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Migrate(#[from] MigrateError),
    #[error("unknown module `{0}`")]
    UnknownModule(String),
    #[error("unknown bead `{0}`")]
    UnknownBead(String),
    #[error("unknown island `{0}`")]
    UnknownIsland(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("name `{0}` already taken")]
    DuplicateName(String),
}

impl Error {
    /// Short machine-readable code used by the monitor protocol.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Wof(_) => "wof",
            Error::Asm(_) => "asm",
            Error::Registry(_) => "registry",
            Error::Weave(_) => "weave",
            Error::Heap(_) => "heap",
            Error::String(StringError::Deadlock(_)) => "deadlock",
            Error::String(_) => "string",
            Error::Snapshot(_) => "snapshot",
            Error::Migrate(_) => "migrate",
            Error::UnknownModule(_)
            | Error::UnknownBead(_)
            | Error::UnknownIsland(_)
            | Error::UnknownNode(_) => "unknown",
            Error::DuplicateName(_) => "duplicate",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
