//! The LSM lifecycle: memtable, WAL, flush with tuple compaction, merges
//! with anti-matter annihilation, lookups, and recovery.

pub mod component;
mod dataset;
pub mod fault;
mod key;
mod partition;
mod policy;
pub mod wal;

use std::io;

use serde::{Deserialize, Serialize};

pub use component::{Component, ComponentId};
pub use dataset::{Dataset, PartitionSnapshot, SnapshotRecord, SourceId};
pub use fault::{CrashSite, FaultInjector, FaultMode};
pub use key::Key;
pub use partition::{ComponentInfo, PartitionStats};
pub use policy::pick_merge;

use crate::compression::{Codec, CompressionError};
use crate::record::RecordError;
use crate::schema::SchemaError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub name: String,
    pub primary_key: String,
    pub partitions: usize,
    /// Infer schemas and compact records at flush.
    pub compactor: bool,
    /// Codec name for page compression, or `None` for uncompressed files.
    pub compression: Option<String>,
    pub page_size: usize,
    pub memtable_bytes: usize,
    pub merge_max_bytes: u64,
    pub merge_tolerable_count: usize,
    /// Reject inserts of keys that already exist instead of replacing.
    pub strict_insert: bool,
    /// Run the merge policy after every flush.
    pub auto_merge: bool,
    /// fsync the WAL on every append.
    pub sync_wal: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            name: "dataset".into(),
            primary_key: "id".into(),
            partitions: 4,
            compactor: true,
            compression: None,
            page_size: crate::compression::DEFAULT_PAGE_SIZE,
            memtable_bytes: 8 << 20,
            merge_max_bytes: 64 << 20,
            merge_tolerable_count: 5,
            strict_insert: false,
            auto_merge: true,
            sync_wal: false,
        }
    }
}

impl EngineConfig {
    pub fn codec(&self) -> Result<Option<Codec>, EngineError> {
        match self.compression.as_deref() {
            None | Some("off") => Ok(None),
            Some(name) => Codec::from_name(name)
                .map(Some)
                .ok_or_else(|| EngineError::Config(format!("unknown codec {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.primary_key.is_empty() {
            return Err(EngineError::Config("primary key field must be non-empty".into()));
        }
        if self.partitions == 0 {
            return Err(EngineError::Config("at least one partition is required".into()));
        }
        if self.page_size == 0 || self.page_size > (1 << 30) {
            return Err(EngineError::Config("page size out of range".into()));
        }
        if self.merge_tolerable_count < 2 {
            return Err(EngineError::Config("tolerable component count must be at least 2".into()));
        }
        self.codec().map(|_| ())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Component(#[from] component::ComponentError),
    #[error("{0}")]
    Key(String),
    #[error("duplicate key {0}")]
    Duplicate(String),
    #[error("simulated crash at {0}")]
    Crashed(CrashSite),
    #[error("partition {0} crashed earlier and must be reopened")]
    Poisoned(usize),
    #[error("configuration: {0}")]
    Config(String),
    #[error("bulk load needs an empty dataset")]
    NotEmpty,
}

impl From<wal::WalError> for EngineError {
    fn from(e: wal::WalError) -> Self {
        match e {
            wal::WalError::Io(e) => EngineError::Io(e),
            wal::WalError::Crash(site) => EngineError::Crashed(site),
        }
    }
}
