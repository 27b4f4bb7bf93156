//! LSM document storage with flush-time schema inference and compacted
//! vector-based records.

pub mod compression;
pub mod datagen;
pub mod doc;
pub mod lsm;
pub mod query;
pub mod record;
pub mod schema;
pub mod stats;

pub use doc::{navigate, Doc, PathExpr, PathStep};
pub use record::{DeclaredFields, VbRecord};
pub use schema::{AntiSchema, FieldNameId, SchemaStore};
