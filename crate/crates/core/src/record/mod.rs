//! The vector-based physical record format.
//!
//! A record is a fixed header followed by separate vectors for value type
//! tags, fixed-length scalars, variable-length values and field names. The
//! tag vector is a depth-first encoding of the document tree, closed by a
//! single EOV tag that also ends the root value; the other
//! vectors are consumed in tag order.
//!
//! Physical layout (all integers little-endian):
//!
//! ```text
//! 0   u32 total_length
//! 4   u32 tag_count                    (includes the EOV tag)
//! 8   u32 offset_tags
//! 12  u32 offset_fixed
//! 16  u32 offset_var                   (variable-length values)
//! 20  u32 offset_fieldname_entries
//! 24  u32 offset_fieldnames            (field-name bytes; 0 once compacted)
//! 28  u8  var_len_bits
//! 29  u8  fieldname_len_bits
//! 30  tags, one byte each
//!     variable-length lengths, bit-packed, padded to a byte
//!     fixed-length values
//!     variable-length values
//!     field-name entries, bit-packed, padded to a byte
//!     field-name values (uncompacted records only)
//! ```
//!
//! Every region starts at an anchor the header names (the variable-length
//! lengths start right after the tags), so a reader walks all vectors in a
//! single pass over the tags.

mod access;
mod bits;
mod codec;
mod cursor;
mod validate;

use std::cell::Cell;
use std::fmt;

pub use access::{get_values, project};
pub use codec::{compact, decode, encode};
pub(crate) use codec::name_str;
pub(crate) use cursor::{Cursor, Event, FieldRef, Nest, Scalar};
pub use validate::{validate, Violation};

pub const HEADER_LEN: usize = 30;

/// Longest accepted field name in bytes. One bit of each 16-bit field-name
/// entry is the declared-field flag.
pub const MAX_FIELD_NAME_LEN: usize = (1 << 15) - 1;

pub(crate) const FIELDNAME_PAYLOAD_CAP: u8 = 15;
pub(crate) const VAR_LEN_CAP: u8 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum TypeTag {
    Object = 1,
    Array = 2,
    String = 3,
    Int64 = 4,
    Double = 5,
    Boolean = 6,
    Null = 7,
    CloseNest = 8,
    Eov = 9,
}

impl TypeTag {
    pub fn from_byte(b: u8) -> Option<TypeTag> {
        Some(match b {
            1 => TypeTag::Object,
            2 => TypeTag::Array,
            3 => TypeTag::String,
            4 => TypeTag::Int64,
            5 => TypeTag::Double,
            6 => TypeTag::Boolean,
            7 => TypeTag::Null,
            8 => TypeTag::CloseNest,
            9 => TypeTag::Eov,
            _ => return None,
        })
    }

    /// Bytes occupied in the fixed-length vector.
    pub fn fixed_size(self) -> usize {
        match self {
            TypeTag::Int64 | TypeTag::Double => 8,
            TypeTag::Boolean => 1,
            _ => 0,
        }
    }

    pub fn is_nest(self) -> bool {
        matches!(self, TypeTag::Object | TypeTag::Array)
    }

    pub fn is_control(self) -> bool {
        matches!(self, TypeTag::CloseNest | TypeTag::Eov)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub total_length: u32,
    pub tag_count: u32,
    pub offset_tags: u32,
    pub offset_fixed: u32,
    pub offset_var: u32,
    pub offset_fieldname_entries: u32,
    pub offset_fieldnames: u32,
    pub var_len_bits: u8,
    pub fieldname_len_bits: u8,
}

impl Header {
    pub fn parse(bytes: &[u8]) -> Option<Header> {
        if bytes.len() < HEADER_LEN {
            return None;
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        Some(Header {
            total_length: u32_at(0),
            tag_count: u32_at(4),
            offset_tags: u32_at(8),
            offset_fixed: u32_at(12),
            offset_var: u32_at(16),
            offset_fieldname_entries: u32_at(20),
            offset_fieldnames: u32_at(24),
            var_len_bits: bytes[28],
            fieldname_len_bits: bytes[29],
        })
    }

    pub(crate) fn write(&self, out: &mut Vec<u8>) {
        for v in [
            self.total_length,
            self.tag_count,
            self.offset_tags,
            self.offset_fixed,
            self.offset_var,
            self.offset_fieldname_entries,
            self.offset_fieldnames,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.var_len_bits);
        out.push(self.fieldname_len_bits);
    }

    pub fn is_compacted(&self) -> bool {
        self.offset_fieldnames == 0
    }

    pub(crate) fn tags_end(&self) -> usize {
        self.offset_tags as usize + self.tag_count as usize
    }

    /// End of the field-name entries sub-vector.
    pub(crate) fn entries_end(&self) -> usize {
        if self.is_compacted() {
            self.total_length as usize
        } else {
            self.offset_fieldnames as usize
        }
    }
}

/// A record in the vector-based format. Always holds the complete byte image.
#[derive(Clone, PartialEq, Eq)]
pub struct VbRecord {
    bytes: Vec<u8>,
}

impl VbRecord {
    /// Wraps bytes after checking every format invariant.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<VbRecord, Violation> {
        validate(&bytes)?;
        Ok(VbRecord { bytes })
    }

    /// Wraps bytes that are known to be well formed (e.g. read back from a
    /// checksummed component). Readers still bounds-check every access.
    pub fn from_bytes_unchecked(bytes: Vec<u8>) -> VbRecord {
        VbRecord { bytes }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn header(&self) -> Option<Header> {
        Header::parse(&self.bytes)
    }

    pub fn is_compacted(&self) -> bool {
        self.header().is_some_and(|h| h.is_compacted())
    }

    /// The tag vector, excluding nothing (EOV included).
    pub fn tags(&self) -> Vec<TypeTag> {
        let Some(h) = self.header() else {
            return Vec::new();
        };
        self.bytes
            .get(h.offset_tags as usize..h.tags_end())
            .unwrap_or_default()
            .iter()
            .filter_map(|&b| TypeTag::from_byte(b))
            .collect()
    }

    /// Byte size of the field-name section: packed entries plus, for
    /// uncompacted records, the name bytes.
    pub fn fieldname_section_len(&self) -> usize {
        self.header()
            .map(|h| h.total_length as usize - h.offset_fieldname_entries as usize)
            .unwrap_or(0)
    }

    pub(crate) fn region(&self, start: usize, end: usize) -> &[u8] {
        self.bytes.get(start..end).unwrap_or_default()
    }
}

impl fmt::Debug for VbRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VbRecord")
            .field("len", &self.bytes.len())
            .field("compacted", &self.is_compacted())
            .finish()
    }
}

/// Root-level field names declared with the dataset, addressed by index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeclaredFields {
    names: Vec<String>,
}

impl DeclaredFields {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        DeclaredFields {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    pub fn none() -> Self {
        DeclaredFields::default()
    }

    pub fn index_of(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32)
    }

    pub fn name(&self, index: u32) -> Option<&str> {
        self.names.get(index as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RecordError {
    #[error("record root must be an object, found {0}")]
    NonObjectRoot(&'static str),
    #[error("field name of {0} bytes exceeds the {MAX_FIELD_NAME_LEN}-byte limit")]
    FieldNameTooLong(usize),
    #[error("string value of {0} bytes is too long")]
    StringTooLong(usize),
    #[error("duplicate field {0:?} in one object")]
    DuplicateField(String),
    #[error("record is already compacted")]
    AlreadyCompacted,
    #[error("compacted record needs a schema to resolve field names")]
    MissingSchema,
    #[error("FieldNameID {0} is not in the dictionary")]
    UnknownFieldNameId(u32),
    #[error("field name {0:?} is not in the dictionary")]
    UnknownFieldName(String),
    #[error("declared field index {0} is not defined")]
    UnknownDeclaredIndex(u32),
    #[error("malformed record at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: &'static str },
}

thread_local! {
    static TAG_SCANS: Cell<u64> = const { Cell::new(0) };
}

/// Number of tag-vector scans started on the current thread. Every decode,
/// inference, compaction and `get_values` call performs exactly one.
pub fn tag_scans() -> u64 {
    TAG_SCANS.with(Cell::get)
}

pub(crate) fn note_tag_scan() {
    TAG_SCANS.with(|c| c.set(c.get() + 1));
}
