use std::fmt;

use crate::doc::Doc;

const INT_PREFIX: u8 = 0x01;
const STR_PREFIX: u8 = 0x02;

/// An order-preserving encoded primary key. Integers sort before strings;
/// integers sort numerically, strings bytewise.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key(Vec<u8>);

impl Key {
    pub fn int(v: i64) -> Key {
        let mut out = Vec::with_capacity(9);
        out.push(INT_PREFIX);
        out.extend_from_slice(&((v as u64) ^ (1 << 63)).to_be_bytes());
        Key(out)
    }

    pub fn string(s: &str) -> Key {
        let mut out = Vec::with_capacity(1 + s.len());
        out.push(STR_PREFIX);
        out.extend_from_slice(s.as_bytes());
        Key(out)
    }

    /// Keys are integers or strings; anything else is rejected.
    pub fn from_doc(doc: &Doc) -> Option<Key> {
        match doc {
            Doc::Int(v) => Some(Key::int(*v)),
            Doc::String(s) => Some(Key::string(s)),
            _ => None,
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Key> {
        let key = Key(bytes.to_vec());
        key.decode()?;
        Some(key)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_doc(&self) -> Doc {
        self.decode().expect("keys are validated on construction")
    }

    fn decode(&self) -> Option<Doc> {
        let (&prefix, rest) = self.0.split_first()?;
        match prefix {
            INT_PREFIX => {
                let raw = u64::from_be_bytes(rest.try_into().ok()?);
                Some(Doc::Int((raw ^ (1 << 63)) as i64))
            }
            STR_PREFIX => Some(Doc::String(std::str::from_utf8(rest).ok()?.to_owned())),
            _ => None,
        }
    }

    /// Partition owning this key among `partitions`.
    pub fn partition(&self, partitions: usize) -> usize {
        (xxhash_rust::xxh3::xxh3_64(&self.0) % partitions as u64) as usize
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Key({})", self.to_doc())
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_doc())
    }
}
