//! Storage-size comparison of the same live records under four encodings:
//! uncompacted vector-based records with inline field names ("open"),
//! compacted records against an inferred schema ("inferred"), and each of
//! those packed into LZ4-compressed pages.
//!
//! The "open" encoding is an in-crate stand-in for a self-describing
//! format; it is not a byte-for-byte model of any other system.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::compression::{Codec, LAF_ENTRY_LEN};
use crate::doc::Doc;
use crate::lsm::{Dataset, EngineError, Key, SourceId};
use crate::record::{compact, decode, encode, DeclaredFields, RecordError, VbRecord};
use crate::schema::{SchemaError, SchemaStore};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Sizes {
    pub open: u64,
    pub inferred: u64,
    pub open_compressed: u64,
    pub inferred_compressed: u64,
}

impl Sizes {
    fn add(&mut self, other: &Sizes) {
        self.open += other.open;
        self.inferred += other.inferred;
        self.open_compressed += other.open_compressed;
        self.inferred_compressed += other.inferred_compressed;
    }

    /// `open / inferred`, or 0 when nothing is stored.
    pub fn ratio(&self) -> f64 {
        if self.inferred == 0 {
            0.0
        } else {
            self.open as f64 / self.inferred as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceReport {
    pub partition: usize,
    /// `"memtable"` or the component file name.
    pub source: String,
    pub records: u64,
    pub disk_bytes: u64,
    pub sizes: Sizes,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageReport {
    pub records: u64,
    pub disk_bytes: u64,
    pub schema_nodes: usize,
    pub dictionary_len: usize,
    pub sources: Vec<SourceReport>,
    pub total: Sizes,
}

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// Both encodings of one partition's live records.
pub struct Encoded {
    pub schema: SchemaStore,
    pub open: Vec<(Key, VbRecord)>,
    pub inferred: Vec<(Key, VbRecord)>,
}

/// Re-encodes `docs` uncompacted, infers one schema over them, and
/// compacts each record against it.
pub fn encode_both(docs: &[(Key, Doc)], declared: &DeclaredFields) -> Result<Encoded, StatsError> {
    let mut schema = SchemaStore::new();
    let mut open = Vec::with_capacity(docs.len());
    for (key, doc) in docs {
        let rec = encode(doc, declared)?;
        schema.infer(&rec, declared)?;
        open.push((key.clone(), rec));
    }
    let inferred = open
        .iter()
        .map(|(k, r)| Ok((k.clone(), compact(r, &schema)?)))
        .collect::<Result<Vec<_>, StatsError>>()?;
    Ok(Encoded { schema, open, inferred })
}

/// Bytes taken by `records` framed as component entries and cut into
/// `page_size` pages, each LZ4-compressed (or kept raw when that does not
/// help), plus one LAF entry per page.
pub fn compressed_size<'a>(records: impl IntoIterator<Item = (&'a Key, &'a VbRecord)>, page_size: usize) -> u64 {
    let mut buf = Vec::new();
    for (key, rec) in records {
        buf.extend_from_slice(&((key.as_bytes().len() + rec.len() + 3) as u32).to_le_bytes());
        buf.extend_from_slice(&(key.as_bytes().len() as u16).to_le_bytes());
        buf.extend_from_slice(key.as_bytes());
        buf.push(1);
        buf.extend_from_slice(rec.as_bytes());
    }
    buf.chunks(page_size)
        .map(|page| Codec::Lz4.compress(page).len().min(page.len()) as u64 + LAF_ENTRY_LEN as u64)
        .sum()
}

fn sizes(open: &[&(Key, VbRecord)], inferred: &[&(Key, VbRecord)], page_size: usize) -> Sizes {
    Sizes {
        open: open.iter().map(|(_, r)| r.len() as u64).sum(),
        inferred: inferred.iter().map(|(_, r)| r.len() as u64).sum(),
        open_compressed: compressed_size(open.iter().map(|(k, r)| (k, r)), page_size),
        inferred_compressed: compressed_size(inferred.iter().map(|(k, r)| (k, r)), page_size),
    }
}

/// Storage report over every live record of `dataset`. Records are grouped
/// by the component (or memtable) currently holding their newest version.
pub fn report(dataset: &Dataset) -> Result<StorageReport, StatsError> {
    let page_size = dataset.config().page_size;
    let mut sources = Vec::new();
    let mut total = Sizes::default();
    let mut records = 0;
    let mut disk_bytes = 0;
    let mut schema_nodes = 0;
    let mut dictionary_len = 0;
    for snap in dataset.snapshot() {
        let live = snap.live();
        let by_source: Vec<SourceId> = live.iter().map(|r| r.source).collect();
        let docs = snap.decode_all()?;
        let enc = encode_both(&docs, &snap.declared)?;
        schema_nodes += enc.schema.node_count();
        dictionary_len += enc.schema.dictionary().len();
        let mut groups: BTreeMap<SourceId, Vec<usize>> = BTreeMap::new();
        for (i, s) in by_source.iter().enumerate() {
            groups.entry(*s).or_default().push(i);
        }
        for c in &snap.components {
            groups.entry(SourceId::Component(c.id())).or_default();
            disk_bytes += c.disk_bytes;
        }
        for (source, idx) in groups {
            let open: Vec<_> = idx.iter().map(|&i| &enc.open[i]).collect();
            let inferred: Vec<_> = idx.iter().map(|&i| &enc.inferred[i]).collect();
            let s = sizes(&open, &inferred, page_size);
            total.add(&s);
            let (name, disk) = match source {
                SourceId::Memtable => ("memtable".to_owned(), 0),
                SourceId::Component(id) => {
                    let c = snap.components.iter().find(|c| c.id() == id).expect("source is a snapshot component");
                    (id.file_name(), c.disk_bytes)
                }
            };
            records += idx.len() as u64;
            sources.push(SourceReport {
                partition: snap.partition,
                source: name,
                records: idx.len() as u64,
                disk_bytes: disk,
                sizes: s,
            });
        }
    }
    Ok(StorageReport {
        records,
        disk_bytes,
        schema_nodes,
        dictionary_len,
        sources,
        total,
    })
}

/// Decodes both encodings back to documents, for checking that they hold
/// the same data.
pub fn decode_both(enc: &Encoded, declared: &DeclaredFields) -> Result<(Vec<Doc>, Vec<Doc>), RecordError> {
    let open = enc.open.iter().map(|(_, r)| decode(r, None, declared)).collect::<Result<_, _>>()?;
    let inferred = enc
        .inferred
        .iter()
        .map(|(_, r)| decode(r, Some(&enc.schema), declared))
        .collect::<Result<_, _>>()?;
    Ok((open, inferred))
}
