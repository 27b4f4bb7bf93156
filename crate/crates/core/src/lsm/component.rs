//! Immutable on-disk components.
//!
//! File layout: the entries region (raw, or as compressed page extents
//! located by a `.laf` sidecar), then the metadata page, then an 8-byte
//! footer holding the metadata length and `"CMET"`.
//!
//! Entry: `[u32 len][u16 key_len][key][kind u8][record bytes]`, where `len`
//! counts everything after itself; kind 1 is a record, 2 a tombstone.
//!
//! Metadata page: `"CMET"`, validity byte (0x00 invalid, 0xFF valid),
//! flags, codec id, page size (u32), id lo/hi (u64), max LSN (u64), record
//! and tombstone counts (u64), logical entries length (u64), min and max
//! key (u32-length-prefixed), schema blob (u32-length-prefixed) and a
//! CRC32C of the page computed with the validity byte as zero.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::key::Key;
use crate::compression::{self, Codec, CompressedFileReader, CompressedFileWriter};
use crate::record::VbRecord;
use crate::schema::SchemaStore;

const META_MAGIC: &[u8; 4] = b"CMET";
const FOOTER_LEN: usize = 8;
const VALID: u8 = 0xFF;
const INVALID: u8 = 0x00;
const KIND_RECORD: u8 = 1;
const KIND_TOMBSTONE: u8 = 2;
const FLAG_COMPRESSED: u8 = 1;
const FLAG_SCHEMA: u8 = 2;

/// Flush-sequence range covered by a component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComponentId {
    pub lo: u64,
    pub hi: u64,
}

impl ComponentId {
    pub fn flushed(seq: u64) -> Self {
        ComponentId { lo: seq, hi: seq }
    }

    pub fn contains(&self, other: &ComponentId) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn file_name(&self) -> String {
        format!("c-{:016x}-{:016x}.cmp", self.lo, self.hi)
    }

    pub fn parse_file_name(name: &str) -> Option<ComponentId> {
        let rest = name.strip_prefix("c-")?.strip_suffix(".cmp")?;
        let (lo, hi) = rest.split_once('-')?;
        Some(ComponentId {
            lo: u64::from_str_radix(lo, 16).ok()?,
            hi: u64::from_str_radix(hi, 16).ok()?,
        })
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMeta {
    pub id: ComponentId,
    pub max_lsn: u64,
    pub records: u64,
    pub tombstones: u64,
    pub entries_len: u64,
    pub codec: Option<Codec>,
    pub page_size: u32,
    pub min_key: Option<Key>,
    pub max_key: Option<Key>,
}

/// A sorted entry; `None` is a tombstone.
pub type Entry = (Key, Option<VbRecord>);

#[derive(Debug, thiserror::Error)]
pub enum ComponentError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Compression(#[from] compression::CompressionError),
    #[error("component {id} is marked valid but corrupt: {reason}")]
    Corrupt { id: ComponentId, reason: String },
}

/// How a component file was found on disk.
pub enum Opened {
    Valid(Component),
    /// Validity bit unset or file incomplete.
    Invalid,
}

pub struct Component {
    pub meta: ComponentMeta,
    pub path: PathBuf,
    /// Bytes on disk, sidecar included.
    pub disk_bytes: u64,
    /// Snapshot persisted with the component; `None` when the compactor is
    /// disabled.
    pub schema: Option<Arc<SchemaStore>>,
    entries: Vec<Entry>,
}

impl fmt::Debug for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Component")
            .field("id", &self.meta.id)
            .field("entries", &self.entries.len())
            .field("disk_bytes", &self.disk_bytes)
            .finish()
    }
}

impl Component {
    pub fn id(&self) -> ComponentId {
        self.meta.id
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, key: &Key) -> Option<&Option<VbRecord>> {
        if self.meta.min_key.as_ref().is_some_and(|m| key < m) || self.meta.max_key.as_ref().is_some_and(|m| key > m) {
            return None;
        }
        self.entries
            .binary_search_by(|(k, _)| k.cmp(key))
            .ok()
            .map(|i| &self.entries[i].1)
    }
}

pub struct WriteSpec<'a> {
    pub dir: &'a Path,
    pub id: ComponentId,
    pub max_lsn: u64,
    pub schema: Option<&'a SchemaStore>,
    pub codec: Option<Codec>,
    pub page_size: usize,
}

fn encode_entries(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    for (key, rec) in entries {
        let k = key.as_bytes();
        let body = rec.as_ref().map_or(&[][..], VbRecord::as_bytes);
        out.extend_from_slice(&((2 + k.len() + 1 + body.len()) as u32).to_le_bytes());
        out.extend_from_slice(&(k.len() as u16).to_le_bytes());
        out.extend_from_slice(k);
        out.push(if rec.is_some() { KIND_RECORD } else { KIND_TOMBSTONE });
        out.extend_from_slice(body);
    }
    out
}

fn decode_entries(bytes: &[u8]) -> Result<Vec<Entry>, String> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let len = bytes
            .get(pos..pos + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or("truncated entry length")?;
        let entry = bytes.get(pos + 4..pos + 4 + len).ok_or("truncated entry")?;
        let klen = u16::from_le_bytes(entry.get(..2).ok_or("short entry")?.try_into().unwrap()) as usize;
        let key = Key::from_bytes(entry.get(2..2 + klen).ok_or("short key")?).ok_or("bad key")?;
        let kind = *entry.get(2 + klen).ok_or("missing kind")?;
        let body = &entry[3 + klen..];
        let rec = match kind {
            KIND_RECORD => Some(VbRecord::from_bytes_unchecked(body.to_vec())),
            KIND_TOMBSTONE => None,
            _ => return Err("bad entry kind".into()),
        };
        if out.last().is_some_and(|(prev, _): &Entry| prev >= &key) {
            return Err("entries out of order".into());
        }
        out.push((key, rec));
        pos += 4 + len;
    }
    Ok(out)
}

fn encode_meta(meta: &ComponentMeta, schema: Option<&[u8]>) -> Vec<u8> {
    let mut m = Vec::new();
    m.extend_from_slice(META_MAGIC);
    m.push(INVALID);
    let mut flags = 0;
    if meta.codec.is_some() {
        flags |= FLAG_COMPRESSED;
    }
    if schema.is_some() {
        flags |= FLAG_SCHEMA;
    }
    m.push(flags);
    m.push(meta.codec.map_or(0, Codec::id));
    m.extend_from_slice(&meta.page_size.to_le_bytes());
    for v in [meta.id.lo, meta.id.hi, meta.max_lsn, meta.records, meta.tombstones, meta.entries_len] {
        m.extend_from_slice(&v.to_le_bytes());
    }
    for key in [&meta.min_key, &meta.max_key] {
        let k = key.as_ref().map_or(&[][..], Key::as_bytes);
        m.extend_from_slice(&(k.len() as u32).to_le_bytes());
        m.extend_from_slice(k);
    }
    let blob = schema.unwrap_or_default();
    m.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    m.extend_from_slice(blob);
    let crc = crc32c::crc32c(&m);
    m.extend_from_slice(&crc.to_le_bytes());
    m
}

struct MetaReader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> MetaReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let out = self.b.get(self.pos..self.pos + n).ok_or("metadata truncated")?;
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn key(&mut self) -> Result<Option<Key>, String> {
        let len = self.u32()? as usize;
        if len == 0 {
            return Ok(None);
        }
        Key::from_bytes(self.take(len)?).map(Some).ok_or_else(|| "bad key".into())
    }
}

fn decode_meta(m: &[u8]) -> Result<(ComponentMeta, Option<SchemaStore>), String> {
    if m.len() < 9 {
        return Err("metadata truncated".into());
    }
    let (body, crc) = m.split_at(m.len() - 4);
    let mut check = body.to_vec();
    check[4] = INVALID;
    if crc32c::crc32c(&check).to_le_bytes() != crc {
        return Err("metadata checksum mismatch".into());
    }
    let mut r = MetaReader { b: body, pos: 6 };
    let flags = body[5];
    let codec_id = r.take(1)?[0];
    let page_size = r.u32()?;
    let lo = r.u64()?;
    let hi = r.u64()?;
    let meta = ComponentMeta {
        id: ComponentId { lo, hi },
        max_lsn: r.u64()?,
        records: r.u64()?,
        tombstones: r.u64()?,
        entries_len: r.u64()?,
        codec: if flags & FLAG_COMPRESSED != 0 {
            Some(Codec::from_id(codec_id).map_err(|e| e.to_string())?)
        } else {
            None
        },
        page_size,
        min_key: r.key()?,
        max_key: r.key()?,
    };
    let blob_len = r.u32()? as usize;
    let blob = r.take(blob_len)?;
    let schema = if flags & FLAG_SCHEMA != 0 {
        Some(SchemaStore::deserialize(blob).map_err(|e| e.to_string())?)
    } else {
        None
    };
    if r.pos != body.len() {
        return Err("trailing metadata bytes".into());
    }
    Ok((meta, schema))
}

/// Writes a component with its validity bit unset. Call
/// [`mark_valid`] once the caller is ready to publish it.
pub fn write(spec: &WriteSpec<'_>, entries: Vec<Entry>) -> Result<Component, ComponentError> {
    let path = spec.dir.join(spec.id.file_name());
    let region = encode_entries(&entries);
    let meta = ComponentMeta {
        id: spec.id,
        max_lsn: spec.max_lsn,
        records: entries.iter().filter(|e| e.1.is_some()).count() as u64,
        tombstones: entries.iter().filter(|e| e.1.is_none()).count() as u64,
        entries_len: region.len() as u64,
        codec: spec.codec,
        page_size: spec.page_size as u32,
        min_key: entries.first().map(|e| e.0.clone()),
        max_key: entries.last().map(|e| e.0.clone()),
    };
    let blob = spec.schema.map(SchemaStore::serialize);
    let meta_bytes = encode_meta(&meta, blob.as_deref());

    let mut file = match spec.codec {
        Some(codec) => {
            let mut w = CompressedFileWriter::create(&path, codec, spec.page_size)?;
            let mut page = vec![0u8; spec.page_size];
            for (i, chunk) in region.chunks(spec.page_size).enumerate() {
                page[..chunk.len()].copy_from_slice(chunk);
                page[chunk.len()..].fill(0);
                w.write_page(i as u64, &page)?;
            }
            w.finish()?;
            OpenOptions::new().append(true).open(&path)?
        }
        None => {
            let mut f = File::create(&path)?;
            f.write_all(&region)?;
            f
        }
    };
    file.write_all(&meta_bytes)?;
    file.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    file.write_all(META_MAGIC)?;
    file.sync_all()?;
    sync_dir(spec.dir)?;
    let disk_bytes = disk_size(&path)?;
    Ok(Component {
        meta,
        path,
        disk_bytes,
        schema: spec.schema.map(|s| Arc::new(s.clone())),
        entries,
    })
}

/// Sets the validity byte and forces it to storage.
pub fn mark_valid(c: &Component) -> Result<(), ComponentError> {
    let mut f = OpenOptions::new().read(true).write(true).open(&c.path)?;
    let len = f.seek(SeekFrom::End(0))?;
    let meta_len = footer_meta_len(&mut f, len)?.ok_or_else(|| ComponentError::Corrupt {
        id: c.meta.id,
        reason: "footer missing".into(),
    })?;
    f.seek(SeekFrom::Start(len - FOOTER_LEN as u64 - meta_len + 4))?;
    f.write_all(&[VALID])?;
    f.sync_all()?;
    Ok(())
}

fn footer_meta_len(f: &mut File, len: u64) -> io::Result<Option<u64>> {
    if len < FOOTER_LEN as u64 {
        return Ok(None);
    }
    let mut footer = [0u8; FOOTER_LEN];
    f.seek(SeekFrom::Start(len - FOOTER_LEN as u64))?;
    f.read_exact(&mut footer)?;
    if &footer[4..] != META_MAGIC {
        return Ok(None);
    }
    let meta_len = u32::from_le_bytes(footer[..4].try_into().unwrap()) as u64;
    Ok((meta_len + FOOTER_LEN as u64 <= len).then_some(meta_len))
}

pub fn open(path: &Path) -> Result<Opened, ComponentError> {
    let mut f = File::open(path)?;
    let len = f.seek(SeekFrom::End(0))?;
    let Some(meta_len) = footer_meta_len(&mut f, len)? else {
        return Ok(Opened::Invalid);
    };
    let meta_start = len - FOOTER_LEN as u64 - meta_len;
    let mut m = vec![0u8; meta_len as usize];
    f.seek(SeekFrom::Start(meta_start))?;
    f.read_exact(&mut m)?;
    if m.len() < 5 || &m[..4] != META_MAGIC || m[4] == INVALID {
        return Ok(Opened::Invalid);
    }
    let name_id = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(ComponentId::parse_file_name)
        .unwrap_or(ComponentId { lo: 0, hi: 0 });
    let corrupt = |reason: String| ComponentError::Corrupt { id: name_id, reason };
    if m[4] != VALID {
        return Err(corrupt("validity byte is neither set nor clear".into()));
    }
    let (meta, schema) = decode_meta(&m).map_err(corrupt)?;
    if meta.id != name_id {
        return Err(corrupt("file name and metadata disagree on the id".into()));
    }
    let region = match meta.codec {
        Some(_) => {
            let reader = CompressedFileReader::open(path)?;
            reader.read_range(0, meta.entries_len as usize)?
        }
        None => {
            if meta.entries_len != meta_start {
                return Err(corrupt("entries length does not match the file".into()));
            }
            let mut region = vec![0u8; meta.entries_len as usize];
            f.seek(SeekFrom::Start(0))?;
            f.read_exact(&mut region)?;
            region
        }
    };
    let entries = decode_entries(&region).map_err(corrupt)?;
    let records = entries.iter().filter(|e| e.1.is_some()).count() as u64;
    if records != meta.records || entries.len() as u64 != meta.records + meta.tombstones {
        return Err(corrupt("entry counts do not match the metadata".into()));
    }
    Ok(Opened::Valid(Component {
        disk_bytes: disk_size(path)?,
        path: path.to_owned(),
        schema: schema.map(Arc::new),
        meta,
        entries,
    }))
}

fn disk_size(path: &Path) -> io::Result<u64> {
    let laf = compression::laf_path(path);
    let extra = if laf.exists() { fs::metadata(&laf)?.len() } else { 0 };
    Ok(fs::metadata(path)?.len() + extra)
}

pub fn remove(path: &Path) -> io::Result<()> {
    compression::remove_with_laf(path)
}

pub fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{encode, DeclaredFields};
    use crate::Doc;

    fn entries() -> Vec<Entry> {
        (0..50)
            .map(|i| {
                let rec = (i % 7 != 0).then(|| {
                    let doc = Doc::from_json(&format!(r#"{{"id":{i},"s":"{}"}}"#, "v".repeat(i as usize))).unwrap();
                    encode(&doc, &DeclaredFields::new(["id"])).unwrap()
                });
                (Key::int(i), rec)
            })
            .collect()
    }

    #[test]
    fn roundtrip_and_validity() {
        for codec in [None, Some(Codec::Lz4)] {
            let dir = tempfile::tempdir().unwrap();
            let spec = WriteSpec {
                dir: dir.path(),
                id: ComponentId { lo: 3, hi: 5 },
                max_lsn: 77,
                schema: Some(&SchemaStore::new()),
                codec,
                page_size: 512,
            };
            let c = write(&spec, entries()).unwrap();
            assert!(matches!(open(&c.path).unwrap(), Opened::Invalid));
            mark_valid(&c).unwrap();
            let Opened::Valid(back) = open(&c.path).unwrap() else { panic!("not valid") };
            assert_eq!(back.meta, c.meta);
            assert_eq!(back.entries(), &entries()[..]);
            assert!(back.get(&Key::int(7)).unwrap().is_none());
            assert!(back.get(&Key::int(8)).unwrap().is_some());
            assert!(back.get(&Key::int(80)).is_none());
        }
    }

    #[test]
    fn corrupt_valid_component_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let spec = WriteSpec {
            dir: dir.path(),
            id: ComponentId::flushed(1),
            max_lsn: 1,
            schema: None,
            codec: None,
            page_size: 512,
        };
        let c = write(&spec, entries()).unwrap();
        mark_valid(&c).unwrap();
        let mut bytes = fs::read(&c.path).unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0xff;
        fs::write(&c.path, bytes).unwrap();
        assert!(matches!(open(&c.path), Err(ComponentError::Corrupt { .. })));
    }
}
