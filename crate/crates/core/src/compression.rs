//! Page-level compression: fixed-size logical pages stored as
//! variable-size extents, located through a Look-Aside File (LAF).
//!
//! LAF layout: `"CLAF"`, codec id (u8), logical page size (u32), entry
//! count (u64), then one 12-byte entry per page: extent offset (u64) and
//! extent length (u32). The top bit of the length marks a page stored raw.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};

pub const LAF_ENTRY_LEN: usize = 12;
pub const LAF_HEADER_LEN: usize = 17;
pub const DEFAULT_PAGE_SIZE: usize = 128 * 1024;
/// Size of one cacheable LAF page.
pub const LAF_PAGE_SIZE: usize = 128 * 1024;
const RAW_FLAG: u32 = 0x8000_0000;
const LAF_MAGIC: &[u8; 4] = b"CLAF";

/// Entries that fit in one LAF page of `laf_page_size` bytes.
pub fn laf_entries_per_page(laf_page_size: usize) -> usize {
    laf_page_size / LAF_ENTRY_LEN
}

#[derive(Debug, thiserror::Error)]
pub enum CompressionError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("page {got} written out of order (expected {expected})")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("page of {got} bytes, expected {expected}")]
    BadPageSize { expected: usize, got: usize },
    #[error("page {0} is beyond the end of the file")]
    NoSuchPage(u64),
    #[error("corrupt extent for page {page}: {reason}")]
    CorruptExtent { page: u64, reason: String },
    #[error("bad look-aside file: {0}")]
    BadLaf(&'static str),
    #[error("unknown codec id {0}")]
    UnknownCodec(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    Identity,
    Lz4,
}

impl Codec {
    pub fn id(self) -> u8 {
        match self {
            Codec::Identity => 0,
            Codec::Lz4 => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Codec, CompressionError> {
        match id {
            0 => Ok(Codec::Identity),
            1 => Ok(Codec::Lz4),
            other => Err(CompressionError::UnknownCodec(other)),
        }
    }

    pub fn from_name(name: &str) -> Option<Codec> {
        match name {
            "identity" | "none" => Some(Codec::Identity),
            "lz4" => Some(Codec::Lz4),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Codec::Identity => "identity",
            Codec::Lz4 => "lz4",
        }
    }

    pub fn compress(self, page: &[u8]) -> Vec<u8> {
        match self {
            Codec::Identity => page.to_vec(),
            Codec::Lz4 => lz4_flex::block::compress(page),
        }
    }

    pub fn decompress(self, extent: &[u8], page_size: usize) -> Result<Vec<u8>, String> {
        match self {
            Codec::Identity => Ok(extent.to_vec()),
            Codec::Lz4 => lz4_flex::block::decompress(extent, page_size).map_err(|e| e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LafEntry {
    pub offset: u64,
    /// Stored length, raw flag included.
    pub length: u32,
}

impl LafEntry {
    pub fn is_raw(self) -> bool {
        self.length & RAW_FLAG != 0
    }

    pub fn extent_len(self) -> u32 {
        self.length & !RAW_FLAG
    }

    fn to_bytes(self) -> [u8; LAF_ENTRY_LEN] {
        let mut out = [0u8; LAF_ENTRY_LEN];
        out[..8].copy_from_slice(&self.offset.to_le_bytes());
        out[8..].copy_from_slice(&self.length.to_le_bytes());
        out
    }

    fn from_bytes(b: &[u8]) -> LafEntry {
        LafEntry {
            offset: u64::from_le_bytes(b[..8].try_into().unwrap()),
            length: u32::from_le_bytes(b[8..12].try_into().unwrap()),
        }
    }
}

pub fn laf_path(data: &Path) -> PathBuf {
    let mut name = data.as_os_str().to_owned();
    name.push(".laf");
    PathBuf::from(name)
}

/// Append-only writer. Pages must arrive in index order.
pub struct CompressedFileWriter {
    data: BufWriter<File>,
    laf_path: PathBuf,
    codec: Codec,
    page_size: usize,
    offset: u64,
    entries: Vec<LafEntry>,
}

impl CompressedFileWriter {
    pub fn create(path: &Path, codec: Codec, page_size: usize) -> Result<Self, CompressionError> {
        let data = File::create(path)?;
        Ok(CompressedFileWriter {
            data: BufWriter::new(data),
            laf_path: laf_path(path),
            codec,
            page_size,
            offset: 0,
            entries: Vec::new(),
        })
    }

    pub fn page_count(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn write_page(&mut self, index: u64, page: &[u8]) -> Result<LafEntry, CompressionError> {
        if index != self.page_count() {
            return Err(CompressionError::OutOfOrder {
                expected: self.page_count(),
                got: index,
            });
        }
        if page.len() != self.page_size {
            return Err(CompressionError::BadPageSize {
                expected: self.page_size,
                got: page.len(),
            });
        }
        let compressed = self.codec.compress(page);
        let entry = if compressed.len() >= page.len() {
            self.data.write_all(page)?;
            LafEntry {
                offset: self.offset,
                length: page.len() as u32 | RAW_FLAG,
            }
        } else {
            self.data.write_all(&compressed)?;
            LafEntry {
                offset: self.offset,
                length: compressed.len() as u32,
            }
        };
        self.offset += entry.extent_len() as u64;
        self.entries.push(entry);
        Ok(entry)
    }

    /// Flushes and syncs both files. Returns the data file size.
    pub fn finish(mut self) -> Result<u64, CompressionError> {
        self.data.flush()?;
        self.data.get_ref().sync_all()?;
        let mut laf = Vec::with_capacity(LAF_HEADER_LEN + self.entries.len() * LAF_ENTRY_LEN);
        laf.extend_from_slice(LAF_MAGIC);
        laf.push(self.codec.id());
        laf.extend_from_slice(&(self.page_size as u32).to_le_bytes());
        laf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            laf.extend_from_slice(&e.to_bytes());
        }
        let mut f = File::create(&self.laf_path)?;
        f.write_all(&laf)?;
        f.sync_all()?;
        Ok(self.offset)
    }
}

/// Reader with a shared LAF-page cache. Safe for concurrent use.
pub struct CompressedFileReader {
    data: Mutex<File>,
    laf: Mutex<File>,
    codec: Codec,
    page_size: usize,
    page_count: u64,
    entries_per_laf_page: usize,
    laf_cache: RwLock<HashMap<u64, Vec<LafEntry>>>,
    physical_reads: AtomicU64,
}

impl CompressedFileReader {
    pub fn open(path: &Path) -> Result<Self, CompressionError> {
        Self::open_with_laf_page(path, LAF_PAGE_SIZE)
    }

    pub fn open_with_laf_page(path: &Path, laf_page_size: usize) -> Result<Self, CompressionError> {
        let data = File::open(path)?;
        let mut laf = File::open(laf_path(path))?;
        let mut header = [0u8; LAF_HEADER_LEN];
        laf.read_exact(&mut header).map_err(|_| CompressionError::BadLaf("truncated header"))?;
        if &header[..4] != LAF_MAGIC {
            return Err(CompressionError::BadLaf("bad magic"));
        }
        let codec = Codec::from_id(header[4])?;
        let page_size = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
        let page_count = u64::from_le_bytes(header[9..17].try_into().unwrap());
        let expected = LAF_HEADER_LEN as u64 + page_count * LAF_ENTRY_LEN as u64;
        if laf.metadata()?.len() != expected {
            return Err(CompressionError::BadLaf("entry count does not match file size"));
        }
        Ok(CompressedFileReader {
            data: Mutex::new(data),
            laf: Mutex::new(laf),
            codec,
            page_size,
            page_count,
            entries_per_laf_page: laf_entries_per_page(laf_page_size).max(1),
            laf_cache: RwLock::new(HashMap::new()),
            physical_reads: AtomicU64::new(0),
        })
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn page_count(&self) -> u64 {
        self.page_count
    }

    pub fn codec(&self) -> Codec {
        self.codec
    }

    /// Physical reads issued so far (LAF pages plus data extents).
    pub fn physical_reads(&self) -> u64 {
        self.physical_reads.load(Ordering::Relaxed)
    }

    pub fn entry(&self, index: u64) -> Result<LafEntry, CompressionError> {
        if index >= self.page_count {
            return Err(CompressionError::NoSuchPage(index));
        }
        let per = self.entries_per_laf_page as u64;
        let laf_page = index / per;
        let slot = (index % per) as usize;
        if let Some(entries) = self.laf_cache.read().get(&laf_page) {
            return Ok(entries[slot]);
        }
        let first = laf_page * per;
        let count = per.min(self.page_count - first) as usize;
        let mut buf = vec![0u8; count * LAF_ENTRY_LEN];
        {
            let mut laf = self.laf.lock();
            laf.seek(SeekFrom::Start(LAF_HEADER_LEN as u64 + first * LAF_ENTRY_LEN as u64))?;
            laf.read_exact(&mut buf)?;
        }
        self.physical_reads.fetch_add(1, Ordering::Relaxed);
        let entries: Vec<LafEntry> = buf.chunks_exact(LAF_ENTRY_LEN).map(LafEntry::from_bytes).collect();
        let out = entries[slot];
        self.laf_cache.write().insert(laf_page, entries);
        Ok(out)
    }

    pub fn read_page(&self, index: u64) -> Result<Vec<u8>, CompressionError> {
        let entry = self.entry(index)?;
        let mut extent = vec![0u8; entry.extent_len() as usize];
        {
            let mut data = self.data.lock();
            data.seek(SeekFrom::Start(entry.offset))?;
            data.read_exact(&mut extent).map_err(|e| CompressionError::CorruptExtent {
                page: index,
                reason: e.to_string(),
            })?;
        }
        self.physical_reads.fetch_add(1, Ordering::Relaxed);
        let page = if entry.is_raw() {
            extent
        } else {
            self.codec
                .decompress(&extent, self.page_size)
                .map_err(|reason| CompressionError::CorruptExtent { page: index, reason })?
        };
        if page.len() != self.page_size {
            return Err(CompressionError::CorruptExtent {
                page: index,
                reason: format!("decompressed to {} bytes", page.len()),
            });
        }
        Ok(page)
    }

    /// Reads `len` logical bytes starting at logical `offset`.
    pub fn read_range(&self, offset: u64, len: usize) -> Result<Vec<u8>, CompressionError> {
        let mut out = Vec::with_capacity(len);
        let ps = self.page_size as u64;
        let mut pos = offset;
        while out.len() < len {
            let page = self.read_page(pos / ps)?;
            let start = (pos % ps) as usize;
            let take = (len - out.len()).min(page.len() - start);
            out.extend_from_slice(&page[start..start + take]);
            pos += take as u64;
        }
        Ok(out)
    }

    pub fn clear_cache(&self) {
        self.laf_cache.write().clear();
    }
}

/// Writes `bytes` as zero-padded logical pages. Returns the data file size.
pub fn write_compressed(path: &Path, codec: Codec, page_size: usize, bytes: &[u8]) -> Result<u64, CompressionError> {
    let mut w = CompressedFileWriter::create(path, codec, page_size)?;
    let mut page = vec![0u8; page_size];
    for (i, chunk) in bytes.chunks(page_size).enumerate() {
        page[..chunk.len()].copy_from_slice(chunk);
        page[chunk.len()..].fill(0);
        w.write_page(i as u64, &page)?;
    }
    w.finish()
}

/// Deletes a data file and its LAF sidecar, if present.
pub fn remove_with_laf(path: &Path) -> io::Result<()> {
    let laf = laf_path(path);
    if laf.exists() {
        std::fs::remove_file(laf)?;
    }
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}
