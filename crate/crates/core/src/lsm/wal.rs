//! Write-ahead log. Each record is `[u32 body_len][body][u32 crc32c(body)]`
//! with body = lsn (u64), op (u8), key length (u32), key, document JSON.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use super::fault::{CrashSite, FaultInjector};
use super::key::Key;
use crate::doc::Doc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalOp {
    Insert,
    Delete,
    Upsert,
}

impl WalOp {
    fn code(self) -> u8 {
        match self {
            WalOp::Insert => 1,
            WalOp::Delete => 2,
            WalOp::Upsert => 3,
        }
    }

    fn from_code(c: u8) -> Option<WalOp> {
        match c {
            1 => Some(WalOp::Insert),
            2 => Some(WalOp::Delete),
            3 => Some(WalOp::Upsert),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalRecord {
    pub lsn: u64,
    pub op: WalOp,
    pub key: Key,
    /// `None` for deletes.
    pub doc: Option<Doc>,
}

impl WalRecord {
    fn encode(&self) -> Vec<u8> {
        let key = self.key.as_bytes();
        let json = self.doc.as_ref().map(Doc::to_json).unwrap_or_default();
        let mut body = Vec::with_capacity(13 + key.len() + json.len());
        body.extend_from_slice(&self.lsn.to_le_bytes());
        body.push(self.op.code());
        body.extend_from_slice(&(key.len() as u32).to_le_bytes());
        body.extend_from_slice(key);
        body.extend_from_slice(json.as_bytes());
        let mut out = Vec::with_capacity(body.len() + 8);
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc32c::crc32c(&body).to_le_bytes());
        out
    }

    fn decode(body: &[u8]) -> Option<WalRecord> {
        let lsn = u64::from_le_bytes(body.get(..8)?.try_into().ok()?);
        let op = WalOp::from_code(*body.get(8)?)?;
        let klen = u32::from_le_bytes(body.get(9..13)?.try_into().ok()?) as usize;
        let key = Key::from_bytes(body.get(13..13 + klen)?)?;
        let rest = body.get(13 + klen..)?;
        let doc = match op {
            WalOp::Delete => None,
            _ => Some(Doc::from_json(std::str::from_utf8(rest).ok()?).ok()?),
        };
        Some(WalRecord { lsn, op, key, doc })
    }
}

fn segment_name(seq: u64) -> String {
    format!("wal-{seq:016x}.log")
}

fn parse_segment(name: &str) -> Option<u64> {
    let hex = name.strip_prefix("wal-")?.strip_suffix(".log")?;
    u64::from_str_radix(hex, 16).ok()
}

/// Segment sequence numbers present in `dir`, ascending.
pub fn segments(dir: &Path) -> io::Result<Vec<u64>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        if let Some(seq) = entry?.file_name().to_str().and_then(parse_segment) {
            out.push(seq);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Reads the valid prefix of every segment, truncating a torn tail so later
/// appends never follow garbage.
pub fn replay(dir: &Path) -> io::Result<Vec<WalRecord>> {
    let mut out = Vec::new();
    for seq in segments(dir)? {
        let path = dir.join(segment_name(seq));
        let mut bytes = Vec::new();
        File::open(&path)?.read_to_end(&mut bytes)?;
        let mut pos = 0;
        while let Some(len) = bytes.get(pos..pos + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize) {
            let Some(body) = bytes.get(pos + 4..pos + 4 + len) else { break };
            let Some(crc) = bytes.get(pos + 4 + len..pos + 8 + len) else { break };
            if crc32c::crc32c(body).to_le_bytes() != crc {
                break;
            }
            let Some(rec) = WalRecord::decode(body) else { break };
            out.push(rec);
            pos += len + 8;
        }
        if pos < bytes.len() {
            let f = OpenOptions::new().write(true).open(&path)?;
            f.set_len(pos as u64)?;
            f.sync_all()?;
        }
    }
    Ok(out)
}

pub struct Wal {
    dir: PathBuf,
    seq: u64,
    file: File,
    sync: bool,
}

impl Wal {
    /// Starts a fresh segment after any existing ones.
    pub fn open(dir: &Path, sync: bool) -> io::Result<Wal> {
        let seq = segments(dir)?.last().map_or(0, |s| s + 1);
        let file = OpenOptions::new().create(true).append(true).open(dir.join(segment_name(seq)))?;
        Ok(Wal {
            dir: dir.to_owned(),
            seq,
            file,
            sync,
        })
    }

    /// Appends one record. It has reached the operating system when this
    /// returns, and stable storage too when `sync` is set.
    pub fn append(&mut self, rec: &WalRecord, fault: &FaultInjector) -> Result<(), WalError> {
        let bytes = rec.encode();
        if let Err(site) = fault.check(CrashSite::WalTornWrite) {
            self.file.write_all(&bytes[..bytes.len() / 2])?;
            return Err(WalError::Crash(site));
        }
        self.file.write_all(&bytes)?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    /// Drops every segment: their records are all covered by a valid
    /// component. Appends continue in a new segment.
    pub fn truncate(&mut self) -> io::Result<()> {
        let old = segments(&self.dir)?;
        self.seq += 1;
        self.file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join(segment_name(self.seq)))?;
        for seq in old {
            fs::remove_file(self.dir.join(segment_name(seq)))?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WalError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("simulated crash at {0}")]
    Crash(CrashSite),
}
