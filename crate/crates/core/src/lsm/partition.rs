use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::component::{self, Component, ComponentId, Entry, Opened, WriteSpec};
use super::fault::FaultInjector;
use super::key::Key;
use super::policy::pick_merge;
use super::wal::{self, Wal, WalOp, WalRecord};
use super::{EngineConfig, EngineError};
use crate::compression::Codec;
use crate::doc::Doc;
use crate::record::{compact, decode, encode, DeclaredFields, VbRecord};
use crate::schema::{AntiSchema, SchemaStore};

const ENTRY_OVERHEAD: usize = 48;

#[derive(Debug, Clone)]
struct MemEntry {
    /// `None` is anti-matter.
    rec: Option<VbRecord>,
    /// Schema of the disk-resident version this entry supersedes.
    anti: Option<AntiSchema>,
}

impl MemEntry {
    fn size(&self, key: &Key) -> usize {
        key.as_bytes().len() + self.rec.as_ref().map_or(0, VbRecord::len) + ENTRY_OVERHEAD
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PartitionStats {
    pub partition: usize,
    pub components: Vec<ComponentInfo>,
    pub memtable_entries: usize,
    pub memtable_bytes: usize,
    /// Disk lookups made to fetch an old version before an update/delete.
    pub primary_lookups: u64,
    pub flushes: u64,
    pub merges: u64,
    pub schema_nodes: usize,
    pub dictionary_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentInfo {
    pub id: ComponentId,
    pub disk_bytes: u64,
    pub records: u64,
    pub tombstones: u64,
}

pub(crate) struct Partition {
    pub id: usize,
    dir: PathBuf,
    cfg: Arc<EngineConfig>,
    codec: Option<Codec>,
    declared: DeclaredFields,
    schema: SchemaStore,
    mem: BTreeMap<Key, MemEntry>,
    mem_bytes: usize,
    mem_max_lsn: u64,
    components: Vec<Arc<Component>>,
    wal: Wal,
    next_lsn: u64,
    next_seq: u64,
    /// Keys whose newest version is a record.
    live_keys: HashSet<Key>,
    fault: Arc<FaultInjector>,
    poisoned: bool,
    primary_lookups: u64,
    flushes: u64,
    merges: u64,
}

impl Partition {
    /// Recovery is the only way to open a partition: invalid components
    /// are deleted, the schema comes from the newest valid component, and
    /// the WAL is replayed into a fresh memtable.
    pub fn open(id: usize, dir: &Path, cfg: Arc<EngineConfig>, fault: Arc<FaultInjector>) -> Result<Partition, EngineError> {
        fs::create_dir_all(dir)?;
        let mut found = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            if ComponentId::parse_file_name(name).is_some() {
                match component::open(&path)? {
                    Opened::Valid(c) => found.push(c),
                    Opened::Invalid => component::remove(&path)?,
                }
            } else if let Some(data) = name.strip_suffix(".laf") {
                if !dir.join(data).exists() {
                    fs::remove_file(&path)?;
                }
            }
        }
        found.sort_by_key(|c| (c.id().lo, std::cmp::Reverse(c.id().hi)));
        let mut components: Vec<Component> = Vec::new();
        for c in found {
            if let Some(last) = components.last() {
                if last.id().contains(&c.id()) {
                    // Input of a merge whose output is already valid.
                    component::remove(&c.path)?;
                    continue;
                }
                if c.id().lo <= last.id().hi {
                    return Err(component::ComponentError::Corrupt {
                        id: c.id(),
                        reason: format!("overlaps component {}", last.id()),
                    }
                    .into());
                }
            }
            components.push(c);
        }
        let schema = match components.last().and_then(|c| c.schema.as_ref()) {
            Some(s) if cfg.compactor => (**s).clone(),
            _ => SchemaStore::new(),
        };
        let mut live_keys = HashSet::new();
        for c in &components {
            for (k, rec) in c.entries() {
                if rec.is_some() {
                    live_keys.insert(k.clone());
                } else {
                    live_keys.remove(k);
                }
            }
        }
        let flushed_lsn = components.iter().map(|c| c.meta.max_lsn).max();
        let replay = wal::replay(dir)?;
        let wal = Wal::open(dir, cfg.sync_wal)?;
        let mut p = Partition {
            id,
            dir: dir.to_owned(),
            codec: cfg.codec()?,
            declared: DeclaredFields::new([cfg.primary_key.clone()]),
            schema,
            mem: BTreeMap::new(),
            mem_bytes: 0,
            mem_max_lsn: 0,
            next_seq: components.last().map_or(0, |c| c.id().hi + 1),
            components: components.into_iter().map(Arc::new).collect(),
            wal,
            next_lsn: flushed_lsn.map_or(0, |l| l + 1),
            live_keys,
            fault,
            poisoned: false,
            primary_lookups: 0,
            flushes: 0,
            merges: 0,
            cfg,
        };
        for rec in replay {
            p.next_lsn = p.next_lsn.max(rec.lsn + 1);
            if flushed_lsn.is_some_and(|f| rec.lsn <= f) {
                continue;
            }
            let encoded = rec.doc.as_ref().map(|d| encode(d, &p.declared)).transpose()?;
            p.apply_mem(rec.key, encoded, rec.lsn)?;
        }
        if p.mem_bytes >= p.cfg.memtable_bytes {
            p.flush()?;
        }
        Ok(p)
    }

    fn guard<T>(&mut self, r: Result<T, EngineError>) -> Result<T, EngineError> {
        if matches!(r, Err(EngineError::Crashed(_))) {
            self.poisoned = true;
        }
        r
    }

    pub fn write(&mut self, op: WalOp, key: Key, doc: Option<Doc>) -> Result<(), EngineError> {
        if self.poisoned {
            return Err(EngineError::Poisoned(self.id));
        }
        let rec = doc.as_ref().map(|d| encode(d, &self.declared)).transpose()?;
        if op == WalOp::Insert && self.cfg.strict_insert && self.exists(&key) {
            return Err(EngineError::Duplicate(key.to_string()));
        }
        let lsn = self.next_lsn;
        let logged = WalRecord { lsn, op, key, doc };
        let appended = self.wal.append(&logged, &self.fault).map_err(EngineError::from);
        self.guard(appended)?;
        self.next_lsn += 1;
        let crashed = self.fault.check(super::CrashSite::AfterWalAppend).map_err(EngineError::Crashed);
        self.guard(crashed)?;
        self.apply_mem(logged.key, rec, lsn)?;
        if self.mem_bytes >= self.cfg.memtable_bytes {
            self.flush()?;
        }
        Ok(())
    }

    fn exists(&self, key: &Key) -> bool {
        match self.mem.get(key) {
            Some(e) => e.rec.is_some(),
            None => self.live_keys.contains(key),
        }
    }

    fn apply_mem(&mut self, key: Key, rec: Option<VbRecord>, lsn: u64) -> Result<(), EngineError> {
        let anti = match self.mem.remove(&key) {
            Some(old) => {
                self.mem_bytes -= old.size(&key);
                old.anti
            }
            // The key-existence probe: only keys that may be live on disk
            // pay for a lookup.
            None if self.live_keys.contains(&key) => {
                self.primary_lookups += 1;
                match self.lookup_disk(&key) {
                    Some((old, _)) if self.cfg.compactor => Some(self.schema.extract_anti_schema(old, &self.declared)?),
                    _ => None,
                }
            }
            None => None,
        };
        if rec.is_some() {
            self.live_keys.insert(key.clone());
        } else {
            self.live_keys.remove(&key);
        }
        let entry = MemEntry { rec, anti };
        self.mem_bytes += entry.size(&key);
        self.mem_max_lsn = self.mem_max_lsn.max(lsn);
        self.mem.insert(key, entry);
        Ok(())
    }

    fn lookup_disk(&self, key: &Key) -> Option<(&VbRecord, Option<&Arc<SchemaStore>>)> {
        for c in self.components.iter().rev() {
            if let Some(found) = c.get(key) {
                return found.as_ref().map(|r| (r, c.schema.as_ref()));
            }
        }
        None
    }

    pub fn get(&self, key: &Key) -> Result<Option<Doc>, EngineError> {
        let (rec, schema) = match self.mem.get(key) {
            Some(e) => match &e.rec {
                Some(r) => (r, None),
                None => return Ok(None),
            },
            None => match self.lookup_disk(key) {
                Some(found) => found,
                None => return Ok(None),
            },
        };
        Ok(Some(decode(rec, schema.map(|s| &**s), &self.declared)?))
    }

    pub fn flush(&mut self) -> Result<(), EngineError> {
        if self.poisoned {
            return Err(EngineError::Poisoned(self.id));
        }
        if self.mem.is_empty() {
            return Ok(());
        }
        let r = self.flush_inner();
        self.guard(r)?;
        if self.cfg.auto_merge {
            self.run_policy()?;
        }
        Ok(())
    }

    fn flush_inner(&mut self) -> Result<(), EngineError> {
        let mut schema = self.schema.clone();
        let mut entries: Vec<Entry> = Vec::with_capacity(self.mem.len());
        for (key, e) in &self.mem {
            if let Some(anti) = &e.anti {
                schema.apply_anti_schema(anti)?;
            }
            let stored = match &e.rec {
                Some(rec) if self.cfg.compactor => {
                    schema.infer(rec, &self.declared)?;
                    Some(compact(rec, &schema)?)
                }
                other => other.clone(),
            };
            entries.push((key.clone(), stored));
        }
        let id = ComponentId::flushed(self.next_seq);
        let spec = WriteSpec {
            dir: &self.dir,
            id,
            max_lsn: self.mem_max_lsn,
            schema: self.cfg.compactor.then_some(&schema),
            codec: self.codec,
            page_size: self.cfg.page_size,
        };
        let c = component::write(&spec, entries)?;
        self.fault.check(super::CrashSite::FlushBeforeValid).map_err(EngineError::Crashed)?;
        component::mark_valid(&c)?;
        self.fault.check(super::CrashSite::FlushBeforeWalTruncate).map_err(EngineError::Crashed)?;
        self.wal.truncate()?;
        self.schema = schema;
        self.components.push(Arc::new(c));
        self.mem.clear();
        self.mem_bytes = 0;
        self.next_seq += 1;
        self.flushes += 1;
        Ok(())
    }

    /// Applies the merge policy until it has nothing to request.
    pub fn run_policy(&mut self) -> Result<(), EngineError> {
        loop {
            let sizes: Vec<u64> = self.components.iter().map(|c| c.disk_bytes).collect();
            match pick_merge(&sizes, self.cfg.merge_max_bytes, self.cfg.merge_tolerable_count) {
                Some(range) => self.merge(range)?,
                None => return Ok(()),
            }
        }
    }

    /// Merges every component into one.
    pub fn merge_all(&mut self) -> Result<(), EngineError> {
        if self.components.len() >= 2 {
            self.merge(0..self.components.len())?;
        }
        Ok(())
    }

    pub fn merge(&mut self, range: Range<usize>) -> Result<(), EngineError> {
        if self.poisoned {
            return Err(EngineError::Poisoned(self.id));
        }
        let r = self.merge_inner(range);
        self.guard(r)
    }

    fn merge_inner(&mut self, range: Range<usize>) -> Result<(), EngineError> {
        assert!(range.len() >= 2, "a merge needs at least two components");
        let inputs = &self.components[range.clone()];
        let drop_tombstones = range.start == 0;
        let mut merged: BTreeMap<&Key, &Option<VbRecord>> = BTreeMap::new();
        for c in inputs {
            for (k, v) in c.entries() {
                merged.insert(k, v);
            }
        }
        let entries: Vec<Entry> = merged
            .into_iter()
            .filter(|(_, v)| !(drop_tombstones && v.is_none()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let newest = inputs.last().unwrap();
        let id = ComponentId {
            lo: inputs[0].id().lo,
            hi: newest.id().hi,
        };
        let spec = WriteSpec {
            dir: &self.dir,
            id,
            max_lsn: inputs.iter().map(|c| c.meta.max_lsn).max().unwrap(),
            schema: newest.schema.as_deref(),
            codec: self.codec,
            page_size: self.cfg.page_size,
        };
        let out = component::write(&spec, entries)?;
        self.fault.check(super::CrashSite::MergeBeforeValid).map_err(EngineError::Crashed)?;
        component::mark_valid(&out)?;
        self.fault.check(super::CrashSite::MergeBeforeDelete).map_err(EngineError::Crashed)?;
        let old: Vec<Arc<Component>> = self.components.splice(range, [Arc::new(out)]).collect();
        for c in old {
            component::remove(&c.path)?;
        }
        component::sync_dir(&self.dir)?;
        self.merges += 1;
        Ok(())
    }

    /// Builds one component from sorted, unique documents.
    pub fn bulk_load(&mut self, docs: Vec<(Key, Doc)>) -> Result<(), EngineError> {
        if !self.components.is_empty() || !self.mem.is_empty() {
            return Err(EngineError::NotEmpty);
        }
        if docs.is_empty() {
            return Ok(());
        }
        let mut schema = SchemaStore::new();
        let mut entries = Vec::with_capacity(docs.len());
        for (key, doc) in docs {
            let rec = encode(&doc, &self.declared)?;
            let stored = if self.cfg.compactor {
                schema.infer(&rec, &self.declared)?;
                compact(&rec, &schema)?
            } else {
                rec
            };
            entries.push((key, Some(stored)));
        }
        let spec = WriteSpec {
            dir: &self.dir,
            id: ComponentId::flushed(self.next_seq),
            max_lsn: self.next_lsn.saturating_sub(1),
            schema: self.cfg.compactor.then_some(&schema),
            codec: self.codec,
            page_size: self.cfg.page_size,
        };
        let c = component::write(&spec, entries)?;
        component::mark_valid(&c)?;
        for (k, _) in c.entries() {
            self.live_keys.insert(k.clone());
        }
        self.schema = schema;
        self.components.push(Arc::new(c));
        self.next_seq += 1;
        Ok(())
    }

    pub fn schema(&self) -> &SchemaStore {
        &self.schema
    }

    pub fn declared(&self) -> &DeclaredFields {
        &self.declared
    }

    pub fn components(&self) -> &[Arc<Component>] {
        &self.components
    }

    /// Memtable contents in key order; `None` is anti-matter.
    pub fn memtable(&self) -> Vec<Entry> {
        self.mem.iter().map(|(k, e)| (k.clone(), e.rec.clone())).collect()
    }

    pub fn stats(&self) -> PartitionStats {
        PartitionStats {
            partition: self.id,
            components: self
                .components
                .iter()
                .map(|c| ComponentInfo {
                    id: c.id(),
                    disk_bytes: c.disk_bytes,
                    records: c.meta.records,
                    tombstones: c.meta.tombstones,
                })
                .collect(),
            memtable_entries: self.mem.len(),
            memtable_bytes: self.mem_bytes,
            primary_lookups: self.primary_lookups,
            flushes: self.flushes,
            merges: self.merges,
            schema_nodes: self.schema.node_count(),
            dictionary_len: self.schema.dictionary().len(),
        }
    }
}

