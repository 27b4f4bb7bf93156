use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;

use super::component::{Component, ComponentId, Entry};
use super::fault::FaultInjector;
use super::key::Key;
use super::partition::{Partition, PartitionStats};
use super::wal::WalOp;
use super::{EngineConfig, EngineError};
use crate::doc::Doc;
use crate::record::{decode, DeclaredFields, RecordError, VbRecord};
use crate::schema::SchemaStore;

const CONFIG_FILE: &str = "dataset.json";

/// A hash-partitioned dataset. Each partition has its own writer lock,
/// WAL, components and schema.
pub struct Dataset {
    dir: PathBuf,
    cfg: Arc<EngineConfig>,
    parts: Vec<Mutex<Partition>>,
}

/// Where a scanned record lives; decides which schema decodes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceId {
    Memtable,
    Component(ComponentId),
}

/// Immutable view of one partition for readers.
#[derive(Clone)]
pub struct PartitionSnapshot {
    pub partition: usize,
    pub declared: DeclaredFields,
    pub memtable: Arc<Vec<Entry>>,
    pub components: Vec<Arc<Component>>,
}

pub struct SnapshotRecord<'a> {
    pub key: &'a Key,
    pub rec: &'a VbRecord,
    pub source: SourceId,
}

impl PartitionSnapshot {
    /// Newest live version of every key, in key order.
    pub fn live(&self) -> Vec<SnapshotRecord<'_>> {
        let mut merged: BTreeMap<&Key, (Option<&VbRecord>, SourceId)> = BTreeMap::new();
        for c in &self.components {
            for (k, v) in c.entries() {
                merged.insert(k, (v.as_ref(), SourceId::Component(c.id())));
            }
        }
        for (k, v) in self.memtable.iter() {
            merged.insert(k, (v.as_ref(), SourceId::Memtable));
        }
        merged
            .into_iter()
            .filter_map(|(key, (rec, source))| rec.map(|rec| SnapshotRecord { key, rec, source }))
            .collect()
    }

    /// Schema snapshots per source: every component's persisted schema.
    /// Memtable records carry their names inline.
    pub fn schemas(&self) -> Vec<(SourceId, Option<Arc<SchemaStore>>)> {
        let mut out: Vec<_> = self
            .components
            .iter()
            .map(|c| (SourceId::Component(c.id()), c.schema.clone()))
            .collect();
        out.push((SourceId::Memtable, None));
        out
    }

    pub fn decode_all(&self) -> Result<Vec<(Key, Doc)>, RecordError> {
        let schemas: BTreeMap<SourceId, Option<Arc<SchemaStore>>> = self.schemas().into_iter().collect();
        self.live()
            .into_iter()
            .map(|r| {
                let schema = schemas[&r.source].as_deref();
                Ok((r.key.clone(), decode(r.rec, schema, &self.declared)?))
            })
            .collect()
    }
}

impl Dataset {
    pub fn create(dir: &Path, cfg: EngineConfig) -> Result<Dataset, EngineError> {
        cfg.validate()?;
        fs::create_dir_all(dir)?;
        let path = dir.join(CONFIG_FILE);
        if path.exists() {
            return Err(EngineError::Config(format!("dataset already exists at {}", dir.display())));
        }
        let tmp = dir.join("dataset.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&cfg).expect("config serializes"))?;
        fs::rename(&tmp, &path)?;
        Self::open_with(dir, Arc::new(FaultInjector::disarmed()), |_| {})
    }

    pub fn open(dir: &Path) -> Result<Dataset, EngineError> {
        Self::open_with(dir, Arc::new(FaultInjector::disarmed()), |_| {})
    }

    pub fn read_config(dir: &Path) -> Result<EngineConfig, EngineError> {
        let text = fs::read(dir.join(CONFIG_FILE))
            .map_err(|e| EngineError::Config(format!("no dataset at {}: {e}", dir.display())))?;
        serde_json::from_slice(&text).map_err(|e| EngineError::Config(format!("bad dataset config: {e}")))
    }

    /// Opens (recovers) a dataset. `tweak` may adjust runtime settings; the
    /// partition count and key field are fixed at creation.
    pub fn open_with(dir: &Path, fault: Arc<FaultInjector>, tweak: impl FnOnce(&mut EngineConfig)) -> Result<Dataset, EngineError> {
        let stored = Self::read_config(dir)?;
        let mut cfg = stored.clone();
        tweak(&mut cfg);
        if cfg.partitions != stored.partitions || cfg.primary_key != stored.primary_key || cfg.compactor != stored.compactor {
            return Err(EngineError::Config(
                "partition count, primary key and compactor setting are fixed at creation".into(),
            ));
        }
        cfg.validate()?;
        let cfg = Arc::new(cfg);
        let parts = (0..cfg.partitions)
            .map(|i| Partition::open(i, &dir.join(format!("p{i}")), cfg.clone(), fault.clone()).map(Mutex::new))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Dataset {
            dir: dir.to_owned(),
            cfg,
            parts,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn partitions(&self) -> usize {
        self.parts.len()
    }

    pub fn key_of(&self, doc: &Doc) -> Result<Key, EngineError> {
        let field = doc
            .get(&self.cfg.primary_key)
            .ok_or_else(|| EngineError::Key(format!("document has no {:?} field", self.cfg.primary_key)))?;
        Key::from_doc(field).ok_or_else(|| {
            EngineError::Key(format!("primary key must be an integer or string, found {}", field.kind_name()))
        })
    }

    fn part(&self, key: &Key) -> &Mutex<Partition> {
        &self.parts[key.partition(self.parts.len())]
    }

    pub fn insert(&self, doc: Doc) -> Result<(), EngineError> {
        let key = self.key_of(&doc)?;
        self.part(&key).lock().write(WalOp::Insert, key, Some(doc))
    }

    pub fn upsert(&self, doc: Doc) -> Result<(), EngineError> {
        let key = self.key_of(&doc)?;
        self.part(&key).lock().write(WalOp::Upsert, key, Some(doc))
    }

    /// Deleting an absent key still records anti-matter.
    pub fn delete(&self, key: Key) -> Result<(), EngineError> {
        self.part(&key).lock().write(WalOp::Delete, key, None)
    }

    pub fn get(&self, key: &Key) -> Result<Option<Doc>, EngineError> {
        self.part(key).lock().get(key)
    }

    pub fn flush(&self) -> Result<(), EngineError> {
        for p in &self.parts {
            p.lock().flush()?;
        }
        Ok(())
    }

    /// One merge-policy pass over every partition.
    pub fn tick(&self) -> Result<(), EngineError> {
        for p in &self.parts {
            p.lock().run_policy()?;
        }
        Ok(())
    }

    pub fn merge_all(&self) -> Result<(), EngineError> {
        for p in &self.parts {
            p.lock().merge_all()?;
        }
        Ok(())
    }

    /// Merges components `range` (oldest first) of partition `p`.
    pub fn merge_range(&self, p: usize, range: std::ops::Range<usize>) -> Result<(), EngineError> {
        self.parts[p].lock().merge(range)
    }

    /// Builds a single component per partition from `docs`. The dataset
    /// must be empty and keys unique.
    pub fn load(&self, docs: Vec<Doc>) -> Result<(), EngineError> {
        let mut groups: Vec<BTreeMap<Key, Doc>> = vec![BTreeMap::new(); self.parts.len()];
        for doc in docs {
            let key = self.key_of(&doc)?;
            let group = &mut groups[key.partition(self.parts.len())];
            if group.contains_key(&key) {
                return Err(EngineError::Duplicate(key.to_string()));
            }
            group.insert(key, doc);
        }
        let mut locked: Vec<_> = self.parts.iter().map(|p| p.lock()).collect();
        if locked.iter().any(|p| !p.components().is_empty() || !p.memtable().is_empty()) {
            return Err(EngineError::NotEmpty);
        }
        for (p, group) in locked.iter_mut().zip(groups) {
            p.bulk_load(group.into_iter().collect())?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<PartitionSnapshot> {
        self.parts
            .iter()
            .map(|p| {
                let p = p.lock();
                PartitionSnapshot {
                    partition: p.id,
                    declared: p.declared().clone(),
                    memtable: Arc::new(p.memtable()),
                    components: p.components().to_vec(),
                }
            })
            .collect()
    }

    /// Every live document, in key order across partitions.
    pub fn scan(&self) -> Result<Vec<(Key, Doc)>, EngineError> {
        let mut out = Vec::new();
        for snap in self.snapshot() {
            out.extend(snap.decode_all()?);
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    pub fn schema(&self, partition: usize) -> SchemaStore {
        self.parts[partition].lock().schema().clone()
    }

    pub fn components(&self, partition: usize) -> Vec<Arc<Component>> {
        self.parts[partition].lock().components().to_vec()
    }

    pub fn stats(&self) -> Vec<PartitionStats> {
        self.parts.iter().map(|p| p.lock().stats()).collect()
    }

    pub fn primary_lookups(&self) -> u64 {
        self.stats().iter().map(|s| s.primary_lookups).sum()
    }
}
