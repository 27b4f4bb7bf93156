//! Inferred schema: a tree of typed nodes with per-instance occurrence
//! counters, plus an append-only field-name dictionary.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use indexmap::IndexSet;

use crate::doc::{Doc, PathExpr, PathStep};
use crate::record::{name_str, Cursor, DeclaredFields, Event, FieldRef, Nest, RecordError, Scalar, VbRecord};

/// Dense dictionary identifier of an inferred field name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FieldNameId(pub u32);

impl fmt::Display for FieldNameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kind {
    Object,
    Array,
    String,
    Int64,
    Double,
    Boolean,
    Null,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Object => "object",
            Kind::Array => "array",
            Kind::String => "string",
            Kind::Int64 => "int64",
            Kind::Double => "double",
            Kind::Boolean => "boolean",
            Kind::Null => "null",
        }
    }

    fn code(self) -> u8 {
        match self {
            Kind::Object => 1,
            Kind::Array => 2,
            Kind::String => 3,
            Kind::Int64 => 4,
            Kind::Double => 5,
            Kind::Boolean => 6,
            Kind::Null => 7,
        }
    }

    fn from_code(code: u8) -> Option<Kind> {
        Some(match code {
            1 => Kind::Object,
            2 => Kind::Array,
            3 => Kind::String,
            4 => Kind::Int64,
            5 => Kind::Double,
            6 => Kind::Boolean,
            7 => Kind::Null,
            _ => return None,
        })
    }

    fn of_scalar(value: &Scalar<'_>) -> Kind {
        match value {
            Scalar::Str(_) => Kind::String,
            Scalar::Int(_) => Kind::Int64,
            Scalar::Double(_) => Kind::Double,
            Scalar::Bool(_) => Kind::Boolean,
            Scalar::Null => Kind::Null,
        }
    }
}

const UNION_CODE: u8 = 8;

/// A schema tree node. Object children are keyed by `K`: field-name IDs in
/// a live store, names in the comparison form returned by
/// [`SchemaStore::named_tree`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TypeNode<K: Ord> {
    Object {
        counter: u64,
        fields: BTreeMap<K, TypeNode<K>>,
    },
    Array {
        counter: u64,
        item: Option<Box<TypeNode<K>>>,
    },
    /// At least two branches, at most one per kind, none of them a union.
    Union(BTreeMap<Kind, TypeNode<K>>),
    Scalar {
        kind: Kind,
        counter: u64,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchemaError {
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("field name {0:?} is not in the dictionary")]
    UnknownName(String),
    #[error("anti-schema does not match the live schema at {0}")]
    ShapeMismatch(String),
    #[error("counter underflow at {0}")]
    Underflow(String),
    #[error("bad schema blob: {0}")]
    Blob(&'static str),
}

impl<K: Ord + Clone> TypeNode<K> {
    fn leaf(kind: Kind) -> Self {
        match kind {
            Kind::Object => TypeNode::Object {
                counter: 1,
                fields: BTreeMap::new(),
            },
            Kind::Array => TypeNode::Array { counter: 1, item: None },
            kind => TypeNode::Scalar { kind, counter: 1 },
        }
    }

    /// `None` for a union.
    pub fn kind(&self) -> Option<Kind> {
        match self {
            TypeNode::Object { .. } => Some(Kind::Object),
            TypeNode::Array { .. } => Some(Kind::Array),
            TypeNode::Union(_) => None,
            TypeNode::Scalar { kind, .. } => Some(*kind),
        }
    }

    /// Occurrence count; a union reports the sum over its branches.
    pub fn counter(&self) -> u64 {
        match self {
            TypeNode::Object { counter, .. } | TypeNode::Array { counter, .. } | TypeNode::Scalar { counter, .. } => {
                *counter
            }
            TypeNode::Union(branches) => branches.values().map(TypeNode::counter).sum(),
        }
    }

    fn counter_mut(&mut self) -> &mut u64 {
        match self {
            TypeNode::Object { counter, .. } | TypeNode::Array { counter, .. } | TypeNode::Scalar { counter, .. } => {
                counter
            }
            TypeNode::Union(_) => unreachable!("unions carry no counter of their own"),
        }
    }

    pub fn field(&self, key: &K) -> Option<&TypeNode<K>> {
        match self {
            TypeNode::Object { fields, .. } => fields.get(key),
            _ => None,
        }
    }

    /// Union branches, or the node itself.
    pub fn branches(&self) -> Vec<&TypeNode<K>> {
        match self {
            TypeNode::Union(branches) => branches.values().collect(),
            node => vec![node],
        }
    }

    /// Number of nodes in the subtree, unions included.
    pub fn node_count(&self) -> usize {
        1 + match self {
            TypeNode::Object { fields, .. } => fields.values().map(TypeNode::node_count).sum(),
            TypeNode::Array { item, .. } => item.as_ref().map_or(0, |i| i.node_count()),
            TypeNode::Union(branches) => branches.values().map(TypeNode::node_count).sum(),
            TypeNode::Scalar { .. } => 0,
        }
    }

    fn into_branches(self) -> Vec<TypeNode<K>> {
        match self {
            TypeNode::Union(branches) => branches.into_values().collect(),
            node => vec![node],
        }
    }

    /// Adds the counts of `other` into this node, widening to a union where
    /// the kinds differ.
    pub fn add(&mut self, other: TypeNode<K>) {
        if let TypeNode::Union(branches) = self {
            for b in other.into_branches() {
                add_branch(branches, b);
            }
            return;
        }
        if other.kind() == self.kind() {
            self.absorb(other);
            return;
        }
        let mine = std::mem::replace(self, TypeNode::Union(BTreeMap::new()));
        let TypeNode::Union(branches) = self else { unreachable!() };
        add_branch(branches, mine);
        for b in other.into_branches() {
            add_branch(branches, b);
        }
    }

    fn absorb(&mut self, other: TypeNode<K>) {
        *self.counter_mut() += other.counter();
        match (self, other) {
            (TypeNode::Object { fields, .. }, TypeNode::Object { fields: theirs, .. }) => {
                for (k, v) in theirs {
                    merge_child(fields, k, v);
                }
            }
            (TypeNode::Array { item, .. }, TypeNode::Array { item: theirs, .. }) => match (item.as_mut(), theirs) {
                (Some(mine), Some(t)) => mine.add(*t),
                (None, Some(t)) => *item = Some(t),
                (_, None) => {}
            },
            _ => {}
        }
    }

    /// Removes the counts of `other`. Returns true when this node's counter
    /// reaches zero and it should be dropped by its parent.
    fn subtract(&mut self, other: &TypeNode<K>, at: &mut dyn FnMut() -> String) -> Result<bool, SchemaError> {
        if let TypeNode::Union(theirs) = other {
            for b in theirs.values() {
                if self.subtract(b, at)? {
                    return Ok(true);
                }
            }
            return Ok(false);
        }
        if let TypeNode::Union(branches) = self {
            let kind = other.kind().expect("non-union");
            let Some(branch) = branches.get_mut(&kind) else {
                return Err(SchemaError::ShapeMismatch(at()));
            };
            if branch.subtract(other, at)? {
                branches.remove(&kind);
            }
            match branches.len() {
                0 => return Ok(true),
                1 => {
                    let only = std::mem::take(branches).into_values().next().unwrap();
                    *self = only;
                }
                _ => {}
            }
            return Ok(false);
        }
        if self.kind() != other.kind() {
            return Err(SchemaError::ShapeMismatch(at()));
        }
        let counter = self.counter_mut();
        *counter = counter
            .checked_sub(other.counter())
            .ok_or_else(|| SchemaError::Underflow(at()))?;
        match (&mut *self, other) {
            (TypeNode::Object { fields, .. }, TypeNode::Object { fields: theirs, .. }) => {
                for (k, v) in theirs {
                    let Some(child) = fields.get_mut(k) else {
                        return Err(SchemaError::ShapeMismatch(at()));
                    };
                    if child.subtract(v, at)? {
                        fields.remove(k);
                    }
                }
            }
            (TypeNode::Array { item, .. }, TypeNode::Array { item: Some(theirs), .. }) => {
                let Some(mine) = item.as_mut() else {
                    return Err(SchemaError::ShapeMismatch(at()));
                };
                if mine.subtract(theirs, at)? {
                    *item = None;
                }
            }
            _ => {}
        }
        Ok(self.counter() == 0)
    }

    fn map_keys<J: Ord + Clone>(&self, f: &mut impl FnMut(&K) -> Result<J, SchemaError>) -> Result<TypeNode<J>, SchemaError> {
        Ok(match self {
            TypeNode::Object { counter, fields } => {
                let mut out = BTreeMap::new();
                for (k, v) in fields {
                    let child = v.map_keys(f)?;
                    merge_child(&mut out, f(k)?, child);
                }
                TypeNode::Object {
                    counter: *counter,
                    fields: out,
                }
            }
            TypeNode::Array { counter, item } => TypeNode::Array {
                counter: *counter,
                item: item.as_ref().map(|i| i.map_keys(f).map(Box::new)).transpose()?,
            },
            TypeNode::Union(branches) => TypeNode::Union(
                branches
                    .iter()
                    .map(|(k, v)| Ok((*k, v.map_keys(f)?)))
                    .collect::<Result<_, SchemaError>>()?,
            ),
            TypeNode::Scalar { kind, counter } => TypeNode::Scalar {
                kind: *kind,
                counter: *counter,
            },
        })
    }
}

impl<K: Ord + Clone + fmt::Display> TypeNode<K> {
    /// Human-readable structural description, for reports and debugging.
    pub fn to_doc(&self) -> Doc {
        let mut out = indexmap::IndexMap::new();
        match self {
            TypeNode::Object { counter, fields } => {
                out.insert("type".into(), Doc::from("object"));
                out.insert("count".into(), Doc::Int(*counter as i64));
                let fields = fields.iter().map(|(k, v)| (k.to_string(), v.to_doc())).collect();
                out.insert("fields".into(), Doc::Object(fields));
            }
            TypeNode::Array { counter, item } => {
                out.insert("type".into(), Doc::from("array"));
                out.insert("count".into(), Doc::Int(*counter as i64));
                if let Some(item) = item {
                    out.insert("item".into(), item.to_doc());
                }
            }
            TypeNode::Union(branches) => {
                out.insert("type".into(), Doc::from("union"));
                out.insert("branches".into(), Doc::Array(branches.values().map(TypeNode::to_doc).collect()));
            }
            TypeNode::Scalar { kind, counter } => {
                out.insert("type".into(), Doc::from(kind.name()));
                out.insert("count".into(), Doc::Int(*counter as i64));
            }
        }
        Doc::Object(out)
    }
}

fn add_branch<K: Ord + Clone>(branches: &mut BTreeMap<Kind, TypeNode<K>>, node: TypeNode<K>) {
    let kind = node.kind().expect("unions never nest");
    match branches.get_mut(&kind) {
        Some(existing) => existing.add(node),
        None => {
            branches.insert(kind, node);
        }
    }
}

fn merge_child<K: Ord + Clone>(fields: &mut BTreeMap<K, TypeNode<K>>, key: K, node: TypeNode<K>) {
    match fields.get_mut(&key) {
        Some(existing) => existing.add(node),
        None => {
            fields.insert(key, node);
        }
    }
}

/// Builds the per-instance count tree of one record. Declared root fields
/// are left out. Object keys come from `key`, called with the field name.
fn count_tree<K: Ord + Clone>(
    rec: &VbRecord,
    schema: Option<&SchemaStore>,
    declared: &DeclaredFields,
    mut key: impl FnMut(&str) -> Result<K, SchemaError>,
) -> Result<TypeNode<K>, SchemaError> {
    let mut cursor = Cursor::new(rec.as_bytes())?;
    let mut stack: Vec<(Option<K>, TypeNode<K>)> = Vec::new();
    while let Some(event) = cursor.next_event()? {
        let field = match event {
            Event::End => {
                let (k, node) = stack.pop().expect("cursor balances nesting");
                match stack.last_mut() {
                    Some((_, parent)) => attach(parent, k, node),
                    None => {
                        if cursor.next_event()?.is_some() {
                            return Err(RecordError::Malformed {
                                offset: 0,
                                reason: "values after the root",
                            }
                            .into());
                        }
                        return Ok(node);
                    }
                }
                continue;
            }
            Event::Begin { field, .. } | Event::Value { field, .. } => field,
        };
        if matches!(field, Some(FieldRef::Declared(_))) {
            if matches!(event, Event::Begin { .. }) {
                cursor.skip_nested()?;
            }
            continue;
        }
        let k = match field {
            Some(f) => Some(key(name_str(f, schema, declared)?)?),
            None => None,
        };
        match event {
            Event::Begin { nest, .. } => {
                if stack.is_empty() && nest != Nest::Object {
                    return Err(RecordError::NonObjectRoot("array").into());
                }
                let kind = if nest == Nest::Object { Kind::Object } else { Kind::Array };
                stack.push((k, TypeNode::leaf(kind)));
            }
            Event::Value { value, .. } => {
                let (_, parent) = stack.last_mut().expect("values live inside the root");
                attach(parent, k, TypeNode::leaf(Kind::of_scalar(&value)));
            }
            Event::End => unreachable!(),
        }
    }
    Err(RecordError::Malformed {
        offset: 0,
        reason: "record has no root",
    }
    .into())
}

fn attach<K: Ord + Clone>(parent: &mut TypeNode<K>, key: Option<K>, node: TypeNode<K>) {
    match parent {
        TypeNode::Object { fields, .. } => merge_child(fields, key.expect("object children are named"), node),
        TypeNode::Array { item, .. } => match item {
            Some(existing) => existing.add(node),
            None => *item = Some(Box::new(node)),
        },
        _ => unreachable!("only nests have children"),
    }
}

/// Schema of a deleted or replaced record: per-node decrement counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AntiSchema {
    root: TypeNode<FieldNameId>,
}

impl AntiSchema {
    pub fn root(&self) -> &TypeNode<FieldNameId> {
        &self.root
    }

    /// True when the deleted record had no inferred fields.
    pub fn is_empty(&self) -> bool {
        matches!(&self.root, TypeNode::Object { fields, .. } if fields.is_empty())
    }

    /// Folds another anti-schema into this one (both get subtracted later).
    pub fn compose(&mut self, other: AntiSchema) {
        self.root.add(other.root);
    }
}

/// Per-partition inferred schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaStore {
    root: TypeNode<FieldNameId>,
    names: Vec<String>,
    ids: HashMap<String, FieldNameId>,
    version: u64,
}

impl Default for SchemaStore {
    fn default() -> Self {
        SchemaStore::new()
    }
}

const BLOB_MAGIC: &[u8; 4] = b"CSCH";
const BLOB_FORMAT: u16 = 1;
const MAX_BLOB_DEPTH: usize = 1024;

impl SchemaStore {
    pub fn new() -> Self {
        SchemaStore {
            root: TypeNode::Object {
                counter: 0,
                fields: BTreeMap::new(),
            },
            names: Vec::new(),
            ids: HashMap::new(),
            version: 0,
        }
    }

    pub fn root(&self) -> &TypeNode<FieldNameId> {
        &self.root
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Dictionary names in ID order.
    pub fn dictionary(&self) -> &[String] {
        &self.names
    }

    pub fn lookup_name(&self, name: &str) -> Option<FieldNameId> {
        self.ids.get(name).copied()
    }

    pub fn name_of(&self, id: FieldNameId) -> Option<&str> {
        self.names.get(id.0 as usize).map(String::as_str)
    }

    /// True when no record contributes to the schema.
    pub fn is_empty(&self) -> bool {
        self.root.counter() == 0
    }

    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    fn intern(&mut self, name: &str) -> FieldNameId {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = FieldNameId(self.names.len() as u32);
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        id
    }

    /// Adds the schema of an uncompacted record. New names get IDs in the
    /// order they appear in the record.
    pub fn infer(&mut self, rec: &VbRecord, declared: &DeclaredFields) -> Result<(), SchemaError> {
        let mut order = IndexSet::new();
        let tree = count_tree(rec, None, declared, |name| {
            order.insert(name.to_owned());
            Ok(name.to_owned())
        })?;
        for name in &order {
            self.intern(name);
        }
        let tree = tree.map_keys(&mut |name: &String| Ok(self.ids[name]))?;
        self.root.add(tree);
        self.version += 1;
        Ok(())
    }

    /// Counts of every node instance in `rec`. Compacted records resolve
    /// their IDs through this store. Does not modify the store.
    pub fn extract_anti_schema(&self, rec: &VbRecord, declared: &DeclaredFields) -> Result<AntiSchema, SchemaError> {
        let root = count_tree(rec, Some(self), declared, |name| {
            self.lookup_name(name).ok_or_else(|| SchemaError::UnknownName(name.to_owned()))
        })?;
        Ok(AntiSchema { root })
    }

    /// Decrements counters by `anti`, removing nodes that reach zero. The
    /// store is left unchanged when the anti-schema does not fit.
    pub fn apply_anti_schema(&mut self, anti: &AntiSchema) -> Result<(), SchemaError> {
        let mut root = self.root.clone();
        let names = &self.names;
        let mut at = || describe(&anti.root, names);
        root.subtract(&anti.root, &mut at)?;
        if !matches!(root, TypeNode::Object { .. }) {
            root = TypeNode::Object {
                counter: 0,
                fields: BTreeMap::new(),
            };
        }
        self.root = root;
        self.version += 1;
        Ok(())
    }

    /// The tree with IDs replaced by names, for comparisons across stores
    /// whose dictionaries assigned IDs differently.
    pub fn named_tree(&self) -> TypeNode<String> {
        self.root
            .map_keys(&mut |id: &FieldNameId| Ok(self.name_of(*id).unwrap_or("?").to_owned()))
            .expect("infallible key mapping")
    }

    /// Schema nodes a path can reach. Unions along the way are searched
    /// per branch; a union at the end of the path is returned as is.
    pub fn resolve_path(&self, path: &PathExpr) -> Vec<&TypeNode<FieldNameId>> {
        let mut current = vec![&self.root];
        for step in path.steps() {
            let mut next = Vec::new();
            for node in current.into_iter().flat_map(|n| n.branches()) {
                match (step, node) {
                    (PathStep::Field(name), TypeNode::Object { fields, .. }) => {
                        if let Some(child) = self.lookup_name(name).and_then(|id| fields.get(&id)) {
                            next.push(child);
                        }
                    }
                    (PathStep::Index(_) | PathStep::Wildcard, TypeNode::Array { item: Some(item), .. }) => {
                        next.push(item.as_ref());
                    }
                    _ => {}
                }
            }
            current = next;
        }
        current
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&BLOB_FORMAT.to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        put_varint(&mut out, self.names.len() as u64);
        for name in &self.names {
            put_varint(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
        }
        write_node(&mut out, &self.root);
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<SchemaStore, SchemaError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != BLOB_MAGIC {
            return Err(SchemaError::Blob("bad magic"));
        }
        if u16::from_le_bytes(r.take(2)?.try_into().unwrap()) != BLOB_FORMAT {
            return Err(SchemaError::Blob("unsupported format version"));
        }
        let version = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let count = r.varint()?;
        let mut store = SchemaStore::new();
        store.version = version;
        for _ in 0..count {
            let len = r.varint()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| SchemaError::Blob("name is not UTF-8"))?;
            if store.ids.contains_key(name) {
                return Err(SchemaError::Blob("duplicate dictionary name"));
            }
            store.intern(name);
        }
        let root = read_node(&mut r, store.names.len(), 0)?;
        if !matches!(root, TypeNode::Object { .. }) {
            return Err(SchemaError::Blob("root is not an object"));
        }
        if r.pos != bytes.len() {
            return Err(SchemaError::Blob("trailing bytes"));
        }
        store.root = root;
        Ok(store)
    }
}

fn describe(node: &TypeNode<FieldNameId>, names: &[String]) -> String {
    let named = node
        .map_keys(&mut |id: &FieldNameId| Ok(names.get(id.0 as usize).cloned().unwrap_or_else(|| id.to_string())))
        .expect("infallible key mapping");
    named.to_doc().to_json()
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn write_node(out: &mut Vec<u8>, node: &TypeNode<FieldNameId>) {
    match node {
        TypeNode::Object { counter, fields } => {
            out.push(Kind::Object.code());
            put_varint(out, *counter);
            put_varint(out, fields.len() as u64);
            for (id, child) in fields {
                put_varint(out, id.0 as u64);
                write_node(out, child);
            }
        }
        TypeNode::Array { counter, item } => {
            out.push(Kind::Array.code());
            put_varint(out, *counter);
            put_varint(out, item.is_some() as u64);
            if let Some(item) = item {
                write_node(out, item);
            }
        }
        TypeNode::Union(branches) => {
            out.push(UNION_CODE);
            put_varint(out, node.counter());
            put_varint(out, branches.len() as u64);
            for branch in branches.values() {
                write_node(out, branch);
            }
        }
        TypeNode::Scalar { kind, counter } => {
            out.push(kind.code());
            put_varint(out, *counter);
            put_varint(out, 0);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SchemaError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(SchemaError::Blob("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn varint(&mut self) -> Result<u64, SchemaError> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.take(1)?[0];
            v |= ((b & 0x7f) as u64) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(SchemaError::Blob("varint overflow"))
    }
}

fn read_node(r: &mut Reader<'_>, dict_len: usize, depth: usize) -> Result<TypeNode<FieldNameId>, SchemaError> {
    if depth > MAX_BLOB_DEPTH {
        return Err(SchemaError::Blob("tree too deep"));
    }
    let code = r.take(1)?[0];
    let counter = r.varint()?;
    let children = r.varint()?;
    if counter == 0 && depth > 0 {
        return Err(SchemaError::Blob("zero counter below the root"));
    }
    if code == UNION_CODE {
        if children < 2 {
            return Err(SchemaError::Blob("union with fewer than two branches"));
        }
        let mut branches = BTreeMap::new();
        for _ in 0..children {
            let branch = read_node(r, dict_len, depth + 1)?;
            let Some(kind) = branch.kind() else {
                return Err(SchemaError::Blob("nested union"));
            };
            if branches.insert(kind, branch).is_some() {
                return Err(SchemaError::Blob("duplicate union branch"));
            }
        }
        let node = TypeNode::Union(branches);
        if node.counter() != counter {
            return Err(SchemaError::Blob("union counter mismatch"));
        }
        return Ok(node);
    }
    let kind = Kind::from_code(code).ok_or(SchemaError::Blob("unknown node kind"))?;
    Ok(match kind {
        Kind::Object => {
            let mut fields = BTreeMap::new();
            for _ in 0..children {
                let id = r.varint()?;
                if id as usize >= dict_len {
                    return Err(SchemaError::Blob("field ID outside the dictionary"));
                }
                let child = read_node(r, dict_len, depth + 1)?;
                if fields.insert(FieldNameId(id as u32), child).is_some() {
                    return Err(SchemaError::Blob("duplicate object field"));
                }
            }
            TypeNode::Object { counter, fields }
        }
        Kind::Array => {
            let item = match children {
                0 => None,
                1 => Some(Box::new(read_node(r, dict_len, depth + 1)?)),
                _ => return Err(SchemaError::Blob("array with several item nodes")),
            };
            TypeNode::Array { counter, item }
        }
        kind => {
            if children != 0 {
                return Err(SchemaError::Blob("scalar with children"));
            }
            TypeNode::Scalar { kind, counter }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::encode;

    fn rec(json: &str) -> VbRecord {
        encode(&Doc::from_json(json).unwrap(), &DeclaredFields::new(["id"])).unwrap()
    }

    fn declared() -> DeclaredFields {
        DeclaredFields::new(["id"])
    }

    #[test]
    fn union_evolves_across_flushes() {
        let mut s = SchemaStore::new();
        s.infer(&rec(r#"{"id":0,"name":"Ann","age":26}"#), &declared()).unwrap();
        s.infer(&rec(r#"{"id":1,"name":"Bob","age":27}"#), &declared()).unwrap();
        let age = s.lookup_name("age").unwrap();
        assert_eq!(s.root().field(&age).unwrap().kind(), Some(Kind::Int64));
        assert_eq!(s.lookup_name("name"), Some(FieldNameId(0)));
        assert_eq!(s.lookup_name("id"), None);

        s.infer(&rec(r#"{"id":2,"name":"Alex"}"#), &declared()).unwrap();
        s.infer(&rec(r#"{"id":3,"name":"Bill","age":"old"}"#), &declared()).unwrap();
        let TypeNode::Union(branches) = s.root().field(&age).unwrap() else {
            panic!("expected union");
        };
        assert_eq!(branches[&Kind::Int64].counter(), 2);
        assert_eq!(branches[&Kind::String].counter(), 1);
        assert_eq!(s.resolve_path(&PathExpr::field("age")).len(), 1);
    }

    #[test]
    fn extract_then_apply_restores_empty() {
        let mut s = SchemaStore::new();
        let r = rec(r#"{"id":7,"a":[{"x":1},{"x":"s"}],"b":{"c":null}}"#);
        s.infer(&r, &declared()).unwrap();
        let anti = s.extract_anti_schema(&r, &declared()).unwrap();
        s.apply_anti_schema(&anti).unwrap();
        assert_eq!(s.root(), SchemaStore::new().root());
        assert_eq!(s.dictionary().len(), 4);
        assert!(s.apply_anti_schema(&anti).is_err());
    }

    #[test]
    fn blob_roundtrip_and_rejection() {
        let mut s = SchemaStore::new();
        s.infer(&rec(r#"{"id":1,"age":1,"tags":["a",2,{"k":[]}]}"#), &declared()).unwrap();
        s.infer(&rec(r#"{"id":2,"age":"x"}"#), &declared()).unwrap();
        let blob = s.serialize();
        assert_eq!(SchemaStore::deserialize(&blob).unwrap(), s);
        assert!(SchemaStore::deserialize(&blob[..blob.len() - 1]).is_err());
        let mut bad = blob.clone();
        bad[0] = b'X';
        assert_eq!(SchemaStore::deserialize(&bad), Err(SchemaError::Blob("bad magic")));
        let empty = SchemaStore::new().serialize();
        assert_eq!(SchemaStore::deserialize(&empty).unwrap(), SchemaStore::new());
    }
}
