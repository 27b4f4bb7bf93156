#![allow(dead_code)]

use tuplecompact::{doc_object, DeclaredFields, Doc};

pub fn declared_id() -> DeclaredFields {
    DeclaredFields::new(["id"])
}

/// The employee record used throughout the format examples.
pub fn salaried_doc() -> Doc {
    doc_object! {
        "id" => 1i64,
        "name" => "Ann",
        "salaries" => Doc::Array(vec![Doc::Int(70000), Doc::Int(90000)]),
        "age" => 26i64,
    }
}

pub fn dependents_doc() -> Doc {
    Doc::from_json(
        r#"{"id":1,"name":"Ann",
            "dependents":[{"name":"Bob","age":6},{"name":"Carol","age":10},"Not_Available"],
            "employment_date":"2018-09-20",
            "branch_location":"point(24.0, -56.12)"}"#,
    )
    .unwrap()
}

pub mod queries;
pub mod reference;

use std::collections::BTreeMap;

use tuplecompact::datagen::Op;
use tuplecompact::lsm::{Dataset, EngineError, Key};
use tuplecompact::schema::{Kind, TypeNode};

/// Reference result of running `ops` against a plain map. Inserts of an
/// existing key replace it, like upserts.
pub fn replay(ops: &[Op]) -> BTreeMap<i64, Doc> {
    let mut map = BTreeMap::new();
    for op in ops {
        match op {
            Op::Insert { doc } | Op::Upsert { doc } => {
                map.insert(doc.get("id").and_then(Doc::as_i64).unwrap(), doc.clone());
            }
            Op::Delete { key } => {
                map.remove(key);
            }
            Op::Flush | Op::Merge => {}
        }
    }
    map
}

pub fn apply(ds: &Dataset, op: &Op) -> Result<(), EngineError> {
    match op {
        Op::Insert { doc } => ds.insert(doc.clone()),
        Op::Upsert { doc } => ds.upsert(doc.clone()),
        Op::Delete { key } => ds.delete(Key::int(*key)),
        Op::Flush => ds.flush(),
        Op::Merge => ds.merge_all(),
    }
}

pub fn scan_map(ds: &Dataset) -> BTreeMap<i64, Doc> {
    ds.scan()
        .unwrap()
        .into_iter()
        .map(|(k, d)| (k.to_doc().as_i64().unwrap(), d))
        .collect()
}

fn kind_of(doc: &Doc) -> Kind {
    match doc {
        Doc::Object(_) => Kind::Object,
        Doc::Array(_) => Kind::Array,
        Doc::String(_) => Kind::String,
        Doc::Int(_) => Kind::Int64,
        Doc::Double(_) => Kind::Double,
        Doc::Bool(_) => Kind::Boolean,
        Doc::Null => Kind::Null,
    }
}

/// Per-kind accumulator for one schema position.
#[derive(Default)]
struct Slot {
    kinds: BTreeMap<Kind, u64>,
    fields: BTreeMap<String, Slot>,
    items: Option<Box<Slot>>,
}

impl Slot {
    fn add(&mut self, doc: &Doc, skip: &[&str]) {
        *self.kinds.entry(kind_of(doc)).or_default() += 1;
        match doc {
            Doc::Object(map) => {
                for (k, v) in map {
                    if !skip.contains(&k.as_str()) {
                        self.fields.entry(k.clone()).or_default().add(v, &[]);
                    }
                }
            }
            Doc::Array(items) => {
                for v in items {
                    self.items.get_or_insert_with(Default::default).add(v, &[]);
                }
            }
            _ => {}
        }
    }

    fn node_for(&self, kind: Kind, counter: u64) -> TypeNode<String> {
        match kind {
            Kind::Object => TypeNode::Object {
                counter,
                fields: self.fields.iter().map(|(k, s)| (k.clone(), s.node())).collect(),
            },
            Kind::Array => TypeNode::Array {
                counter,
                item: self.items.as_ref().map(|s| Box::new(s.node())),
            },
            kind => TypeNode::Scalar { kind, counter },
        }
    }

    fn node(&self) -> TypeNode<String> {
        if self.kinds.len() == 1 {
            let (&kind, &counter) = self.kinds.iter().next().unwrap();
            self.node_for(kind, counter)
        } else {
            TypeNode::Union(self.kinds.iter().map(|(&k, &c)| (k, self.node_for(k, c))).collect())
        }
    }
}

/// Independent from-scratch schema over `docs` (object roots), skipping
/// the declared root fields.
pub fn scratch_schema<'a>(docs: impl IntoIterator<Item = &'a Doc>, declared: &[&str]) -> TypeNode<String> {
    let mut root = Slot::default();
    for d in docs {
        root.add(d, declared);
    }
    if root.kinds.is_empty() {
        return TypeNode::Object { counter: 0, fields: BTreeMap::new() };
    }
    root.node()
}
