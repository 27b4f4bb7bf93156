//! In-memory logical documents and path expressions over them.

use std::fmt;

use indexmap::IndexMap;
use serde::de::{self, MapAccess, SeqAccess, Visitor};
use serde::ser::{SerializeMap, SerializeSeq};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A JSON-subset document. Object keys keep insertion order and are unique.
#[derive(Debug, Clone, PartialEq)]
pub enum Doc {
    Object(IndexMap<String, Doc>),
    Array(Vec<Doc>),
    String(String),
    Int(i64),
    Double(f64),
    Bool(bool),
    Null,
}

impl Doc {
    pub fn object() -> Self {
        Doc::Object(IndexMap::new())
    }

    pub fn as_object(&self) -> Option<&IndexMap<String, Doc>> {
        match self {
            Doc::Object(map) => Some(map),
            _ => None,
        }
    }

    pub fn as_array(&self) -> Option<&[Doc]> {
        match self {
            Doc::Array(items) => Some(items),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Doc::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Doc::Int(v) => Some(*v),
            _ => None,
        }
    }

    /// Numeric view used by aggregates and comparisons.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Doc::Int(v) => Some(*v as f64),
            Doc::Double(v) => Some(*v),
            _ => None,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Doc> {
        self.as_object().and_then(|m| m.get(name))
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Doc::Object(_) => "object",
            Doc::Array(_) => "array",
            Doc::String(_) => "string",
            Doc::Int(_) => "int64",
            Doc::Double(_) => "double",
            Doc::Bool(_) => "boolean",
            Doc::Null => "null",
        }
    }

    /// Parses one JSON text, rejecting duplicate object keys and integers
    /// outside the signed 64-bit range.
    pub fn from_json(text: &str) -> Result<Doc, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("documents always serialize")
    }

    /// Nesting depth; scalars have depth 0.
    pub fn depth(&self) -> usize {
        match self {
            Doc::Object(m) => 1 + m.values().map(Doc::depth).max().unwrap_or(0),
            Doc::Array(a) => 1 + a.iter().map(Doc::depth).max().unwrap_or(0),
            _ => 0,
        }
    }
}

impl From<&str> for Doc {
    fn from(s: &str) -> Self {
        Doc::String(s.to_owned())
    }
}

impl From<String> for Doc {
    fn from(s: String) -> Self {
        Doc::String(s)
    }
}

impl From<i64> for Doc {
    fn from(v: i64) -> Self {
        Doc::Int(v)
    }
}

impl From<f64> for Doc {
    fn from(v: f64) -> Self {
        Doc::Double(v)
    }
}

impl From<bool> for Doc {
    fn from(v: bool) -> Self {
        Doc::Bool(v)
    }
}

impl fmt::Display for Doc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_json())
    }
}

impl Serialize for Doc {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Doc::Object(map) => {
                let mut m = serializer.serialize_map(Some(map.len()))?;
                for (k, v) in map {
                    m.serialize_entry(k, v)?;
                }
                m.end()
            }
            Doc::Array(items) => {
                let mut s = serializer.serialize_seq(Some(items.len()))?;
                for item in items {
                    s.serialize_element(item)?;
                }
                s.end()
            }
            Doc::String(s) => serializer.serialize_str(s),
            Doc::Int(v) => serializer.serialize_i64(*v),
            Doc::Double(v) => serializer.serialize_f64(*v),
            Doc::Bool(v) => serializer.serialize_bool(*v),
            Doc::Null => serializer.serialize_unit(),
        }
    }
}

struct DocVisitor;

impl<'de> Visitor<'de> for DocVisitor {
    type Value = Doc;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a JSON value")
    }

    fn visit_bool<E>(self, v: bool) -> Result<Doc, E> {
        Ok(Doc::Bool(v))
    }

    fn visit_i64<E>(self, v: i64) -> Result<Doc, E> {
        Ok(Doc::Int(v))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Doc, E> {
        i64::try_from(v)
            .map(Doc::Int)
            .map_err(|_| E::custom(format!("integer {v} does not fit in int64")))
    }

    fn visit_f64<E>(self, v: f64) -> Result<Doc, E> {
        Ok(Doc::Double(v))
    }

    fn visit_str<E>(self, v: &str) -> Result<Doc, E> {
        Ok(Doc::String(v.to_owned()))
    }

    fn visit_string<E>(self, v: String) -> Result<Doc, E> {
        Ok(Doc::String(v))
    }

    fn visit_unit<E>(self) -> Result<Doc, E> {
        Ok(Doc::Null)
    }

    fn visit_none<E>(self) -> Result<Doc, E> {
        Ok(Doc::Null)
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Doc, A::Error> {
        let mut items = Vec::new();
        while let Some(item) = seq.next_element()? {
            items.push(item);
        }
        Ok(Doc::Array(items))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Doc, A::Error> {
        let mut map = IndexMap::new();
        while let Some(key) = access.next_key::<String>()? {
            if map.contains_key(&key) {
                return Err(de::Error::custom(format!("duplicate key {key:?}")));
            }
            let value = access.next_value()?;
            map.insert(key, value);
        }
        Ok(Doc::Object(map))
    }
}

impl<'de> Deserialize<'de> for Doc {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Doc, D::Error> {
        deserializer.deserialize_any(DocVisitor)
    }
}

/// Builds an object document from `(name, value)` pairs.
#[macro_export]
macro_rules! doc_object {
    ($($name:expr => $value:expr),* $(,)?) => {{
        #[allow(unused_mut)]
        let mut map = ::indexmap::IndexMap::new();
        $(map.insert(::std::string::String::from($name), $crate::Doc::from($value));)*
        $crate::Doc::Object(map)
    }};
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PathStep {
    Field(String),
    Index(usize),
    Wildcard,
}

/// A navigation path such as `dependents[0].name` or `readings[*].temp`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PathExpr {
    steps: Vec<PathStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid path {text:?}: {reason}")]
pub struct PathParseError {
    pub text: String,
    pub reason: &'static str,
}

impl PathExpr {
    /// Returns `None` for an empty step list.
    pub fn new(steps: Vec<PathStep>) -> Option<Self> {
        if steps.is_empty() {
            None
        } else {
            Some(PathExpr { steps })
        }
    }

    pub fn field(name: &str) -> Self {
        PathExpr {
            steps: vec![PathStep::Field(name.to_owned())],
        }
    }

    pub fn steps(&self) -> &[PathStep] {
        &self.steps
    }

    pub fn has_wildcard(&self) -> bool {
        self.steps.iter().any(|s| matches!(s, PathStep::Wildcard))
    }

    pub fn join(&self, rest: &[PathStep]) -> PathExpr {
        let mut steps = self.steps.clone();
        steps.extend_from_slice(rest);
        PathExpr { steps }
    }

    /// Parses dotted syntax: `a.b[2].c`, `a[*].b`. Field names may not
    /// contain `.`, `[` or `]`.
    pub fn parse(text: &str) -> Result<Self, PathParseError> {
        let err = |reason| PathParseError {
            text: text.to_owned(),
            reason,
        };
        parse_steps(text)
            .map_err(err)
            .and_then(|steps| PathExpr::new(steps).ok_or_else(|| err("empty path")))
    }
}

pub(crate) fn parse_steps(text: &str) -> Result<Vec<PathStep>, &'static str> {
    let mut steps = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    let mut expect_field = true;
    while i < bytes.len() {
        match bytes[i] {
            b'.' => {
                if expect_field {
                    return Err("empty field name");
                }
                expect_field = true;
                i += 1;
            }
            b'[' => {
                let close = text[i..].find(']').ok_or("unterminated index")? + i;
                let inner = &text[i + 1..close];
                if inner == "*" {
                    steps.push(PathStep::Wildcard);
                } else {
                    let idx = inner.parse::<usize>().map_err(|_| "bad index")?;
                    steps.push(PathStep::Index(idx));
                }
                expect_field = false;
                i = close + 1;
            }
            _ => {
                if !expect_field {
                    return Err("expected '.' or '['");
                }
                let end = text[i..]
                    .find(['.', '['])
                    .map(|p| p + i)
                    .unwrap_or(text.len());
                if text[i..end].contains(']') {
                    return Err("stray ']'");
                }
                steps.push(PathStep::Field(text[i..end].to_owned()));
                expect_field = false;
                i = end;
            }
        }
    }
    if expect_field && !steps.is_empty() {
        return Err("trailing '.'");
    }
    Ok(steps)
}

impl fmt::Display for PathExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, step) in self.steps.iter().enumerate() {
            match step {
                PathStep::Field(name) => {
                    if i > 0 {
                        f.write_str(".")?;
                    }
                    f.write_str(name)?;
                }
                PathStep::Index(idx) => write!(f, "[{idx}]")?,
                PathStep::Wildcard => f.write_str("[*]")?,
            }
        }
        Ok(())
    }
}

/// Tree-walk evaluation of a path. `None` means MISSING.
///
/// A wildcard step maps the remaining steps over every array item and keeps
/// the non-missing results in item order.
pub fn navigate(doc: &Doc, steps: &[PathStep]) -> Option<Doc> {
    let Some((step, rest)) = steps.split_first() else {
        return Some(doc.clone());
    };
    match (step, doc) {
        (PathStep::Field(name), Doc::Object(map)) => map.get(name).and_then(|d| navigate(d, rest)),
        (PathStep::Index(i), Doc::Array(items)) => items.get(*i).and_then(|d| navigate(d, rest)),
        (PathStep::Wildcard, Doc::Array(items)) => Some(Doc::Array(
            items.iter().filter_map(|d| navigate(d, rest)).collect(),
        )),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_keys() {
        assert!(Doc::from_json(r#"{"a":1,"a":2}"#).is_err());
        assert!(Doc::from_json(r#"{"a":{"b":1,"b":1}}"#).is_err());
    }

    #[test]
    fn rejects_oversized_unsigned() {
        assert!(Doc::from_json("18446744073709551615").is_err());
        assert_eq!(Doc::from_json("9223372036854775807").unwrap(), Doc::Int(i64::MAX));
    }

    #[test]
    fn keeps_int_double_distinction() {
        let d = Doc::from_json(r#"{"a":1,"b":1.0,"c":-2.5e3}"#).unwrap();
        assert_eq!(d.get("a"), Some(&Doc::Int(1)));
        assert_eq!(d.get("b"), Some(&Doc::Double(1.0)));
        assert_eq!(Doc::from_json(&d.to_json()).unwrap(), d);
    }

    #[test]
    fn path_parse_and_display() {
        for text in ["a", "a.b", "dependents[0].name", "readings[*].temp", "a[1][2]"] {
            assert_eq!(PathExpr::parse(text).unwrap().to_string(), text);
        }
        for bad in ["", ".a", "a.", "a..b", "a[x]", "a[1", "a]b"] {
            assert!(PathExpr::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn navigate_wildcard_skips_missing() {
        let d = Doc::from_json(r#"{"deps":[{"name":"a"},"x",{"name":"b"}]}"#).unwrap();
        let p = PathExpr::parse("deps[*].name").unwrap();
        assert_eq!(
            navigate(&d, p.steps()),
            Some(Doc::Array(vec![Doc::from("a"), Doc::from("b")]))
        );
        assert_eq!(navigate(&d, PathExpr::parse("deps[1]").unwrap().steps()), Some(Doc::from("x")));
        assert_eq!(navigate(&d, PathExpr::parse("deps.name").unwrap().steps()), None);
        assert_eq!(navigate(&d, PathExpr::parse("nope[*]").unwrap().steps()), None);
    }
}
