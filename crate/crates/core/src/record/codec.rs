use indexmap::IndexMap;

use super::bits::{packed_len, payload_width, BitWriter};
use super::cursor::{Cursor, Event, FieldRef, Nest, Scalar};
use super::{
    DeclaredFields, Header, RecordError, TypeTag, VbRecord, FIELDNAME_PAYLOAD_CAP, HEADER_LEN,
    MAX_FIELD_NAME_LEN, VAR_LEN_CAP,
};
use crate::doc::Doc;
use crate::schema::{FieldNameId, SchemaStore};

#[derive(Default)]
struct Parts {
    tags: Vec<u8>,
    fixed: Vec<u8>,
    var_lens: Vec<u64>,
    var: Vec<u8>,
    entries: Vec<(bool, u64)>,
    names: Vec<u8>,
}

impl Parts {
    fn visit(&mut self, value: &Doc, root_declared: Option<&DeclaredFields>) -> Result<(), RecordError> {
        match value {
            Doc::Object(map) => {
                self.tags.push(TypeTag::Object as u8);
                for (name, child) in map {
                    match root_declared.and_then(|d| d.index_of(name)) {
                        Some(index) => self.entries.push((true, index as u64)),
                        None => {
                            if name.len() > MAX_FIELD_NAME_LEN {
                                return Err(RecordError::FieldNameTooLong(name.len()));
                            }
                            self.entries.push((false, name.len() as u64));
                            self.names.extend_from_slice(name.as_bytes());
                        }
                    }
                    self.visit(child, None)?;
                }
                if root_declared.is_none() {
                    self.tags.push(TypeTag::CloseNest as u8);
                }
            }
            Doc::Array(items) => {
                self.tags.push(TypeTag::Array as u8);
                for item in items {
                    self.visit(item, None)?;
                }
                self.tags.push(TypeTag::CloseNest as u8);
            }
            Doc::String(s) => {
                if s.len() as u64 > u32::MAX as u64 {
                    return Err(RecordError::StringTooLong(s.len()));
                }
                self.tags.push(TypeTag::String as u8);
                self.var_lens.push(s.len() as u64);
                self.var.extend_from_slice(s.as_bytes());
            }
            Doc::Int(v) => {
                self.tags.push(TypeTag::Int64 as u8);
                self.fixed.extend_from_slice(&v.to_le_bytes());
            }
            Doc::Double(v) => {
                self.tags.push(TypeTag::Double as u8);
                self.fixed.extend_from_slice(&v.to_le_bytes());
            }
            Doc::Bool(v) => {
                self.tags.push(TypeTag::Boolean as u8);
                self.fixed.push(*v as u8);
            }
            Doc::Null => self.tags.push(TypeTag::Null as u8),
        }
        Ok(())
    }
}

/// Encodes a document into an uncompacted record. Root fields listed in
/// `declared` store only their declared index.
pub fn encode(doc: &Doc, declared: &DeclaredFields) -> Result<VbRecord, RecordError> {
    if !matches!(doc, Doc::Object(_)) {
        return Err(RecordError::NonObjectRoot(doc.kind_name()));
    }
    let mut parts = Parts::default();
    parts.visit(doc, Some(declared))?;
    parts.tags.push(TypeTag::Eov as u8);

    let var_len_bits = lengths_width(&parts.var_lens)?;
    let mut vl = BitWriter::default();
    for &len in &parts.var_lens {
        vl.push(len, var_len_bits);
    }
    assemble(
        &parts.tags,
        var_len_bits,
        &vl.finish(),
        &parts.fixed,
        &parts.var,
        &parts.entries,
        Some(&parts.names),
    )
}

fn lengths_width(lengths: &[u64]) -> Result<u8, RecordError> {
    match lengths.iter().max() {
        None => Ok(0),
        Some(&max) => payload_width(max, VAR_LEN_CAP).ok_or(RecordError::StringTooLong(max as usize)),
    }
}

fn entries_width(entries: &[(bool, u64)]) -> Result<u8, RecordError> {
    match entries.iter().map(|e| e.1).max() {
        None => Ok(0),
        Some(max) => payload_width(max, FIELDNAME_PAYLOAD_CAP)
            .map(|w| w + 1)
            .ok_or(RecordError::FieldNameTooLong(max as usize)),
    }
}

fn assemble(
    tags: &[u8],
    var_len_bits: u8,
    var_lens_packed: &[u8],
    fixed: &[u8],
    var: &[u8],
    entries: &[(bool, u64)],
    names: Option<&[u8]>,
) -> Result<VbRecord, RecordError> {
    let fieldname_len_bits = entries_width(entries)?;
    let mut packed = BitWriter::default();
    for &(declared, payload) in entries {
        let flag = (declared as u64) << (fieldname_len_bits - 1);
        packed.push(flag | payload, fieldname_len_bits);
    }
    let packed = packed.finish();
    debug_assert_eq!(packed.len(), packed_len(entries.len(), fieldname_len_bits));

    let offset_fixed = HEADER_LEN + tags.len() + var_lens_packed.len();
    let offset_var = offset_fixed + fixed.len();
    let offset_entries = offset_var + var.len();
    let names_start = offset_entries + packed.len();
    let total = names_start + names.map_or(0, <[u8]>::len);
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| RecordError::StringTooLong(total));

    let header = Header {
        total_length: to_u32(total)?,
        tag_count: to_u32(tags.len())?,
        offset_tags: HEADER_LEN as u32,
        offset_fixed: to_u32(offset_fixed)?,
        offset_var: to_u32(offset_var)?,
        offset_fieldname_entries: to_u32(offset_entries)?,
        offset_fieldnames: if names.is_some() { to_u32(names_start)? } else { 0 },
        var_len_bits,
        fieldname_len_bits,
    };
    let mut out = Vec::with_capacity(total);
    header.write(&mut out);
    out.extend_from_slice(tags);
    out.extend_from_slice(var_lens_packed);
    out.extend_from_slice(fixed);
    out.extend_from_slice(var);
    out.extend_from_slice(&packed);
    if let Some(names) = names {
        out.extend_from_slice(names);
    }
    Ok(VbRecord::from_bytes_unchecked(out))
}

/// Replaces inline field names with their dictionary IDs. The tag, fixed and
/// variable-length vectors are copied unchanged.
pub fn compact(rec: &VbRecord, schema: &SchemaStore) -> Result<VbRecord, RecordError> {
    let bytes = rec.as_bytes();
    let mut cursor = Cursor::new(bytes)?;
    let h = *cursor.header();
    if h.is_compacted() {
        return Err(RecordError::AlreadyCompacted);
    }
    let mut entries = Vec::new();
    while let Some(event) = cursor.next_event()? {
        let field = match event {
            Event::Begin { field, .. } | Event::Value { field, .. } => field,
            Event::End => None,
        };
        match field {
            None => {}
            Some(FieldRef::Declared(index)) => entries.push((true, index as u64)),
            Some(FieldRef::Name(name)) => {
                let id = schema
                    .lookup_name(name)
                    .ok_or_else(|| RecordError::UnknownFieldName(name.to_owned()))?;
                entries.push((false, id.0 as u64));
            }
            Some(FieldRef::Id(_)) => unreachable!("uncompacted records carry names"),
        }
    }
    let tags_end = h.tags_end();
    assemble(
        rec.region(h.offset_tags as usize, tags_end),
        h.var_len_bits,
        rec.region(tags_end, h.offset_fixed as usize),
        rec.region(h.offset_fixed as usize, h.offset_var as usize),
        rec.region(h.offset_var as usize, h.offset_fieldname_entries as usize),
        &entries,
        None,
    )
}

pub(crate) fn resolve_name(
    field: FieldRef<'_>,
    schema: Option<&SchemaStore>,
    declared: &DeclaredFields,
) -> Result<String, RecordError> {
    name_str(field, schema, declared).map(str::to_owned)
}

pub(crate) fn name_str<'x>(
    field: FieldRef<'x>,
    schema: Option<&'x SchemaStore>,
    declared: &'x DeclaredFields,
) -> Result<&'x str, RecordError> {
    match field {
        FieldRef::Name(name) => Ok(name),
        FieldRef::Declared(index) => declared.name(index).ok_or(RecordError::UnknownDeclaredIndex(index)),
        FieldRef::Id(id) => schema
            .ok_or(RecordError::MissingSchema)?
            .name_of(FieldNameId(id))
            .ok_or(RecordError::UnknownFieldNameId(id)),
    }
}

pub(crate) fn scalar_doc(value: Scalar<'_>) -> Doc {
    match value {
        Scalar::Str(s) => Doc::String(s.to_owned()),
        Scalar::Int(v) => Doc::Int(v),
        Scalar::Double(v) => Doc::Double(v),
        Scalar::Bool(v) => Doc::Bool(v),
        Scalar::Null => Doc::Null,
    }
}

enum Frame {
    Object(IndexMap<String, Doc>),
    Array(Vec<Doc>),
}

/// Rebuilds a document subtree from a stream of cursor events.
#[derive(Default)]
pub(crate) struct TreeBuilder {
    frames: Vec<(Option<String>, Frame)>,
}

impl TreeBuilder {
    pub fn begin(&mut self, nest: Nest, name: Option<String>) {
        let frame = match nest {
            Nest::Object => Frame::Object(IndexMap::new()),
            Nest::Array => Frame::Array(Vec::new()),
        };
        self.frames.push((name, frame));
    }

    /// Adds a completed value. Returns it back when no frame is open.
    pub fn value(&mut self, name: Option<String>, value: Doc) -> Result<Option<Doc>, RecordError> {
        match self.frames.last_mut() {
            None => Ok(Some(value)),
            Some((_, Frame::Array(items))) => {
                items.push(value);
                Ok(None)
            }
            Some((_, Frame::Object(map))) => {
                let name = name.expect("object children carry names");
                if map.contains_key(&name) {
                    return Err(RecordError::DuplicateField(name));
                }
                map.insert(name, value);
                Ok(None)
            }
        }
    }

    /// Closes the innermost frame; returns the finished tree once the
    /// outermost frame closes.
    pub fn end(&mut self) -> Result<Option<Doc>, RecordError> {
        let (name, frame) = self.frames.pop().expect("end without begin");
        let doc = match frame {
            Frame::Object(map) => Doc::Object(map),
            Frame::Array(items) => Doc::Array(items),
        };
        self.value(name, doc)
    }
}

/// Feeds events into `builder` until the subtree opened by the most recent
/// `begin` closes.
pub(crate) fn build_subtree(
    cursor: &mut Cursor<'_>,
    builder: &mut TreeBuilder,
    schema: Option<&SchemaStore>,
    declared: &DeclaredFields,
) -> Result<Doc, RecordError> {
    loop {
        let Some(event) = cursor.next_event()? else {
            return Err(RecordError::Malformed {
                offset: 0,
                reason: "record ended inside a nested value",
            });
        };
        let done = match event {
            Event::Begin { nest, field } => {
                let name = field.map(|f| resolve_name(f, schema, declared)).transpose()?;
                builder.begin(nest, name);
                None
            }
            Event::Value { field, value } => {
                let name = field.map(|f| resolve_name(f, schema, declared)).transpose()?;
                builder.value(name, scalar_doc(value))?
            }
            Event::End => builder.end()?,
        };
        if let Some(doc) = done {
            return Ok(doc);
        }
    }
}

/// Decodes a record back into its document. Compacted records resolve
/// FieldNameIDs through `schema`; declared indexes resolve through
/// `declared`.
pub fn decode(
    rec: &VbRecord,
    schema: Option<&SchemaStore>,
    declared: &DeclaredFields,
) -> Result<Doc, RecordError> {
    let mut cursor = Cursor::new(rec.as_bytes())?;
    let Some(Event::Begin { nest, .. }) = cursor.next_event()? else {
        unreachable!("cursor always opens with the root");
    };
    let mut builder = TreeBuilder::default();
    builder.begin(nest, None);
    let doc = build_subtree(&mut cursor, &mut builder, schema, declared)?;
    if cursor.next_event()?.is_some() {
        return Err(RecordError::Malformed {
            offset: 0,
            reason: "values after the root",
        });
    }
    Ok(doc)
}
