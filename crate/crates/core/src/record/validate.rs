use std::collections::HashSet;
use std::fmt;

use super::bits::{packed_len, payload_width, BitReader};
use super::cursor::{Cursor, Event, FieldRef};
use super::{Header, RecordError, TypeTag, FIELDNAME_PAYLOAD_CAP, HEADER_LEN, VAR_LEN_CAP};

/// First broken invariant found in a record image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Byte position in the record where the problem was detected.
    pub offset: usize,
    /// Index into the tag vector, for tag-stream violations.
    pub tag_index: Option<usize>,
    pub reason: &'static str,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at byte {}", self.reason, self.offset)?;
        if let Some(t) = self.tag_index {
            write!(f, " (tag {t})")?;
        }
        Ok(())
    }
}

impl std::error::Error for Violation {}

fn at(offset: usize, reason: &'static str) -> Violation {
    Violation {
        offset,
        tag_index: None,
        reason,
    }
}

fn at_tag(h: &Header, index: usize, reason: &'static str) -> Violation {
    Violation {
        offset: h.offset_tags as usize + index,
        tag_index: Some(index),
        reason,
    }
}

struct TagCounts {
    strings: usize,
    fixed_bytes: usize,
    object_children: usize,
}

fn scan_tags(h: &Header, tags: &[u8]) -> Result<TagCounts, Violation> {
    let mut counts = TagCounts {
        strings: 0,
        fixed_bytes: 0,
        object_children: 0,
    };
    if tags.last() != Some(&(TypeTag::Eov as u8)) {
        return Err(at_tag(h, tags.len(), "tag stream missing EOV"));
    }
    let mut stack: Vec<TypeTag> = Vec::new();
    let mut closed = false;
    for (i, &b) in tags.iter().enumerate() {
        let tag = TypeTag::from_byte(b).ok_or_else(|| at_tag(h, i, "unknown type tag"))?;
        if closed {
            return Err(at_tag(
                h,
                i,
                if tag == TypeTag::Eov { "duplicate EOV" } else { "tag after EOV" },
            ));
        }
        if i == 0 && !tag.is_nest() {
            return Err(at_tag(h, i, "first tag must be OBJECT or ARRAY"));
        }
        match tag {
            TypeTag::Eov => {
                if stack.len() != 1 {
                    return Err(at_tag(h, i, "EOV inside an open nested value"));
                }
                stack.pop();
                closed = true;
                continue;
            }
            TypeTag::CloseNest => {
                if stack.len() < 2 {
                    return Err(at_tag(h, i, "CLOSE_NEST without an open nested value"));
                }
                stack.pop();
                continue;
            }
            _ => {}
        }
        if stack.last() == Some(&TypeTag::Object) {
            counts.object_children += 1;
        }
        counts.fixed_bytes += tag.fixed_size();
        if tag == TypeTag::String {
            counts.strings += 1;
        }
        if tag.is_nest() {
            stack.push(tag);
        }
    }
    if !closed {
        return Err(at_tag(h, tags.len(), "tag stream missing EOV"));
    }
    Ok(counts)
}

fn padding_bits(count: usize, width: u8) -> u8 {
    ((8 - count * width as usize % 8) % 8) as u8
}

/// Checks every structural invariant of a record image: header anchors,
/// tag-stream shape, vector sizes, bit-width rules and value contents.
pub fn validate(bytes: &[u8]) -> Result<(), Violation> {
    let h = Header::parse(bytes).ok_or_else(|| at(0, "truncated header"))?;
    if h.total_length as usize != bytes.len() {
        return Err(at(0, "total_length does not match record size"));
    }
    if h.offset_tags as usize != HEADER_LEN {
        return Err(at(8, "tags must follow the header"));
    }
    let tags_end = h.tags_end();
    if tags_end > bytes.len() {
        return Err(at(4, "tag_count overruns the record"));
    }
    let entries_end = h.entries_end();
    if !h.is_compacted() && (h.offset_fieldnames as usize) < h.offset_fieldname_entries as usize {
        return Err(at(24, "field-name values precede their entries"));
    }
    let ordered = tags_end <= h.offset_fixed as usize
        && h.offset_fixed <= h.offset_var
        && h.offset_var <= h.offset_fieldname_entries
        && h.offset_fieldname_entries as usize <= entries_end
        && entries_end <= bytes.len();
    if !ordered {
        return Err(at(12, "vector offsets out of order"));
    }

    let counts = scan_tags(&h, &bytes[h.offset_tags as usize..tags_end])?;

    // Variable-length section.
    let vl = &bytes[tags_end..h.offset_fixed as usize];
    if (counts.strings == 0) != (h.var_len_bits == 0) || h.var_len_bits > VAR_LEN_CAP {
        return Err(at(28, "var_len_bits inconsistent with string count"));
    }
    if vl.len() != packed_len(counts.strings, h.var_len_bits) {
        return Err(at(tags_end, "variable-length lengths have the wrong size"));
    }
    if (h.offset_var - h.offset_fixed) as usize != counts.fixed_bytes {
        return Err(at(h.offset_fixed as usize, "fixed-length vector has the wrong size"));
    }
    let mut reader = BitReader::new(vl);
    let mut sum = 0u64;
    let mut max = None;
    for _ in 0..counts.strings {
        let len = reader.read(h.var_len_bits).expect("size checked above");
        sum += len;
        max = max.max(Some(len));
    }
    if reader.read(padding_bits(counts.strings, h.var_len_bits)) != Some(0) {
        return Err(at(h.offset_fixed as usize - 1, "non-zero padding in variable-length lengths"));
    }
    if sum != (h.offset_fieldname_entries - h.offset_var) as u64 {
        return Err(at(h.offset_var as usize, "variable-length values do not match their lengths"));
    }
    if let Some(max) = max {
        if payload_width(max, VAR_LEN_CAP) != Some(h.var_len_bits) {
            return Err(at(28, "var_len_bits is not the width rule for the longest value"));
        }
    }

    // Field-name section.
    let ne = &bytes[h.offset_fieldname_entries as usize..entries_end];
    let width = h.fieldname_len_bits;
    if (counts.object_children == 0) != (width == 0) || width > FIELDNAME_PAYLOAD_CAP + 1 || width == 1 {
        return Err(at(29, "fieldname_len_bits inconsistent with field count"));
    }
    if ne.len() != packed_len(counts.object_children, width) {
        return Err(at(h.offset_fieldname_entries as usize, "field-name entries have the wrong size"));
    }
    let mut reader = BitReader::new(ne);
    let mut name_bytes = 0u64;
    let mut max_payload = None;
    for _ in 0..counts.object_children {
        let entry = reader.read(width).expect("size checked above");
        let payload = entry & ((1 << (width - 1)) - 1);
        max_payload = max_payload.max(Some(payload));
        if entry >> (width - 1) == 0 && !h.is_compacted() {
            name_bytes += payload;
        }
    }
    if reader.read(padding_bits(counts.object_children, width)) != Some(0) {
        return Err(at(entries_end.saturating_sub(1), "non-zero padding in field-name entries"));
    }
    if let Some(max) = max_payload {
        if payload_width(max, FIELDNAME_PAYLOAD_CAP).map(|w| w + 1) != Some(width) {
            return Err(at(29, "fieldname_len_bits is not the width rule for the largest entry"));
        }
    }
    if !h.is_compacted() && name_bytes != (bytes.len() - h.offset_fieldnames as usize) as u64 {
        return Err(at(h.offset_fieldnames as usize, "field-name values do not match their lengths"));
    }

    check_contents(bytes)
}

#[derive(Hash, PartialEq, Eq)]
enum FieldKey<'a> {
    Declared(u32),
    Name(&'a str),
    Id(u32),
}

/// Walks the record once more for value-level checks (UTF-8, booleans,
/// duplicate fields within one object).
fn check_contents(bytes: &[u8]) -> Result<(), Violation> {
    let to_violation = |e: RecordError| match e {
        RecordError::Malformed { offset, reason } => at(offset, reason),
        _ => at(0, "unreadable record"),
    };
    let mut cursor = Cursor::new(bytes).map_err(to_violation)?;
    let mut seen: Vec<Option<HashSet<FieldKey<'_>>>> = Vec::new();
    while let Some(event) = cursor.next_event().map_err(to_violation)? {
        let field = match event {
            Event::End => {
                seen.pop();
                continue;
            }
            Event::Begin { field, .. } | Event::Value { field, .. } => field,
        };
        if let (Some(field), Some(Some(set))) = (field, seen.last_mut()) {
            let key = match field {
                FieldRef::Declared(i) => FieldKey::Declared(i),
                FieldRef::Name(n) => FieldKey::Name(n),
                FieldRef::Id(i) => FieldKey::Id(i),
            };
            if !set.insert(key) {
                return Err(Violation {
                    offset: 0,
                    tag_index: Some(cursor.tag_index() - 1),
                    reason: "duplicate field in one object",
                });
            }
        }
        if let Event::Begin { nest, .. } = event {
            seen.push((nest == super::Nest::Object).then(HashSet::new));
        }
    }
    Ok(())
}
