use super::bits::BitReader;
use super::{note_tag_scan, Header, RecordError, TypeTag, FIELDNAME_PAYLOAD_CAP, HEADER_LEN, VAR_LEN_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Nest {
    Object,
    Array,
}

/// How a value's field name is stored in its entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum FieldRef<'a> {
    Declared(u32),
    Name(&'a str),
    Id(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Scalar<'a> {
    Str(&'a str),
    Int(i64),
    Double(f64),
    Bool(bool),
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Event<'a> {
    Begin { nest: Nest, field: Option<FieldRef<'a>> },
    Value { field: Option<FieldRef<'a>>, value: Scalar<'a> },
    End,
}

fn malformed<T>(offset: usize, reason: &'static str) -> Result<T, RecordError> {
    Err(RecordError::Malformed { offset, reason })
}

/// Single forward pass over the tag vector, pulling values and field names
/// from the other vectors as each tag is consumed.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    header: Header,
    tag: usize,
    tags_end: usize,
    var_lens: BitReader<'a>,
    fixed: usize,
    fixed_end: usize,
    var: usize,
    var_end: usize,
    entries: BitReader<'a>,
    entries_start: usize,
    names: usize,
    names_end: usize,
    stack: Vec<Nest>,
    started: bool,
    finished: bool,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Cursor<'a>, RecordError> {
        note_tag_scan();
        let Some(h) = Header::parse(bytes) else {
            return malformed(0, "truncated header");
        };
        if h.total_length as usize != bytes.len() {
            return malformed(0, "total_length does not match record size");
        }
        if h.offset_tags as usize != HEADER_LEN {
            return malformed(8, "tags must follow the header");
        }
        let tags_end = h.offset_tags as usize + h.tag_count as usize;
        let entries_end = h.entries_end();
        let ordered = tags_end <= h.offset_fixed as usize
            && h.offset_fixed <= h.offset_var
            && h.offset_var <= h.offset_fieldname_entries
            && h.offset_fieldname_entries as usize <= entries_end
            && entries_end <= bytes.len();
        if !ordered {
            return malformed(12, "vector offsets out of order");
        }
        if h.var_len_bits > VAR_LEN_CAP || h.fieldname_len_bits > FIELDNAME_PAYLOAD_CAP + 1 {
            return malformed(28, "bit width above cap");
        }
        let (names, names_end) = if h.is_compacted() {
            (bytes.len(), bytes.len())
        } else {
            (h.offset_fieldnames as usize, bytes.len())
        };
        Ok(Cursor {
            bytes,
            header: h,
            tag: h.offset_tags as usize,
            tags_end,
            var_lens: BitReader::new(&bytes[tags_end..h.offset_fixed as usize]),
            fixed: h.offset_fixed as usize,
            fixed_end: h.offset_var as usize,
            var: h.offset_var as usize,
            var_end: h.offset_fieldname_entries as usize,
            entries: BitReader::new(&bytes[h.offset_fieldname_entries as usize..entries_end]),
            entries_start: h.offset_fieldname_entries as usize,
            names,
            names_end,
            stack: Vec::new(),
            started: false,
            finished: false,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    /// Index of the next tag to be consumed.
    pub fn tag_index(&self) -> usize {
        self.tag - self.header.offset_tags as usize
    }

    pub fn next_event(&mut self) -> Result<Option<Event<'a>>, RecordError> {
        if self.finished {
            return Ok(None);
        }
        if self.started && self.stack.is_empty() {
            self.finished = true;
            return Ok(None);
        }
        if self.tag >= self.tags_end {
            return malformed(self.tag, "tag stream ends without EOV");
        }
        let pos = self.tag;
        let Some(tag) = TypeTag::from_byte(self.bytes[pos]) else {
            return malformed(pos, "unknown type tag");
        };
        self.tag += 1;

        if !self.started {
            self.started = true;
            let nest = match tag {
                TypeTag::Object => Nest::Object,
                TypeTag::Array => Nest::Array,
                _ => return malformed(pos, "first tag must be OBJECT or ARRAY"),
            };
            self.stack.push(nest);
            return Ok(Some(Event::Begin { nest, field: None }));
        }

        let parent = *self.stack.last().expect("root is open until EOV");
        match tag {
            TypeTag::Eov => {
                if self.stack.len() > 1 {
                    return malformed(pos, "EOV inside an open nested value");
                }
                if self.tag != self.tags_end {
                    return malformed(self.tag, "tags after EOV");
                }
                self.check_consumed()?;
                self.stack.pop();
                Ok(Some(Event::End))
            }
            TypeTag::CloseNest => {
                if self.stack.len() == 1 {
                    return malformed(pos, "CLOSE_NEST cannot close the root");
                }
                self.stack.pop();
                Ok(Some(Event::End))
            }
            _ => {
                let field = if parent == Nest::Object {
                    Some(self.read_field()?)
                } else {
                    None
                };
                match tag {
                    TypeTag::Object | TypeTag::Array => {
                        let nest = if tag == TypeTag::Object { Nest::Object } else { Nest::Array };
                        self.stack.push(nest);
                        Ok(Some(Event::Begin { nest, field }))
                    }
                    _ => {
                        let value = self.read_scalar(tag)?;
                        Ok(Some(Event::Value { field, value }))
                    }
                }
            }
        }
    }

    /// Consumes events up to and including the `End` matching a `Begin` that
    /// was just returned.
    pub fn skip_nested(&mut self) -> Result<(), RecordError> {
        let target = self.stack.len() - 1;
        while self.stack.len() > target {
            if self.next_event()?.is_none() {
                return malformed(self.tag, "unbalanced nesting");
            }
        }
        Ok(())
    }

    fn check_consumed(&self) -> Result<(), RecordError> {
        if self.fixed != self.fixed_end {
            return malformed(self.fixed, "unconsumed fixed-length bytes");
        }
        if self.var != self.var_end {
            return malformed(self.var, "unconsumed variable-length bytes");
        }
        if self.names != self.names_end {
            return malformed(self.names, "unconsumed field-name bytes");
        }
        Ok(())
    }

    fn read_field(&mut self) -> Result<FieldRef<'a>, RecordError> {
        let width = self.header.fieldname_len_bits;
        if width < 2 {
            return malformed(29, "field-name width too small");
        }
        let Some(entry) = self.entries.read(width) else {
            return malformed(self.entries_start, "field-name entries exhausted");
        };
        let payload_bits = width - 1;
        let payload = entry & ((1u64 << payload_bits) - 1);
        if entry >> payload_bits == 1 {
            return Ok(FieldRef::Declared(payload as u32));
        }
        if self.header.is_compacted() {
            return Ok(FieldRef::Id(payload as u32));
        }
        let len = payload as usize;
        let end = self.names + len;
        if end > self.names_end {
            return malformed(self.names, "field name overruns the record");
        }
        let Ok(name) = std::str::from_utf8(&self.bytes[self.names..end]) else {
            return malformed(self.names, "field name is not UTF-8");
        };
        self.names = end;
        Ok(FieldRef::Name(name))
    }

    fn take_fixed(&mut self, n: usize) -> Result<&'a [u8], RecordError> {
        let end = self.fixed + n;
        if end > self.fixed_end {
            return malformed(self.fixed, "fixed-length vector exhausted");
        }
        let out = &self.bytes[self.fixed..end];
        self.fixed = end;
        Ok(out)
    }

    fn read_scalar(&mut self, tag: TypeTag) -> Result<Scalar<'a>, RecordError> {
        Ok(match tag {
            TypeTag::Int64 => Scalar::Int(i64::from_le_bytes(self.take_fixed(8)?.try_into().unwrap())),
            TypeTag::Double => Scalar::Double(f64::from_le_bytes(self.take_fixed(8)?.try_into().unwrap())),
            TypeTag::Boolean => {
                let at = self.fixed;
                match self.take_fixed(1)?[0] {
                    0 => Scalar::Bool(false),
                    1 => Scalar::Bool(true),
                    _ => return malformed(at, "boolean byte is not 0 or 1"),
                }
            }
            TypeTag::Null => Scalar::Null,
            TypeTag::String => {
                let width = self.header.var_len_bits;
                if width == 0 {
                    return malformed(28, "string present with zero length width");
                }
                let Some(len) = self.var_lens.read(width) else {
                    return malformed(self.tags_end, "variable-length lengths exhausted");
                };
                let end = self.var + len as usize;
                if end > self.var_end {
                    return malformed(self.var, "string overruns the variable-length vector");
                }
                let Ok(s) = std::str::from_utf8(&self.bytes[self.var..end]) else {
                    return malformed(self.var, "string is not UTF-8");
                };
                self.var = end;
                Scalar::Str(s)
            }
            _ => unreachable!("nest and control tags handled by caller"),
        })
    }
}
