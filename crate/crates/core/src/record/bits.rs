//! MSB-first bit packing for the length and field-name sub-vectors.

#[derive(Debug, Default)]
pub(crate) struct BitWriter {
    buf: Vec<u8>,
    bits: usize,
}

impl BitWriter {
    pub fn push(&mut self, value: u64, width: u8) {
        debug_assert!(width <= 64);
        debug_assert!(width == 64 || value >> width == 0, "{value} does not fit {width} bits");
        for i in (0..width).rev() {
            if self.bits % 8 == 0 {
                self.buf.push(0);
            }
            if (value >> i) & 1 == 1 {
                let last = self.buf.len() - 1;
                self.buf[last] |= 0x80 >> (self.bits % 8);
            }
            self.bits += 1;
        }
    }

    /// Bytes with the final byte zero-padded.
    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        BitReader { data, pos: 0 }
    }

    pub fn read(&mut self, width: u8) -> Option<u64> {
        let end = self.pos + width as usize;
        if end > self.data.len() * 8 {
            return None;
        }
        let mut value = 0u64;
        for bit in self.pos..end {
            let b = (self.data[bit / 8] >> (7 - bit % 8)) & 1;
            value = (value << 1) | b as u64;
        }
        self.pos = end;
        Some(value)
    }
}

/// Number of bytes needed for `count` entries of `width` bits.
pub(crate) fn packed_len(count: usize, width: u8) -> usize {
    (count * width as usize).div_ceil(8)
}

pub(crate) fn bit_length(v: u64) -> u8 {
    (64 - v.leading_zeros()) as u8
}

/// Payload width for a sub-vector whose largest payload is `max`:
/// `ceil(log2(max)) + 1`, at least one bit, clamped to `cap` when the value
/// still fits. Returns `None` when `max` needs more than `cap` bits.
pub(crate) fn payload_width(max: u64, cap: u8) -> Option<u8> {
    if bit_length(max) > cap {
        return None;
    }
    let rule = if max <= 1 { 1 } else { bit_length(max - 1) + 1 };
    Some(rule.min(cap))
}
