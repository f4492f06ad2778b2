//! Bit-addressed storage for fields of arbitrary width.
//!
//! Fields of an element are laid out back to back with no alignment, so a
//! field may straddle two physical words. Bits are numbered LSB-first inside
//! each word and a straddling field keeps its low bits in the earlier word.
//! Each element starts on a fresh word.

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("word size must be 32 or 64 bits, got {0}")]
    WordBits(u32),
    #[error("field `{name}` has width {width}, expected 1..={word_bits}")]
    FieldWidth {
        name: String,
        width: u32,
        word_bits: u32,
    },
    #[error("duplicate field name `{0}`")]
    DuplicateField(String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("element index {index} out of bounds for {len} elements")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("value {value:#x} does not fit in {width} bits")]
    ValueTooWide { value: u64, width: u32 },
    #[error("malformed buffer dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSlot {
    pub name: String,
    pub width: u32,
    pub offset: u64,
}

/// Placement of an element's fields relative to the element's first bit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackLayout {
    word_bits: u32,
    fields: Vec<FieldSlot>,
    total_bits: u64,
}

#[inline]
fn low_mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

impl PackLayout {
    /// Place fields contiguously in declaration order.
    pub fn plan<S: AsRef<str>>(widths: &[(S, u32)], word_bits: u32) -> Result<Self, PackError> {
        if word_bits != 32 && word_bits != 64 {
            return Err(PackError::WordBits(word_bits));
        }
        let mut fields: Vec<FieldSlot> = Vec::with_capacity(widths.len());
        let mut offset = 0u64;
        for (name, width) in widths {
            let name = name.as_ref();
            if *width == 0 || *width > word_bits {
                return Err(PackError::FieldWidth {
                    name: name.to_string(),
                    width: *width,
                    word_bits,
                });
            }
            if fields.iter().any(|f| f.name == name) {
                return Err(PackError::DuplicateField(name.to_string()));
            }
            fields.push(FieldSlot {
                name: name.to_string(),
                width: *width,
                offset,
            });
            offset += *width as u64;
        }
        Ok(Self {
            word_bits,
            fields,
            total_bits: offset,
        })
    }

    pub fn word_bits(&self) -> u32 {
        self.word_bits
    }

    pub fn fields(&self) -> &[FieldSlot] {
        &self.fields
    }

    pub fn total_bits(&self) -> u64 {
        self.total_bits
    }

    pub fn words_needed(&self) -> usize {
        self.total_bits.div_ceil(self.word_bits as u64) as usize
    }

    pub fn field_index(&self, name: &str) -> Result<usize, PackError> {
        self.fields
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| PackError::UnknownField(name.to_string()))
    }

    /// Bits lost to padding at the end of each element.
    pub fn wasted_bits(&self) -> u64 {
        self.words_needed() as u64 * self.word_bits as u64 - self.total_bits
    }
}

/// Word count of the bit-struct style placement: a field that does not fit in
/// the remainder of the current word starts a new one.
pub fn struct_style_words(widths: &[u32], word_bits: u32) -> usize {
    let mut words = 0;
    let mut used = word_bits;
    for &w in widths {
        if used + w > word_bits {
            words += 1;
            used = 0;
        }
        used += w;
    }
    words
}

/// Elements laid out with a [`PackLayout`] over a zero-initialized word array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBuffer {
    layout: PackLayout,
    len: usize,
    stride: usize,
    words: Vec<u64>,
}

impl PackedBuffer {
    pub fn new(layout: PackLayout, len: usize) -> Self {
        let stride = layout.words_needed();
        Self {
            words: vec![0; stride * len],
            layout,
            len,
            stride,
        }
    }

    pub fn layout(&self) -> &PackLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Raw physical words; only the low `word_bits` of each entry are used.
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }

    pub fn footprint_bits(&self) -> u64 {
        self.words.len() as u64 * self.layout.word_bits as u64
    }

    fn check_index(&self, index: usize) -> Result<(), PackError> {
        if index >= self.len {
            Err(PackError::IndexOutOfBounds {
                index,
                len: self.len,
            })
        } else {
            Ok(())
        }
    }

    fn locate(&self, index: usize, field: usize) -> (usize, u32, u32) {
        let slot = &self.layout.fields[field];
        let wb = self.layout.word_bits as u64;
        let word = index * self.stride + (slot.offset / wb) as usize;
        (word, (slot.offset % wb) as u32, slot.width)
    }

    pub fn store_field(&mut self, index: usize, name: &str, raw: u64) -> Result<(), PackError> {
        let field = self.layout.field_index(name)?;
        self.store_at(index, field, raw)
    }

    pub fn load_field(&self, index: usize, name: &str) -> Result<u64, PackError> {
        let field = self.layout.field_index(name)?;
        self.load_at(index, field)
    }

    /// Store by field position, skipping the name lookup.
    pub fn store_at(&mut self, index: usize, field: usize, raw: u64) -> Result<(), PackError> {
        self.check_index(index)?;
        let (word, bit, width) = self.locate(index, field);
        if raw & !low_mask(width) != 0 {
            return Err(PackError::ValueTooWide { value: raw, width });
        }
        let wb = self.layout.word_bits;
        let first = width.min(wb - bit);
        let mask = low_mask(first) << bit;
        self.words[word] = (self.words[word] & !mask) | ((raw << bit) & mask);
        if first < width {
            let rest = width - first;
            let mask = low_mask(rest);
            self.words[word + 1] = (self.words[word + 1] & !mask) | ((raw >> first) & mask);
        }
        Ok(())
    }

    pub fn load_at(&self, index: usize, field: usize) -> Result<u64, PackError> {
        self.check_index(index)?;
        let (word, bit, width) = self.locate(index, field);
        let wb = self.layout.word_bits;
        let first = width.min(wb - bit);
        let mut value = (self.words[word] >> bit) & low_mask(first);
        if first < width {
            value |= (self.words[word + 1] & low_mask(width - first)) << first;
        }
        Ok(value)
    }

    /// Store a signed code as a `width`-bit two's-complement payload.
    pub fn store_signed(&mut self, index: usize, field: usize, code: i64) -> Result<(), PackError> {
        let width = self.layout.fields[field].width;
        let lo = if width == 64 { i64::MIN } else { -(1i64 << (width - 1)) };
        let hi = if width == 64 { i64::MAX } else { (1i64 << (width - 1)) - 1 };
        if code < lo || code > hi {
            return Err(PackError::ValueTooWide {
                value: code as u64,
                width,
            });
        }
        self.store_at(index, field, code as u64 & low_mask(width))
    }

    pub fn load_signed(&self, index: usize, field: usize) -> Result<i64, PackError> {
        let width = self.layout.fields[field].width;
        Ok(sign_extend(self.load_at(index, field)?, width))
    }

    /// Header (word size, field table, element count) then the raw words,
    /// all little-endian.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), PackError> {
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&[self.layout.word_bits as u8])?;
        out.write_all(&(self.layout.fields.len() as u32).to_le_bytes())?;
        for f in &self.layout.fields {
            out.write_all(&(f.name.len() as u16).to_le_bytes())?;
            out.write_all(f.name.as_bytes())?;
            out.write_all(&[f.width as u8])?;
        }
        out.write_all(&(self.len as u64).to_le_bytes())?;
        for &w in &self.words {
            if self.layout.word_bits == 32 {
                out.write_all(&(w as u32).to_le_bytes())?;
            } else {
                out.write_all(&w.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, PackError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(PackError::Format("bad magic".into()));
        }
        let word_bits = read_u8(&mut input)? as u32;
        let count = u32::from_le_bytes(read_array(&mut input)?) as usize;
        let mut widths = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(read_array(&mut input)?) as usize;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|_| PackError::Format("field name is not utf-8".into()))?;
            widths.push((name, read_u8(&mut input)? as u32));
        }
        let layout = PackLayout::plan(&widths, word_bits)?;
        let len = u64::from_le_bytes(read_array(&mut input)?) as usize;
        let mut buf = PackedBuffer::new(layout, len);
        for w in buf.words.iter_mut() {
            *w = if word_bits == 32 {
                u32::from_le_bytes(read_array(&mut input)?) as u64
            } else {
                u64::from_le_bytes(read_array(&mut input)?)
            };
        }
        Ok(buf)
    }
}

const DUMP_MAGIC: &[u8; 4] = b"BPK1";

fn read_u8<R: Read>(input: &mut R) -> io::Result<u8> {
    Ok(read_array::<R, 1>(input)?[0])
}

fn read_array<R: Read, const N: usize>(input: &mut R) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf)?;
    Ok(buf)
}

/// Interpret the low `width` bits of `raw` as two's complement.
#[inline]
pub fn sign_extend(raw: u64, width: u32) -> i64 {
    let shift = 64 - width;
    ((raw << shift) as i64) >> shift
}
