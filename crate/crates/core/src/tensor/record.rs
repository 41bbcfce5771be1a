//! Flat binary tensor records.
//!
//! ```text
//! magic   4 bytes  "BMLT"
//! dtype   u8       0 = f32, 1 = f64, 2 = packed bits
//! rank    u8
//! axis    u8       bit tensors only: packed axis
//! extents rank × u64 little-endian
//! data    f32/f64 little-endian, or u64 little-endian words (padding bits zero)
//! ```

use std::io::{Read, Write};

use super::{BitTensor, FloatTensor, Real, MAX_RANK};
use crate::error::{Error, Result};

pub const RECORD_MAGIC: [u8; 4] = *b"BMLT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    Bits,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::Bits => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::Bits),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    F32(FloatTensor<f32>),
    F64(FloatTensor<f64>),
    Bits(BitTensor),
}

impl Record {
    pub fn into_float<T: Real>(self) -> Result<FloatTensor<T>> {
        match self {
            Record::F32(t) => Ok(t.cast()),
            Record::F64(t) => Ok(t.cast()),
            Record::Bits(_) => Err(Error::invalid("expected a float record, found packed bits")),
        }
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        match self {
            Record::F32(t) => write_float(t, out),
            Record::F64(t) => write_float(t, out),
            Record::Bits(b) => write_bits(b, out),
        }
    }
}

fn header(out: &mut Vec<u8>, dtype: DType, shape: &[usize], axis: Option<usize>) {
    out.extend_from_slice(&RECORD_MAGIC);
    out.push(dtype.tag());
    out.push(shape.len() as u8);
    if let Some(axis) = axis {
        out.push(axis as u8);
    }
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
}

fn write_float<T: Real>(t: &FloatTensor<T>, out: &mut Vec<u8>) {
    header(out, T::DTYPE, t.shape(), None);
    out.reserve(t.len() * std::mem::size_of::<T>());
    for &v in t.data() {
        v.to_le(out);
    }
}

fn write_bits(b: &BitTensor, out: &mut Vec<u8>) {
    header(out, DType::Bits, b.shape(), Some(b.axis()));
    let mut clean = b.clone();
    clean.normalize_padding();
    for w in clean.words() {
        out.extend_from_slice(&w.to_le_bytes());
    }
}

/// Serialises one record into `w`.
pub fn write_record(w: &mut impl Write, record: &Record) -> std::io::Result<()> {
    let mut buf = Vec::new();
    record.write_to(&mut buf);
    w.write_all(&buf)
}

struct Cursor<'a, R> {
    inner: &'a mut R,
    offset: u64,
}

impl<R: Read> Cursor<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            Error::format("tensor record", self.offset, format!("truncated ({e})"))
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Reads one record; `offset` is the stream position used in error messages
/// and is advanced past the record.
pub fn read_record(r: &mut impl Read, offset: &mut u64) -> Result<Record> {
    let mut cur = Cursor {
        inner: r,
        offset: *offset,
    };
    let start = cur.offset;
    let magic = cur.bytes(4)?;
    if magic != RECORD_MAGIC {
        return Err(Error::format("tensor record", start, format!("bad magic {magic:?}")));
    }
    let tag = cur.u8()?;
    let dtype = DType::from_tag(tag)
        .ok_or_else(|| Error::format("tensor record", start + 4, format!("unknown dtype tag {tag}")))?;
    let rank = cur.u8()? as usize;
    if rank > MAX_RANK {
        return Err(Error::format("tensor record", start + 5, format!("rank {rank} too large")));
    }
    let axis = if dtype == DType::Bits { Some(cur.u8()? as usize) } else { None };
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = cur.u64()?;
        if e > (1 << 40) {
            return Err(Error::format("tensor record", cur.offset - 8, format!("extent {e} is implausible")));
        }
        shape.push(e as usize);
    }
    let count: usize = shape.iter().product();
    let record = match dtype {
        DType::F32 => Record::F32(read_floats(&mut cur, &shape, count)?),
        DType::F64 => Record::F64(read_floats(&mut cur, &shape, count)?),
        DType::Bits => {
            let axis = axis.expect("bits carry an axis");
            if axis >= rank {
                return Err(Error::format("tensor record", start + 6, "packed axis out of range"));
            }
            let words_needed = BitTensor::minus_ones(&shape, axis).words().len();
            let raw = cur.bytes(words_needed * 8)?;
            let words = raw
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let b = BitTensor::from_raw(shape, axis, words)?;
            if !b.padding_is_clean() {
                return Err(Error::format("tensor record", start, "padding bits are not zero"));
            }
            Record::Bits(b)
        }
    };
    *offset = cur.offset;
    Ok(record)
}

fn read_floats<T: Real, R: Read>(cur: &mut Cursor<'_, R>, shape: &[usize], count: usize) -> Result<FloatTensor<T>> {
    let width = std::mem::size_of::<T>();
    let raw = cur.bytes(count * width)?;
    let data = raw.chunks_exact(width).map(T::from_le).collect();
    FloatTensor::new(shape, data)
}
