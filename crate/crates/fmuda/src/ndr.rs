//! NDR raster files: `"NDR1"`, a dtype byte (0 = f64 little-endian, 1 = u8
//! labels), a dimension count byte, one u32 little-endian size per dimension,
//! then the row-major payload. Images are stored as `[channels, spatial..]`,
//! label maps as `[spatial..]`.

use std::path::Path;

use fmuda_core::{LabelMap, Raster};

use crate::error::{self, Error, Result, Tag};

pub const MAGIC: [u8; 4] = *b"NDR1";
pub const DTYPE_F64: u8 = 0;
pub const DTYPE_U8: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum NdrData {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdrArray {
    pub dims: Vec<usize>,
    pub data: NdrData,
}

/// Decoding failure at a byte offset.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("byte {offset}: {reason}")]
pub struct NdrError {
    pub offset: u64,
    pub reason: String,
}

fn fail(offset: usize, reason: impl Into<String>) -> NdrError {
    NdrError { offset: offset as u64, reason: reason.into() }
}

pub fn header_len(ndim: usize) -> usize {
    6 + 4 * ndim
}

pub fn encode(a: &NdrArray) -> std::result::Result<Vec<u8>, NdrError> {
    if a.dims.is_empty() || a.dims.len() > u8::MAX as usize {
        return Err(fail(5, format!("cannot store {} dimensions", a.dims.len())));
    }
    let (dtype, width, len) = match &a.data {
        NdrData::F64(v) => (DTYPE_F64, 8, v.len()),
        NdrData::U8(v) => (DTYPE_U8, 1, v.len()),
    };
    if a.dims.iter().product::<usize>() != len {
        return Err(fail(6, format!("dims {:?} do not match {len} elements", a.dims)));
    }
    let mut out = Vec::with_capacity(header_len(a.dims.len()) + len * width);
    out.extend_from_slice(&MAGIC);
    out.push(dtype);
    out.push(a.dims.len() as u8);
    for (i, &d) in a.dims.iter().enumerate() {
        let d = u32::try_from(d).map_err(|_| fail(6 + 4 * i, format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &a.data {
        NdrData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NdrData::U8(v) => out.extend_from_slice(v),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<NdrArray, NdrError> {
    if let Some(i) = (0..4).find(|&i| bytes.get(i) != Some(&MAGIC[i])) {
        return Err(if i >= bytes.len() { fail(bytes.len(), "truncated magic") } else { fail(i, "bad magic") });
    }
    let dtype = *bytes.get(4).ok_or_else(|| fail(4, "truncated header"))?;
    let width = match dtype {
        DTYPE_F64 => 8,
        DTYPE_U8 => 1,
        other => return Err(fail(4, format!("unknown dtype {other}"))),
    };
    let ndim = *bytes.get(5).ok_or_else(|| fail(5, "truncated header"))? as usize;
    if ndim == 0 {
        return Err(fail(5, "zero dimensions"));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for i in 0..ndim {
        let at = 6 + 4 * i;
        let raw = bytes.get(at..at + 4).ok_or_else(|| fail(bytes.len(), "truncated header"))?;
        let d = u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(fail(at, "zero-sized dimension"));
        }
        count = count
            .checked_mul(d)
            .filter(|c| c.checked_mul(width).is_some())
            .ok_or_else(|| fail(at, "dimension product overflows"))?;
        dims.push(d);
    }
    let start = header_len(ndim);
    let end = start + count * width;
    if bytes.len() < end {
        return Err(fail(bytes.len(), format!("truncated payload: expected {} bytes", end - start)));
    }
    if bytes.len() > end {
        return Err(fail(end, "trailing bytes after payload"));
    }
    let payload = &bytes[start..end];
    let data = if dtype == DTYPE_F64 {
        NdrData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    } else {
        NdrData::U8(payload.to_vec())
    };
    Ok(NdrArray { dims, data })
}

fn format_error(path: &Path, e: NdrError) -> Error {
    Error::Format { module: "synthdata", path: path.to_path_buf(), offset: e.offset, reason: e.reason }
}

pub fn read_array(path: &Path) -> Result<NdrArray> {
    decode(&error::read(path)?).map_err(|e| format_error(path, e))
}

pub fn write_array(path: &Path, a: &NdrArray) -> Result<()> {
    let bytes = encode(a).map_err(|e| format_error(path, e))?;
    error::write(path, bytes)
}

pub fn raster_array(r: &Raster) -> NdrArray {
    let mut dims = vec![r.channels()];
    dims.extend_from_slice(r.dims());
    NdrArray { dims, data: NdrData::F64(r.data().to_vec()) }
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    write_array(path, &raster_array(r))
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let a = read_array(path)?;
    match a.data {
        NdrData::F64(data) if a.dims.len() >= 2 => Raster::new(a.dims[0], a.dims[1..].to_vec(), data).tag("synthdata"),
        NdrData::F64(_) => Err(format_error(path, fail(5, "images need a channel axis and a spatial axis"))),
        NdrData::U8(_) => Err(format_error(path, fail(4, "expected f64 image data"))),
    }
}

pub fn write_mask(path: &Path, m: &LabelMap) -> Result<()> {
    write_array(path, &NdrArray { dims: m.dims().to_vec(), data: NdrData::U8(m.data().to_vec()) })
}

pub fn read_mask(path: &Path) -> Result<LabelMap> {
    let a = read_array(path)?;
    match a.data {
        NdrData::U8(data) => LabelMap::new(a.dims, data).tag("synthdata"),
        NdrData::F64(_) => Err(format_error(path, fail(4, "expected u8 label data"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_two_by_two_size() {
        let a = NdrArray { dims: vec![2, 2], data: NdrData::F64(vec![0.0; 4]) };
        let bytes = encode(&a).unwrap();
        assert_eq!(bytes.len(), header_len(2) + 32);
        assert_eq!(bytes.len(), 14 + 32);
        assert_eq!(decode(&bytes).unwrap(), a);
    }

    #[test]
    fn rejections_carry_offsets() {
        let a = NdrArray { dims: vec![3], data: NdrData::U8(vec![0, 1, 2]) };
        let good = encode(&a).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad).unwrap_err().offset, 0);
        let e = decode(&good[..good.len() - 1]).unwrap_err();
        assert_eq!(e.offset, good.len() as u64 - 1);
        assert!(e.reason.contains("truncated"));
        let mut huge = vec![];
        huge.extend_from_slice(&MAGIC);
        huge.extend_from_slice(&[0, 3]);
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let e = decode(&huge).unwrap_err();
        assert!(e.reason.contains("overflow"));
        assert_eq!(e.offset, 10);
        let mut trailing = good.clone();
        trailing.push(0);
        assert_eq!(decode(&trailing).unwrap_err().offset, good.len() as u64);
        let mut dtype = good;
        dtype[4] = 9;
        assert_eq!(decode(&dtype).unwrap_err().offset, 4);
    }

    #[test]
    fn special_floats_survive() {
        let a = NdrArray { dims: vec![1, 4], data: NdrData::F64(vec![-0.0, f64::MIN_POSITIVE, 1e300, f64::NAN]) };
        let back = decode(&encode(&a).unwrap()).unwrap();
        let (NdrData::F64(x), NdrData::F64(y)) = (&a.data, &back.data) else { panic!("dtype changed") };
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
