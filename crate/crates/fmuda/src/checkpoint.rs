//! Parameter archives: `"FMCK"`, a u32 version, a u32 entry count, then per
//! entry a u16 name length, the UTF-8 name, a u8 rank, u32 dims and the f64
//! little-endian values. All integers are little-endian.

use std::path::Path;

use fmuda_core::{NetConfig, ParamSet, SegModel, Tensor};

use crate::error::{self, Error, Result, Tag};

pub const MAGIC: [u8; 4] = *b"FMCK";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.total_len() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], (usize, String)> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| (self.bytes.len(), format!("truncated: needed {n} bytes at {}", self.at)))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, (usize, String)> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ParamSet, (usize, String)> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err((0, "bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err((4, format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let at = c.at;
        let n = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(n)?).map_err(|_| (at + 2, "name is not UTF-8".to_string()))?;
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|l| l.checked_mul(8).is_some())
            .ok_or((at, "shape overflows".to_string()))?;
        let data = c.take(len * 8)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| (at, e.to_string()))?;
        params.insert(name, t).map_err(|e| (at, e.to_string()))?;
    }
    if c.at != bytes.len() {
        return Err((c.at, "trailing bytes".into()));
    }
    Ok(params)
}

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    error::write(path, encode(params))
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    decode(&error::read(path)?).map_err(|(offset, reason)| Error::Format {
        module: "checkpoint",
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    })
}

pub fn save_model(path: &Path, model: &SegModel) -> Result<()> {
    save_params(path, model.params())
}

/// Rebuilds a model of architecture `net` from an archive.
pub fn load_model(path: &Path, net: NetConfig) -> Result<SegModel> {
    let params = load_params(path)?;
    let mut model = SegModel::new(net, 0).tag("segnet")?;
    if params.len() != model.params().len() {
        return Err(Error::Format {
            module: "checkpoint",
            path: path.to_path_buf(),
            offset: 8,
            reason: format!("{} entries, the configured network has {}", params.len(), model.params().len()),
        });
    }
    model.params_mut().load_from(&params).map_err(|e| Error::Format {
        module: "checkpoint",
        path: path.to_path_buf(),
        offset: 0,
        reason: format!("does not fit the configured network: {e}"),
    })?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = SegModel::new(NetConfig::default(), 7).unwrap();
        let bytes = encode(m.params());
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        for (a, b) in m.params().iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let m = SegModel::new(NetConfig::default(), 7).unwrap();
        let bytes = encode(m.params());
        assert_eq!(decode(&bytes[..bytes.len() - 3]).unwrap_err().0, bytes.len() - 3);
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert_eq!(decode(&bad).unwrap_err().0, 0);
        let mut v = bytes;
        v[4] = 9;
        assert_eq!(decode(&v).unwrap_err().0, 4);
    }
}
