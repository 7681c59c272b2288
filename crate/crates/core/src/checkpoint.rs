//! Parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! | bytes            | content                                        |
//! |------------------|------------------------------------------------|
//! | 8                | magic `STCFCKPT`                               |
//! | 4 (u32)          | format version, currently 1                    |
//! | 4 (u32) + n      | length and UTF-8 JSON header (configuration)   |
//! | 4 (u32)          | tensor count                                   |
//! | per tensor       | u32 name length, name, u32 rank, u64 dims, f32 data |
//!
//! Tensors are written in name order, so identical parameters give identical files.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STCFCKPT";
pub const VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes `params` with a JSON `header`.
pub fn encode<T: Scalar, H: Serialize>(header: &H, params: &ParamStore<T>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(64 + json.len() + 4 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, params.len())?;
    for (name, t) in params.iter() {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}`")));
        }
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint into its header and parameters.
pub fn decode<T: Scalar, H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, ParamStore<T>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: H = serde_json::from_slice(r.take(hlen)?)?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` has an overflowing shape")))?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        if params.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        params.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, params))
}

pub fn save<T: Scalar, H: Serialize>(path: impl AsRef<Path>, header: &H, params: &ParamStore<T>) -> Result<()> {
    let bytes = encode(header, params)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load<T: Scalar, H: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(H, ParamStore<T>)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::{json, Value};

    fn store() -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.insert("b.weight", Tensor::from_fn(&[2, 1, 3, 3], |i| (i[2] * 3 + i[3]) as f32 - 4.5));
        p.insert("a.bias", Tensor::from_vec(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap());
        p
    }

    #[test]
    fn round_trip_is_exact_for_f32() {
        let p = store();
        let bytes = encode(&json!({"k": 3}), &p).unwrap();
        let (h, q): (Value, ParamStore<f32>) = decode(&bytes).unwrap();
        assert_eq!(h, json!({"k": 3}));
        for (name, t) in p.iter() {
            let u = q.get(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            let same = t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{name}");
        }
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode(&json!(null), &store()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f32, Value>(&bad), Err(Error::Checkpoint(_))));
        assert!(matches!(decode::<f32, Value>(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode::<f32, Value>(&long).is_err());
        let mut ver = bytes;
        ver[8] = 9;
        assert!(decode::<f32, Value>(&ver).is_err());
    }
}
