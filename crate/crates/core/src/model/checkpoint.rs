//! Binary checkpoint layout, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "RTXCKPT1"
//! count    u32
//! record × count:
//!   name_len u16, name (UTF-8)
//!   dtype    u8     0 = f32, 1 = u8 bytes, 2 = f64
//!   rank     u8,    dims rank × u32
//!   values   product(dims) × sizeof(dtype)
//! ```
//!
//! The model config travels as a `u8` record named `__config__` holding JSON.

use crate::prelude::*;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RTXCKPT1";
pub const CONFIG_RECORD: &str = "__config__";
const DTYPE_BYTES: u8 = 1;

/// Serializes a config blob and named `f32` tensors.
pub fn encode<'t>(config_json: &str, tensors: impl IntoIterator<Item = (&'t str, &'t Tensor)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32 + 1).to_le_bytes());
    let header = |out: &mut Vec<u8>, name: &str, dtype: u8, shape: &[usize]| {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype);
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    };
    header(&mut out, CONFIG_RECORD, DTYPE_BYTES, &[config_json.len()]);
    out.extend_from_slice(config_json.as_bytes());
    for (name, t) in tensors {
        header(&mut out, name, f32::DTYPE_CODE, t.shape());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    bytes: &'b [u8],
    at: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated checkpoint at byte {}", self.at)));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint into its config JSON and named tensors, in file
/// order. `f64` records are narrowed to `f32`.
pub fn decode(bytes: &[u8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("bad magic or unsupported version".into()));
    }
    let count = r.u32()?;
    let mut config = None;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = core::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format(format!("record {name} is too large")))?;
        match dtype {
            DTYPE_BYTES if name == CONFIG_RECORD => {
                let raw = r.take(n)?;
                let text = core::str::from_utf8(raw).map_err(|_| Error::Format("config is not UTF-8".into()))?;
                config = Some(text.to_string());
            }
            0 => {
                let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("record too large".into()))?)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                tensors.push((name, Tensor::new(&shape, data)?));
            }
            2 => {
                let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("record too large".into()))?)?;
                let data =
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32).collect();
                tensors.push((name, Tensor::new(&shape, data)?));
            }
            other => return Err(Error::Format(format!("record {name} has unsupported dtype {other}"))),
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    let config = config.ok_or_else(|| Error::Format(format!("missing {CONFIG_RECORD} record")))?;
    Ok((config, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let a = Tensor::new(&[2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 7.0]).unwrap();
        let b = Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let bytes = encode("{\"x\":1}", [("a", &a), ("b", &b)]);
        let (cfg, ts) = decode(&bytes).unwrap();
        assert_eq!(cfg, "{\"x\":1}");
        assert_eq!(ts, vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())]);
        assert_eq!(encode(&cfg, ts.iter().map(|(n, t)| (n.as_str(), t))), bytes);
    }

    #[test]
    fn rejects_damage() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let bytes = encode("{}", [("a", &a)]);
        for cut in [0, 5, 12, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[7] = b'2';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
