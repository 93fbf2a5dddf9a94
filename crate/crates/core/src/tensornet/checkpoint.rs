//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `FWCK`, u16 version, u32 metadata length,
//! UTF-8 JSON metadata, u32 entry count, then per entry: u32 name length,
//! UTF-8 name, u8 dtype tag, u8 trainable flag, u32 rank, u64 per axis,
//! f64 values. An optional optimizer block follows: u8 present flag, four
//! f64 hyperparameters, u64 step, then first and second moments for every
//! entry in order.

use std::io::Write;
use std::path::Path;

use super::optim::{Adam, AdamConfig};
use super::params::{ParamEntry, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FWCK";
pub const CHECKPOINT_VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = self.meta.to_string();
        put_u32(&mut out, meta.len());
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.params.len());
        for e in self.params.entries() {
            put_u32(&mut out, e.name.len());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F64);
            out.push(e.trainable as u8);
            put_u32(&mut out, e.value.shape().len());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, e.value.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                let c = adam.config;
                put_f64s(&mut out, &[c.lr, c.beta1, c.beta2, c.eps]);
                out.extend_from_slice(&adam.step.to_le_bytes());
                for (m, v) in adam.m.iter().zip(&adam.v) {
                    put_f64s(&mut out, m);
                    put_f64s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(r.err(0, "bad magic"));
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != CHECKPOINT_VERSION {
            return Err(r.err(4, &format!("unsupported version {version}")));
        }
        let meta_len = r.u32("metadata length")?;
        let at = r.pos;
        let meta_raw = r.take(meta_len, "metadata")?;
        let meta = serde_json::from_slice(meta_raw)
            .map_err(|e| r.err(at, &format!("metadata: {e}")))?;
        let count = r.u32("entry count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32("name length")?;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| r.err(at, "name is not UTF-8"))?
                .to_string();
            let tag_at = r.pos;
            let tag = r.take(1, "dtype")?[0];
            if tag != DTYPE_F64 {
                return Err(r.err(tag_at, &format!("unknown dtype tag {tag}")));
            }
            let trainable = match r.take(1, "trainable flag")?[0] {
                0 => false,
                1 => true,
                other => return Err(r.err(tag_at + 1, &format!("bad trainable flag {other}"))),
            };
            let rank = r.u32("rank")?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.array("dimension")?) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.err(at, "shape overflows"))?;
            let data = r.f64s(n, "values")?;
            let value = Tensor::new(&shape, data)?;
            params
                .push_entry(ParamEntry { name, value, trainable })
                .map_err(|e| r.err(at, &e.to_string()))?;
        }
        let optimizer = match r.take(1, "optimizer flag")?[0] {
            0 => None,
            1 => {
                let h = r.f64s(4, "optimizer config")?;
                let step = u64::from_le_bytes(r.array("optimizer step")?);
                let mut adam = Adam::new(
                    AdamConfig { lr: h[0], beta1: h[1], beta2: h[2], eps: h[3] },
                    &params,
                );
                adam.step = step;
                for i in 0..params.len() {
                    let n = adam.m[i].len();
                    adam.m[i] = r.f64s(n, "first moment")?;
                    adam.v[i] = r.f64s(n, "second moment")?;
                }
                Some(adam)
            }
            other => return Err(r.err(r.pos - 1, &format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes"));
        }
        Ok(Checkpoint { meta, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, offset: usize, message: &str) -> Error {
        Error::Format {
            what: "checkpoint",
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(self.pos, &format!("truncated while reading {what}"))),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array(what)?) as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| self.err(self.pos, "length overflows"))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn sample() -> Checkpoint {
        let mut rng = substream(3, "ckpt", 0);
        let mut params = ParamStore::new();
        params.add("a.w", Tensor::normal(&[3, 4], 1.0, &mut rng));
        params.add("a.b", Tensor::from_vec(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        params.add_buffer("bn.running_var", Tensor::full(&[2], 1.0));
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3), &params);
        adam.step = 7;
        adam.m[0][1] = 0.25;
        adam.v[1][2] = 9.5;
        Checkpoint {
            meta: serde_json::json!({"model": "test", "width": 4}),
            params,
            optimizer: Some(adam),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, ck);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        match Checkpoint::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 20 && offset < bytes.len() as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_dtype_reports_its_offset() {
        let ck = sample();
        let mut bytes = ck.to_bytes();
        let meta_len = ck.meta.to_string().len();
        let tag_at = 4 + 2 + 4 + meta_len + 4 + 4 + "a.w".len();
        assert_eq!(bytes[tag_at], DTYPE_F64);
        bytes[tag_at] = 9;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Format { offset, message, .. }) => {
                assert_eq!(offset, tag_at as u64);
                assert!(message.contains("dtype"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_at_zero() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
