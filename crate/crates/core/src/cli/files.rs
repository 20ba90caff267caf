//! Binary containers. All integers and payloads are little-endian.
//!
//! Tensor file:
//!
//! ```text
//! "LDTN" | u32 version | u8 dtype (0 = f32, 1 = f64) | u8 rank | u32 dim * rank | payload
//! ```
//!
//! Checkpoint:
//!
//! ```text
//! "LDIF" | u32 version | [u8; 32] sha256 of the network config | u64 step
//! u32 parameter count, then per parameter:
//!     u32 name length | name (utf-8) | u8 dtype | u8 rank | u32 dim * rank | payload
//! u32 optimizer entry count, then per entry:
//!     u32 name length | name | u64 update count | m payload | v payload
//! ```
//!
//! Moment payloads share the shape and dtype of their parameter.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::NetConfig;
use crate::numerics::{DType, ParamEntry, ParamStore, Real, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"LDTN";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LDIF";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format {
                what: self.what,
                reason: format!("truncated: needed {n} more bytes, {} left", self.bytes.len()),
            });
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::Format {
                what: self.what,
                reason: format!("bad magic {got:?}, expected {:?}", std::str::from_utf8(want).unwrap_or("?")),
            });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                what: self.what,
                reason: format!("unsupported version {version}"),
            });
        }
        Ok(())
    }

    fn header<T: Real>(&mut self) -> Result<Vec<usize>> {
        let code = self.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format {
            what: self.what,
            reason: format!("unknown dtype code {code}"),
        })?;
        if dtype != T::DTYPE {
            return Err(Error::Format {
                what: self.what,
                reason: format!("stored {dtype:?}, requested {:?}", T::DTYPE),
            });
        }
        let rank = self.u8()? as usize;
        (0..rank).map(|_| self.u32().map(|d| d as usize)).collect()
    }

    fn payload<T: Real>(&mut self, shape: &[usize]) -> Result<Vec<T>> {
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format {
                what: self.what,
                reason: format!("shape {shape:?} overflows"),
            })?;
        let size = T::DTYPE.size();
        let bytes = self.take(n.saturating_mul(size))?;
        Ok(bytes.chunks_exact(size).map(T::read_le).collect())
    }

    fn tensor<T: Real>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let data = self.payload(shape)?;
        Tensor::new(shape.to_vec(), data).map_err(|e| Error::Format {
            what: self.what,
            reason: e.to_string(),
        })
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format {
            what: self.what,
            reason: "parameter name is not utf-8".into(),
        })
    }

    fn finish(&self) -> Result<()> {
        if !self.bytes.is_empty() {
            return Err(Error::Format {
                what: self.what,
                reason: format!("{} trailing bytes", self.bytes.len()),
            });
        }
        Ok(())
    }
}

fn put_header<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn put_payload<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

pub fn encode_tensor<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + t.numel() * T::DTYPE.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_header(&mut out, t);
    put_payload(&mut out, t);
    out
}

pub fn decode_tensor<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader { bytes, what: "tensor file" };
    r.magic(TENSOR_MAGIC)?;
    let shape = r.header::<T>()?;
    let t = r.tensor(&shape)?;
    r.finish()?;
    Ok(t)
}

/// Stored dtype of a tensor file, read from its header.
pub fn peek_tensor_dtype(bytes: &[u8]) -> Result<DType> {
    let mut r = Reader { bytes, what: "tensor file" };
    r.magic(TENSOR_MAGIC)?;
    let code = r.u8()?;
    DType::from_code(code).ok_or_else(|| Error::Format {
        what: "tensor file",
        reason: format!("unknown dtype code {code}"),
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_bytes(path, &encode_tensor(t))
}

pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    decode_tensor(&read_bytes(path)?)
}

/// Loads a tensor file of either dtype as `T`.
pub fn load_tensor_any<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = read_bytes(path)?;
    match peek_tensor_dtype(&bytes)? {
        DType::F32 => Ok(decode_tensor::<f32>(&bytes)?.cast()),
        DType::F64 => Ok(decode_tensor::<f64>(&bytes)?.cast()),
    }
}

pub fn config_digest(config: &NetConfig) -> [u8; 32] {
    Sha256::digest(config.canonical().as_bytes()).into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub digest: [u8; 32],
    pub step: u64,
    pub params: ParamStore<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(config: &NetConfig, step: u64, params: ParamStore<T>) -> Self {
        Checkpoint {
            digest: config_digest(config),
            step,
            params,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, e) in self.params.iter() {
            put_name(&mut out, name);
            put_header(&mut out, &e.value);
            put_payload(&mut out, &e.value);
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, e) in self.params.iter() {
            put_name(&mut out, name);
            out.extend_from_slice(&e.step.to_le_bytes());
            put_payload(&mut out, &e.m);
            put_payload(&mut out, &e.v);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, what: "checkpoint" };
        r.magic(CHECKPOINT_MAGIC)?;
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.name()?;
            let shape = r.header::<T>()?;
            values.push((name, r.tensor::<T>(&shape)?));
        }
        let opt_count = r.u32()? as usize;
        if opt_count != count {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!("{opt_count} optimizer entries for {count} parameters"),
            });
        }
        let mut params = ParamStore::new();
        for (name, value) in values {
            let opt_name = r.name()?;
            if opt_name != name {
                return Err(Error::Format {
                    what: "checkpoint",
                    reason: format!("optimizer entry {opt_name} out of order, expected {name}"),
                });
            }
            let updates = r.u64()?;
            let m = r.tensor::<T>(value.shape())?;
            let v = r.tensor::<T>(value.shape())?;
            params
                .insert_entry(
                    name,
                    ParamEntry {
                        value,
                        m,
                        v,
                        step: updates,
                    },
                )
                .map_err(|e| Error::Format {
                    what: "checkpoint",
                    reason: e.to_string(),
                })?;
        }
        r.finish()?;
        Ok(Checkpoint { digest, step, params })
    }

    /// Refuses a checkpoint written for a different network configuration
    /// unless `allow_mismatch` is set.
    pub fn check_config(&self, config: &NetConfig, allow_mismatch: bool) -> Result<()> {
        if !allow_mismatch && self.digest != config_digest(config) {
            return Err(Error::Config(
                "checkpoint was written for a different network configuration".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let t = Tensor::<f32>::randn(&[3, 1, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..4], b"LDTN");
        assert_eq!(bytes.len(), 4 + 4 + 2 + 16 + 48 * 4);
        let back: Tensor<f32> = decode_tensor(&bytes).unwrap();
        assert_eq!(back, t);
        assert!(decode_tensor::<f64>(&bytes).is_err());
    }

    #[test]
    fn tensor_rejects_corruption() {
        let t = Tensor::<f64>::ones(&[2, 2]);
        let mut bytes = encode_tensor(&t);
        assert!(decode_tensor::<f64>(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(decode_tensor::<f64>(&bytes).is_err());
        bytes.pop();
        bytes[0] = b'X';
        assert!(matches!(decode_tensor::<f64>(&bytes), Err(Error::Format { .. })));
    }
}
