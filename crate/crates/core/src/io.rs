//! `TCT1` tensor records and checkpoint directories.
//!
//! Record layout (little-endian):
//!
//! | bytes     | field                           |
//! |-----------|---------------------------------|
//! | 4         | magic `TCT1`                    |
//! | 1         | dtype code (0 = f32, 1 = f64)   |
//! | 4         | rank `r` (u32)                  |
//! | 8·r       | dims (u64 each)                 |
//! | size·Πdims| row-major payload               |
//! | 4         | name length `n` (u32)           |
//! | n         | UTF-8 name                      |
//!
//! A checkpoint is a directory with `manifest.json` and `params.tct`, the
//! concatenation of one record per parameter in name order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TCT1";

/// A decoded record; payloads are kept in their stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to `T`; f32 values widen exactly.
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

/// Appends one record to `out`.
pub fn encode_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match T::DTYPE {
        DType::F32 => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_f32().unwrap().to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|x| out.extend_from_slice(&x.as_f64().to_le_bytes())),
    }
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format { path: self.path.clone(), offset: offset as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let avail = self.buf.len() - self.pos;
        if n > avail {
            return Err(self.err(self.pos, format!("truncated {what}: expected {n} bytes, found {avail}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, StoredTensor)> {
        let start = self.pos;
        let magic = self.take(4, "magic")?;
        if magic != MAGIC {
            return Err(self.err(start, format!("bad magic {magic:?}, expected \"TCT1\"")));
        }
        let code_at = self.pos;
        let code = self.take(1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or_else(|| self.err(code_at, format!("unknown dtype code {code}")))?;
        let rank = self.u32("rank")? as usize;
        let dims_at = self.pos;
        let mut dims = Vec::with_capacity(rank.min(64));
        for _ in 0..rank {
            dims.push(self.u64("dims")?);
        }
        let count = dims.iter().try_fold(1usize, |acc, &d| usize::try_from(d).ok().and_then(|d| acc.checked_mul(d)));
        let bytes = count.and_then(|c| c.checked_mul(dtype.size()));
        let Some(bytes) = bytes else {
            return Err(self.err(dims_at, format!("dims {dims:?} overflow the addressable payload size")));
        };
        let payload = self.take(bytes, "payload")?;
        let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        let t = match dtype {
            DType::F32 => StoredTensor::F32(Tensor::new(shape, payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())?),
            DType::F64 => StoredTensor::F64(Tensor::new(shape, payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())?),
        };
        let len = self.u32("name length")? as usize;
        let name_at = self.pos;
        let name = std::str::from_utf8(self.take(len, "name")?).map_err(|_| self.err(name_at, "name is not UTF-8"))?.to_string();
        Ok((name, t))
    }
}

/// Decodes every record in `buf`.
pub fn decode_tensors(buf: &[u8], path: &Path) -> Result<Vec<(String, StoredTensor)>> {
    let mut r = Reader { buf, pos: 0, path: path.to_path_buf() };
    let mut out = Vec::new();
    while r.pos < buf.len() {
        out.push(r.record()?);
    }
    Ok(out)
}

pub fn save_tensor<T: Scalar>(path: &Path, name: &str, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(&mut buf, name, t);
    fs::write(path, buf)?;
    Ok(())
}

/// Loads a single-record file.
pub fn load_tensor(path: &Path) -> Result<(String, StoredTensor)> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0, path: path.to_path_buf() };
    let rec = r.record()?;
    if r.pos != buf.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes after the record", buf.len() - r.pos)));
    }
    Ok(rec)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub step: u64,
    pub tensors: Vec<String>,
    /// Free-form configuration the weights were produced under.
    pub config: serde_json::Value,
}

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.tct";

/// Writes `dir/manifest.json` and `dir/params.tct`.
pub fn save_checkpoint<T: Scalar>(dir: &Path, params: &ParamStore<T>, step: u64, config: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    for (name, t) in params.iter() {
        encode_tensor(&mut buf, name, t);
    }
    fs::write(dir.join(PARAMS), buf)?;
    let manifest = Manifest { format: "tct1-checkpoint".into(), step, tensors: params.names().map(String::from).collect(), config };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Reads a checkpoint, widening or narrowing records to `T`.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(Manifest, ParamStore<T>)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    let path = dir.join(PARAMS);
    let buf = fs::read(&path)?;
    let mut params = ParamStore::new();
    for (name, t) in decode_tensors(&buf, &path)? {
        params.insert(name, t.to());
    }
    let names: Vec<&str> = params.names().collect();
    if names != manifest.tensors.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::SchemaMismatch(format!("{} lists tensors that {} does not hold", MANIFEST, PARAMS)));
    }
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_and_matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tct");
        save_tensor(&p, "s", &Tensor::scalar(3.5f64)).unwrap();
        let (name, t) = load_tensor(&p).unwrap();
        assert_eq!(name, "s");
        assert_eq!(t, StoredTensor::F64(Tensor::scalar(3.5)));

        let m = Tensor::<f64>::from_f64(&[2, 3], &[0.1, -2.0, 1e-300, f64::MAX, -0.0, 1.0 / 3.0]).unwrap();
        save_tensor(&p, "matrix", &m).unwrap();
        let back = load_tensor(&p).unwrap().1.to::<f64>();
        assert_eq!(back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());

        let f = Tensor::<f32>::from_f64(&[3], &[0.1, 2.5, -7.25]).unwrap();
        save_tensor(&p, "f", &f).unwrap();
        let (_, t) = load_tensor(&p).unwrap();
        assert_eq!(t.dtype(), DType::F32);
        assert_eq!(t.to::<f32>(), f);
        assert_eq!(t.to::<f64>().data()[0], 0.1f32 as f64);
    }

    #[test]
    fn truncation_reports_expected_and_actual_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tct");
        let mut buf = Vec::new();
        encode_tensor(&mut buf, "m", &Tensor::<f64>::zeros(&[2, 3]));
        let header = 4 + 1 + 4 + 16;
        fs::write(&p, &buf[..header + 47]).unwrap();
        let msg = load_tensor(&p).unwrap_err().to_string();
        assert!(msg.contains("expected 48 bytes, found 47"), "{msg}");
        assert!(msg.contains(&format!("offset {header}")), "{msg}");
        fs::write(&p, &buf[..buf.len() - 1]).unwrap();
        assert!(load_tensor(&p).unwrap_err().to_string().contains("truncated name"));
    }

    #[test]
    fn bad_magic_and_overflowing_dims_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.tct");
        fs::write(&p, b"TCT2\x01\x00\x00\x00\x00").unwrap();
        let msg = load_tensor(&p).unwrap_err().to_string();
        assert!(msg.contains("bad magic") && msg.contains("offset 0"), "{msg}");
        let mut buf = b"TCT1\x01\x02\x00\x00\x00".to_vec();
        buf.extend_from_slice(&u64::MAX.to_le_bytes());
        buf.extend_from_slice(&4u64.to_le_bytes());
        fs::write(&p, &buf).unwrap();
        let msg = load_tensor(&p).unwrap_err().to_string();
        assert!(msg.contains("overflow") && msg.contains("offset 9"), "{msg}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::<f64>::new();
        p.insert("b", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        p.insert("a", Tensor::scalar(-0.5));
        save_checkpoint(dir.path(), &p, 7, serde_json::json!({"k": 1})).unwrap();
        let (m, q) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(q, p);
        assert_eq!(m.step, 7);
        assert_eq!(m.tensors, vec!["a", "b"]);
    }
}
