//! Versioned tensor container.
//!
//! Layout: the line `dept-ckpt v1`, one line of JSON holding the architecture
//! and free-form metadata, then a little-endian binary body: tensor count
//! (u64), and per tensor its name (u32 length + UTF-8), rank (u32), dims
//! (u64 each) and row-major f64 values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Body, ModelParams};
use crate::error::{DeptError, Result};
use crate::optim::AdamWState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_HEADER: &str = "dept-ckpt v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeaderRecord {
    arch: Architecture,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(arch: Architecture) -> Self {
        Self { arch, meta: serde_json::Value::Null, tensors: BTreeMap::new() }
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let data = t.data().iter().map(|x| x.as_f64()).collect();
        self.tensors.insert(name.into(), (t.shape().to_vec(), data));
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let (shape, data) = self
            .tensors
            .get(name)
            .ok_or_else(|| DeptError::Format(format!("checkpoint has no tensor {name:?}")))?;
        Tensor::from_vec(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, x: f64) {
        self.tensors.insert(name.into(), (vec![1], vec![x]));
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        let t: Tensor<f64> = self.get(name)?;
        match t.data() {
            [x] => Ok(*x),
            _ => Err(DeptError::Format(format!("{name:?} is not a scalar"))),
        }
    }

    /// Stores `params` under `<prefix><tensor name>`.
    pub fn insert_params<T: Scalar>(&mut self, prefix: &str, params: &ModelParams<T>) {
        for (name, t) in params.names().into_iter().zip(params.tensors()) {
            self.insert(format!("{prefix}{name}"), t);
        }
    }

    pub fn get_params<T: Scalar>(&self, prefix: &str, arch: Architecture) -> Result<ModelParams<T>> {
        let mut p = ModelParams::zeros(arch);
        let names = p.names();
        for (name, slot) in names.into_iter().zip(p.tensors_mut()) {
            let t = self.get(&format!("{prefix}{name}"))?;
            if t.shape() != slot.shape() {
                return Err(DeptError::ShapeMismatch(format!("{prefix}{name}: {:?} vs {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(p)
    }

    pub fn insert_body<T: Scalar>(&mut self, prefix: &str, body: &Body<T>) {
        for (name, t) in body.names().into_iter().zip(body.tensors()) {
            self.insert(format!("{prefix}{name}"), t);
        }
    }

    pub fn get_body<T: Scalar>(&self, prefix: &str, arch: &Architecture) -> Result<Body<T>> {
        let mut b = Body::zeros(arch);
        let names = b.names();
        for (name, slot) in names.into_iter().zip(b.tensors_mut()) {
            let t = self.get(&format!("{prefix}{name}"))?;
            if t.shape() != slot.shape() {
                return Err(DeptError::ShapeMismatch(format!("{prefix}{name}: {:?} vs {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(b)
    }

    /// Stores optimizer moments as `<prefix>opt.m.<name>`, `<prefix>opt.v.<name>`
    /// and the step count as `<prefix>opt.t`.
    pub fn insert_opt<T: Scalar>(&mut self, prefix: &str, names: &[String], state: &AdamWState<T>) {
        for ((name, m), v) in names.iter().zip(&state.m).zip(&state.v) {
            self.insert(format!("{prefix}opt.m.{name}"), m);
            self.insert(format!("{prefix}opt.v.{name}"), v);
        }
        self.insert_scalar(format!("{prefix}opt.t"), state.t as f64);
    }

    pub fn get_opt<T: Scalar>(&self, prefix: &str, names: &[String]) -> Result<AdamWState<T>> {
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in names {
            m.push(self.get(&format!("{prefix}opt.m.{name}"))?);
            v.push(self.get(&format!("{prefix}opt.v.{name}"))?);
        }
        let t = self.get_scalar(&format!("{prefix}opt.t"))? as u64;
        Ok(AdamWState { m, v, t })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_HEADER.as_bytes());
        out.push(b'\n');
        let header = HeaderRecord { arch: self.arch, meta: self.meta.clone() };
        out.extend_from_slice(serde_json::to_string(&header)?.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, (shape, data)) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.line()? != CHECKPOINT_HEADER.as_bytes() {
            return Err(DeptError::Format(format!("missing {CHECKPOINT_HEADER:?} header")));
        }
        let header: HeaderRecord = serde_json::from_slice(r.line()?)?;
        let count = r.u64()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| DeptError::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            tensors.insert(name, (shape, data));
        }
        if r.pos != bytes.len() {
            return Err(DeptError::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { arch: header.arch, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DeptError::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn line(&mut self) -> Result<&'a [u8]> {
        let rest = &self.bytes[self.pos..];
        let n = rest.iter().position(|&b| b == b'\n').ok_or_else(|| DeptError::Format("truncated header".into()))?;
        let s = self.take(n)?;
        self.pos += 1;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn arch() -> Architecture {
        Architecture { num_blocks: 2, d_model: 4, num_heads: 2, expansion_ratio: 2, seq_len: 3, vocab_size: 7 }
    }

    #[test]
    fn params_roundtrip_bitwise() {
        let p = init_params::<f64>(arch(), 3).unwrap();
        let mut c = Checkpoint::new(arch());
        c.meta = serde_json::json!({"round": 4});
        c.insert_params("", &p);
        let mut st = AdamWState::for_params(&p);
        st.t = 17;
        st.m[0].data_mut()[0] = -0.125;
        c.insert_opt("src.1.", &p.names(), &st);

        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get_params::<f64>("", arch()).unwrap(), p);
        assert_eq!(back.get_opt::<f64>("src.1.", &p.names()).unwrap(), st);
        assert_eq!(back.meta["round"], 4);
        assert!(back.contains("src.1.opt.m.phi"));
        assert!(back.contains("src.1.opt.t"));
    }

    #[test]
    fn file_layout() {
        let mut c = Checkpoint::new(arch());
        c.insert("x", &Tensor::from_vec(&[2], vec![1.5f64, -2.0]).unwrap());
        let bytes = c.to_bytes().unwrap();
        assert!(bytes.starts_with(b"dept-ckpt v1\n"));
        let tail = &bytes[bytes.len() - 16..];
        assert_eq!(&tail[..8], &1.5f64.to_le_bytes());
        assert_eq!(&tail[8..], &(-2.0f64).to_le_bytes());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut c = Checkpoint::new(arch());
        c.insert_scalar("s", 1.0);
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"other v1\n{}\n").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(c.get::<f64>("missing").is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/ck.bin");
        let p = init_params::<f32>(arch(), 1).unwrap();
        let mut c = Checkpoint::new(arch());
        c.insert_body("", &p.body);
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.get_body::<f32>("", &arch()).unwrap(), p.body);
    }
}
