//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `"HIIF"`, `u32` version, `u32` metadata length, metadata UTF-8
//! (`key = value` lines), then tensor records until end of file:
//! `u32` name length, name, `u8` dtype (0 = f32, 1 = f64), `u8` rank,
//! `u32` per dim, raw values. Records are sorted by name.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::config::RunConfig;
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"HIIF";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("corrupt checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not describe a valid model: {0}")]
    Model(String),
}

/// A stored tensor in its recorded precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    fn cast<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

fn store_tensor<T: Scalar>(t: &Tensor<T>) -> StoredTensor {
    match T::PRECISION {
        Precision::Single => StoredTensor::F32(t.cast()),
        Precision::Double => StoredTensor::F64(t.cast()),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Format(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, run: &RunConfig, extra: &[(&str, String)]) -> Self {
        let mut metadata: BTreeMap<String, String> = run.to_pairs().into_iter().collect();
        // the model's own configuration wins over the run's
        let probe = RunConfig {
            encoder: model.cfg.encoder.clone(),
            c_out_explicit: true,
            decoder: model.cfg.decoder.clone(),
            ..run.clone()
        };
        metadata.extend(probe.to_pairs());
        for (k, v) in extra {
            metadata.insert(k.to_string(), v.clone());
        }
        let tensors = model.params.iter().map(|(k, t)| (k.clone(), store_tensor(t))).collect();
        Checkpoint { metadata, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['\n', '=']) || k.trim() != k || k.is_empty() || v.contains('\n') || v.trim() != v {
                return Err(CheckpointError::Format(format!("metadata entry `{k}` cannot be stored")));
            }
            meta.push_str(&format!("{k} = {v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let code = match t {
                StoredTensor::F32(_) => Precision::Single.code(),
                StoredTensor::F64(_) => Precision::Double.code(),
            };
            out.push(code);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
            return Err(CheckpointError::Format("bad magic (not a HIIF checkpoint)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported format version {version}")));
        }
        let mlen = r.u32("metadata length")? as usize;
        let meta = std::str::from_utf8(r.take(mlen, "metadata")?)
            .map_err(|_| CheckpointError::Format("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| CheckpointError::Format(format!("bad metadata line `{line}`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let mut tensors = BTreeMap::new();
        while !r.done() {
            let n = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let code = r.u8("dtype")?;
            let precision =
                Precision::from_code(code).ok_or_else(|| CheckpointError::Format(format!("{name}: unknown dtype {code}")))?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let count: usize = shape.iter().product();
            let bad = |e: crate::tensor::TensorError| CheckpointError::Format(format!("{name}: {e}"));
            let t = match precision {
                Precision::Single => {
                    let raw = r.take(4 * count, "values")?;
                    StoredTensor::F32(Tensor::new(&shape, raw.chunks_exact(4).map(f32::read_le).collect()).map_err(bad)?)
                }
                Precision::Double => {
                    let raw = r.take(8 * count, "values")?;
                    StoredTensor::F64(Tensor::new(&shape, raw.chunks_exact(8).map(f64::read_le).collect()).map_err(bad)?)
                }
            };
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Format(format!("duplicate tensor {name}")));
            }
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let buf = std::fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_bytes(&buf)
    }

    /// The run configuration recorded in the metadata; other keys are ignored.
    pub fn run_config(&self) -> Result<RunConfig, CheckpointError> {
        let mut run = RunConfig::preset(crate::config::Preset::Desk);
        for (k, v) in &self.metadata {
            if k.starts_with("encoder.") || k.starts_with("decoder.") || k.starts_with("train.") || k.starts_with("eval.") {
                run.set(k, v).map_err(CheckpointError::Model)?;
            }
        }
        Ok(run)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CheckpointError> {
        Ok(self.run_config()?.model())
    }

    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>, CheckpointError> {
        let cfg = self.model_config()?;
        let params = ParamStore::from_map(self.tensors.iter().map(|(k, t)| (k.clone(), t.cast::<T>())).collect());
        Model::from_params(cfg, params).map_err(CheckpointError::Model)
    }
}
