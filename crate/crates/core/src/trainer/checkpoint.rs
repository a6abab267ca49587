//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `PFCKPT\0\0`, `u32` version, `u32` header
//! length, JSON header, `u32` tensor count, then per tensor `u32` name
//! length, name, `u32` rows, `u32` cols, column-major `f64` data. Tensors
//! are the model parameters followed by `adam.m.*` and `adam.v.*`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{FusionMode, Model, ObjectiveOptions};
use super::optim::{AdamConfig, AdamW};
use super::TrainState;
use crate::error::{Error, Result};
use crate::pipeline::InputOptions;
use crate::ptformer::{Matrix, ParamTensors, PtFormerState};
use crate::types::HyperParams;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    seed: u64,
    epoch: usize,
    step: u64,
    fusion: FusionMode,
    ff_hidden: usize,
    hyperparams: HyperParams,
    inputs: InputOptions,
    objective: ObjectiveOptions,
    adam: AdamConfig,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let header = Header {
        seed: state.seed,
        epoch: state.epoch,
        step: state.optimizer.step,
        fusion: state.model.fusion,
        ff_hidden: state.model.ptformer.params.ff_hidden(),
        hyperparams: state.hyperparams.clone(),
        inputs: state.inputs,
        objective: state.objective,
        adam: state.optimizer.config,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);

    let params = state.model.tensors();
    let mut tensors: Vec<(String, &Matrix)> = Vec::with_capacity(params.len() * 3);
    for (i, (name, _)) in params.iter().enumerate() {
        tensors.push((format!("adam.m.{name}"), &state.optimizer.m[i]));
        tensors.push((format!("adam.v.{name}"), &state.optimizer.v[i]));
    }
    let mut all = params;
    all.extend(tensors);
    out.extend_from_slice(&(all.len() as u32).to_le_bytes());
    for (name, m) in all {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
        for x in m.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ckpt_err(self.path, "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(ckpt_err(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(path, format!("unsupported version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| ckpt_err(path, format!("header: {e}")))?;
    let hp = header
        .hyperparams
        .clone()
        .validated()
        .map_err(|e| ckpt_err(path, e.to_string()))?;

    let count = r.u32()? as usize;
    let mut tensors: HashMap<String, Matrix> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ckpt_err(path, "tensor name is not UTF-8"))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f64()?);
        }
        tensors.insert(name, Matrix::from_vec(rows, cols, data));
    }
    if r.pos != bytes.len() {
        return Err(ckpt_err(path, "trailing bytes"));
    }

    let mut model = Model {
        ptformer: PtFormerState {
            params: crate::ptformer::PtFormerParams::zeros(hp.dim, hp.num_heads, header.ff_hidden),
            dropout_rate: hp.dropout,
        },
        classifier: super::classifier::ClassifierParams::zeros(3 * hp.dim),
        fusion: header.fusion,
    };
    let mut fill = |name: &str, target: &mut Matrix| -> Result<()> {
        let src = tensors
            .remove(name)
            .ok_or_else(|| ckpt_err(path, format!("missing tensor {name}")))?;
        if src.shape() != target.shape() {
            return Err(ckpt_err(
                path,
                format!("tensor {name}: shape {:?}, expected {:?}", src.shape(), target.shape()),
            ));
        }
        *target = src;
        Ok(())
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, target) in model.tensors_mut() {
        fill(&name, target)?;
        let mut mm = Matrix::zeros(target.nrows(), target.ncols());
        let mut vv = mm.clone();
        fill(&format!("adam.m.{name}"), &mut mm)?;
        fill(&format!("adam.v.{name}"), &mut vv)?;
        m.push(mm);
        v.push(vv);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(ckpt_err(path, format!("unexpected tensor {extra}")));
    }
    Ok(TrainState {
        model,
        optimizer: AdamW {
            config: header.adam,
            step: header.step,
            m,
            v,
        },
        hyperparams: hp,
        inputs: header.inputs,
        objective: header.objective,
        epoch: header.epoch,
        seed: header.seed,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(format!("write {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("rename to {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    decode(&bytes, path)
}

/// Pointer to the best epoch so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub path: PathBuf,
    /// Validation AUC that made this epoch the best, if one was available.
    pub val_auc: Option<f64>,
}

pub fn epoch_file_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}
