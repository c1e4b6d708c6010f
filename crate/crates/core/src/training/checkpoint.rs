//! Portable little-endian checkpoint format.
//!
//! ```text
//! "NRES" | version u32 = 1 | tensor count u32
//! per tensor: name length u32 | name (UTF-8) | ndim u32 | dims u64[ndim]
//!             | dtype u8 (0 = f32, 1 = f64) | raw little-endian values
//! metadata length u32 | metadata (UTF-8 JSON)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneModel, ForwardOutput, LanguageModel, ModelConfig, TokenBatch};
use crate::error::{Error, Result};
use crate::extension::{ExtendedModel, ExtensionConfig};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

pub const MAGIC: &[u8; 4] = b"NRES";
pub const VERSION: u32 = 1;

/// Configuration stored next to the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub extension: Option<ExtensionConfig>,
    /// Adapter latent or LoRA rank.
    #[serde(default)]
    pub extra_dim: usize,
    pub step: usize,
}

/// Decoded file contents before they are interpreted as a model.
#[derive(Clone, Debug)]
pub struct RawCheckpoint<S> {
    pub tensors: Vec<(String, Tensor<S>)>,
    pub meta: serde_json::Value,
}

pub fn encode<S: Scalar>(tensors: &[(String, Tensor<S>)], meta: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(S::DTYPE);
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<RawCheckpoint<S>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected \"NRES\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unknown version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format {
                offset: at as u64,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_owned();
        let ndim = r.u32("ndim")? as usize;
        if ndim == 0 {
            return Err(r.fail(format!("tensor `{name}` has no dimensions")));
        }
        let mut dims = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            dims.push(r.u64("dims")? as usize);
        }
        let dtype = r.take(1, "dtype")?[0];
        if dtype != S::DTYPE {
            return Err(r.fail(format!(
                "tensor `{name}` has dtype {dtype}, expected {} ({})",
                S::DTYPE,
                S::NAME
            )));
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| r.fail(format!("tensor `{name}` has invalid dims {dims:?}")))?;
        let nbytes = numel.checked_mul(S::BYTES).ok_or_else(|| r.fail("tensor too large"))?;
        let raw = r.take(nbytes, "tensor data")?;
        let data = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
        tensors.push((name, Tensor::new(&dims, data)?));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let at = r.pos;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let meta = serde_json::from_slice(meta_bytes).map_err(|e| Error::Format {
        offset: at as u64,
        reason: format!("metadata is not valid JSON: {e}"),
    })?;
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after metadata"));
    }
    Ok(RawCheckpoint { tensors, meta })
}

/// A model restored from a checkpoint.
#[derive(Clone, Debug)]
pub enum LoadedModel<S> {
    Backbone(BackboneModel<S>),
    Extended(ExtendedModel<S>),
}

impl<S: Scalar> LoadedModel<S> {
    pub fn extension(&self) -> Option<&ExtensionConfig> {
        match self {
            LoadedModel::Backbone(_) => None,
            LoadedModel::Extended(m) => Some(&m.extension),
        }
    }

    pub fn into_backbone(self) -> Result<BackboneModel<S>> {
        match self {
            LoadedModel::Backbone(m) => Ok(m),
            LoadedModel::Extended(m) if m.extension.method == crate::extension::Method::Finetune => m.backbone_model(),
            LoadedModel::Extended(_) => Err(Error::Contract(
                "checkpoint holds an extended model, not a backbone".into(),
            )),
        }
    }
}

impl<S: Scalar> LanguageModel<S> for LoadedModel<S> {
    fn model_config(&self) -> &ModelConfig {
        match self {
            LoadedModel::Backbone(m) => m.model_config(),
            LoadedModel::Extended(m) => m.model_config(),
        }
    }

    fn params(&self) -> &ParamStore<S> {
        match self {
            LoadedModel::Backbone(m) => m.params(),
            LoadedModel::Extended(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        match self {
            LoadedModel::Backbone(m) => m.params_mut(),
            LoadedModel::Extended(m) => m.params_mut(),
        }
    }

    fn forward(&self, tape: &mut Tape<S>, vars: &Bound, batch: &TokenBatch) -> Result<ForwardOutput> {
        match self {
            LoadedModel::Backbone(m) => m.forward(tape, vars, batch),
            LoadedModel::Extended(m) => m.forward(tape, vars, batch),
        }
    }
}

fn to_bytes<S: Scalar>(params: &ParamStore<S>, meta: &CheckpointMeta) -> Vec<u8> {
    let tensors: Vec<(String, Tensor<S>)> = params.iter().map(|(n, t)| (n.to_owned(), t.clone())).collect();
    let meta = serde_json::to_vec(meta).expect("checkpoint metadata serializes");
    encode(&tensors, &meta)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_backbone<S: Scalar>(model: &BackboneModel<S>, step: usize, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.config.clone(),
        extension: None,
        extra_dim: 0,
        step,
    };
    write(path, &to_bytes(&model.params, &meta))
}

pub fn save_extended<S: Scalar>(model: &ExtendedModel<S>, step: usize, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.config.clone(),
        extension: Some(model.extension.clone()),
        extra_dim: model.extra_dim,
        step,
    };
    write(path, &to_bytes(&model.params, &meta))
}

pub fn save_checkpoint<S: Scalar>(model: &LoadedModel<S>, step: usize, path: &Path) -> Result<()> {
    match model {
        LoadedModel::Backbone(m) => save_backbone(m, step, path),
        LoadedModel::Extended(m) => save_extended(m, step, path),
    }
}

/// Decodes bytes into a model, returning it with the stored step.
pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<(LoadedModel<S>, usize)> {
    let raw = decode::<S>(bytes)?;
    let meta: CheckpointMeta = serde_json::from_value(raw.meta).map_err(|e| Error::Format {
        offset: bytes.len() as u64,
        reason: format!("metadata does not describe a model: {e}"),
    })?;
    let mut params = ParamStore::new();
    for (name, t) in raw.tensors {
        if params.find(&name).is_some() {
            return Err(Error::Format {
                offset: 0,
                reason: format!("duplicate tensor `{name}`"),
            });
        }
        params.insert(name, t);
    }
    let model = match meta.extension {
        None => LoadedModel::Backbone(BackboneModel::from_params(meta.model, params)?),
        Some(ext) => LoadedModel::Extended(ExtendedModel::from_params(meta.model, ext, meta.extra_dim, params)?),
    };
    Ok((model, meta.step))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(LoadedModel<S>, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
