//! Single-file named-array checkpoints with a small metadata manifest.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use qfss_autograd::ParamStore;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{is_d_param, Model};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub epoch: usize,
    pub seed: u64,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes both parameter stores plus the run configuration.
pub fn to_bytes(model: &Model, config: &RunConfig, epoch: usize) -> Result<Vec<u8>> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, value) in model.g.iter().chain(model.d.iter()) {
        let bytes = value.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name.clone(), value.shape().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(n, shape, bytes)| Ok((n.as_str(), TensorView::new(Dtype::F32, shape.clone(), bytes).map_err(|e| ck(e.to_string()))?)))
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([
        ("config".to_string(), config.to_toml()),
        ("config_hash".to_string(), config.hash()),
        ("epoch".to_string(), epoch.to_string()),
        ("seed".to_string(), config.seed.to_string()),
    ]);
    serialize_sorted(views, meta)
}

/// `safetensors::serialize` with the header keys in sorted order, so that
/// equal inputs always give equal bytes.
pub fn serialize_sorted<'a>(views: Vec<(&'a str, TensorView<'a>)>, meta: HashMap<String, String>) -> Result<Vec<u8>> {
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| ck(e.to_string()))?;
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("eight-byte length prefix")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| ck(e.to_string()))?;
    // `Value` objects are key-ordered maps
    let mut sorted = serde_json::to_vec(&header).map_err(|e| ck(e.to_string()))?;
    sorted.resize(sorted.len().next_multiple_of(8), b' ');
    let mut out = Vec::with_capacity(8 + sorted.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(sorted.len() as u64).to_le_bytes());
    out.extend_from_slice(&sorted);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

/// Atomic write: a temporary sibling file is renamed over `path`.
pub fn save(path: &Path, model: &Model, config: &RunConfig, epoch: usize) -> Result<()> {
    let bytes = to_bytes(model, config, epoch)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_meta(bytes: &[u8]) -> Result<(RunConfig, CheckpointMeta)> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| ck(e.to_string()))?;
    let meta = header.metadata().as_ref().ok_or_else(|| ck("missing manifest"))?;
    let field = |k: &str| meta.get(k).ok_or_else(|| ck(format!("manifest lacks `{k}`")));
    let config = RunConfig::from_toml(field("config")?)?;
    let info = CheckpointMeta {
        config_hash: field("config_hash")?.clone(),
        epoch: field("epoch")?.parse().map_err(|_| ck("bad epoch"))?,
        seed: field("seed")?.parse().map_err(|_| ck("bad seed"))?,
    };
    if info.config_hash != config.hash() {
        return Err(ck("config hash does not match the stored config"));
    }
    Ok((config, info))
}

/// Overwrites every parameter of `model` with the stored arrays, which must
/// match it name for name and shape for shape.
fn fill(model: &mut Model, bytes: &[u8]) -> Result<()> {
    let tensors = SafeTensors::deserialize(bytes).map_err(|e| ck(e.to_string()))?;
    let expected = model.g.len() + model.d.len();
    if tensors.len() != expected {
        return Err(ck(format!("{} arrays stored, the configured model has {expected}", tensors.len())));
    }
    for (name, view) in tensors.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(ck(format!("`{name}` is not f32")));
        }
        let store: &mut ParamStore<f32> = if is_d_param(&name) { &mut model.d } else { &mut model.g };
        let slot = store.get_mut(&name).ok_or_else(|| ck(format!("unexpected array `{name}`")))?;
        if slot.shape() != view.shape() {
            return Err(ck(format!("`{name}` has shape {:?}, the model expects {:?}", view.shape(), slot.shape())));
        }
        let data: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        *slot = ArrayD::from_shape_vec(IxDyn(view.shape()), data).map_err(|e| ck(e.to_string()))?;
    }
    Ok(())
}

/// Restores the model described by the stored configuration.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, RunConfig, CheckpointMeta)> {
    let (config, info) = read_meta(bytes)?;
    let mut model = Model::init(config.model()?, config.seed)?;
    fill(&mut model, bytes)?;
    Ok((model, config, info))
}

/// Restores parameters into the model described by `config` instead of the
/// stored one; fails on any architectural mismatch.
pub fn from_bytes_as(bytes: &[u8], config: &RunConfig) -> Result<(Model, CheckpointMeta)> {
    let (_, info) = read_meta(bytes)?;
    let mut model = Model::init(config.model()?, config.seed)?;
    fill(&mut model, bytes)?;
    Ok((model, info))
}

pub fn load(path: &Path) -> Result<(Model, RunConfig, CheckpointMeta)> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_as(path: &Path, config: &RunConfig) -> Result<(Model, CheckpointMeta)> {
    from_bytes_as(&std::fs::read(path).map_err(|e| Error::io(path, e))?, config)
}
