use super::ModelParams;
use crate::error::{Error, Result};

/// A flattened model split into equal-length shards; the last shard is zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedModel {
    pub shards: Vec<Vec<f64>>,
    pub original_length: usize,
    pub pad_length: usize,
    /// Layer sizes `[input, hidden..., classes]`.
    pub dims: Vec<usize>,
}

impl ShardedModel {
    pub fn shard_length(&self) -> usize {
        self.shards.first().map_or(0, Vec::len)
    }

    /// Re-wraps shard vectors produced elsewhere (e.g. by decryption) with the
    /// metadata of a reference sharding.
    pub fn with_shards(&self, shards: Vec<Vec<f64>>) -> ShardedModel {
        ShardedModel {
            shards,
            ..self.clone()
        }
    }
}

pub fn flatten_shard(model: &ModelParams, shard_count: usize) -> Result<ShardedModel> {
    let flat = model.flatten();
    if shard_count == 0 || shard_count > flat.len() {
        return Err(Error::Parameter(format!(
            "cannot split {} parameters into {shard_count} shards",
            flat.len()
        )));
    }
    let len = flat.len().div_ceil(shard_count);
    let pad_length = len * shard_count - flat.len();
    let mut padded = flat;
    let original_length = padded.len();
    padded.resize(len * shard_count, 0.0);
    Ok(ShardedModel {
        shards: padded.chunks(len).map(<[f64]>::to_vec).collect(),
        original_length,
        pad_length,
        dims: model.dims(),
    })
}

pub fn unflatten(sharded: &ShardedModel) -> Result<ModelParams> {
    let len = sharded.shard_length();
    if sharded.shards.is_empty() || len == 0 {
        return Err(Error::ShapeMismatch("no shards".into()));
    }
    if sharded.shards.iter().any(|s| s.len() != len) {
        return Err(Error::ShapeMismatch("shards differ in length".into()));
    }
    let total = len * sharded.shards.len();
    if total != sharded.original_length + sharded.pad_length {
        return Err(Error::ShapeMismatch(format!(
            "{total} values but original {} + pad {}",
            sharded.original_length, sharded.pad_length
        )));
    }
    let flat: Vec<f64> = sharded
        .shards
        .iter()
        .flatten()
        .take(sharded.original_length)
        .copied()
        .collect();
    ModelParams::from_flat(&sharded.dims, &flat)
}

/// Negates every parameter.
pub fn sign_flip_attack(update: &ModelParams) -> ModelParams {
    let mut out = update.clone();
    for l in &mut out.layers {
        l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = -*v);
    }
    out
}
