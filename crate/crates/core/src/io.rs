//! Base, simplex and baked checkpoints on top of the tensor container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{BaseModel, Encoder, ModelConfig, Vocab, BASE_PREFIX};
use crate::subspace::{BakedModel, PrefixModel};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::ParamStore;
use crate::{Error, Result};

pub const KIND_BASE: &str = "base";
pub const KIND_SIMPLEX: &str = "simplex";
pub const KIND_BAKED: &str = "baked";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_prefix: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_head: Option<usize>,
}

fn meta(ckpt: &Checkpoint) -> Result<CheckpointMeta> {
    Ok(serde_json::from_value(ckpt.config.clone())?)
}

fn store_from(ckpt: &Checkpoint, prefix: &str) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for (name, (shape, values)) in &ckpt.tensors {
        if name.starts_with(prefix) {
            store.add(name.clone(), shape, values.clone(), true)?;
        }
    }
    Ok(store)
}

pub fn save_base(path: impl AsRef<Path>, base: &BaseModel<f32>) -> Result<()> {
    let m = CheckpointMeta {
        model: base.config.clone(),
        vocab: base.vocab.tokens().to_vec(),
        n_prefix: None,
        n_head: None,
    };
    let mut c = Checkpoint::new(KIND_BASE, serde_json::to_value(&m)?);
    c.insert_params(&base.store, "");
    Ok(c.save(path)?)
}

pub fn load_base(path: impl AsRef<Path>) -> Result<BaseModel<f32>> {
    let c = Checkpoint::load(path.as_ref())?;
    if c.kind != KIND_BASE {
        return Err(Error::Input(format!(
            "{}: expected a base checkpoint, found {:?}",
            path.as_ref().display(),
            c.kind
        )));
    }
    let m = meta(&c)?;
    let vocab = Vocab::from_tokens(m.vocab)?;
    let mut base = BaseModel::<f32>::new(m.model, vocab, 0)?;
    c.load_params(&mut base.store)?;
    Ok(base)
}

pub fn save_simplex(path: impl AsRef<Path>, model: &PrefixModel<f32>, vocab: &Vocab) -> Result<()> {
    let m = CheckpointMeta {
        model: model.config.clone(),
        vocab: vocab.tokens().to_vec(),
        n_prefix: Some(model.prefix.n()),
        n_head: Some(model.head.n()),
    };
    let mut c = Checkpoint::new(KIND_SIMPLEX, serde_json::to_value(&m)?);
    c.insert_params(&model.store, "");
    Ok(c.save(path)?)
}

pub fn save_baked(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    store: &ParamStore<f32>,
    baked: &BakedModel<f32>,
    vocab: &Vocab,
) -> Result<()> {
    let m = CheckpointMeta {
        model: config.clone(),
        vocab: vocab.tokens().to_vec(),
        n_prefix: None,
        n_head: None,
    };
    let mut c = Checkpoint::new(KIND_BAKED, serde_json::to_value(&m)?);
    c.insert_params(store, BASE_PREFIX);
    let shape = [baked.prefix_len, baked.d_model];
    for (l, [k, v]) in baked.prefixes.iter().enumerate() {
        c.insert(format!("baked.layer{l}.key"), &shape, k);
        c.insert(format!("baked.layer{l}.value"), &shape, v);
    }
    c.insert("baked.head.w", &[baked.d_model, baked.output_dim], &baked.head_w);
    c.insert("baked.head.b", &[baked.output_dim], &baked.head_b);
    Ok(c.save(path)?)
}

/// A frozen encoder with a static prefix and head.
#[derive(Clone, Debug)]
pub struct BakedCheckpoint {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    pub encoder: Encoder,
    pub baked: BakedModel<f32>,
}

#[derive(Clone, Debug)]
pub enum LoadedModel {
    Simplex(PrefixModel<f32>),
    Baked(BakedCheckpoint),
}

impl LoadedModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            LoadedModel::Simplex(m) => &m.config,
            LoadedModel::Baked(b) => &b.config,
        }
    }
}

/// Loads a simplex or baked checkpoint together with its vocabulary.
pub fn load_model(path: impl AsRef<Path>) -> Result<(LoadedModel, Vocab)> {
    let path = path.as_ref();
    let c = Checkpoint::load(path)?;
    let m = meta(&c)?;
    let vocab = Vocab::from_tokens(m.vocab.clone())?;
    let model = match c.kind.as_str() {
        KIND_SIMPLEX => {
            let (np, nh) = m
                .n_prefix
                .zip(m.n_head)
                .ok_or_else(|| Error::Input(format!("{}: simplex checkpoint without vertex counts", path.display())))?;
            let mut store = store_from(&c, "")?;
            crate::model::freeze_base(&mut store);
            LoadedModel::Simplex(PrefixModel::from_store(store, &m.model, np, nh)?)
        }
        KIND_BAKED => {
            let mut store = store_from(&c, BASE_PREFIX)?;
            crate::model::freeze_base(&mut store);
            let encoder = Encoder::bind(&store, &m.model)?;
            let get = |name: &str| -> Result<Vec<f32>> {
                c.get(name)
                    .map(|(_, v)| v.to_vec())
                    .ok_or_else(|| Error::Input(format!("{}: missing tensor {name}", path.display())))
            };
            let prefixes = (0..m.model.num_layers)
                .map(|l| Ok([get(&format!("baked.layer{l}.key"))?, get(&format!("baked.layer{l}.value"))?]))
                .collect::<Result<Vec<_>>>()?;
            let baked = BakedModel {
                prefix_len: m.model.prefix_len,
                d_model: m.model.d_model,
                output_dim: m.model.task_head.output_dim(),
                prefixes,
                head_w: get("baked.head.w")?,
                head_b: get("baked.head.b")?,
            };
            LoadedModel::Baked(BakedCheckpoint {
                config: m.model,
                store,
                encoder,
                baked,
            })
        }
        other => {
            return Err(Error::Input(format!(
                "{}: expected a simplex or baked checkpoint, found {other:?}",
                path.display()
            )))
        }
    };
    Ok((model, vocab))
}
