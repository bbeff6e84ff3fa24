//! Transformer encoder with prefix-aware attention and an affine prediction head.

mod pretrain;
mod tokenizer;

pub use pretrain::{mask_tokens, BaseModel, PretrainConfig};
pub use tokenizer::{encode_example, tokenize, Batch, TokenSequence, Vocab, CLS, MASK, PAD, SEP, SPECIALS, UNK};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DataSchema, Label, TargetKind};
use crate::rng::{keyed, tag};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-12;
/// Added to attention scores of padded key positions.
pub const MASK_FILL: f64 = -1e9;
pub const BASE_PREFIX: &str = "base.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskHead {
    Classification { classes: usize },
    Regression,
}

impl TaskHead {
    pub fn output_dim(self) -> usize {
        match self {
            TaskHead::Classification { classes } => classes,
            TaskHead::Regression => 1,
        }
    }

    pub fn for_schema(schema: &DataSchema) -> Self {
        match schema.target {
            TargetKind::Classification { classes } => TaskHead::Classification { classes },
            TargetKind::Regression => TaskHead::Regression,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    /// Zero means "take it from the vocabulary".
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub prefix_len: usize,
    pub task_head: TaskHead,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            vocab_size: 0,
            max_seq_len: 64,
            prefix_len: 8,
            task_head: TaskHead::Classification { classes: 2 },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Input(format!("model config: {m}")));
        if self.num_layers == 0 || self.d_model == 0 || self.num_heads == 0 || self.d_ff == 0 {
            return bad("layers, width, heads and feed-forward width must be positive");
        }
        if self.d_model % self.num_heads != 0 {
            return bad("d_model must be divisible by num_heads");
        }
        if self.vocab_size < SPECIALS.len() {
            return bad("vocab_size must cover the special tokens");
        }
        if self.max_seq_len < 3 {
            return bad("max_seq_len must be at least 3");
        }
        if self.task_head.output_dim() == 0 {
            return bad("classification head needs classes");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub num_heads: usize,
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ln1: (ParamId, ParamId),
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2: (ParamId, ParamId),
}

/// Key and value prefixes for one layer: `[P, D]` shared by the batch or `[B, P, D]` per observation.
#[derive(Clone, Copy, Debug)]
pub struct PrefixPair {
    pub key: Var,
    pub value: Var,
}

/// Head weight `[D, C]` and bias `[C]`, or per observation `[B, D, C]` and `[B, C]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

pub struct AttentionOutput {
    pub output: Var,
    /// `[B, heads, L, P + L]`
    pub weights: Var,
}

fn base_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.d_model;
    let mut s = vec![
        ("base.tok_emb".to_string(), vec![c.vocab_size, d], Init::Normal),
        ("base.pos_emb".to_string(), vec![c.max_seq_len, d], Init::Normal),
        ("base.emb_ln.gain".to_string(), vec![d], Init::Ones),
        ("base.emb_ln.bias".to_string(), vec![d], Init::Zeros),
    ];
    for l in 0..c.num_layers {
        let p = format!("base.layer{l}");
        for m in ["q", "k", "v", "o"] {
            s.push((format!("{p}.attn.w{m}"), vec![d, d], Init::Normal));
            s.push((format!("{p}.attn.b{m}"), vec![d], Init::Zeros));
        }
        s.push((format!("{p}.ln1.gain"), vec![d], Init::Ones));
        s.push((format!("{p}.ln1.bias"), vec![d], Init::Zeros));
        s.push((format!("{p}.ff.w1"), vec![d, c.d_ff], Init::Normal));
        s.push((format!("{p}.ff.b1"), vec![c.d_ff], Init::Zeros));
        s.push((format!("{p}.ff.w2"), vec![c.d_ff, d], Init::Normal));
        s.push((format!("{p}.ff.b2"), vec![d], Init::Zeros));
        s.push((format!("{p}.ln2.gain"), vec![d], Init::Ones));
        s.push((format!("{p}.ln2.bias"), vec![d], Init::Zeros));
    }
    s
}

/// Ids of the base encoder parameters inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: ModelConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub emb_ln: (ParamId, ParamId),
    pub layers: Vec<LayerParams>,
}

impl Encoder {
    /// Adds freshly initialized `base.*` parameters (normal, std 0.02) to `store`.
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = keyed(&[seed, tag::BASE_INIT]);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        for (name, shape, init) in base_specs(config) {
            let n = crate::tensor::numel(&shape);
            let values = match init {
                Init::Normal => (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            store.add(name, &shape, values, true)?;
        }
        Self::bind(store, config)
    }

    /// Looks up existing `base.*` parameters by name.
    pub fn bind<T: Scalar>(store: &ParamStore<T>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let get = |name: &str| -> Result<ParamId> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Input(format!("missing parameter {name}")))?;
            Ok(id)
        };
        for (name, shape, _) in base_specs(config) {
            let id = get(&name)?;
            if store.get(id).shape != shape {
                return Err(Error::Input(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    store.get(id).shape
                )));
            }
        }
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("base.layer{l}");
            let a = |m: &str| get(&format!("{p}.attn.{m}"));
            layers.push(LayerParams {
                attn: AttentionParams {
                    wq: a("wq")?,
                    bq: a("bq")?,
                    wk: a("wk")?,
                    bk: a("bk")?,
                    wv: a("wv")?,
                    bv: a("bv")?,
                    wo: a("wo")?,
                    bo: a("bo")?,
                    num_heads: config.num_heads,
                },
                ln1: (get(&format!("{p}.ln1.gain"))?, get(&format!("{p}.ln1.bias"))?),
                w1: get(&format!("{p}.ff.w1"))?,
                b1: get(&format!("{p}.ff.b1"))?,
                w2: get(&format!("{p}.ff.w2"))?,
                b2: get(&format!("{p}.ff.b2"))?,
                ln2: (get(&format!("{p}.ln2.gain"))?, get(&format!("{p}.ln2.bias"))?),
            });
        }
        Ok(Encoder {
            config: config.clone(),
            tok_emb: get("base.tok_emb")?,
            pos_emb: get("base.pos_emb")?,
            emb_ln: (get("base.emb_ln.gain")?, get("base.emb_ln.bias")?),
            layers,
        })
    }

    /// Per-layer hidden states `[B, L, D]` of the last layer.
    pub fn hidden<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        prefixes: Option<&[PrefixPair]>,
    ) -> Result<Var> {
        let c = &self.config;
        let (b, l, d) = (batch.size, batch.len, c.d_model);
        if l > c.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {l} exceeds max_seq_len {}",
                c.max_seq_len
            )));
        }
        if let Some(p) = prefixes {
            if p.len() != c.num_layers {
                return Err(Error::Input(format!(
                    "{} prefix layers for a {}-layer encoder",
                    p.len(),
                    c.num_layers
                )));
            }
        }
        let tok = g.param(store, self.tok_emb);
        let tok = g.gather_rows(tok, &batch.ids)?;
        let pos = g.param(store, self.pos_emb);
        let pos = g.slice(pos, 0, 0, l)?;
        let tok = g.reshape(tok, &[b, l, d])?;
        let x = g.add(tok, pos)?;
        let mut x = layer_norm(g, store, x, self.emb_ln)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let prefix = prefixes.map(|p| &p[i]);
            let a = attention_with_prefixes(g, store, &layer.attn, x, prefix, &batch.mask)?;
            let r = g.add(x, a.output)?;
            x = layer_norm(g, store, r, layer.ln1)?;
            let w1 = g.param(store, layer.w1);
            let b1 = g.param(store, layer.b1);
            let w2 = g.param(store, layer.w2);
            let b2 = g.param(store, layer.b2);
            let h = g.matmul(x, w1)?;
            let h = g.add(h, b1)?;
            let h = g.gelu(h);
            let f = g.matmul(h, w2)?;
            let f = g.add(f, b2)?;
            let r = g.add(x, f)?;
            x = layer_norm(g, store, r, layer.ln2)?;
        }
        Ok(x)
    }

    /// Pooled representation `[B, D]`: hidden state at the first position.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        prefixes: Option<&[PrefixPair]>,
    ) -> Result<Var> {
        let h = self.hidden(g, store, batch, prefixes)?;
        let first = g.slice(h, 1, 0, 1)?;
        Ok(g.reshape(first, &[batch.size, self.config.d_model])?)
    }
}

fn layer_norm<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    (gain, bias): (ParamId, ParamId),
) -> Result<Var> {
    let gv = g.param(store, gain);
    let bv = g.param(store, bias);
    Ok(g.layer_norm(x, gv, bv, LN_EPS)?)
}

fn per_observation<T: Scalar>(g: &mut Graph<T>, p: Var, b: usize, d: usize) -> Result<Var> {
    let s = g.shape(p).to_vec();
    match s.as_slice() {
        [_, dd] if *dd == d => Ok(g.expand(p, b)),
        [bb, _, dd] if *bb == b && *dd == d => Ok(p),
        _ => Err(crate::tensor::TensorError::shape("prefix", &s, &[b, 0, d]).into()),
    }
}

/// Multi-head scaled dot-product attention whose keys and values are
/// `concat(P_k, K)` and `concat(P_v, V)`. Prefix positions are always
/// attendable; token positions with `mask == false` are not.
pub fn attention_with_prefixes<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    hidden: Var,
    prefix: Option<&PrefixPair>,
    mask: &[bool],
) -> Result<AttentionOutput> {
    let shape = g.shape(hidden).to_vec();
    let [b, l, d] = shape[..] else {
        return Err(crate::tensor::TensorError::shape("attention", &shape, &[0, 0, 0]).into());
    };
    if mask.len() != b * l {
        return Err(crate::tensor::TensorError::shape("attention mask", &shape, &[mask.len()]).into());
    }
    let h = p.num_heads;
    let dh = d / h;
    let mut proj = |w: ParamId, bias: ParamId| -> Result<Var> {
        let wv = g.param(store, w);
        let bv = g.param(store, bias);
        let x = g.matmul(hidden, wv)?;
        Ok(g.add(x, bv)?)
    };
    let q = proj(p.wq, p.bq)?;
    let mut k = proj(p.wk, p.bk)?;
    let mut v = proj(p.wv, p.bv)?;
    let mut plen = 0;
    if let Some(pp) = prefix {
        let ks = g.shape(pp.key).to_vec();
        let vs = g.shape(pp.value).to_vec();
        if ks != vs {
            return Err(crate::tensor::TensorError::shape("prefix pair", &ks, &vs).into());
        }
        plen = ks[ks.len().saturating_sub(2)];
        if plen > 0 {
            let pk = per_observation(g, pp.key, b, d)?;
            let pv = per_observation(g, pp.value, b, d)?;
            k = g.concat(&[pk, k], 1)?;
            v = g.concat(&[pv, v], 1)?;
        }
    }
    let s = plen + l;
    let q = g.scale(q, 1.0 / (dh as f64).sqrt());
    let q = g.reshape(q, &[b, l, h, dh])?;
    let q = g.permute(q, &[0, 2, 1, 3])?;
    let k = g.reshape(k, &[b, s, h, dh])?;
    let kt = g.permute(k, &[0, 2, 3, 1])?;
    let v = g.reshape(v, &[b, s, h, dh])?;
    let v = g.permute(v, &[0, 2, 1, 3])?;
    let scores = g.matmul(q, kt)?;
    let fill = T::lit(MASK_FILL);
    let mut additive = Vec::with_capacity(b * s);
    for row in mask.chunks(l) {
        additive.extend(std::iter::repeat_n(T::zero(), plen));
        additive.extend(row.iter().map(|&m| if m { T::zero() } else { fill }));
    }
    let additive = g.constant(additive, &[b, 1, 1, s])?;
    let scores = g.add(scores, additive)?;
    let weights = g.softmax(scores, 3)?;
    let ctx = g.matmul(weights, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, l, d])?;
    let wo = g.param(store, p.wo);
    let bo = g.param(store, p.bo);
    let out = g.matmul(ctx, wo)?;
    let output = g.add(out, bo)?;
    Ok(AttentionOutput { output, weights })
}

/// Affine map of pooled rows `[B, D]` to `[B, C]`.
pub fn predict<T: Scalar>(g: &mut Graph<T>, pooled: Var, head: HeadVars) -> Result<Var> {
    let ps = g.shape(pooled).to_vec();
    let ws = g.shape(head.weight).to_vec();
    match (ps.as_slice(), ws.as_slice()) {
        ([_, d], [dw, _]) if d == dw => {
            let y = g.matmul(pooled, head.weight)?;
            Ok(g.add(y, head.bias)?)
        }
        ([b, d], [bw, dw, c]) if b == bw && d == dw => {
            let x = g.reshape(pooled, &[*b, 1, *d])?;
            let y = g.matmul(x, head.weight)?;
            let y = g.reshape(y, &[*b, *c])?;
            Ok(g.add(y, head.bias)?)
        }
        _ => Err(crate::tensor::TensorError::shape("predict", &ps, &ws).into()),
    }
}

/// Cross-entropy for classification heads, mean squared error for regression.
pub fn task_loss<T: Scalar>(g: &mut Graph<T>, outputs: Var, labels: &[Label], head: TaskHead) -> Result<Var> {
    match head {
        TaskHead::Classification { .. } => {
            let idx = labels
                .iter()
                .map(|l| {
                    l.class()
                        .ok_or_else(|| Error::Input("regression label for a classification head".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(g.cross_entropy(outputs, &idx)?)
        }
        TaskHead::Regression => {
            let t: Vec<T> = labels.iter().map(|l| T::lit(l.as_f64())).collect();
            Ok(g.mse(outputs, &t)?)
        }
    }
}

/// Class index (as a float) or regression value for each row of `outputs`.
pub fn decode_predictions<T: Scalar>(outputs: &[T], head: TaskHead) -> Vec<f64> {
    let c = head.output_dim();
    outputs
        .chunks(c)
        .map(|row| match head {
            TaskHead::Regression => row[0].to_f64_lossy(),
            TaskHead::Classification { .. } => {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as f64
            }
        })
        .collect()
}

/// Marks every `base.*` parameter as frozen.
pub fn freeze_base<T: Scalar>(store: &mut ParamStore<T>) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(BASE_PREFIX))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        store.set_requires_grad(id, false);
    }
}

pub fn base_is_frozen<T: Scalar>(store: &ParamStore<T>) -> bool {
    store
        .iter()
        .all(|(_, p)| !p.name.starts_with(BASE_PREFIX) || !p.requires_grad())
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` draws.
pub(crate) fn fan_in_uniform<T: Scalar>(rng: &mut crate::rng::Rng, fan_in: usize, n: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
}
