use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tokenizer::{Batch, TokenSequence, Vocab, CLS, MASK, PAD, SEP};
use super::{Encoder, ModelConfig};
use crate::rng::{keyed, tag, Rng};
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamId, ParamStore, Scalar};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            mask_prob: 0.15,
        }
    }
}

/// The encoder plus a masked-token prediction head, trained before the base is frozen.
#[derive(Clone, Debug)]
pub struct BaseModel<T> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub mlm_w: ParamId,
    pub mlm_b: ParamId,
}

fn is_special(id: usize) -> bool {
    matches!(id, PAD | CLS | SEP)
}

/// Replaces each non-special token with `[MASK]` with probability `p`, forcing
/// at least one masked position per batch. Returns the corrupted sequences and
/// `(flat position, original id)` targets with positions in a `[B, L]` layout.
pub fn mask_tokens(
    seqs: &[&TokenSequence],
    p: f64,
    rng: &mut Rng,
) -> (Vec<TokenSequence>, Vec<(usize, usize)>) {
    let len = seqs.iter().map(|s| s.ids.len()).max().unwrap_or(0);
    let mut out: Vec<TokenSequence> = seqs.iter().map(|s| (*s).clone()).collect();
    let mut targets = Vec::new();
    for (b, s) in out.iter_mut().enumerate() {
        for (i, id) in s.ids.iter_mut().enumerate() {
            if !is_special(*id) && rng.random_bool(p) {
                targets.push((b * len + i, *id));
                *id = MASK;
            }
        }
    }
    if targets.is_empty() {
        let candidates: Vec<(usize, usize)> = out
            .iter()
            .enumerate()
            .flat_map(|(b, s)| {
                s.ids
                    .iter()
                    .enumerate()
                    .filter(|(_, &id)| !is_special(id))
                    .map(move |(i, _)| (b, i))
            })
            .collect();
        if let Some(&(b, i)) = candidates.choose(rng) {
            targets.push((b * len + i, out[b].ids[i]));
            out[b].ids[i] = MASK;
        }
    }
    (out, targets)
}

impl<T: Scalar> BaseModel<T> {
    /// A randomly initialized base whose vocabulary size is taken from `vocab`.
    pub fn new(mut config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, &config, seed)?;
        let mut rng = keyed(&[seed, tag::BASE_INIT, 1]);
        let (d, v) = (config.d_model, config.vocab_size);
        let mlm_w = store.add("mlm.w", &[d, v], super::fan_in_uniform(&mut rng, d, d * v), true)?;
        let mlm_b = store.add("mlm.b", &[v], vec![T::zero(); v], true)?;
        Ok(BaseModel {
            config,
            vocab,
            store,
            encoder,
            mlm_w,
            mlm_b,
        })
    }

    /// Masked-token cross-entropy of one batch; backpropagates when `train` is set.
    fn mlm_batch(&mut self, seqs: &[&TokenSequence], p: f64, rng: &mut Rng, train: bool) -> Result<Option<f64>> {
        let (masked, targets) = mask_tokens(seqs, p, rng);
        if targets.is_empty() {
            return Ok(None);
        }
        let refs: Vec<&TokenSequence> = masked.iter().collect();
        let batch = Batch::new(&refs)?;
        let mut g = Graph::new();
        let h = self.encoder.hidden(&mut g, &self.store, &batch, None)?;
        let d = self.config.d_model;
        let flat = g.reshape(h, &[batch.size * batch.len, d])?;
        let pos: Vec<usize> = targets.iter().map(|t| t.0).collect();
        let labels: Vec<usize> = targets.iter().map(|t| t.1).collect();
        let picked = g.gather_rows(flat, &pos)?;
        let w = g.param(&self.store, self.mlm_w);
        let b = g.param(&self.store, self.mlm_b);
        let logits = g.matmul(picked, w)?;
        let logits = g.add(logits, b)?;
        let loss = g.cross_entropy(logits, &labels)?;
        let value = g.scalar(loss).to_f64_lossy();
        if train {
            g.backward(loss)?;
            g.flush_grads(&mut self.store);
        }
        Ok(Some(value))
    }

    /// Masked-token training on `corpus`. Returns the loss of every step.
    pub fn pretrain_toy(&mut self, corpus: &[TokenSequence], cfg: &PretrainConfig, seed: u64) -> Result<Vec<f64>> {
        if corpus.is_empty() {
            return Err(Error::Input("pretraining corpus is empty".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Input("pretraining batch size must be positive".into()));
        }
        let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.learning_rate));
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let mut rng = keyed(&[seed, tag::PRETRAIN, step as u64]);
            let seqs: Vec<&TokenSequence> = (0..cfg.batch_size)
                .map(|_| &corpus[rng.random_range(0..corpus.len())])
                .collect();
            if let Some(l) = self.mlm_batch(&seqs, cfg.mask_prob, &mut rng, true)? {
                opt.step(&mut self.store)?;
                losses.push(l);
            }
        }
        Ok(losses)
    }

    /// Mean masked-token loss over `corpus` with masking drawn from `seed`.
    pub fn mlm_loss(&mut self, corpus: &[TokenSequence], mask_prob: f64, seed: u64) -> Result<f64> {
        let mut rng = keyed(&[seed, tag::PRETRAIN, u64::MAX]);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in corpus.chunks(32) {
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            if let Some(l) = self.mlm_batch(&refs, mask_prob, &mut rng, false)? {
                total += l;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Input("no maskable tokens".into()));
        }
        Ok(total / count as f64)
    }

    /// Base parameters only, converted to another precision.
    pub fn base_store<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (_, p) in self.store.iter() {
            if p.name.starts_with(super::BASE_PREFIX) {
                let values = p.values.iter().map(|v| U::lit(v.to_f64_lossy())).collect();
                out.add(p.name.clone(), &p.shape, values, p.requires_grad())
                    .expect("names are unique");
            }
        }
        out
    }
}
