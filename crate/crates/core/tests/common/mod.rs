#![allow(dead_code)]

use prefixsub_core::data::{Label, RawExample};
use prefixsub_core::model::{encode_example, ModelConfig, TaskHead, TokenSequence, Vocab};
use prefixsub_core::tensor::gradcheck::rel_error;
use prefixsub_core::tensor::{ParamId, ParamStore};

pub fn tiny_config(head: TaskHead) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 8,
        num_heads: 2,
        d_ff: 16,
        vocab_size: 0,
        max_seq_len: 16,
        prefix_len: 3,
        task_head: head,
    }
}

pub fn toy_vocab() -> Vocab {
    Vocab::build(["w0 w1 w2 w3 w4 w5 w6 w7 w8 w9"])
}

pub fn toy_sequences(vocab: &Vocab, labels: &[Label]) -> Vec<TokenSequence> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let a: Vec<String> = (0..2 + i % 4).map(|j| format!("w{}", (i * 3 + j * 7) % 10)).collect();
            let ex = RawExample {
                text_a: a.join(" "),
                text_b: (i % 2 == 0).then(|| format!("w{} w{}", i % 10, (i + 5) % 10)),
                label,
            };
            encode_example(&ex, vocab, 16)
        })
        .collect()
}

/// Max relative error between store gradients (already flushed) and central
/// differences of `loss` over every element of `ids`.
pub fn store_gradcheck(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    floor: f64,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for &id in ids {
        let analytic: Vec<f64> = store
            .grad(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; store.values(id).len()]);
        for j in 0..analytic.len() {
            let orig = store.values(id)[j];
            store.values_mut(id)[j] = orig + h;
            let lp = loss(store);
            store.values_mut(id)[j] = orig - h;
            let lm = loss(store);
            store.values_mut(id)[j] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            worst = worst.max(rel_error(analytic[j], numeric, floor));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Tokenized synthetic examples with a vocabulary built from them.
pub fn synthetic(
    kind: prefixsub_core::data::SyntheticKind,
    n: usize,
    seed: u64,
) -> (Vocab, Vec<TokenSequence>) {
    let rows = prefixsub_core::data::generate_synthetic_task(kind, n, 20, 0.0, seed).unwrap();
    let vocab = Vocab::from_examples(&rows);
    let seqs = rows.iter().map(|r| encode_example(r, &vocab, 16)).collect();
    (vocab, seqs)
}
