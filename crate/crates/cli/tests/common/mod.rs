#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prefixsub_cli::commands::{generate, prepare, pretrain, GenerateArgs, PrepareArgs};
use prefixsub_cli::config::RunConfig;
use prefixsub_core::data::SyntheticKind;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_prefixsub"));
    c.env_remove("PREFIXSUB_SEED").env("RUST_LOG", "warn");
    c
}

pub fn run_bin(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny run config written to `dir/config.json`, pointing at `dir/base.ckpt`.
pub fn tiny_config(dir: &Path, n_vertices: usize) -> (RunConfig, PathBuf) {
    let json = format!(
        r#"{{
  "model": {{ "num_layers": 1, "d_model": 8, "num_heads": 2, "d_ff": 16, "max_seq_len": 24 }},
  "pretrain": {{ "steps": 20, "batch_size": 8 }},
  "train": {{ "n_vertices": {n_vertices}, "prefix_len": 2, "epochs": 3, "patience": 2, "batch_size": 8, "n_concat": 2, "seed": 3 }},
  "learning_rates": [0.01, 0.003],
  "base_checkpoint": "base.ckpt",
  "seed": 3
}}"#
    );
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    (RunConfig::load(&path).unwrap(), path)
}

/// Generates a corpus, prepares it under `dir/data/{task}/{k}` and returns the prepared directory.
pub fn prepared(dir: &Path, kind: SyntheticKind, size: usize, k: usize, replicates: usize) -> PathBuf {
    let corpus = dir.join(format!("{}.tsv", kind.name()));
    if !corpus.exists() {
        generate(&GenerateArgs {
            kind,
            size,
            vocab: 20,
            noise: 0.0,
            seed: 1,
            out: corpus.clone(),
            force: false,
        })
        .unwrap();
    }
    let out = dir.join("data").join(kind.name()).join(k.to_string());
    prepare(&PrepareArgs {
        input: corpus,
        schema: kind.schema(),
        k,
        replicates,
        seed: 5,
        out: out.clone(),
        task: Some(kind.name().into()),
        force: false,
    })
    .unwrap();
    out
}

/// Pretrains the base named in `cfg` on the listed corpora.
pub fn pretrained(dir: &Path, cfg: &RunConfig, kinds: &[SyntheticKind]) {
    let inputs: Vec<_> = kinds
        .iter()
        .map(|k| (dir.join(format!("{}.tsv", k.name())), k.schema()))
        .collect();
    pretrain(cfg, &inputs, cfg.base_checkpoint.as_deref().unwrap(), false).unwrap();
}
