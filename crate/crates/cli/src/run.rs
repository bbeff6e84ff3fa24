//! Prepared-data layout, single training runs and their aggregation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use prefixsub_core::data::{load_corpus, RawExample, SplitManifest};
use prefixsub_core::eval::{baked_metric, bootstrap_significance, MetricKind, DEFAULT_LEVEL, DEFAULT_RESAMPLES};
use prefixsub_core::io::{save_baked, save_simplex};
use prefixsub_core::model::{encode_example, BaseModel, TaskHead, TokenSequence};
use prefixsub_core::rng::derive_seed;
use prefixsub_core::subspace::PrefixModel;
use prefixsub_core::eval::DevMode;
use prefixsub_core::trainer::{build_model, fit, grid_search_with, SubspaceScope, TrainConfig, TrainState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEST_FILE: &str = "test.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const BAKED_FILE: &str = "model.ckpt";
pub const SIMPLEX_FILE: &str = "simplex.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const RESULT_FILE: &str = "result.json";

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// A directory written by `prepare`.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dir: PathBuf,
    pub manifest: SplitManifest,
}

impl PreparedData {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(CliError::Input(format!("{}: no prepared splits found", path.display())));
        }
        let manifest = SplitManifest::load(&path)?;
        Ok(PreparedData { dir, manifest })
    }

    pub fn replicates(&self) -> usize {
        self.manifest.replicates.len()
    }

    fn load(&self, path: PathBuf) -> Result<Vec<RawExample>> {
        Ok(load_corpus(path, &self.manifest.schema)?)
    }

    pub fn train_val(&self, replicate: usize) -> Result<(Vec<RawExample>, Vec<RawExample>)> {
        if replicate >= self.replicates() {
            return Err(CliError::Input(format!(
                "replicate {replicate} out of range; {} has {} replicates",
                self.dir.display(),
                self.replicates()
            )));
        }
        let d = self.dir.join(replicate.to_string());
        Ok((self.load(d.join(TRAIN_FILE))?, self.load(d.join(VAL_FILE))?))
    }

    pub fn test(&self) -> Result<Vec<RawExample>> {
        self.load(self.dir.join(TEST_FILE))
    }
}

/// Every prepared directory under `root` (including `root` itself), ordered by task then K.
pub fn find_prepared(root: impl AsRef<Path>) -> Result<Vec<PreparedData>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        if dir.join(MANIFEST_FILE).is_file() {
            out.push(dir.to_path_buf());
        }
        let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| io_err(dir, e))?;
            if entry.file_type().map_err(|e| io_err(dir, e))?.is_dir() {
                walk(&entry.path(), out)?;
            }
        }
        Ok(())
    }
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(CliError::Input(format!("{}: not a directory", root.display())));
    }
    let mut dirs = Vec::new();
    walk(root, &mut dirs)?;
    if dirs.is_empty() {
        return Err(CliError::Input(format!("{}: no {MANIFEST_FILE} found", root.display())));
    }
    let mut out = dirs.into_iter().map(PreparedData::open).collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| (&a.manifest.task, a.manifest.k).cmp(&(&b.manifest.task, b.manifest.k)));
    Ok(out)
}

/// Method variants compared by `ablate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    Line,
    Deterministic,
    HeadOnly,
    PrefixOnly,
    /// A single vertex: plain prefix tuning.
    PrefixTuning,
}

impl Variant {
    pub const TABLE: [Variant; 5] = [
        Variant::Full,
        Variant::Line,
        Variant::Deterministic,
        Variant::HeadOnly,
        Variant::PrefixOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Line => "line",
            Variant::Deterministic => "deterministic",
            Variant::HeadOnly => "head-only",
            Variant::PrefixOnly => "prefix-only",
            Variant::PrefixTuning => "prefix-tuning",
        }
    }

    /// Applies the variant on top of the configured training settings.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::Line => c.n_vertices = 2,
            Variant::Deterministic => c.dev_mode = DevMode::Deterministic,
            Variant::HeadOnly => c.subspace_scope = SubspaceScope::HeadOnly,
            Variant::PrefixOnly => c.subspace_scope = SubspaceScope::PrefixOnly,
            Variant::PrefixTuning => c.n_vertices = 1,
        }
        c
    }
}

impl FromStr for Variant {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        [Variant::PrefixTuning]
            .into_iter()
            .chain(Variant::TABLE)
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                CliError::Input(format!(
                    "unknown suite {s:?}; expected line, deterministic, head-only, prefix-only, full, prefix-tuning or all"
                ))
            })
    }
}

/// Comma-separated variant names; `all` expands to the five table variants.
pub fn parse_suite(s: &str) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if part == "all" {
            out.extend(Variant::TABLE);
        } else {
            out.push(part.parse()?);
        }
    }
    if out.is_empty() {
        return Err(CliError::Input("empty suite".into()));
    }
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub learning_rate: f64,
    pub dev_metric: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Contents of `result.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub task: String,
    pub k: usize,
    pub replicate: usize,
    pub variant: Option<Variant>,
    pub metric: MetricKind,
    pub learning_rate: f64,
    pub dev_metric: f64,
    pub test_metric: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub n_prefix: usize,
    pub n_head: usize,
    pub grid: Vec<GridRun>,
    pub config_hash: String,
}

pub fn replicate_dir(out: &Path, task: &str, k: usize, replicate: usize) -> PathBuf {
    out.join(task).join(k.to_string()).join(replicate.to_string())
}

fn tokenize_all(rows: &[RawExample], base: &BaseModel<f32>) -> Vec<TokenSequence> {
    rows.iter()
        .map(|r| encode_example(r, &base.vocab, base.config.max_seq_len))
        .collect()
}

pub fn metric_for(cfg: &RunConfig, data: &PreparedData, head: TaskHead) -> Result<MetricKind> {
    let kind = cfg.metric.unwrap_or_else(|| MetricKind::for_schema(&data.manifest.schema));
    if !kind.compatible(head) {
        return Err(CliError::Input(format!("metric {kind} does not apply to schema {}", data.manifest.schema)));
    }
    Ok(kind)
}

/// Learning-rate search and training for one replicate; writes the run directory.
pub fn train_replicate(
    cfg: &RunConfig,
    train_cfg: &TrainConfig,
    variant: Option<Variant>,
    base: &BaseModel<f32>,
    data: &PreparedData,
    replicate: usize,
    dir: &Path,
    force: bool,
) -> Result<RunResult> {
    let result_path = dir.join(RESULT_FILE);
    if result_path.exists() && !force {
        return Err(CliError::Refused(result_path));
    }
    let m = &data.manifest;
    let head = TaskHead::for_schema(&m.schema);
    let kind = metric_for(cfg, data, head)?;
    let (train_rows, val_rows) = data.train_val(replicate)?;
    let test_rows = data.test()?;
    let train = tokenize_all(&train_rows, base);
    let val = tokenize_all(&val_rows, base);
    let test = tokenize_all(&test_rows, base);
    let mut log = String::from("learning_rate\tepoch\ttrain_loss\tdev_metric\tstopped\n");
    let mut grid = Vec::new();
    let outcome = grid_search_with(&cfg.learning_rates, train_cfg, |c| {
        let mut model = build_model(&base.store, &base.config, c, head)?;
        let state = fit(&mut model, &train, &val, c, kind)?;
        for r in &state.history {
            let _ = writeln!(
                log,
                "{}\t{}\t{:.6}\t{:.6}\t{}",
                c.learning_rate, r.epoch, r.train_loss, r.dev_metric, r.stopped
            );
        }
        grid.push(GridRun {
            learning_rate: c.learning_rate,
            dev_metric: state.best_metric,
            best_epoch: state.best_epoch,
            epochs_run: state.epoch,
        });
        log::info!(
            "{} K={} r={} {}lr={} dev {}={:.4} (epoch {}/{})",
            m.task,
            m.k,
            replicate,
            variant.map(|v| format!("{} ", v.name())).unwrap_or_default(),
            c.learning_rate,
            kind,
            state.best_metric,
            state.best_epoch,
            state.epoch
        );
        Ok::<_, prefixsub_core::Error>((state.best_metric, (model, state)))
    })?;
    let (model, state): (PrefixModel<f32>, TrainState<f32>) = outcome.result;
    let test_metric = baked_metric(&model.encoder, &model.store, &state.best, &test, kind)?;
    create_dir(dir)?;
    save_baked(dir.join(BAKED_FILE), &model.config, &model.store, &state.best, &base.vocab)?;
    save_simplex(dir.join(SIMPLEX_FILE), &model, &base.vocab)?;
    write_file(&dir.join(LOG_FILE), log)?;
    let result = RunResult {
        task: m.task.clone(),
        k: m.k,
        replicate,
        variant,
        metric: kind,
        learning_rate: outcome.config.learning_rate,
        dev_metric: state.best_metric,
        test_metric,
        best_epoch: state.best_epoch,
        epochs_run: state.epoch,
        n_prefix: model.prefix.n(),
        n_head: model.head.n(),
        grid,
        config_hash: cfg.hash(),
    };
    write_file(&result_path, serde_json::to_string_pretty(&result)? + "\n")?;
    Ok(result)
}

/// One unit of work for [`run_jobs`].
#[derive(Clone, Debug)]
pub struct Job {
    pub variant: Option<Variant>,
    pub data: usize,
    pub replicate: usize,
    pub dir: PathBuf,
}

/// Runs every job on a pool of `workers` threads. Each job is self-contained, so
/// results do not depend on the worker count.
pub fn run_jobs(
    cfg: &RunConfig,
    base: &BaseModel<f32>,
    data: &[PreparedData],
    jobs: &[Job],
    workers: usize,
    force: bool,
) -> Result<Vec<RunResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|j| {
                let tc = j.variant.map_or_else(|| cfg.train.clone(), |v| v.apply(&cfg.train));
                train_replicate(cfg, &tc, j.variant, base, &data[j.data], j.replicate, &j.dir, force)
            })
            .collect()
    })
}

/// Mean test metric (x100) and bootstrap comparison against a reference, per K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub k: usize,
    pub runs: usize,
    pub mean: f64,
    pub p_value: Option<f64>,
    pub significant: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub cells: Vec<Cell>,
}

fn paired_scores(results: &[RunResult], variant: Variant, k: usize) -> Vec<((String, usize), f64)> {
    let mut v: Vec<_> = results
        .iter()
        .filter(|r| r.variant == Some(variant) && r.k == k)
        .map(|r| ((r.task.clone(), r.replicate), 100.0 * r.test_metric))
        .collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

/// One row per variant, one cell per K, with paired bootstrap p-values against `reference`.
pub fn comparison_table(results: &[RunResult], variants: &[Variant], reference: Variant, seed: u64) -> Result<Vec<VariantRow>> {
    let mut ks: Vec<usize> = results.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    variants
        .iter()
        .map(|&variant| {
            let cells = ks
                .iter()
                .map(|&k| {
                    let scores = paired_scores(results, variant, k);
                    let n = scores.len();
                    let mean = scores.iter().map(|s| s.1).sum::<f64>() / n.max(1) as f64;
                    let (mut p_value, mut significant) = (None, None);
                    if variant != reference {
                        let refs = paired_scores(results, reference, k);
                        let keys: Vec<_> = scores.iter().map(|s| &s.0).collect();
                        if refs.iter().map(|s| &s.0).eq(keys.iter().copied()) && n >= 2 {
                            let a: Vec<f64> = refs.iter().map(|s| s.1).collect();
                            let b: Vec<f64> = scores.iter().map(|s| s.1).collect();
                            let bs = bootstrap_significance(&a, &b, DEFAULT_RESAMPLES, DEFAULT_LEVEL, derive_seed(&[seed, k as u64]))?;
                            p_value = Some(bs.p);
                            significant = Some(bs.significant);
                        }
                    }
                    Ok(Cell {
                        k,
                        runs: n,
                        mean,
                        p_value,
                        significant,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(VariantRow { variant, cells })
        })
        .collect()
}

/// Tab-separated table: `variant`, then one `K=..` column of means and one `p@K=..` column per K.
pub fn render_table(rows: &[VariantRow]) -> String {
    let mut s = String::from("variant");
    if let Some(first) = rows.first() {
        for c in &first.cells {
            let _ = write!(s, "\tK={}", c.k);
        }
        for c in &first.cells {
            let _ = write!(s, "\tp@K={}", c.k);
        }
    }
    s.push('\n');
    for row in rows {
        s.push_str(row.variant.name());
        for c in &row.cells {
            let _ = write!(s, "\t{:.2}", c.mean);
        }
        for c in &row.cells {
            match c.p_value {
                Some(p) => {
                    let _ = write!(s, "\t{p:.4}");
                }
                None => s.push_str("\t-"),
            }
        }
        s.push('\n');
    }
    s
}
