use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use prefixsub_core::data::{
    build_fewshot_splits, generate_synthetic_task, load_corpus, write_jsonl, write_tsv, DataSchema, SplitManifest,
    SyntheticKind,
};
use prefixsub_core::eval::{
    baked_metric, centroid_metric, line_scan, stochastic_dev_metric, DevAggregation, DevMode, EvalConfig, MetricKind,
};
use prefixsub_core::io::{load_base, load_model, save_base, LoadedModel};
use prefixsub_core::model::{encode_example, tokenize, BaseModel, TaskHead, TokenSequence, Vocab};
use prefixsub_core::subspace::SimplexWeights;
use prefixsub_core::Error;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::run::*;

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CliError::Refused(path.to_path_buf()));
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub struct PrepareArgs {
    pub input: PathBuf,
    pub schema: DataSchema,
    pub k: usize,
    pub replicates: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub task: Option<String>,
    pub force: bool,
}

pub fn prepare(a: &PrepareArgs) -> Result<SplitManifest> {
    refuse_existing(&a.out.join(MANIFEST_FILE), a.force)?;
    let corpus = load_corpus(&a.input, &a.schema)?;
    let task = match &a.task {
        Some(t) => t.clone(),
        None => a
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "task".into()),
    };
    let splits = build_fewshot_splits(&task, &corpus, a.k, a.replicates, a.seed)?;
    create_dir(&a.out)?;
    write_jsonl(a.out.join(TEST_FILE), &splits[0].test)?;
    for s in &splits {
        let d = a.out.join(s.replicate.to_string());
        create_dir(&d)?;
        write_jsonl(d.join(TRAIN_FILE), &s.train)?;
        write_jsonl(d.join(VAL_FILE), &s.val)?;
    }
    let manifest = SplitManifest::from_splits(a.schema, corpus.len(), &splits)?;
    manifest.save(a.out.join(MANIFEST_FILE))?;
    log::info!(
        "{task}: {} replicates of K={} ({} train / {} val), {} test rows -> {}",
        splits.len(),
        a.k,
        splits[0].train.len(),
        splits[0].val.len(),
        splits[0].test.len(),
        a.out.display()
    );
    Ok(manifest)
}

/// Masked-token pretraining of a fresh base on the texts of every input corpus.
pub fn pretrain(cfg: &RunConfig, inputs: &[(PathBuf, DataSchema)], out: &Path, force: bool) -> Result<Vec<f64>> {
    refuse_existing(out, force)?;
    if inputs.is_empty() {
        return Err(CliError::Input("pretraining needs at least one --input".into()));
    }
    let mut rows = Vec::new();
    for (path, schema) in inputs {
        rows.extend(load_corpus(path, schema)?);
    }
    let vocab = Vocab::from_examples(&rows);
    let seqs: Vec<TokenSequence> = rows
        .iter()
        .map(|r| tokenize(&r.text_a, r.text_b.as_deref(), &vocab, cfg.model.max_seq_len))
        .collect();
    let mut base = BaseModel::<f32>::new(cfg.model.clone(), vocab, cfg.seed)?;
    base.config.validate()?;
    log::info!(
        "pretraining on {} sequences, vocabulary {}, {} steps",
        seqs.len(),
        base.vocab.len(),
        cfg.pretrain.steps
    );
    let losses = base.pretrain_toy(&seqs, &cfg.pretrain, cfg.seed)?;
    let chunk = (losses.len() / 10).max(1);
    for (i, c) in losses.chunks(chunk).enumerate() {
        log::info!("steps {}..{}: loss {:.4}", i * chunk, i * chunk + c.len(), c.iter().sum::<f64>() / c.len() as f64);
    }
    ensure_parent(out)?;
    save_base(out, &base)?;
    Ok(losses)
}

fn load_base_for(cfg: &RunConfig) -> Result<BaseModel<f32>> {
    let path = cfg.base_checkpoint()?;
    if !path.is_file() {
        return Err(CliError::Input(format!("{}: base checkpoint not found", path.display())));
    }
    Ok(load_base(path)?)
}

pub fn train(cfg: &RunConfig, data_dir: &Path, replicate: usize, out: &Path, force: bool) -> Result<RunResult> {
    let data = PreparedData::open(data_dir)?;
    let base = load_base_for(cfg)?;
    let m = &data.manifest;
    let dir = replicate_dir(out, &m.task, m.k, replicate);
    train_replicate(cfg, &cfg.train, None, &base, &data, replicate, &dir, force)
}

/// Trains every replicate of every prepared directory under `data_root`.
pub fn sweep(cfg: &RunConfig, data_root: &Path, out: &Path, workers: usize, force: bool) -> Result<Vec<RunResult>> {
    let summary = out.join("summary.tsv");
    refuse_existing(&summary, force)?;
    let data = find_prepared(data_root)?;
    let base = load_base_for(cfg)?;
    let mut jobs = Vec::new();
    for (i, d) in data.iter().enumerate() {
        for r in 0..d.replicates() {
            jobs.push(Job {
                variant: None,
                data: i,
                replicate: r,
                dir: replicate_dir(out, &d.manifest.task, d.manifest.k, r),
            });
        }
    }
    let results = run_jobs(cfg, &base, &data, &jobs, workers, force)?;
    let mut s = String::from("task\tk\truns\tmetric\tmean_dev\tmean_test\n");
    for d in &data {
        let rs: Vec<&RunResult> = results
            .iter()
            .filter(|r| r.task == d.manifest.task && r.k == d.manifest.k)
            .collect();
        let n = rs.len() as f64;
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
            d.manifest.task,
            d.manifest.k,
            rs.len(),
            rs[0].metric,
            rs.iter().map(|r| r.dev_metric).sum::<f64>() / n,
            rs.iter().map(|r| r.test_metric).sum::<f64>() / n
        );
    }
    create_dir(out)?;
    write_file(&summary, s)?;
    Ok(results)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub reference: Variant,
    pub rows: Vec<VariantRow>,
    pub runs: Vec<RunResult>,
}

pub const ABLATION_TABLE: &str = "ablation.tsv";
pub const ABLATION_JSON: &str = "ablation.json";

/// Runs each variant (plus the full method as reference) on every replicate found under `data_root`.
pub fn ablate(
    cfg: &RunConfig,
    suite: &[Variant],
    data_root: &Path,
    out: &Path,
    workers: usize,
    force: bool,
) -> Result<AblationReport> {
    let table = out.join(ABLATION_TABLE);
    refuse_existing(&table, force)?;
    let data = find_prepared(data_root)?;
    let base = load_base_for(cfg)?;
    let mut variants = suite.to_vec();
    if !variants.contains(&Variant::Full) {
        variants.insert(0, Variant::Full);
    }
    variants.sort();
    let mut jobs = Vec::new();
    for &v in &variants {
        for (i, d) in data.iter().enumerate() {
            for r in 0..d.replicates() {
                jobs.push(Job {
                    variant: Some(v),
                    data: i,
                    replicate: r,
                    dir: replicate_dir(&out.join(v.name()), &d.manifest.task, d.manifest.k, r),
                });
            }
        }
    }
    let runs = run_jobs(cfg, &base, &data, &jobs, workers, force)?;
    let rows = comparison_table(&runs, &variants, Variant::Full, cfg.train.seed)?;
    create_dir(out)?;
    let report = AblationReport {
        reference: Variant::Full,
        rows,
        runs,
    };
    write_file(&out.join(ABLATION_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
    write_file(&table, render_table(&report.rows))?;
    Ok(report)
}

/// Schema from `--schema` or from a `manifest.json` next to the split or one level up.
fn resolve_schema(split: &Path, explicit: Option<DataSchema>) -> Result<DataSchema> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    let mut dir = split.parent();
    for _ in 0..2 {
        let Some(d) = dir else { break };
        let m = d.join(MANIFEST_FILE);
        if m.is_file() {
            return Ok(SplitManifest::load(&m)?.schema);
        }
        dir = d.parent();
    }
    Err(CliError::Input(format!(
        "{}: cannot infer the schema (no {MANIFEST_FILE} nearby); pass --schema",
        split.display()
    )))
}

fn load_split(split: &Path, schema: Option<DataSchema>, head: TaskHead, vocab: &Vocab, max_len: usize) -> Result<(DataSchema, Vec<TokenSequence>)> {
    let schema = resolve_schema(split, schema)?;
    if TaskHead::for_schema(&schema) != head {
        return Err(CliError::Input(format!(
            "{}: schema {schema} does not match the model's {head:?} head",
            split.display()
        )));
    }
    let rows = load_corpus(split, &schema)?;
    Ok((schema, rows.iter().map(|r| encode_example(r, vocab, max_len)).collect()))
}

pub struct EvalArgs {
    pub model: PathBuf,
    pub split: PathBuf,
    pub metric: Option<MetricKind>,
    pub stochastic: bool,
    pub n_concat: usize,
    pub seed: u64,
    pub schema: Option<DataSchema>,
    pub vertex: Option<usize>,
}

pub fn eval(a: &EvalArgs) -> Result<f64> {
    let (model, vocab) = load_model(&a.model)?;
    let cfg = model.config().clone();
    let (schema, seqs) = load_split(&a.split, a.schema, cfg.task_head, &vocab, cfg.max_seq_len)?;
    let kind = a.metric.unwrap_or_else(|| MetricKind::for_schema(&schema));
    if !kind.compatible(cfg.task_head) {
        return Err(CliError::Input(format!("metric {kind} does not apply to schema {schema}")));
    }
    let value = match (&model, a.stochastic, a.vertex) {
        (LoadedModel::Baked(_), true, _) => {
            return Err(Error::Contract("--stochastic needs a simplex checkpoint, got a baked model".into()).into())
        }
        (LoadedModel::Baked(_), _, Some(_)) => {
            return Err(Error::Contract("--vertex needs a simplex checkpoint, got a baked model".into()).into())
        }
        (LoadedModel::Simplex(_), true, Some(_)) => {
            return Err(CliError::Input("--stochastic and --vertex are exclusive".into()))
        }
        (LoadedModel::Baked(b), false, None) => baked_metric(&b.encoder, &b.store, &b.baked, &seqs, kind)?,
        (LoadedModel::Simplex(m), true, None) => {
            let ec = EvalConfig {
                mode: DevMode::Stochastic,
                n_concat: a.n_concat,
                seed: a.seed,
                aggregation: DevAggregation::Pooled,
            };
            stochastic_dev_metric(m, &seqs, &ec, kind)?
        }
        (LoadedModel::Simplex(m), false, None) => centroid_metric(m, &seqs, kind)?,
        (LoadedModel::Simplex(m), false, Some(i)) => {
            let (np, nh) = (m.prefix.n(), m.head.n());
            if i >= np.max(nh) {
                return Err(CliError::Input(format!("vertex {i} out of range for {np} prefix / {nh} head vertices")));
            }
            let pick = |n: usize| if n == 1 { SimplexWeights::one_hot(1, 0) } else { SimplexWeights::one_hot(n, i) };
            let baked = m.values()?.bake(&pick(np), &pick(nh))?;
            baked_metric(&m.encoder, &m.store, &baked, &seqs, kind)?
        }
    };
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanSummary {
    pub metric: MetricKind,
    pub points: usize,
    pub best_alpha: f64,
    pub best_metric: f64,
    pub vertex0_metric: f64,
    pub vertex1_metric: f64,
    pub midpoint_metric: Option<f64>,
}

pub struct ScanArgs {
    pub model_line: PathBuf,
    pub split: PathBuf,
    pub points: usize,
    pub out: PathBuf,
    pub metric: Option<MetricKind>,
    pub schema: Option<DataSchema>,
    pub force: bool,
}

/// Writes `alpha<TAB>metric` rows to `out` and a JSON summary next to it.
pub fn scan(a: &ScanArgs) -> Result<(Vec<(f64, f64)>, ScanSummary)> {
    refuse_existing(&a.out, a.force)?;
    let (model, vocab) = load_model(&a.model_line)?;
    let LoadedModel::Simplex(m) = model else {
        return Err(Error::Contract("scan needs a 2-vertex simplex checkpoint, got a baked model".into()).into());
    };
    let (schema, seqs) = load_split(&a.split, a.schema, m.config.task_head, &vocab, m.config.max_seq_len)?;
    let kind = a.metric.unwrap_or_else(|| MetricKind::for_schema(&schema));
    let points = line_scan(&m, &seqs, a.points, kind)?;
    let mut tsv = String::from("alpha\tmetric\n");
    for (alpha, v) in &points {
        let _ = writeln!(tsv, "{alpha}\t{v}");
    }
    let best = points
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |b, p| if p.1 > b.1 { p } else { b });
    let summary = ScanSummary {
        metric: kind,
        points: points.len(),
        best_alpha: best.0,
        best_metric: best.1,
        vertex0_metric: points.last().expect("at least two points").1,
        vertex1_metric: points[0].1,
        midpoint_metric: points.iter().find(|p| p.0 == 0.5).map(|p| p.1),
    };
    ensure_parent(&a.out)?;
    write_file(&a.out, tsv)?;
    write_file(&summary_path(&a.out), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok((points, summary))
}

pub fn summary_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    out.with_file_name(name)
}

pub struct GenerateArgs {
    pub kind: SyntheticKind,
    pub size: usize,
    pub vocab: usize,
    pub noise: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub force: bool,
}

/// Writes a synthetic corpus as JSON lines (`.jsonl`/`.json`) or TSV (anything else).
pub fn generate(a: &GenerateArgs) -> Result<()> {
    refuse_existing(&a.out, a.force)?;
    let rows = generate_synthetic_task(a.kind, a.size, a.vocab, a.noise, a.seed)?;
    ensure_parent(&a.out)?;
    match a.out.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "json" | "ndjson") => write_jsonl(&a.out, &rows)?,
        _ => write_tsv(&a.out, &rows)?,
    }
    log::info!("{} rows of {} -> {}", rows.len(), a.kind.name(), a.out.display());
    Ok(())
}
