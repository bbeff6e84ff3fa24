//! Training loop with per-observation simplex sampling, early stopping and learning-rate search.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::eval::{dev_metric, DevAggregation, DevMode, EvalConfig, MetricKind};
use crate::model::{base_is_frozen, predict, task_loss, Batch, ModelConfig, TaskHead, TokenSequence};
use crate::rng::{keyed, tag};
use crate::subspace::{materialize_prefixes, sample_head, BakedModel, PrefixModel, SamplePlan};
use crate::tensor::{AdamW, AdamWConfig, Graph, LrSchedule, ParamStore, Scalar};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceScope {
    #[default]
    PrefixAndHead,
    /// Prefix simplex with a single, normally trained head.
    PrefixOnly,
    /// Plain prefix tuning combined with a head simplex.
    HeadOnly,
}

impl SubspaceScope {
    /// `(prefix vertices, head vertices)`.
    pub fn vertex_counts(self, n: usize) -> (usize, usize) {
        match self {
            SubspaceScope::PrefixAndHead => (n, n),
            SubspaceScope::PrefixOnly => (n, 1),
            SubspaceScope::HeadOnly => (1, n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_vertices: usize,
    pub prefix_len: usize,
    pub dev_mode: DevMode,
    pub n_concat: usize,
    pub dev_aggregation: DevAggregation,
    pub subspace_scope: SubspaceScope,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            patience: 10,
            batch_size: 16,
            learning_rate: 5e-4,
            n_vertices: 6,
            prefix_len: 8,
            dev_mode: DevMode::Stochastic,
            n_concat: 10,
            dev_aggregation: DevAggregation::Pooled,
            subspace_scope: SubspaceScope::PrefixAndHead,
            weight_decay: 0.01,
            schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Input(format!("train config: {m}")));
        if self.epochs == 0 || self.patience == 0 || self.patience > self.epochs {
            return bad("need 1 <= patience <= epochs");
        }
        if self.batch_size == 0 || self.n_vertices == 0 || self.n_concat == 0 || self.prefix_len == 0 {
            return bad("batch_size, n_vertices, n_concat and prefix_len must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            schedule: self.schedule,
            ..AdamWConfig::default()
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            mode: self.dev_mode,
            n_concat: self.n_concat,
            seed: self.seed,
            aggregation: self.dev_aggregation,
        }
    }

    /// Vertex counts implied by scope and `n_vertices`.
    pub fn vertex_counts(&self) -> (usize, usize) {
        self.subspace_scope.vertex_counts(self.n_vertices)
    }

    /// The task model configuration derived from the pretrained base's configuration.
    pub fn model_config(&self, base: &ModelConfig, head: TaskHead) -> ModelConfig {
        ModelConfig {
            prefix_len: self.prefix_len,
            task_head: head,
            ..base.clone()
        }
    }
}

/// Fresh simplexes on top of a frozen copy of `base`, seeded by `config.seed`.
pub fn build_model<T: Scalar>(
    base: &ParamStore<T>,
    base_config: &ModelConfig,
    config: &TrainConfig,
    head: TaskHead,
) -> Result<PrefixModel<T>> {
    let (np, nh) = config.vertex_counts();
    PrefixModel::new(base, &config.model_config(base_config, head), np, nh, config.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
    pub improved: bool,
    pub stopped: bool,
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    /// Epochs actually run.
    pub epoch: usize,
    pub best_metric: f64,
    pub best_epoch: usize,
    /// Baked centroid of the best epoch.
    pub best: BakedModel<T>,
    pub epochs_since_improvement: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl<T> TrainState<T> {
    /// Tab-separated log with a header line.
    pub fn log(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tdev_metric\tstopped\n");
        for r in &self.history {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{}", r.epoch, r.train_loss, r.dev_metric, r.stopped);
        }
        s
    }
}

/// Shuffled training order of `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed(&[seed, tag::SHUFFLE, epoch as u64]));
    order
}

/// Plan for one training step; observations are keyed by their training-set index.
pub fn step_plan(seed: u64, epoch: usize, step: usize, rows: &[usize], model_layers: usize, counts: (usize, usize)) -> SamplePlan {
    let obs: Vec<u64> = rows.iter().map(|&r| r as u64).collect();
    SamplePlan::draw(
        &[seed, tag::TRAIN_PLAN, epoch as u64, step as u64],
        &obs,
        model_layers,
        counts.0,
        counts.1,
    )
}

fn labels(seqs: &[&TokenSequence]) -> Result<Vec<Label>> {
    seqs.iter()
        .map(|s| s.label.ok_or_else(|| Error::Input("training sequence without a label".into())))
        .collect()
}

/// One optimizer step on `seqs` with mixing weights from `plan`. Returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut PrefixModel<T>,
    opt: &mut AdamW<T>,
    seqs: &[&TokenSequence],
    plan: &SamplePlan,
) -> Result<f64> {
    if !base_is_frozen(&model.store) {
        return Err(Error::Contract("train_step with an unfrozen base".into()));
    }
    if seqs.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    if plan.batch != seqs.len() {
        return Err(Error::Input(format!("plan for {} observations, batch of {}", plan.batch, seqs.len())));
    }
    let batch = Batch::new(seqs)?;
    let y = labels(seqs)?;
    let mut g = Graph::new();
    let prefixes = materialize_prefixes(&mut g, &model.store, &model.prefix, plan)?;
    let head = sample_head(&mut g, &model.store, &model.head, plan)?;
    let pooled = model.encoder.encode(&mut g, &model.store, &batch, Some(&prefixes))?;
    let out = predict(&mut g, pooled, head)?;
    let loss = task_loss(&mut g, out, &y, model.config.task_head)?;
    g.backward(loss)?;
    g.flush_grads(&mut model.store);
    opt.step(&mut model.store)?;
    Ok(g.scalar(loss).to_f64_lossy())
}

/// One pass over `train` in the shuffled order of `epoch`. Returns the mean batch loss.
pub fn train_epoch<T: Scalar>(
    model: &mut PrefixModel<T>,
    opt: &mut AdamW<T>,
    train: &[TokenSequence],
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let counts = (model.prefix.n(), model.head.n());
    let layers = model.config.num_layers;
    let order = epoch_order(config.seed, epoch, train.len());
    let mut total = 0.0;
    let mut steps = 0;
    for (step, rows) in order.chunks(config.batch_size).enumerate() {
        let seqs: Vec<&TokenSequence> = rows.iter().map(|&r| &train[r]).collect();
        let plan = step_plan(config.seed, epoch, step, rows, layers, counts);
        total += train_step(model, opt, &seqs, &plan)?;
        steps += 1;
    }
    Ok(total / steps as f64)
}

/// Trains until `config.epochs` or early stopping, with a caller-supplied
/// development metric evaluated after every epoch (higher is better). The
/// simplex parameters of the best epoch are restored before returning.
pub fn fit_with<T: Scalar>(
    model: &mut PrefixModel<T>,
    train: &[TokenSequence],
    config: &TrainConfig,
    mut dev: impl FnMut(&PrefixModel<T>, usize) -> Result<f64>,
) -> Result<TrainState<T>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let mut opt = AdamW::new(config.optimizer());
    let mut best: Option<(f64, usize, BakedModel<T>, Vec<Vec<T>>)> = None;
    let mut since = 0;
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..config.epochs {
        let train_loss = train_epoch(model, &mut opt, train, config, epoch)?;
        let m = dev(model, epoch)?;
        let improved = best.as_ref().is_none_or(|b| m > b.0);
        if improved {
            best = Some((m, epoch + 1, model.centroid()?, model.simplex_snapshot()));
            since = 0;
        } else {
            since += 1;
        }
        let stopped = since >= config.patience;
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            dev_metric: m,
            improved,
            stopped,
        });
        if stopped {
            stopped_early = epoch + 1 < config.epochs;
            break;
        }
    }
    let (best_metric, best_epoch, baked, snapshot) = best.expect("at least one epoch ran");
    model.restore_simplex(&snapshot);
    Ok(TrainState {
        epoch: history.len(),
        best_metric,
        best_epoch,
        best: baked,
        epochs_since_improvement: since,
        history,
        stopped_early,
    })
}

/// [`fit_with`] using the development metric configured in `config`.
pub fn fit<T: Scalar>(
    model: &mut PrefixModel<T>,
    train: &[TokenSequence],
    val: &[TokenSequence],
    config: &TrainConfig,
    kind: MetricKind,
) -> Result<TrainState<T>> {
    if val.is_empty() {
        return Err(Error::Input("validation split is empty".into()));
    }
    let eval = config.eval_config();
    fit_with(model, train, config, |m, _| dev_metric(m, val, &eval, kind))
}

#[derive(Clone, Debug)]
pub struct GridOutcome<R> {
    pub best_index: usize,
    pub config: TrainConfig,
    pub result: R,
    /// `(learning rate, best dev metric)` of every run, in candidate order.
    pub runs: Vec<(f64, f64)>,
}

/// Runs `run` once per candidate learning rate and keeps the best dev metric;
/// ties go to the lower learning rate.
pub fn grid_search_with<R>(
    candidates: &[f64],
    template: &TrainConfig,
    mut run: impl FnMut(&TrainConfig) -> Result<(f64, R)>,
) -> Result<GridOutcome<R>> {
    if candidates.is_empty() {
        return Err(Error::Input("no candidate learning rates".into()));
    }
    let mut best: Option<(usize, f64, TrainConfig, R)> = None;
    let mut runs = Vec::with_capacity(candidates.len());
    for (i, &lr) in candidates.iter().enumerate() {
        let cfg = TrainConfig {
            learning_rate: lr,
            ..template.clone()
        };
        let (metric, result) = run(&cfg)?;
        runs.push((lr, metric));
        let better = match &best {
            None => true,
            Some((_, bm, bc, _)) => metric > *bm || (metric == *bm && lr < bc.learning_rate),
        };
        if better {
            best = Some((i, metric, cfg, result));
        }
    }
    let (best_index, _, config, result) = best.expect("nonempty candidates");
    Ok(GridOutcome {
        best_index,
        config,
        result,
        runs,
    })
}

/// Learning-rate search where every candidate trains a fresh model from `base`.
pub fn grid_search<T: Scalar>(
    base: &ParamStore<T>,
    base_config: &ModelConfig,
    head: TaskHead,
    train: &[TokenSequence],
    val: &[TokenSequence],
    candidates: &[f64],
    template: &TrainConfig,
    kind: MetricKind,
) -> Result<GridOutcome<(PrefixModel<T>, TrainState<T>)>> {
    grid_search_with(candidates, template, |cfg| {
        let mut model = build_model(base, base_config, cfg, head)?;
        let state = fit(&mut model, train, val, cfg, kind)?;
        Ok((state.best_metric, (model, state)))
    })
}
