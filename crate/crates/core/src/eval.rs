//! Metrics, development-set estimates, line scans and paired bootstrap tests.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{DataSchema, InputKind, TargetKind};
use crate::model::{decode_predictions, predict, Batch, Encoder, TaskHead, TokenSequence};
use crate::rng::{keyed, tag};
use crate::subspace::{BakedModel, PrefixModel, SamplePlan, SimplexValues};
use crate::tensor::{Graph, ParamStore, Scalar};
use crate::{Error, Result};

pub const EVAL_BATCH: usize = 64;
pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_LEVEL: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    F1,
    Matthews,
    Spearman,
}

impl MetricKind {
    /// F1 for sentence-pair classification, Spearman for regression, accuracy otherwise.
    pub fn for_schema(schema: &DataSchema) -> Self {
        match (schema.input, schema.target) {
            (_, TargetKind::Regression) => MetricKind::Spearman,
            (InputKind::Pair, TargetKind::Classification { classes: 2 }) => MetricKind::F1,
            _ => MetricKind::Accuracy,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::F1 => "f1",
            MetricKind::Matthews => "matthews",
            MetricKind::Spearman => "spearman",
        }
    }

    /// Whether the metric can be computed from the outputs of `head`.
    pub fn compatible(self, head: TaskHead) -> bool {
        match (self, head) {
            (MetricKind::Spearman, _) => true,
            (MetricKind::Accuracy, TaskHead::Classification { .. }) => true,
            (MetricKind::F1 | MetricKind::Matthews, TaskHead::Classification { classes }) => classes == 2,
            _ => false,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(MetricKind::Accuracy),
            "f1" | "f1_binary" => Ok(MetricKind::F1),
            "matthews" => Ok(MetricKind::Matthews),
            "spearman" => Ok(MetricKind::Spearman),
            _ => Err(Error::Input(format!("unknown metric {s:?}"))),
        }
    }
}

fn counts(preds: &[f64], labels: &[f64]) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == 1.0, l == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

/// Doubled, centered average ranks: `2 * rank - (n + 1)`.
fn centered_ranks(x: &[f64]) -> Vec<i128> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0i128; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let u = (start + end) as i128 - n as i128;
        for &i in &order[start..end] {
            out[i] = u;
        }
        start = end;
    }
    out
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    a = a.abs();
    b = b.abs();
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn ratio(num: i128, den: i128) -> f64 {
    let g = gcd(num, den).max(1);
    (num / g) as f64 / (den / g) as f64
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rx = centered_ranks(x);
    let ry = centered_ranks(y);
    let (mut sxy, mut sxx, mut syy) = (0i128, 0i128, 0i128);
    for (&a, &b) in rx.iter().zip(&ry) {
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0 || syy == 0 {
        return 0.0;
    }
    // sxy / sqrt(sxx * syy) from reduced fractions, so replicating the data changes nothing
    (ratio(sxy, sxx) * ratio(sxx, syy).sqrt()).clamp(-1.0, 1.0)
}

/// Metric of `predictions` against `labels`. Binary metrics treat class 1 as positive.
pub fn metric(kind: MetricKind, predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("metric of an empty set".into()));
    }
    let n = predictions.len();
    Ok(match kind {
        MetricKind::Accuracy => {
            let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
            correct as f64 / n as f64
        }
        MetricKind::F1 => {
            let (tp, fp, fn_, _) = counts(predictions, labels);
            let den = 2 * tp + fp + fn_;
            if den == 0 {
                0.0
            } else {
                (2 * tp) as f64 / den as f64
            }
        }
        MetricKind::Matthews => {
            let (tp, fp, fn_, tn) = counts(predictions, labels);
            let nf = n as f64;
            let [tp, fp, fn_, tn] = [tp, fp, fn_, tn].map(|c| c as f64 / nf);
            let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
            if den == 0.0 {
                0.0
            } else {
                ((tp * tn - fp * fn_) / den.sqrt()).clamp(-1.0, 1.0)
            }
        }
        MetricKind::Spearman => spearman(predictions, labels),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DevMode {
    #[default]
    Stochastic,
    Deterministic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DevAggregation {
    /// One metric over all replicated predictions.
    #[default]
    Pooled,
    /// Mean of the metrics of the individual copies.
    PerCopyMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: DevMode,
    pub n_concat: usize,
    pub seed: u64,
    pub aggregation: DevAggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: DevMode::Stochastic,
            n_concat: 10,
            seed: 0,
            aggregation: DevAggregation::Pooled,
        }
    }
}

fn labels_of(seqs: &[TokenSequence]) -> Result<Vec<f64>> {
    seqs.iter()
        .map(|s| {
            s.label
                .map(|l| l.as_f64())
                .ok_or_else(|| Error::Input("evaluation sequence without a label".into()))
        })
        .collect()
}

fn check_split(seqs: &[TokenSequence]) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    Ok(())
}

/// Deterministic predictions of a baked model.
pub fn predict_baked<T: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    baked: &BakedModel<T>,
    seqs: &[TokenSequence],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_BATCH) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let batch = Batch::new(&refs)?;
        let mut g = Graph::new();
        let prefixes = baked.prefix_vars(&mut g)?;
        let pooled = encoder.encode(&mut g, store, &batch, Some(&prefixes))?;
        let head = baked.head_vars(&mut g)?;
        let y = predict(&mut g, pooled, head)?;
        out.extend(decode_predictions(g.value(y), encoder.config.task_head));
    }
    Ok(out)
}

pub fn baked_metric<T: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    baked: &BakedModel<T>,
    seqs: &[TokenSequence],
    kind: MetricKind,
) -> Result<f64> {
    check_split(seqs)?;
    let preds = predict_baked(encoder, store, baked, seqs)?;
    metric(kind, &preds, &labels_of(seqs)?)
}

/// Metric of the simplex centroid.
pub fn centroid_metric<T: Scalar>(model: &PrefixModel<T>, seqs: &[TokenSequence], kind: MetricKind) -> Result<f64> {
    check_split(seqs)?;
    let baked = model.centroid()?;
    baked_metric(&model.encoder, &model.store, &baked, seqs, kind)
}

/// Predictions for the development set replicated `n_concat` times, each
/// replicated observation evaluated with its own sampled simplex member.
/// Returned copy-major.
pub fn stochastic_predictions<T: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    values: &SimplexValues<T>,
    seqs: &[TokenSequence],
    n_concat: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_split(seqs)?;
    if n_concat == 0 {
        return Err(Error::Input("n_concat must be at least 1".into()));
    }
    let total = n_concat * seqs.len();
    let layers = values.num_layers();
    let mut out = Vec::with_capacity(total);
    let ids: Vec<u64> = (0..total as u64).collect();
    for chunk in ids.chunks(EVAL_BATCH) {
        let refs: Vec<&TokenSequence> = chunk.iter().map(|&i| &seqs[i as usize % seqs.len()]).collect();
        let batch = Batch::new(&refs)?;
        let plan = SamplePlan::draw(&[seed, tag::DEV_PLAN], chunk, layers, values.n_prefix(), values.n_head());
        let sampled = values.sampled(&plan)?;
        let mut g = Graph::new();
        let prefixes = sampled.prefix_vars(&mut g)?;
        let pooled = encoder.encode(&mut g, store, &batch, Some(&prefixes))?;
        let head = sampled.head_vars(&mut g)?;
        let y = predict(&mut g, pooled, head)?;
        out.extend(decode_predictions(g.value(y), encoder.config.task_head));
    }
    Ok(out)
}

/// Development metric under sampling conditions identical to training.
pub fn stochastic_dev_metric<T: Scalar>(
    model: &PrefixModel<T>,
    seqs: &[TokenSequence],
    config: &EvalConfig,
    kind: MetricKind,
) -> Result<f64> {
    if config.mode != DevMode::Stochastic {
        return Err(Error::Contract("stochastic_dev_metric needs stochastic mode".into()));
    }
    let values = model.values()?;
    let preds = stochastic_predictions(&model.encoder, &model.store, &values, seqs, config.n_concat, config.seed)?;
    let labels = labels_of(seqs)?;
    match config.aggregation {
        DevAggregation::Pooled => {
            let repeated: Vec<f64> = labels.iter().copied().cycle().take(preds.len()).collect();
            metric(kind, &preds, &repeated)
        }
        DevAggregation::PerCopyMean => {
            let mut sum = 0.0;
            for copy in preds.chunks(labels.len()) {
                sum += metric(kind, copy, &labels)?;
            }
            Ok(sum / config.n_concat as f64)
        }
    }
}

/// Stochastic or centroid development metric according to `config.mode`.
pub fn dev_metric<T: Scalar>(
    model: &PrefixModel<T>,
    seqs: &[TokenSequence],
    config: &EvalConfig,
    kind: MetricKind,
) -> Result<f64> {
    match config.mode {
        DevMode::Stochastic => stochastic_dev_metric(model, seqs, config, kind),
        DevMode::Deterministic => centroid_metric(model, seqs, kind),
    }
}

/// Centroid metrics at `num_points` evenly spaced `alpha` in `[0, 1]` on a two-vertex line.
pub fn line_scan<T: Scalar>(
    model: &PrefixModel<T>,
    seqs: &[TokenSequence],
    num_points: usize,
    kind: MetricKind,
) -> Result<Vec<(f64, f64)>> {
    check_split(seqs)?;
    if model.prefix.n() != 2 {
        return Err(Error::Contract(format!(
            "line scan needs a 2-vertex simplex, got {}",
            model.prefix.n()
        )));
    }
    if num_points < 2 {
        return Err(Error::Input("a line scan needs at least 2 points".into()));
    }
    let values = model.values()?;
    (0..num_points)
        .map(|i| {
            let alpha = i as f64 / (num_points - 1) as f64;
            let baked = values.line_point(alpha)?;
            Ok((alpha, baked_metric(&model.encoder, &model.store, &baked, seqs, kind)?))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub significant: bool,
    pub p: f64,
    /// Mean of `b - a`.
    pub mean_diff: f64,
}

/// Paired bootstrap over replicate-level differences `b - a`, two-sided.
///
/// `p = min(1, 2 * (min(#{mean* <= 0}, #{mean* >= 0}) + 1) / (resamples + 1))`.
pub fn bootstrap_significance(
    scores_a: &[f64],
    scores_b: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::Input(format!(
            "paired scores of different lengths {} and {}",
            scores_a.len(),
            scores_b.len()
        )));
    }
    let n = scores_a.len();
    if n < 2 {
        return Err(Error::Input("bootstrap needs at least 2 paired scores".into()));
    }
    if resamples == 0 {
        return Err(Error::Input("bootstrap needs at least one resample".into()));
    }
    let diffs: Vec<f64> = scores_a.iter().zip(scores_b).map(|(a, b)| b - a).collect();
    let mean_diff = diffs.iter().sum::<f64>() / n as f64;
    let mut rng = keyed(&[seed, tag::BOOTSTRAP]);
    let (mut le, mut ge) = (0usize, 0usize);
    for _ in 0..resamples {
        let mut s = 0.0;
        for _ in 0..n {
            s += diffs[rng.random_range(0..n)];
        }
        if s <= 0.0 {
            le += 1;
        }
        if s >= 0.0 {
            ge += 1;
        }
    }
    let p = (2.0 * (le.min(ge) + 1) as f64 / (resamples + 1) as f64).min(1.0);
    Ok(BootstrapResult {
        significant: p < level,
        p,
        mean_diff,
    })
}
