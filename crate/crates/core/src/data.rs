//! Corpus ingestion, few-shot split construction and synthetic tasks.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{keyed, tag};
use crate::{Error, Result};

/// Number of rows held out for the shared test set is capped at this value.
pub const TEST_CAP: usize = 5000;
pub const TRAIN_FRACTION: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Score(f64),
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Class(c) => c as f64,
            Label::Score(s) => s,
        }
    }

    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Score(_) => None,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Label::Class(c) => s.serialize_u64(c as u64),
            Label::Score(v) => s.serialize_f64(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RawExample {
    pub text_a: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    pub label: Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Single,
    Pair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Classification { classes: usize },
    Regression,
}

/// Column layout and label type of a corpus, written `single:class:2`, `pair:reg`, ...
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataSchema {
    pub input: InputKind,
    pub target: TargetKind,
}

impl fmt::Display for DataSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let input = match self.input {
            InputKind::Single => "single",
            InputKind::Pair => "pair",
        };
        match self.target {
            TargetKind::Classification { classes } => write!(f, "{input}:class:{classes}"),
            TargetKind::Regression => write!(f, "{input}:reg"),
        }
    }
}

impl FromStr for DataSchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("schema {s:?}: expected single|pair followed by :class:K or :reg"));
        let parts: Vec<&str> = s.split(':').collect();
        let input = match parts.first().copied() {
            Some("single") => InputKind::Single,
            Some("pair") => InputKind::Pair,
            _ => return Err(bad()),
        };
        let target = match &parts[1..] {
            ["reg"] => TargetKind::Regression,
            ["class", k] => {
                let classes: usize = k.parse().map_err(|_| bad())?;
                if classes < 2 {
                    return Err(Error::Input(format!("schema {s:?}: need at least 2 classes")));
                }
                TargetKind::Classification { classes }
            }
            _ => return Err(bad()),
        };
        Ok(DataSchema { input, target })
    }
}

impl Serialize for DataSchema {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DataSchema {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn parse_label(raw: &str, schema: &DataSchema) -> std::result::Result<Label, String> {
    let raw = raw.trim();
    match schema.target {
        TargetKind::Classification { classes } => {
            let c: usize = raw
                .parse()
                .map_err(|_| format!("label {raw:?} is not a class index"))?;
            if c >= classes {
                return Err(format!("label {c} out of range for {classes} classes"));
            }
            Ok(Label::Class(c))
        }
        TargetKind::Regression => {
            let v: f64 = raw
                .parse()
                .map_err(|_| format!("label {raw:?} is not a number"))?;
            if !v.is_finite() {
                return Err(format!("label {raw:?} is not finite"));
            }
            Ok(Label::Score(v))
        }
    }
}

fn is_json_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl" | "ndjson" | "json")
    )
}

/// Reads a TSV file (header line, then `text_a [TAB text_b] TAB label`) or a
/// newline-delimited JSON file with `text_a`, `text_b`, `label` fields.
///
/// Rows are numbered from 1, counting the TSV header.
pub fn load_corpus(path: impl AsRef<Path>, schema: &DataSchema) -> Result<Vec<RawExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let display = path.display().to_string();
    let perr = |row: usize, msg: String| Error::Parse {
        path: display.clone(),
        row,
        msg,
    };
    let mut out = Vec::new();
    if is_json_path(path) {
        for (i, line) in text.lines().enumerate() {
            let row = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value =
                serde_json::from_str(line).map_err(|e| perr(row, e.to_string()))?;
            let text_a = v
                .get("text_a")
                .and_then(|x| x.as_str())
                .ok_or_else(|| perr(row, "missing text_a".into()))?
                .to_string();
            let text_b = v.get("text_b").and_then(|x| x.as_str()).map(str::to_string);
            check_pair(schema, &text_b).map_err(|m| perr(row, m))?;
            let label_raw = match v.get("label") {
                Some(serde_json::Value::Number(n)) => n.to_string(),
                Some(serde_json::Value::String(s)) => s.clone(),
                _ => return Err(perr(row, "missing label".into())),
            };
            let label = parse_label(&label_raw, schema).map_err(|m| perr(row, m))?;
            out.push(RawExample {
                text_a,
                text_b: if schema.input == InputKind::Pair { text_b } else { None },
                label,
            });
        }
    } else {
        let want = match schema.input {
            InputKind::Single => 2,
            InputKind::Pair => 3,
        };
        for (i, line) in text.lines().enumerate().skip(1) {
            let row = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != want {
                let msg = if schema.input == InputKind::Pair && cols.len() == 2 {
                    "pair schema but text_b is missing".to_string()
                } else {
                    format!("expected {want} tab-separated columns, found {}", cols.len())
                };
                return Err(perr(row, msg));
            }
            let label = parse_label(cols[want - 1], schema).map_err(|m| perr(row, m))?;
            let text_b = (want == 3).then(|| cols[1].to_string());
            if want == 3 && cols[1].trim().is_empty() {
                return Err(perr(row, "pair schema but text_b is empty".into()));
            }
            out.push(RawExample {
                text_a: cols[0].to_string(),
                text_b,
                label,
            });
        }
    }
    Ok(out)
}

fn check_pair(schema: &DataSchema, text_b: &Option<String>) -> std::result::Result<(), String> {
    if schema.input == InputKind::Pair && text_b.is_none() {
        return Err("pair schema but text_b is missing".into());
    }
    Ok(())
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[RawExample]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for ex in examples {
        let line = serde_json::to_string(ex)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn write_tsv(path: impl AsRef<Path>, examples: &[RawExample]) -> Result<()> {
    let path = path.as_ref();
    let pair = examples.first().is_some_and(|e| e.text_b.is_some());
    let mut buf = String::from(if pair { "text_a\ttext_b\tlabel\n" } else { "text_a\tlabel\n" });
    for ex in examples {
        buf.push_str(&ex.text_a);
        buf.push('\t');
        if let Some(b) = &ex.text_b {
            buf.push_str(b);
            buf.push('\t');
        }
        match ex.label {
            Label::Class(c) => buf.push_str(&c.to_string()),
            Label::Score(s) => buf.push_str(&format!("{s}")),
        }
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// One replicate of a few-shot dataset. Row indices refer to positions in the source corpus.
#[derive(Clone, Debug)]
pub struct FewShotSplit {
    pub task: String,
    pub k: usize,
    pub replicate: usize,
    pub seed: u64,
    pub train: Vec<RawExample>,
    pub val: Vec<RawExample>,
    pub test: Vec<RawExample>,
    pub train_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

pub fn test_size(corpus_len: usize) -> usize {
    (corpus_len / 2).min(TEST_CAP)
}

pub fn train_size(k: usize) -> usize {
    (TRAIN_FRACTION * k as f64).round() as usize
}

/// Smallest corpus that can hold a shared test set and still leave `k` rows to sample from.
pub fn min_corpus_size(k: usize) -> usize {
    if k <= TEST_CAP {
        (2 * k).saturating_sub(1).max(1)
    } else {
        k + TEST_CAP
    }
}

/// Builds `replicates` few-shot datasets of `k` rows sharing one test set.
///
/// The corpus is shuffled once; the first `min(len/2, 5000)` shuffled rows form
/// the test set. Each replicate independently draws `k` rows without
/// replacement from the remainder and splits them 70/30 into train/val.
pub fn build_fewshot_splits(
    task: &str,
    corpus: &[RawExample],
    k: usize,
    replicates: usize,
    seed: u64,
) -> Result<Vec<FewShotSplit>> {
    if k == 0 || replicates == 0 {
        return Err(Error::Input("k and replicates must be positive".into()));
    }
    let n = corpus.len();
    let t = test_size(n);
    if n - t < k {
        return Err(Error::Input(format!(
            "corpus has {n} rows; k={k} needs at least {} rows",
            min_corpus_size(k)
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed(&[seed, tag::SHUFFLE]));
    let test_rows = order[..t].to_vec();
    let remainder = &order[t..];
    let test: Vec<RawExample> = test_rows.iter().map(|&i| corpus[i].clone()).collect();
    let n_train = train_size(k);
    let mut out = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let mut rng = keyed(&[seed, tag::SPLIT, r as u64]);
        let picked: Vec<usize> = index::sample(&mut rng, remainder.len(), k)
            .into_iter()
            .map(|i| remainder[i])
            .collect();
        let (train_rows, val_rows) = picked.split_at(n_train);
        out.push(FewShotSplit {
            task: task.to_string(),
            k,
            replicate: r,
            seed,
            train: train_rows.iter().map(|&i| corpus[i].clone()).collect(),
            val: val_rows.iter().map(|&i| corpus[i].clone()).collect(),
            test: test.clone(),
            train_rows: train_rows.to_vec(),
            val_rows: val_rows.to_vec(),
            test_rows: test_rows.clone(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRows {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Everything needed to re-materialize a set of splits from the source corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub task: String,
    pub schema: DataSchema,
    pub k: usize,
    pub seed: u64,
    pub corpus_size: usize,
    pub test_rows: Vec<usize>,
    pub replicates: Vec<ReplicateRows>,
}

impl SplitManifest {
    pub fn from_splits(schema: DataSchema, corpus_size: usize, splits: &[FewShotSplit]) -> Result<Self> {
        let first = splits
            .first()
            .ok_or_else(|| Error::Input("no splits to describe".into()))?;
        Ok(SplitManifest {
            task: first.task.clone(),
            schema,
            k: first.k,
            seed: first.seed,
            corpus_size,
            test_rows: first.test_rows.clone(),
            replicates: splits
                .iter()
                .map(|s| ReplicateRows {
                    train: s.train_rows.clone(),
                    val: s.val_rows.clone(),
                })
                .collect(),
        })
    }

    /// Rebuilds the splits from the corpus they were drawn from.
    pub fn materialize(&self, corpus: &[RawExample]) -> Result<Vec<FewShotSplit>> {
        if corpus.len() != self.corpus_size {
            return Err(Error::Input(format!(
                "manifest expects {} rows, corpus has {}",
                self.corpus_size,
                corpus.len()
            )));
        }
        let pick = |rows: &[usize]| rows.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
        let test = pick(&self.test_rows);
        Ok(self
            .replicates
            .iter()
            .enumerate()
            .map(|(r, rows)| FewShotSplit {
                task: self.task.clone(),
                k: self.k,
                replicate: r,
                seed: self.seed,
                train: pick(&rows.train),
                val: pick(&rows.val),
                test: test.clone(),
                train_rows: rows.train.clone(),
                val_rows: rows.val.clone(),
                test_rows: self.test_rows.clone(),
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string_pretty(self)?;
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Single sentences labelled by whether the keyword `w0` occurs.
    KeywordPresence,
    /// Sentence pairs labelled by whether their token-set overlap reaches one half.
    PairOverlap,
    /// Sentence pairs scored 0..5 by token-set overlap.
    OrdinalRegression,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 3] = [
        SyntheticKind::KeywordPresence,
        SyntheticKind::PairOverlap,
        SyntheticKind::OrdinalRegression,
    ];

    pub fn schema(self) -> DataSchema {
        match self {
            SyntheticKind::KeywordPresence => DataSchema {
                input: InputKind::Single,
                target: TargetKind::Classification { classes: 2 },
            },
            SyntheticKind::PairOverlap => DataSchema {
                input: InputKind::Pair,
                target: TargetKind::Classification { classes: 2 },
            },
            SyntheticKind::OrdinalRegression => DataSchema {
                input: InputKind::Pair,
                target: TargetKind::Regression,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::KeywordPresence => "keyword-presence",
            SyntheticKind::PairOverlap => "pair-overlap",
            SyntheticKind::OrdinalRegression => "ordinal-regression",
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SyntheticKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown synthetic task {s:?}")))
    }
}

pub const KEYWORD: &str = "w0";
pub const OVERLAP_THRESHOLD: f64 = 0.5;
pub const MAX_SCORE: f64 = 5.0;

/// Jaccard overlap of the whitespace token sets of two sentences.
pub fn token_overlap(a: &str, b: &str) -> f64 {
    let sa: HashSet<&str> = a.split_whitespace().collect();
    let sb: HashSet<&str> = b.split_whitespace().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

fn word(i: usize) -> String {
    format!("w{i}")
}

fn sentence(rng: &mut crate::rng::Rng, vocab_size: usize, len: usize, lo: usize) -> Vec<String> {
    (0..len).map(|_| word(rng.random_range(lo..vocab_size))).collect()
}

fn perturb(rng: &mut crate::rng::Rng, src: &[String], vocab_size: usize, p: f64) -> Vec<String> {
    src.iter()
        .map(|w| {
            if rng.random_bool(p) {
                word(rng.random_range(1..vocab_size))
            } else {
                w.clone()
            }
        })
        .collect()
}

/// Deterministic desk-scale stand-ins for sentence and sentence-pair tasks.
///
/// Words are `w0 .. w{vocab_size-1}`. With probability `noise` a class label
/// is flipped, or a regression score is replaced by a uniform draw on `[0, 5]`.
pub fn generate_synthetic_task(
    kind: SyntheticKind,
    size: usize,
    vocab_size: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<RawExample>> {
    if size == 0 {
        return Err(Error::Input("synthetic task size must be positive".into()));
    }
    if !(0.0..0.5).contains(&noise) {
        return Err(Error::Input(format!("noise {noise} outside [0, 0.5)")));
    }
    if vocab_size < 4 {
        return Err(Error::Input("synthetic vocabulary needs at least 4 words".into()));
    }
    let mut rng = keyed(&[seed, kind as u64]);
    let mut out = Vec::with_capacity(size);
    for _ in 0..size {
        let ex = match kind {
            SyntheticKind::KeywordPresence => {
                let len = rng.random_range(4..=10);
                let mut toks = sentence(&mut rng, vocab_size, len, 1);
                let positive = rng.random_bool(0.5);
                if positive {
                    let at = rng.random_range(0..len);
                    toks[at] = KEYWORD.to_string();
                }
                let flip = rng.random_bool(noise);
                RawExample {
                    text_a: toks.join(" "),
                    text_b: None,
                    label: Label::Class((positive ^ flip) as usize),
                }
            }
            SyntheticKind::PairOverlap => {
                let len = rng.random_range(5..=9);
                let a = sentence(&mut rng, vocab_size, len, 1);
                let b = if rng.random_bool(0.5) {
                    perturb(&mut rng, &a, vocab_size, 0.25)
                } else {
                    let len_b = rng.random_range(5..=9);
                    sentence(&mut rng, vocab_size, len_b, 1)
                };
                let (ta, tb) = (a.join(" "), b.join(" "));
                let similar = token_overlap(&ta, &tb) >= OVERLAP_THRESHOLD;
                let flip = rng.random_bool(noise);
                RawExample {
                    text_a: ta,
                    text_b: Some(tb),
                    label: Label::Class((similar ^ flip) as usize),
                }
            }
            SyntheticKind::OrdinalRegression => {
                let len = rng.random_range(5..=9);
                let a = sentence(&mut rng, vocab_size, len, 1);
                let p = rng.random_range(0.0..1.0);
                let b = perturb(&mut rng, &a, vocab_size, p);
                let (ta, tb) = (a.join(" "), b.join(" "));
                let mut score = MAX_SCORE * token_overlap(&ta, &tb);
                if rng.random_bool(noise) {
                    score = rng.random_range(0.0..=MAX_SCORE);
                }
                RawExample {
                    text_a: ta,
                    text_b: Some(tb),
                    label: Label::Score(score),
                }
            }
        };
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn schema_round_trips_through_text() {
        for s in ["single:class:2", "pair:class:3", "pair:reg", "single:reg"] {
            assert_eq!(s.parse::<DataSchema>().unwrap().to_string(), s);
        }
        assert!("triple:reg".parse::<DataSchema>().is_err());
        assert!("single:class:1".parse::<DataSchema>().is_err());
    }

    #[test]
    fn two_row_tsv_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.tsv", "text_a\tlabel\nhello world\t1\nbye\t0\n");
        let rows = load_corpus(&p, &"single:class:2".parse().unwrap()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].label, Label::Class(1));
    }

    #[test]
    fn pair_row_without_text_b_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "p.tsv", "a\tb\tlabel\nx\ty\t0\nonly\t1\n");
        let err = load_corpus(&p, &"pair:class:2".parse().unwrap()).unwrap_err();
        match err {
            Error::Parse { row, msg, .. } => {
                assert_eq!(row, 3);
                assert!(msg.contains("text_b"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn regression_label_must_be_numeric() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "r.tsv", "a\tb\tlabel\nx\ty\tabc\n");
        assert!(matches!(
            load_corpus(&p, &"pair:reg".parse().unwrap()),
            Err(Error::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn class_label_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.jsonl", "{\"text_a\":\"x\",\"label\":2}\n");
        assert!(load_corpus(&p, &"single:class:2".parse().unwrap()).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = generate_synthetic_task(SyntheticKind::OrdinalRegression, 20, 30, 0.0, 3).unwrap();
        let p = dir.path().join("r.jsonl");
        write_jsonl(&p, &rows).unwrap();
        let back = load_corpus(&p, &SyntheticKind::OrdinalRegression.schema()).unwrap();
        assert_eq!(back, rows);
        let t = dir.path().join("r.tsv");
        write_tsv(&t, &rows).unwrap();
        let back = load_corpus(&t, &SyntheticKind::OrdinalRegression.schema()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_corpus("/definitely/not/here.tsv", &"single:reg".parse().unwrap()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn split_sizes_follow_the_protocol() {
        let corpus = generate_synthetic_task(SyntheticKind::KeywordPresence, 1000, 30, 0.0, 1).unwrap();
        let splits = build_fewshot_splits("kw", &corpus, 100, 3, 7).unwrap();
        for s in &splits {
            assert_eq!((s.test.len(), s.train.len(), s.val.len()), (500, 70, 30));
        }
        let s50 = build_fewshot_splits("kw", &corpus, 50, 1, 7).unwrap();
        assert_eq!(s50[0].val.len(), 15);
    }

    #[test]
    fn too_small_corpus_states_the_minimum() {
        let corpus = generate_synthetic_task(SyntheticKind::KeywordPresence, 150, 30, 0.0, 1).unwrap();
        let err = build_fewshot_splits("kw", &corpus, 100, 1, 7).unwrap_err().to_string();
        assert!(err.contains("199"), "{err}");
        assert!(build_fewshot_splits("kw", &corpus[..149], 75, 1, 7).is_ok());
    }

    #[test]
    fn manifest_rematerializes_identical_splits() {
        let corpus = generate_synthetic_task(SyntheticKind::PairOverlap, 300, 30, 0.1, 2).unwrap();
        let splits = build_fewshot_splits("po", &corpus, 50, 4, 11).unwrap();
        let m = SplitManifest::from_splits(SyntheticKind::PairOverlap.schema(), corpus.len(), &splits).unwrap();
        let again = m.materialize(&corpus).unwrap();
        for (a, b) in splits.iter().zip(&again) {
            assert_eq!(a.train, b.train);
            assert_eq!(a.val, b.val);
            assert_eq!(a.test, b.test);
        }
    }

    #[test]
    fn keyword_task_is_separable_without_noise() {
        let rows = generate_synthetic_task(SyntheticKind::KeywordPresence, 500, 30, 0.0, 9).unwrap();
        for r in &rows {
            let has = r.text_a.split_whitespace().any(|w| w == KEYWORD);
            assert_eq!(r.label, Label::Class(has as usize));
        }
        let same = generate_synthetic_task(SyntheticKind::KeywordPresence, 500, 30, 0.0, 9).unwrap();
        assert_eq!(rows, same);
    }

    #[test]
    fn label_flip_rate_matches_noise() {
        let rows = generate_synthetic_task(SyntheticKind::KeywordPresence, 10_000, 30, 0.1, 4).unwrap();
        let flips = rows
            .iter()
            .filter(|r| {
                let has = r.text_a.split_whitespace().any(|w| w == KEYWORD);
                r.label != Label::Class(has as usize)
            })
            .count();
        let rate = flips as f64 / rows.len() as f64;
        assert!((rate - 0.1).abs() < 0.01, "flip rate {rate}");
    }

    #[test]
    fn invalid_noise_is_rejected() {
        assert!(generate_synthetic_task(SyntheticKind::PairOverlap, 10, 30, 0.5, 0).is_err());
        assert!(generate_synthetic_task(SyntheticKind::PairOverlap, 10, 30, -0.1, 0).is_err());
    }
}
