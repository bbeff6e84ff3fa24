use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::data::{Label, RawExample};
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Token table. Line number in the vocabulary file is the id.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then every other token ordered by descending count and then lexically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *counts.entry(w.to_lowercase()).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !SPECIALS.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens).expect("specials are unique")
    }

    pub fn from_examples(examples: &[RawExample]) -> Self {
        Self::build(
            examples
                .iter()
                .flat_map(|e| std::iter::once(e.text_a.as_str()).chain(e.text_b.as_deref())),
        )
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Input(format!(
                "vocabulary must start with {}",
                SPECIALS.join(" ")
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(s.lines().map(str::to_string).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub label: Option<Label>,
}

fn words(text: &str, vocab: &Vocab) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| vocab.id(&w.to_lowercase()))
        .collect()
}

/// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, truncated longest-first to `max_len`.
pub fn tokenize(text_a: &str, text_b: Option<&str>, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let mut a = words(text_a, vocab);
    let mut b = text_b.map(|t| words(t, vocab));
    let specials = if b.is_some() { 3 } else { 2 };
    let budget = max_len.saturating_sub(specials);
    loop {
        let lb = b.as_ref().map_or(0, Vec::len);
        if a.len() + lb <= budget {
            break;
        }
        match &mut b {
            Some(bv) if bv.len() > a.len() => {
                bv.pop();
            }
            _ => {
                a.pop();
            }
        }
    }
    let mut ids = Vec::with_capacity(a.len() + b.as_ref().map_or(0, Vec::len) + specials);
    ids.push(CLS);
    ids.extend(a);
    ids.push(SEP);
    if let Some(bv) = b {
        ids.extend(bv);
        ids.push(SEP);
    }
    let mask = vec![true; ids.len()];
    TokenSequence {
        ids,
        mask,
        label: None,
    }
}

pub fn encode_example(ex: &RawExample, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let mut seq = tokenize(&ex.text_a, ex.text_b.as_deref(), vocab, max_len);
    seq.label = Some(ex.label);
    seq
}

/// Sequences right-padded with `[PAD]` to the longest member.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub size: usize,
    pub len: usize,
}

impl Batch {
    pub fn new(seqs: &[&TokenSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let len = seqs.iter().map(|s| s.ids.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            if s.ids.len() != s.mask.len() {
                return Err(Error::Input("ids and mask lengths differ".into()));
            }
            ids.extend_from_slice(&s.ids);
            mask.extend_from_slice(&s.mask);
            ids.extend(std::iter::repeat_n(PAD, len - s.ids.len()));
            mask.extend(std::iter::repeat_n(false, len - s.ids.len()));
        }
        Ok(Batch {
            ids,
            mask,
            size: seqs.len(),
            len,
        })
    }
}
