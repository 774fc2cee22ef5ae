//! Word-level vocabulary, fixed-length encoding and token masking.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Lowercased words; any non-alphanumeric character separates tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    /// Keeps the `cap − 5` most frequent words; ties break lexicographically.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, cap: usize) -> Result<Self> {
        if cap <= RESERVED.len() {
            return Err(Error::Config(format!("vocabulary cap must exceed {}, got {cap}", RESERVED.len())));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut docs = 0;
        for doc in corpus {
            docs += 1;
            for w in tokenize(doc) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(cap - RESERVED.len()).map(|(w, _)| w))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `[CLS] words… [SEP] [PAD]…`, exactly `max_len` ids; content is
    /// truncated to `max_len − 2` tokens.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        assert!(max_len >= 3, "max_len must leave room for [CLS], a token and [SEP]");
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(
            tokenize(text)
                .take(max_len - 2)
                .map(|w| self.id(&w).unwrap_or(UNK)),
        );
        ids.push(SEP);
        ids.resize(max_len, PAD);
        ids
    }

    /// Content tokens joined by single spaces; special tokens dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | CLS | SEP))
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `token<TAB>id` lines; the first five are the reserved tokens.
    pub fn to_tsv(&self) -> String {
        self.tokens.iter().enumerate().map(|(i, t)| format!("{t}\t{i}\n")).collect()
    }

    pub fn from_tsv(content: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (line, l) in content.lines().enumerate() {
            let bad = |msg: &str| Error::Parse {
                path: "vocab".into(),
                line: line + 1,
                msg: msg.to_string(),
            };
            let (tok, id) = l.rsplit_once('\t').ok_or_else(|| bad("expected `token<TAB>id`"))?;
            let id: usize = id.parse().map_err(|_| bad("invalid id"))?;
            if id != tokens.len() {
                return Err(bad("ids must be consecutive from 0"));
            }
            if id < RESERVED.len() && tok != RESERVED[id] {
                return Err(bad("reserved header mismatch"));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() {
            return Err(Error::Parse {
                path: "vocab".into(),
                line: tokens.len(),
                msg: "missing reserved header".into(),
            });
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path).map_err(Error::file(path))?);
        w.write_all(self.to_tsv().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path).map_err(Error::file(path))?)
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }
}

/// A token sequence before and after masking.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    pub original: Vec<u32>,
    pub masked: Vec<u32>,
    pub positions: Vec<usize>,
    pub rate: f64,
}

fn maskable(id: u32) -> bool {
    !matches!(id, PAD | CLS | SEP)
}

/// Replaces each content token by `[MASK]` independently with probability `p`.
/// `[CLS]`, `[SEP]` and `[PAD]` are never touched.
pub fn mask_tokens(seq: &[u32], p: f64, rng: &mut impl Rng) -> MaskedSequence {
    assert!((0.0..=1.0).contains(&p), "mask rate must lie in [0, 1]");
    let mut masked = seq.to_vec();
    let mut positions = Vec::new();
    for (t, &id) in seq.iter().enumerate() {
        if maskable(id) && rng.random::<f64>() < p {
            masked[t] = MASK;
            positions.push(t);
        }
    }
    MaskedSequence {
        original: seq.to_vec(),
        masked,
        positions,
        rate: p,
    }
}
