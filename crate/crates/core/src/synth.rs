//! Synthetic text-attributed graphs with tunable homophily.
//!
//! Every class owns a small vocabulary of word pairs, the first word being
//! the readable class name. A node's text is a sequence of three-word
//! phrases: `the <word> <word>` from its class pairs, or `a <word> <word>`
//! from a pool of pairs shared by all classes. Phrases have a fixed length,
//! so the word slot of every position is recoverable from its index.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TextAttributedGraph;

const CLASS_NAMES: &[&str] = &[
    "astronomy", "botany", "chemistry", "geology", "music", "cooking", "sailing", "poetry", "zoology",
    "finance", "medicine", "history", "painting", "robotics", "weather", "archery",
];

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr"];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub nodes_per_class: usize,
    /// Words per class vocabulary, class name included.
    pub vocab_per_class: usize,
    /// Probability that an edge joins two nodes of the same class.
    pub homophily: f64,
    pub seed: u64,
    /// Mean node degree of the generated graph.
    pub avg_degree: usize,
    /// Inclusive range of phrases per node text.
    pub min_phrases: usize,
    pub max_phrases: usize,
    /// Probability that a phrase is drawn from the node's class vocabulary.
    pub class_phrase_rate: f64,
    /// Number of word pairs shared by all classes.
    pub shared_pairs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            nodes_per_class: 300,
            vocab_per_class: 12,
            homophily: 0.9,
            seed: 0,
            avg_degree: 6,
            min_phrases: 3,
            max_phrases: 6,
            class_phrase_rate: 0.5,
            shared_pairs: 12,
        }
    }
}

impl SynthConfig {
    pub fn new(num_classes: usize, nodes_per_class: usize, vocab_per_class: usize, homophily: f64, seed: u64) -> Self {
        Self {
            num_classes,
            nodes_per_class,
            vocab_per_class,
            homophily,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.nodes_per_class == 0 || self.vocab_per_class == 0 {
            return Err(Error::Config("class, node and vocabulary counts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.homophily) || !(0.0..=1.0).contains(&self.class_phrase_rate) {
            return Err(Error::Config("homophily and class_phrase_rate must lie in [0, 1]".into()));
        }
        if self.min_phrases == 0 || self.min_phrases > self.max_phrases || self.shared_pairs == 0 {
            return Err(Error::Config("phrase range must be non-empty and shared_pairs ≥ 1".into()));
        }
        Ok(())
    }
}

struct WordMint {
    used: HashSet<String>,
}

impl WordMint {
    fn new() -> Self {
        Self {
            used: ["the", "a"].iter().chain(CLASS_NAMES).map(|s| s.to_string()).collect(),
        }
    }

    fn reserve(&mut self, w: &str) {
        self.used.insert(w.to_string());
    }

    fn mint(&mut self, rng: &mut impl Rng) -> String {
        loop {
            let syllables = rng.random_range(2..=3);
            let w: String = (0..syllables)
                .map(|_| {
                    let o = ONSETS[rng.random_range(0..ONSETS.len())];
                    let n = NUCLEI[rng.random_range(0..NUCLEI.len())];
                    format!("{o}{n}")
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn pairs_from(words: &[String]) -> Vec<(String, String)> {
    words
        .chunks(2)
        .map(|c| (c[0].clone(), c.get(1).unwrap_or(&words[0]).clone()))
        .collect()
}

fn class_name(c: usize) -> String {
    match CLASS_NAMES.get(c) {
        Some(n) => n.to_string(),
        None => format!("topic{c}"),
    }
}

/// Generates a labeled synthetic graph; identical configs give identical graphs.
pub fn generate_synthetic_tag(cfg: &SynthConfig) -> Result<TextAttributedGraph> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mint = WordMint::new();
    let names: Vec<String> = (0..cfg.num_classes).map(class_name).collect();
    for n in &names {
        mint.reserve(n);
    }
    let class_pairs: Vec<Vec<(String, String)>> = names
        .iter()
        .map(|name| {
            let mut words = vec![name.clone()];
            words.extend((1..cfg.vocab_per_class).map(|_| mint.mint(&mut rng)));
            pairs_from(&words)
        })
        .collect();
    let shared: Vec<(String, String)> = (0..cfg.shared_pairs)
        .map(|_| (mint.mint(&mut rng), mint.mint(&mut rng)))
        .collect();

    let n = cfg.num_classes * cfg.nodes_per_class;
    let mut labels: Vec<usize> = (0..n).map(|i| i / cfg.nodes_per_class).collect();
    labels.shuffle(&mut rng);

    let texts: Vec<String> = labels
        .iter()
        .map(|&c| {
            let phrases = rng.random_range(cfg.min_phrases..=cfg.max_phrases);
            let mut words = Vec::with_capacity(phrases * 3);
            for _ in 0..phrases {
                let (det, pool) = if rng.random::<f64>() < cfg.class_phrase_rate {
                    ("the", &class_pairs[c])
                } else {
                    ("a", &shared)
                };
                let (w1, w2) = &pool[rng.random_range(0..pool.len())];
                words.extend([det, w1.as_str(), w2.as_str()]);
            }
            words.join(" ")
        })
        .collect();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); cfg.num_classes];
    for (v, &c) in labels.iter().enumerate() {
        by_class[c].push(v);
    }
    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    let per_node = (cfg.avg_degree / 2).max(1);
    for u in 0..n {
        let c = labels[u];
        for _ in 0..per_node {
            let same = cfg.num_classes == 1 || rng.random::<f64>() < cfg.homophily;
            for _attempt in 0..32 {
                let v = if same {
                    by_class[c][rng.random_range(0..by_class[c].len())]
                } else {
                    let mut other = rng.random_range(0..cfg.num_classes - 1);
                    if other >= c {
                        other += 1;
                    }
                    by_class[other][rng.random_range(0..by_class[other].len())]
                };
                if v != u && seen.insert((u.min(v), u.max(v))) {
                    edges.push((u, v));
                    break;
                }
            }
        }
    }

    let label_texts: BTreeMap<usize, String> = names.into_iter().enumerate().collect();
    TextAttributedGraph::new(texts, labels.into_iter().map(Some).collect(), label_texts, edges, false)
}

/// Fraction of undirected edges joining same-class endpoints.
pub fn edge_homophily(g: &TextAttributedGraph) -> f64 {
    let (mut same, mut total) = (0usize, 0usize);
    for (u, v) in g.arcs().filter(|&(u, v)| u < v) {
        total += 1;
        if g.label(u) == g.label(v) {
            same += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        same as f64 / total as f64
    }
}
