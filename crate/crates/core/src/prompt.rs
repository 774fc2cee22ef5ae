//! Graph-text prompting for frozen encoders: a small graph of trainable
//! tokens attached to each target's ego graph, a shared shift of the
//! target's text embedding, and a task head.

use std::fmt;
use std::str::FromStr;

use autograd::{AdamW, AdamWConfig, AutogradError, ParamStore, Real, Tape, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{Gat, GatGraph};
use crate::graph::{extract_ego_graph, EgoGraph, TextAttributedGraph, EGO_CAP};

pub const PREFIX: &str = "prompt.";
const TOKENS: &str = "prompt.tokens";
const DELTA: &str = "prompt.delta";

/// Edge threshold on dot products: a quantile of the observed values or a
/// fixed number. `inf` disables edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Threshold {
    Quantile(f64),
    Absolute(f64),
}

impl Threshold {
    pub const NONE: Threshold = Threshold::Absolute(f64::INFINITY);

    pub fn resolve(&self, values: &[f64]) -> f64 {
        match *self {
            Threshold::Absolute(v) => v,
            Threshold::Quantile(q) => quantile(values, q),
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Quantile(q) => write!(f, "q{q}"),
            Threshold::Absolute(v) if v.is_infinite() && *v > 0.0 => write!(f, "inf"),
            Threshold::Absolute(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for Threshold {
    type Err = String;

    /// `inf`, `median`, `q<fraction>` or a number.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        match s {
            "inf" | "+inf" => return Ok(Threshold::NONE),
            "median" => return Ok(Threshold::Quantile(0.5)),
            _ => {}
        }
        if let Some(q) = s.strip_prefix('q') {
            let q: f64 = q.parse().map_err(|_| format!("invalid quantile `{s}`"))?;
            if !(0.0..=1.0).contains(&q) {
                return Err(format!("quantile must lie in [0, 1], got {q}"));
            }
            return Ok(Threshold::Quantile(q));
        }
        s.parse::<f64>()
            .ok()
            .filter(|v| !v.is_nan())
            .map(Threshold::Absolute)
            .ok_or_else(|| format!("invalid threshold `{s}`; expected inf, median, q<fraction> or a number"))
    }
}

impl From<Threshold> for String {
    fn from(t: Threshold) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for Threshold {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

/// Linear-interpolated quantile; `+∞` for an empty sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::INFINITY;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.to_f64().unwrap() * y.to_f64().unwrap()).sum()
}

/// Ordered pairs `(i, j)`, `i ≠ j`, of token rows with `dot ≥ sigma`.
pub fn inner_edges<T: Real>(tokens: &[T], d: usize, sigma: f64) -> Vec<(usize, usize)> {
    let m = tokens.len() / d;
    let mut out = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if i != j && dot(&tokens[i * d..(i + 1) * d], &tokens[j * d..(j + 1) * d]) >= sigma {
                out.push((i, j));
            }
        }
    }
    out
}

/// Pairs `(k, j)` of feature row `k` and token row `j` with `dot ≥ sigma`.
pub fn inter_edges<T: Real>(x: &[T], tokens: &[T], d: usize, sigma: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (k, xk) in x.chunks(d).enumerate() {
        for (j, pj) in tokens.chunks(d).enumerate() {
            if dot(xk, pj) >= sigma {
                out.push((k, j));
            }
        }
    }
    out
}

fn pairwise_dots<T: Real>(tokens: &[T], d: usize) -> Vec<f64> {
    let m = tokens.len() / d;
    let mut out = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            out.push(dot(&tokens[i * d..(i + 1) * d], &tokens[j * d..(j + 1) * d]));
        }
    }
    out
}

/// Token matrix `[m, d]` with resolved thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptGraph<T> {
    pub tokens: Vec<T>,
    pub d: usize,
    pub n_label_tokens: usize,
    pub sigma_inner: f64,
    pub sigma_inter: f64,
}

impl<T: Real> PromptGraph<T> {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len() / self.d
    }

    pub fn inner_edges(&self) -> Vec<(usize, usize)> {
        inner_edges(&self.tokens, self.d, self.sigma_inner)
    }
}

/// First rows copy `label_embs` (`[N, d]`), truncated to `num_tokens` if
/// fewer; the rest are Gaussian with expected norm equal to the mean label
/// norm. `sigma_inter` starts disabled until resolved against features.
pub fn init_prompt_graph<T: Real>(
    label_embs: &[T],
    d: usize,
    num_tokens: usize,
    sigma_inner: Threshold,
    rng: &mut impl Rng,
) -> Result<PromptGraph<T>> {
    let n = label_embs.len() / d;
    if n == 0 || num_tokens == 0 {
        return Err(Error::Config("prompt graph needs at least one label and one token".into()));
    }
    let n_label_tokens = n.min(num_tokens);
    let mut tokens = label_embs[..n_label_tokens * d].to_vec();
    let mean_norm = label_embs.chunks(d).map(|r| dot(r, r).sqrt()).sum::<f64>() / n as f64;
    let std = if mean_norm > 0.0 { mean_norm / (d as f64).sqrt() } else { 1.0 / (d as f64).sqrt() };
    let normal = Normal::new(0.0, std).expect("finite std");
    tokens.extend((0..(num_tokens - n_label_tokens) * d).map(|_| T::c(normal.sample(rng))));
    let sigma_inner = sigma_inner.resolve(&pairwise_dots(&tokens, d));
    Ok(PromptGraph {
        tokens,
        d,
        n_label_tokens,
        sigma_inner,
        sigma_inter: f64::INFINITY,
    })
}

/// Ego graph plus prompt tokens. Local ids: ego members first, then tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedGraph<T> {
    pub n_ego: usize,
    pub n_tokens: usize,
    /// Arcs `(src, dst)`.
    pub arcs: Vec<(usize, usize)>,
    /// `[X_ego; P]`, row-major.
    pub features: Vec<T>,
}

/// Joins ego edges, inner token edges, and inter edges in both directions.
pub fn attach_prompt<T: Real>(ego: &EgoGraph, x_ego: &[T], pg: &PromptGraph<T>) -> Result<AugmentedGraph<T>> {
    let n_ego = ego.members.len();
    if x_ego.len() != n_ego * pg.d {
        return Err(AutogradError::Shape {
            op: "attach_prompt",
            lhs: vec![x_ego.len()],
            rhs: vec![n_ego, pg.d],
        }
        .into());
    }
    let mut arcs = ego.edges.clone();
    arcs.extend(pg.inner_edges().into_iter().map(|(i, j)| (n_ego + i, n_ego + j)));
    for (k, j) in inter_edges(x_ego, &pg.tokens, pg.d, pg.sigma_inter) {
        arcs.push((k, n_ego + j));
        arcs.push((n_ego + j, k));
    }
    let mut features = x_ego.to_vec();
    features.extend_from_slice(&pg.tokens);
    Ok(AugmentedGraph {
        n_ego,
        n_tokens: pg.num_tokens(),
        arcs,
        features,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// Mean over ego members, prompt rows excluded.
    Mean,
    /// The target row only.
    Target,
}

impl FromStr for Readout {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(Readout::Mean),
            "target" => Ok(Readout::Target),
            _ => Err(format!("unknown readout `{s}`; expected mean or target")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub extra_tokens: usize,
    /// Total token count; overrides `N + extra_tokens` when set.
    pub num_tokens: Option<usize>,
    pub sigma_inner: Threshold,
    pub sigma_inter: Threshold,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Hidden width of the task head; 0 means the encoder width.
    pub head_hidden: usize,
    pub readout: Readout,
    pub ego_cap: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            extra_tokens: 0,
            num_tokens: None,
            sigma_inner: Threshold::Quantile(0.5),
            sigma_inter: Threshold::Quantile(0.9),
            epochs: 50,
            lr: 1e-2,
            weight_decay: 0.01,
            head_hidden: 0,
            readout: Readout::Mean,
            ego_cap: EGO_CAP,
        }
    }
}

/// Frozen inputs shared by every task.
pub struct PromptContext<'a, T> {
    pub graph: &'a TextAttributedGraph,
    pub gnn: &'a Gat,
    pub params: &'a ParamStore<T>,
    /// Unmasked `[CLS]` embeddings of every node, `[n, d]`.
    pub features: &'a [T],
    pub d: usize,
}

impl<T: Real> PromptContext<'_, T> {
    fn row(&self, v: usize) -> &[T] {
        &self.features[v * self.d..(v + 1) * self.d]
    }
}

/// Trainable prompt parameters for one task, under the `prompt.` prefix:
/// `tokens`, `delta` and the head `head.w1`, `head.b1`, `head.w2`, `head.b2`.
#[derive(Clone, Debug)]
pub struct PromptState<T> {
    pub store: ParamStore<T>,
    pub d: usize,
    pub classes: usize,
    pub n_label_tokens: usize,
    pub sigma_inner: f64,
    pub sigma_inter: f64,
    pub readout: Readout,
    pub ego_cap: usize,
}

impl<T: Real> PromptState<T> {
    /// `label_embs` holds one `[CLS]` embedding per task class, `[N, d]`.
    pub fn new(label_embs: &[T], d: usize, cfg: &PromptConfig, rng: &mut impl Rng) -> Result<Self> {
        let classes = label_embs.len() / d;
        let m = cfg.num_tokens.unwrap_or(classes + cfg.extra_tokens);
        let pg = init_prompt_graph(label_embs, d, m, cfg.sigma_inner, rng)?;
        let hidden = if cfg.head_hidden == 0 { d } else { cfg.head_hidden };
        let mut store = ParamStore::new();
        store.insert(TOKENS, &[m, d], pg.tokens);
        store.zeros(DELTA, &[d]);
        store.xavier("prompt.head.w1", 2 * d, hidden, rng);
        store.zeros("prompt.head.b1", &[hidden]);
        store.zeros("prompt.head.w2", &[hidden, classes]);
        store.zeros("prompt.head.b2", &[classes]);
        Ok(Self {
            store,
            d,
            classes,
            n_label_tokens: pg.n_label_tokens,
            sigma_inner: pg.sigma_inner,
            sigma_inter: match cfg.sigma_inter {
                Threshold::Absolute(v) => v,
                Threshold::Quantile(_) => f64::INFINITY,
            },
            readout: cfg.readout,
            ego_cap: cfg.ego_cap,
        })
    }

    pub fn tokens(&self) -> &[T] {
        &self.store.get(TOKENS).expect("tokens present").data
    }

    pub fn delta(&self) -> &[T] {
        &self.store.get(DELTA).expect("delta present").data
    }

    /// Current token matrix with this state's thresholds.
    pub fn prompt_graph(&self) -> PromptGraph<T> {
        PromptGraph {
            tokens: self.tokens().to_vec(),
            d: self.d,
            n_label_tokens: self.n_label_tokens,
            sigma_inner: self.sigma_inner,
            sigma_inter: self.sigma_inter,
        }
    }

    /// Sets `sigma_inter` from ego-member × token dot products of `nodes`.
    pub fn resolve_inter(&mut self, ctx: &PromptContext<'_, T>, nodes: &[usize], threshold: Threshold) -> Result<()> {
        if let Threshold::Absolute(v) = threshold {
            self.sigma_inter = v;
            return Ok(());
        }
        let mut dots = Vec::new();
        for &v in nodes {
            let ego = extract_ego_graph(ctx.graph, v, self.ego_cap)?;
            for &u in &ego.members {
                for p in self.tokens().chunks(self.d) {
                    dots.push(dot(ctx.row(u), p));
                }
            }
        }
        self.sigma_inter = threshold.resolve(&dots);
        Ok(())
    }
}

/// Logits `[nodes, N]`: every node's ego graph, with its own copy of the
/// prompt tokens, forms one component of a disjoint union run through the
/// frozen GNN.
pub fn prompt_forward<T: Real>(
    tape: &mut Tape<T>,
    ctx: &PromptContext<'_, T>,
    state: &PromptState<T>,
    nodes: &[usize],
) -> Result<Var> {
    tape.freeze_prefix("lm.");
    tape.freeze_prefix("gnn.");
    let d = ctx.d;
    let pg = state.prompt_graph();
    let m = pg.num_tokens();
    let inner = pg.inner_edges();
    let egos: Vec<EgoGraph> = nodes
        .iter()
        .map(|&v| extract_ego_graph(ctx.graph, v, state.ego_cap))
        .collect::<Result<_>>()?;
    let n_members: usize = egos.iter().map(|e| e.members.len()).sum();
    let total = n_members + nodes.len() * m;

    let mut x = Vec::with_capacity(n_members * d);
    let mut arcs = Vec::new();
    let (mut member_rows, mut member_seg, mut targets) = (Vec::new(), Vec::new(), Vec::new());
    let mut offset = 0;
    for (i, ego) in egos.iter().enumerate() {
        let p0 = n_members + i * m;
        let start = x.len();
        for &u in &ego.members {
            x.extend_from_slice(ctx.row(u));
        }
        arcs.extend(ego.edges.iter().map(|&(a, b)| (offset + a, offset + b)));
        arcs.extend(inner.iter().map(|&(a, b)| (p0 + a, p0 + b)));
        for (k, j) in inter_edges(&x[start..], &pg.tokens, d, pg.sigma_inter) {
            arcs.push((offset + k, p0 + j));
            arcs.push((p0 + j, offset + k));
        }
        targets.push(offset);
        member_rows.extend(offset..offset + ego.members.len());
        member_seg.extend(std::iter::repeat_n(i, ego.members.len()));
        offset += ego.members.len();
    }

    let xc = tape.constant(&[n_members, d], x)?;
    let tokens = tape.param(&state.store, TOKENS)?;
    let copies: Vec<usize> = (0..nodes.len()).flat_map(|_| 0..m).collect();
    let pc = tape.gather_rows(tokens, &copies)?;
    let features = tape.concat_rows(&[xc, pc])?;
    let graph = GatGraph::new(total, arcs)?;
    let h = ctx.gnn.forward(tape, ctx.params, &graph, features, &mut rand::rng())?.hidden;

    let readout = match state.readout {
        Readout::Target => tape.gather_rows(h, &targets)?,
        Readout::Mean => {
            let rows = tape.gather_rows(h, &member_rows)?;
            let sums = tape.scatter_add_rows(rows, &member_seg, nodes.len())?;
            let inv: Vec<T> = egos.iter().map(|e| T::c(1.0 / e.members.len() as f64)).collect();
            let inv = tape.constant(&[nodes.len()], inv)?;
            tape.mul_groups(sums, inv)?
        }
    };
    let base: Vec<T> = nodes.iter().flat_map(|&v| ctx.row(v).iter().copied()).collect();
    let base = tape.constant(&[nodes.len(), d], base)?;
    let delta = tape.param(&state.store, DELTA)?;
    let wt = tape.add_row(base, delta)?;
    let z = tape.concat_cols(&[readout, wt])?;
    let w1 = tape.param(&state.store, "prompt.head.w1")?;
    let b1 = tape.param(&state.store, "prompt.head.b1")?;
    let w2 = tape.param(&state.store, "prompt.head.w2")?;
    let b2 = tape.param(&state.store, "prompt.head.b2")?;
    let y = tape.matmul(z, w1, false)?;
    let y = tape.add_row(y, b1)?;
    let y = tape.gelu(y)?;
    let y = tape.matmul(y, w2, false)?;
    Ok(tape.add_row(y, b2)?)
}

/// Support-set loss per epoch, before each update.
#[derive(Clone, Debug, PartialEq)]
pub struct TuneTrace {
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

/// Full-batch tuning of tokens, delta and head on `support` pairs
/// `(node, class index)`. Edges are rebuilt from the current tokens each
/// epoch; encoder parameters never change.
pub fn tune_prompt<T: Real>(
    ctx: &PromptContext<'_, T>,
    state: &mut PromptState<T>,
    support: &[(usize, usize)],
    cfg: &PromptConfig,
    seed: u64,
) -> Result<TuneTrace> {
    let nodes: Vec<usize> = support.iter().map(|p| p.0).collect();
    let labels: Vec<usize> = support.iter().map(|p| p.1).collect();
    if let Some(&bad) = labels.iter().find(|&&c| c >= state.classes) {
        return Err(Error::Config(format!("support label {bad} outside {} classes", state.classes)));
    }
    state.resolve_inter(ctx, &nodes, cfg.sigma_inter)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &state.store,
        &[PREFIX],
    );
    let ones = vec![T::one(); nodes.len()];
    let non_finite = |epoch: usize| Error::NonFiniteLoss {
        step: epoch as u64,
        seed,
        stream: 0,
    };
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::eval();
        let logits = prompt_forward(&mut tape, ctx, state, &nodes).map_err(|e| match e {
            Error::Autograd(AutogradError::NonFinite(_)) => non_finite(epoch),
            e => e,
        })?;
        let loss = tape.cross_entropy(logits, &labels, &ones)?;
        let value = tape.scalar(loss).to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(non_finite(epoch));
        }
        losses.push(value);
        let grads = tape.backward(loss).map_err(|_| non_finite(epoch))?.params(&tape);
        debug_assert!(grads.keys().all(|k| k.starts_with(PREFIX)));
        opt.step(&mut state.store, &grads)?;
    }
    let mut tape = Tape::eval();
    let logits = prompt_forward(&mut tape, ctx, state, &nodes)?;
    let loss = tape.cross_entropy(logits, &labels, &ones)?;
    Ok(TuneTrace {
        losses,
        final_loss: tape.scalar(loss).to_f64().unwrap_or(f64::NAN),
    })
}

/// Arg-max class index per node.
pub fn predict<T: Real>(ctx: &PromptContext<'_, T>, state: &PromptState<T>, nodes: &[usize]) -> Result<Vec<usize>> {
    let mut tape = Tape::eval();
    let logits = prompt_forward(&mut tape, ctx, state, nodes)?;
    Ok(tape
        .value(logits)
        .chunks(state.classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use crate::gnn::GnnConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_parsing() {
        assert_eq!("inf".parse::<Threshold>().unwrap(), Threshold::NONE);
        assert_eq!("median".parse::<Threshold>().unwrap(), Threshold::Quantile(0.5));
        assert_eq!("q0.9".parse::<Threshold>().unwrap(), Threshold::Quantile(0.9));
        assert_eq!("-1.5".parse::<Threshold>().unwrap(), Threshold::Absolute(-1.5));
        assert!("q2".parse::<Threshold>().is_err());
        assert!("often".parse::<Threshold>().is_err());
        let json = serde_json::to_string(&Threshold::NONE).unwrap();
        assert_eq!(serde_json::from_str::<Threshold>(&json).unwrap(), Threshold::NONE);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[], 0.5), f64::INFINITY);
    }

    #[test]
    fn label_tokens_only_when_no_extras() {
        let labels = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let pg = init_prompt_graph::<f64>(&labels, 2, 3, Threshold::Absolute(0.5), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(pg.num_tokens(), 3);
        assert_eq!(pg.tokens, labels);
        assert_eq!(pg.inner_edges(), vec![(0, 2), (1, 2), (2, 0), (2, 1)]);
        let none = PromptGraph { sigma_inner: f64::INFINITY, ..pg };
        assert!(none.inner_edges().is_empty());
    }

    #[test]
    fn extra_tokens_match_label_scale() {
        let d = 64;
        let labels: Vec<f64> = (0..2 * d).map(|i| if i % 2 == 0 { 2.0 } else { -2.0 }).collect();
        let pg = init_prompt_graph::<f64>(&labels, d, 40, Threshold::Quantile(0.5), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(pg.num_tokens(), 40);
        let norms: Vec<f64> = pg.tokens.chunks(d).skip(2).map(|r| dot(r, r).sqrt()).collect();
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        assert!((mean - 16.0).abs() < 1.5, "{mean}");
        let truncated = init_prompt_graph::<f64>(&labels, d, 1, Threshold::NONE, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(truncated.n_label_tokens, 1);
    }

    fn ego(n: usize) -> EgoGraph {
        EgoGraph {
            target: 0,
            members: (0..n).collect(),
            edges: (1..n).flat_map(|i| [(0, i), (i, 0)]).collect(),
            size_cap: EGO_CAP,
        }
    }

    #[test]
    fn self_similar_feature_links_to_token() {
        let tokens = vec![1.0, 2.0, -1.0, 0.5];
        let pg = PromptGraph {
            tokens: tokens.clone(),
            d: 2,
            n_label_tokens: 2,
            sigma_inner: f64::INFINITY,
            sigma_inter: 5.0,
        };
        let aug = attach_prompt(&ego(1), &[1.0, 2.0], &pg).unwrap();
        assert!(aug.arcs.contains(&(0, 1)) && aug.arcs.contains(&(1, 0)));
        assert_eq!(aug.features, vec![1.0, 2.0, 1.0, 2.0, -1.0, 0.5]);
        let off = PromptGraph { sigma_inter: f64::INFINITY, ..pg };
        assert!(attach_prompt(&ego(1), &[1.0, 2.0], &off).unwrap().arcs.is_empty());
    }

    #[test]
    fn inter_edges_match_brute_force_at_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 5;
        let x: Vec<f64> = (0..4 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut dots = Vec::new();
        for k in 0..4 {
            for j in 0..3 {
                dots.push((k, j, (0..d).map(|t| x[k * d + t] * p[j * d + t]).sum::<f64>()));
            }
        }
        let mut sorted: Vec<f64> = dots.iter().map(|t| t.2).collect();
        sorted.sort_by(f64::total_cmp);
        let median = (sorted[5] + sorted[6]) / 2.0;
        let expected: Vec<(usize, usize)> = dots.iter().filter(|t| t.2 >= median).map(|t| (t.0, t.1)).collect();
        assert_eq!(inter_edges(&x, &p, d, median), expected);
        assert_eq!(expected.len(), 6);
    }

    fn context_fixture(layers: usize) -> (TextAttributedGraph, Gat, ParamStore<f64>, Vec<f64>) {
        let g = TextAttributedGraph::new(
            vec![String::new(); 6],
            vec![Some(0), Some(0), Some(1), Some(1), Some(2), Some(2)],
            BTreeMap::new(),
            vec![(0, 1), (2, 3), (1, 2)],
            false,
        )
        .unwrap();
        let gat = Gat::new(GnnConfig {
            layers,
            dropout: 0.0,
            ..GnnConfig::new(4)
        })
        .unwrap();
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        gat.init_params(&mut params, &mut rng);
        let features = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        (g, gat, params, features)
    }

    #[test]
    fn disconnected_prompt_equals_no_prompt_pathway() {
        let (g, gat, params, features) = context_fixture(2);
        let ctx = PromptContext {
            graph: &g,
            gnn: &gat,
            params: &params,
            features: &features,
            d: 4,
        };
        let cfg = PromptConfig {
            sigma_inner: Threshold::NONE,
            sigma_inter: Threshold::NONE,
            ..PromptConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = PromptState::new(&features[..12], 4, &cfg, &mut rng).unwrap();
        state.store.normal("prompt.head.w2", &[4, 3], 1.0, &mut rng);
        let nodes = [1, 2, 5];
        let mut t = Tape::eval();
        let logits = prompt_forward(&mut t, &ctx, &state, &nodes).unwrap();
        let got = t.value(logits).to_vec();

        // Same computation with no prompt nodes at all.
        for (i, &v) in nodes.iter().enumerate() {
            let ego = extract_ego_graph(&g, v, EGO_CAP).unwrap();
            let x: Vec<f64> = ego.members.iter().flat_map(|&u| features[u * 4..u * 4 + 4].to_vec()).collect();
            let mut t = Tape::eval();
            let xv = t.constant(&[ego.members.len(), 4], x).unwrap();
            let gg = GatGraph::new(ego.members.len(), ego.edges.clone()).unwrap();
            let h = gat.forward(&mut t, &params, &gg, xv, &mut rand::rng()).unwrap().hidden;
            let hv = t.value(h);
            let mut z = vec![0.0; 4];
            for r in hv.chunks(4) {
                for j in 0..4 {
                    z[j] += r[j];
                }
            }
            z.iter_mut().for_each(|x| *x /= ego.members.len() as f64);
            z.extend_from_slice(&features[v * 4..v * 4 + 4]);
            let mut t = Tape::eval();
            let zv = t.constant(&[1, 8], z).unwrap();
            let w1 = t.param(&state.store, "prompt.head.w1").unwrap();
            let b1 = t.param(&state.store, "prompt.head.b1").unwrap();
            let w2 = t.param(&state.store, "prompt.head.w2").unwrap();
            let b2 = t.param(&state.store, "prompt.head.b2").unwrap();
            let y = t.matmul(zv, w1, false).unwrap();
            let y = t.add_row(y, b1).unwrap();
            let y = t.gelu(y).unwrap();
            let y = t.matmul(y, w2, false).unwrap();
            let y = t.add_row(y, b2).unwrap();
            assert_eq!(t.value(y), &got[i * 3..i * 3 + 3]);
        }
    }

    #[test]
    fn single_node_ego_with_two_tokens_matches_hand_forward() {
        let d = 4;
        let g = TextAttributedGraph::new(vec![String::new()], vec![Some(0)], BTreeMap::new(), vec![], false).unwrap();
        let gat = Gat::new(GnnConfig {
            layers: 1,
            heads: 1,
            dropout: 0.0,
            ..GnnConfig::new(d)
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = ParamStore::new();
        gat.init_params(&mut params, &mut rng);
        let features: Vec<f64> = vec![0.5, -0.2, 0.3, 0.9];
        let ctx = PromptContext {
            graph: &g,
            gnn: &gat,
            params: &params,
            features: &features,
            d,
        };
        let labels = vec![0.4, 0.1, 0.2, 0.7, -0.3, 0.2, -0.1, 0.1];
        let cfg = PromptConfig {
            sigma_inner: Threshold::Absolute(-10.0),
            sigma_inter: Threshold::Absolute(0.5),
            readout: Readout::Target,
            ..PromptConfig::default()
        };
        let mut state = PromptState::new(&labels, d, &cfg, &mut rng).unwrap();
        state.store.normal("prompt.head.w2", &[d, 2], 1.0, &mut rng);
        state.sigma_inter = 0.5;
        let mut t = Tape::eval();
        let logits = prompt_forward(&mut t, &ctx, &state, &[0]).unwrap();
        let got = t.value(logits).to_vec();

        // Hand forward. dot(x, p0) = 0.2 - 0.02 + 0.06 + 0.63 = 0.87 ≥ 0.5,
        // dot(x, p1) = -0.15 - 0.04 - 0.03 + 0.09 = -0.13 < 0.5, so node 0
        // hears itself and token 0 only.
        let p = |n: &str| params.get(n).unwrap().data.clone();
        let (w, asrc, adst, bias) = (p("gnn.l0.w"), p("gnn.l0.a_src"), p("gnn.l0.a_dst"), p("gnn.l0.bias"));
        let lin = |x: &[f64]| (0..d).map(|j| (0..d).map(|i| x[i] * w[i * d + j]).sum::<f64>()).collect::<Vec<_>>();
        let (wx, wp) = (lin(&features), lin(&labels[..4]));
        let s = |v: &[f64], a: &[f64]| v.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
        let leaky = |z: f64| if z > 0.0 { z } else { 0.2 * z };
        let e_self = leaky(s(&wx, &asrc) + s(&wx, &adst));
        let e_tok = leaky(s(&wp, &asrc) + s(&wx, &adst));
        let m = e_self.max(e_tok);
        let (a0, a1) = ((e_self - m).exp(), (e_tok - m).exp());
        let h: Vec<f64> = (0..d).map(|j| (a0 * wx[j] + a1 * wp[j]) / (a0 + a1) + bias[j]).collect();
        let mut z = h.clone();
        z.extend_from_slice(&features);
        let sp = |n: &str| state.store.get(n).unwrap().data.clone();
        let (w1, b1, w2, b2) = (sp("prompt.head.w1"), sp("prompt.head.b1"), sp("prompt.head.w2"), sp("prompt.head.b2"));
        let gelu = |x: f64| 0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh());
        let hid: Vec<f64> = (0..d).map(|j| gelu((0..2 * d).map(|i| z[i] * w1[i * d + j]).sum::<f64>() + b1[j])).collect();
        for c in 0..2 {
            let want = (0..d).map(|j| hid[j] * w2[j * 2 + c]).sum::<f64>() + b2[c];
            assert!((got[c] - want).abs() < 1e-6, "{} vs {want}", got[c]);
        }
    }

    #[test]
    fn tuning_lowers_loss_and_leaves_encoders_untouched() {
        let (g, gat, params, features) = context_fixture(2);
        let before = params.clone();
        let ctx = PromptContext {
            graph: &g,
            gnn: &gat,
            params: &params,
            features: &features,
            d: 4,
        };
        let cfg = PromptConfig {
            epochs: 30,
            ..PromptConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut state = PromptState::new(&features[..12], 4, &cfg, &mut rng).unwrap();
        let support = [(0, 0), (1, 0), (2, 1), (3, 1), (4, 2), (5, 2)];
        let trace = tune_prompt(&ctx, &mut state, &support, &cfg, 0).unwrap();
        assert!(trace.final_loss <= trace.losses[0]);
        assert!((trace.losses[0] - 3f64.ln()).abs() < 1e-12);
        assert_eq!(params, before);
        let preds = predict(&ctx, &state, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(preds.len(), 6);
    }

    #[test]
    fn zero_delta_keeps_text_embedding() {
        let cfg = PromptConfig::default();
        let state = PromptState::<f64>::new(&[1.0, 0.0, 0.0, 1.0], 2, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(state.delta(), &[0.0, 0.0]);
    }
}
