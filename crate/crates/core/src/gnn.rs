//! Multi-head graph attention over in-neighbors plus a self-loop.
//!
//! Hidden layers concatenate heads and apply the nonlinearity; the last
//! layer averages heads.

use autograd::{ParamStore, Real, Tape, Var};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TextAttributedGraph;

pub const PREFIX: &str = "gnn.";

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub layers: usize,
    /// Output width of every layer; equals the LM hidden size.
    pub hidden: usize,
    pub heads: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl GnnConfig {
    pub fn new(hidden: usize) -> Self {
        Self {
            layers: 2,
            hidden,
            heads: 4,
            activation: Activation::Elu,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 {
            return Err(Error::Config("gnn layers, heads and hidden size must be positive".into()));
        }
        if self.layers > 1 && !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "gnn hidden size {} must be divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    fn is_last(&self, l: usize) -> bool {
        l + 1 == self.layers
    }

    /// Per-head width of layer `l`.
    fn head_dim(&self, l: usize) -> usize {
        if self.is_last(l) {
            self.hidden
        } else {
            self.hidden / self.heads
        }
    }
}

/// Message-passing structure: arcs `src → dst` sorted by `(dst, src)`,
/// one self-loop per node, and an optional additive attention bias per arc.
#[derive(Clone, Debug, PartialEq)]
pub struct GatGraph {
    pub n: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// Arcs into `v` occupy `dst_offsets[v]..dst_offsets[v + 1]`.
    pub dst_offsets: Vec<usize>,
    pub log_bias: Option<Vec<f64>>,
}

impl GatGraph {
    /// Builds from arcs `(src, dst)`; duplicates and given self-loops merge
    /// with the implicit self-loop.
    pub fn new(n: usize, arcs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut pairs: Vec<(usize, usize)> = (0..n).map(|v| (v, v)).collect();
        for (s, d) in arcs {
            if s >= n || d >= n {
                return Err(Error::NodeOutOfRange { node: s.max(d), len: n });
            }
            pairs.push((d, s));
        }
        pairs.sort_unstable();
        pairs.dedup();
        let mut dst_offsets = vec![0; n + 1];
        for &(d, _) in &pairs {
            dst_offsets[d + 1] += 1;
        }
        for v in 0..n {
            dst_offsets[v + 1] += dst_offsets[v];
        }
        Ok(Self {
            n,
            dst: pairs.iter().map(|p| p.0).collect(),
            src: pairs.iter().map(|p| p.1).collect(),
            dst_offsets,
            log_bias: None,
        })
    }

    /// Whole-graph structure; arcs `u → v` of the host graph.
    pub fn from_tag(g: &TextAttributedGraph) -> Self {
        Self::new(g.num_nodes(), g.arcs()).expect("host arcs are in range")
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    /// Sets a bias per arc, e.g. log aggregation weights.
    pub fn with_log_bias(mut self, f: impl Fn(usize, usize) -> f64) -> Self {
        self.log_bias = Some(self.src.iter().zip(&self.dst).map(|(&s, &d)| f(s, d)).collect());
        self
    }
}

/// `hidden` is `[n, d]`; `attention[l]` is `[E, heads]` aligned with the
/// graph's arcs.
pub struct GnnOutput {
    pub hidden: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Gat {
    pub config: GnnConfig,
}

fn name(l: usize, rest: &str) -> String {
    format!("{PREFIX}l{l}.{rest}")
}

/// `[H·F, F]` matrix averaging `H` heads.
fn head_average<T: Real>(heads: usize, f: usize) -> Vec<T> {
    let w = T::c(1.0 / heads as f64);
    let mut m = vec![T::zero(); heads * f * f];
    for h in 0..heads {
        for j in 0..f {
            m[(h * f + j) * f + j] = w;
        }
    }
    m
}

impl Gat {
    pub fn new(config: GnnConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let c = &self.config;
        for l in 0..c.layers {
            let width = c.heads * c.head_dim(l);
            store.xavier(&name(l, "w"), c.hidden, width, rng);
            store.xavier(&name(l, "a_src"), width, 1, rng);
            store.xavier(&name(l, "a_dst"), width, 1, rng);
            store.zeros(&name(l, "bias"), &[c.hidden]);
        }
    }

    /// Differentiable forward over `graph` with node features `x` `[n, d]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        graph: &GatGraph,
        x: Var,
        rng: &mut impl Rng,
    ) -> Result<GnnOutput> {
        let c = &self.config;
        let shape = tape.shape(x).to_vec();
        if shape != [graph.n, c.hidden] {
            return Err(autograd::AutogradError::Shape {
                op: "gnn_forward",
                lhs: shape,
                rhs: vec![graph.n, c.hidden],
            }
            .into());
        }
        let heads = c.heads;
        let e = graph.num_edges();
        let bias = match &graph.log_bias {
            Some(b) => {
                let v = b.iter().flat_map(|&x| std::iter::repeat_n(T::c(x), heads)).collect();
                Some(tape.constant(&[e, heads], v)?)
            }
            None => None,
        };
        let mut h = x;
        let mut attention = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let f = c.head_dim(l);
            let inp = tape.dropout(h, c.dropout, rng)?;
            let w = tape.param(store, &name(l, "w"))?;
            let wh = tape.matmul(inp, w, false)?;
            let score = |tape: &mut Tape<T>, which: &str| -> Result<Var> {
                let a = tape.param(store, &name(l, which))?;
                let s = tape.mul_row(wh, a)?;
                let s = tape.reshape(s, &[graph.n, heads, f])?;
                Ok(tape.sum_last(s)?)
            };
            let s_src = score(tape, "a_src")?;
            let s_dst = score(tape, "a_dst")?;
            let es = tape.gather_rows(s_src, &graph.src)?;
            let ed = tape.gather_rows(s_dst, &graph.dst)?;
            let mut logits = tape.add(es, ed)?;
            logits = tape.leaky_relu(logits, T::c(LEAKY_SLOPE))?;
            if let Some(b) = bias {
                logits = tape.add(logits, b)?;
            }
            let alpha = tape.segment_softmax(logits, &graph.dst, graph.n)?;
            attention.push(alpha);
            let msg = tape.gather_rows(wh, &graph.src)?;
            let msg = tape.reshape(msg, &[e * heads, f])?;
            let a = tape.reshape(alpha, &[e * heads])?;
            let msg = tape.mul_groups(msg, a)?;
            let msg = tape.reshape(msg, &[e, heads * f])?;
            let mut out = tape.scatter_add_rows(msg, &graph.dst, graph.n)?;
            if c.is_last(l) && heads > 1 {
                let avg = tape.constant(&[heads * f, f], head_average(heads, f))?;
                out = tape.matmul(out, avg, false)?;
            }
            let b = tape.param(store, &name(l, "bias"))?;
            out = tape.add_row(out, b)?;
            if !c.is_last(l) {
                out = match c.activation {
                    Activation::Elu => tape.elu(out, T::one())?,
                    Activation::Relu => tape.relu(out)?,
                };
            }
            h = out;
        }
        Ok(GnnOutput { hidden: h, attention })
    }

    /// Layer-by-layer propagation with full neighborhoods, destination nodes
    /// processed in batches of `batch_size`. No tape, no dropout.
    pub fn full_neighbor_inference<T: Real>(
        &self,
        store: &ParamStore<T>,
        graph: &GatGraph,
        x: &[T],
        batch_size: usize,
    ) -> Result<Vec<T>> {
        let c = &self.config;
        let (n, d, heads) = (graph.n, c.hidden, c.heads);
        if x.len() != n * d {
            return Err(autograd::AutogradError::Shape {
                op: "full_neighbor_inference",
                lhs: vec![x.len()],
                rhs: vec![n, d],
            }
            .into());
        }
        let get = |key: String| -> Result<&[T]> {
            store
                .get(&key)
                .map(|p| p.data.as_slice())
                .ok_or_else(|| autograd::AutogradError::UnknownParam(key).into())
        };
        let slope = T::c(LEAKY_SLOPE);
        let batch_size = batch_size.max(1);
        let mut h = x.to_vec();
        for l in 0..c.layers {
            let f = c.head_dim(l);
            let width = heads * f;
            let (w, a_src, a_dst, bias) = (
                get(name(l, "w"))?,
                get(name(l, "a_src"))?,
                get(name(l, "a_dst"))?,
                get(name(l, "bias"))?,
            );
            let mut wh = vec![T::zero(); n * width];
            T::gemm(n, d, width, &h, (d, 1), w, (width, 1), T::zero(), &mut wh, (width, 1));
            let score = |a: &[T]| -> Vec<T> {
                let mut s = Vec::with_capacity(n * heads);
                for row in wh.chunks(width.max(1)) {
                    for hd in 0..heads {
                        s.push((0..f).map(|j| row[hd * f + j] * a[hd * f + j]).sum());
                    }
                }
                s
            };
            let (s_src, s_dst) = (score(a_src), score(a_dst));
            let nodes: Vec<usize> = (0..n).collect();
            let agg: Vec<Vec<T>> = nodes
                .par_chunks(batch_size)
                .map(|batch| {
                    let mut out = vec![T::zero(); batch.len() * width];
                    for (bi, &v) in batch.iter().enumerate() {
                        let arcs = graph.dst_offsets[v]..graph.dst_offsets[v + 1];
                        let row = &mut out[bi * width..(bi + 1) * width];
                        for hd in 0..heads {
                            let logit = |e: usize| {
                                let z = s_src[graph.src[e] * heads + hd] + s_dst[v * heads + hd];
                                let z = if z > T::zero() { z } else { slope * z };
                                match &graph.log_bias {
                                    Some(b) => z + T::c(b[e]),
                                    None => z,
                                }
                            };
                            let max = arcs.clone().map(logit).fold(T::neg_infinity(), T::max);
                            let ex: Vec<T> = arcs.clone().map(|e| (logit(e) - max).exp()).collect();
                            let denom: T = ex.iter().copied().sum();
                            for (e, z) in arcs.clone().zip(&ex) {
                                let alpha = *z / denom;
                                let src = &wh[graph.src[e] * width..(graph.src[e] + 1) * width];
                                for j in 0..f {
                                    row[hd * f + j] += src[hd * f + j] * alpha;
                                }
                            }
                        }
                    }
                    out
                })
                .collect();
            let agg = agg.concat();
            let mut next = if c.is_last(l) && heads > 1 {
                let avg = head_average::<T>(heads, f);
                let mut o = vec![T::zero(); n * f];
                T::gemm(n, width, f, &agg, (width, 1), &avg, (f, 1), T::zero(), &mut o, (f, 1));
                o
            } else {
                agg
            };
            for row in next.chunks_mut(d) {
                for (v, &b) in row.iter_mut().zip(bias) {
                    *v += b;
                    if !c.is_last(l) {
                        *v = match c.activation {
                            Activation::Elu if *v <= T::zero() => v.exp_m1(),
                            Activation::Relu => v.max(T::zero()),
                            _ => *v,
                        };
                    }
                }
            }
            h = next;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize) -> (Gat, ParamStore<f64>) {
        let gat = Gat::new(GnnConfig {
            dropout: 0.0,
            ..GnnConfig::new(d)
        })
        .unwrap();
        let mut store = ParamStore::new();
        gat.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        (gat, store)
    }

    fn features(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn forward(gat: &Gat, store: &ParamStore<f64>, g: &GatGraph, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut t = Tape::eval();
        let xv = t.constant(&[g.n, gat.config.hidden], x.to_vec()).unwrap();
        let out = gat.forward(&mut t, store, g, xv, &mut rand::rng()).unwrap();
        let att = out.attention.iter().map(|&a| t.value(a).to_vec()).collect();
        (t.value(out.hidden).to_vec(), att)
    }

    fn undirected(edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
        edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect()
    }

    #[test]
    fn graph_adds_self_loops_and_sorts_by_destination() {
        let g = GatGraph::new(3, [(0, 1), (2, 1), (1, 1)]).unwrap();
        assert_eq!(g.dst, vec![0, 1, 1, 1, 2]);
        assert_eq!(g.src, vec![0, 0, 1, 2, 2]);
        assert_eq!(g.dst_offsets, vec![0, 1, 4, 5]);
        assert!(GatGraph::new(2, [(0, 2)]).is_err());
    }

    #[test]
    fn isolated_node_transforms_its_own_feature() {
        let (gat, store) = setup(8);
        let g = GatGraph::new(1, []).unwrap();
        let x = features(1, 8, 0);
        let (h, att) = forward(&gat, &store, &g, &x);
        assert!(att.iter().all(|a| a.iter().all(|&v| v == 1.0)));
        // Attention weight 1 on the self-loop: layer = bias + W x, heads averaged.
        let w0 = &store.get("gnn.l0.w").unwrap().data;
        let mut h1 = [0.0; 8];
        for j in 0..8 {
            h1[j] = (0..8).map(|i| x[i] * w0[i * 8 + j]).sum::<f64>();
            h1[j] = if h1[j] > 0.0 { h1[j] } else { h1[j].exp_m1() };
        }
        let w1 = &store.get("gnn.l1.w").unwrap().data;
        for j in 0..8 {
            let mean: f64 = (0..4)
                .map(|hd| (0..8).map(|i| h1[i] * w1[i * 32 + hd * 8 + j]).sum::<f64>())
                .sum::<f64>()
                / 4.0;
            assert!((h[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_sums_to_one_per_node_and_head() {
        let (gat, store) = setup(8);
        let g = GatGraph::new(5, undirected(&[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)])).unwrap();
        let (_, att) = forward(&gat, &store, &g, &features(5, 8, 1));
        for a in att {
            for v in 0..5 {
                for hd in 0..4 {
                    let s: f64 = (g.dst_offsets[v]..g.dst_offsets[v + 1]).map(|e| a[e * 4 + hd]).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    /// Dense recomputation with explicit adjacency and per-head loops.
    fn dense_oracle(store: &ParamStore<f64>, adj: &[Vec<bool>], x: &[f64], d: usize, heads: usize) -> Vec<f64> {
        let n = adj.len();
        let mut h = x.to_vec();
        for l in 0..2 {
            let last = l == 1;
            let f = if last { d } else { d / heads };
            let p = |s: &str| store.get(&format!("gnn.l{l}.{s}")).unwrap().data.clone();
            let (w, asrc, adst, bias) = (p("w"), p("a_src"), p("a_dst"), p("bias"));
            let width = heads * f;
            let wh: Vec<Vec<f64>> = (0..n)
                .map(|v| (0..width).map(|j| (0..d).map(|i| h[v * d + i] * w[i * width + j]).sum()).collect())
                .collect();
            let mut out = vec![0.0; n * d];
            for v in 0..n {
                let mut acc = vec![0.0; width];
                for hd in 0..heads {
                    let sc = |u: usize, a: &[f64]| (0..f).map(|j| wh[u][hd * f + j] * a[hd * f + j]).sum::<f64>();
                    let nb: Vec<usize> = (0..n).filter(|&u| u == v || adj[u][v]).collect();
                    let z: Vec<f64> = nb
                        .iter()
                        .map(|&u| {
                            let e = sc(u, &asrc) + sc(v, &adst);
                            if e > 0.0 { e } else { 0.2 * e }
                        })
                        .collect();
                    let m = z.iter().cloned().fold(f64::MIN, f64::max);
                    let tot: f64 = z.iter().map(|e| (e - m).exp()).sum();
                    for (k, &u) in nb.iter().enumerate() {
                        let a = (z[k] - m).exp() / tot;
                        for j in 0..f {
                            acc[hd * f + j] += a * wh[u][hd * f + j];
                        }
                    }
                }
                for j in 0..d {
                    let val = if last {
                        (0..heads).map(|hd| acc[hd * f + j]).sum::<f64>() / heads as f64 + bias[j]
                    } else {
                        let y = acc[j] + bias[j];
                        if y > 0.0 { y } else { y.exp_m1() }
                    };
                    out[v * d + j] = val;
                }
            }
            h = out;
        }
        h
    }

    #[test]
    fn matches_dense_oracle_on_toy_graph() {
        let (gat, mut store) = setup(8);
        for (i, v) in store.get_mut("gnn.l0.bias").unwrap().data.iter_mut().enumerate() {
            *v = 0.1 * i as f64 - 0.3;
        }
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (1, 4)];
        let g = GatGraph::new(5, undirected(&edges)).unwrap();
        let mut adj = vec![vec![false; 5]; 5];
        for &(a, b) in &edges {
            adj[a][b] = true;
            adj[b][a] = true;
        }
        let x = features(5, 8, 3);
        let (h, _) = forward(&gat, &store, &g, &x);
        let oracle = dense_oracle(&store, &adj, &x, 8, 4);
        let diff = h.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    fn random_graph(n: usize, m: usize, seed: u64) -> GatGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edges: Vec<_> = (0..m).map(|_| (rng.random_range(0..n), rng.random_range(0..n))).collect();
        GatGraph::new(n, undirected(&edges)).unwrap()
    }

    #[test]
    fn inference_is_batch_invariant_and_matches_tape() {
        let (gat, store) = setup(8);
        let g = random_graph(50, 120, 5).with_log_bias(|s, d| ((s + 2 * d) % 5) as f64 * 0.1);
        let x = features(50, 8, 6);
        let all = gat.full_neighbor_inference(&store, &g, &x, 50).unwrap();
        let seven = gat.full_neighbor_inference(&store, &g, &x, 7).unwrap();
        assert_eq!(all, seven);
        assert_eq!(all, gat.full_neighbor_inference(&store, &g, &x, 50).unwrap());
        let (h, _) = forward(&gat, &store, &g, &x);
        let diff = h.iter().zip(&all).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn permutation_equivariance() {
        let (gat, store) = setup(8);
        let n = 20;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let edges: Vec<_> = (0..40).map(|_| (rng.random_range(0..n), rng.random_range(0..n))).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let x = features(n, 8, 9);
        let mut px = vec![0.0; n * 8];
        for v in 0..n {
            px[perm[v] * 8..perm[v] * 8 + 8].copy_from_slice(&x[v * 8..v * 8 + 8]);
        }
        let g = GatGraph::new(n, undirected(&edges)).unwrap();
        let pedges: Vec<_> = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let pg = GatGraph::new(n, undirected(&pedges)).unwrap();
        let (h, _) = forward(&gat, &store, &g, &x);
        let (ph, _) = forward(&gat, &store, &pg, &px);
        for v in 0..n {
            for j in 0..8 {
                assert!((h[v * 8 + j] - ph[perm[v] * 8 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_depends_only_on_l_hop_neighborhood() {
        let (gat, store) = setup(8);
        // Path 0-1-2-3: node 3 is three hops from node 0.
        let g = GatGraph::new(4, undirected(&[(0, 1), (1, 2), (2, 3)])).unwrap();
        let x = features(4, 8, 10);
        let mut y = x.clone();
        y[3 * 8] += 5.0;
        let (a, _) = forward(&gat, &store, &g, &x);
        let (b, _) = forward(&gat, &store, &g, &y);
        assert_eq!(a[..8], b[..8]);
        assert_ne!(a[8..16], b[8..16]);
    }

    #[test]
    fn isolated_node_ignores_other_features() {
        let (gat, store) = setup(8);
        let g = GatGraph::new(3, undirected(&[(0, 1)])).unwrap();
        let x = features(3, 8, 11);
        let mut y = x.clone();
        for v in y[..16].iter_mut() {
            *v *= -2.0;
        }
        assert_eq!(forward(&gat, &store, &g, &x).0[16..], forward(&gat, &store, &g, &y).0[16..]);
    }

    #[test]
    fn feature_shape_mismatch_is_an_error() {
        let (gat, store) = setup(8);
        let g = GatGraph::new(3, []).unwrap();
        let mut t = Tape::<f64>::eval();
        let x = t.constant(&[2, 8], vec![0.0; 16]).unwrap();
        assert!(gat.forward(&mut t, &store, &g, x, &mut rand::rng()).is_err());
        assert!(gat.full_neighbor_inference(&store, &g, &[0.0; 16], 2).is_err());
    }
}
