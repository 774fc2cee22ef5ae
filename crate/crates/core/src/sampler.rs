//! Random-walk subgraph sampling with normalization coefficients estimated
//! from pre-sampled subgraphs.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gnn::GatGraph;
use crate::graph::TextAttributedGraph;

/// Induced subgraph over the nodes visited by `r` walks.
#[derive(Clone, Debug, PartialEq)]
pub struct Subgraph {
    /// Global ids, ascending.
    pub members: Vec<usize>,
    /// Host arcs `(u, v)` with both ends in `members`, in local ids.
    pub edges: Vec<(usize, usize)>,
    /// Loss weight per member.
    pub node_norm: Vec<f64>,
    /// Aggregation weight per arc in `edges`.
    pub edge_norm: Vec<f64>,
    /// Walk roots, global ids, in draw order.
    pub roots: Vec<usize>,
}

impl Subgraph {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn local(&self, global: usize) -> Option<usize> {
        self.members.binary_search(&global).ok()
    }

    /// Message-passing structure in local ids. Non-unit edge weights enter
    /// the attention logits as `ln α`; self-loops get weight 1.
    pub fn gat_graph(&self) -> GatGraph {
        let g = GatGraph::new(self.len(), self.edges.iter().copied()).expect("local arcs are in range");
        if self.edge_norm.iter().all(|&a| a == 1.0) {
            return g;
        }
        let weight: HashMap<(usize, usize), f64> = self.edges.iter().copied().zip(self.edge_norm.iter().copied()).collect();
        g.with_log_bias(|s, d| weight.get(&(s, d)).map_or(0.0, |a| a.ln()))
    }
}

/// Samples `r` roots uniformly with replacement and walks `l` steps from
/// each; a walk at a node without neighbors stays put.
pub fn sample_subgraph(g: &TextAttributedGraph, r: usize, l: usize, rng: &mut impl Rng) -> Result<Subgraph> {
    let n = g.num_nodes();
    if n == 0 {
        return Err(Error::Config("cannot sample from an empty graph".into()));
    }
    if r == 0 {
        return Err(Error::Config("root count must be at least 1".into()));
    }
    let mut visited = Vec::with_capacity(r * (l + 1));
    let mut roots = Vec::with_capacity(r);
    for _ in 0..r {
        let mut v = rng.random_range(0..n);
        roots.push(v);
        visited.push(v);
        for _ in 0..l {
            let nb = g.neighbors(v);
            if !nb.is_empty() {
                v = nb[rng.random_range(0..nb.len())];
            }
            visited.push(v);
        }
    }
    visited.sort_unstable();
    visited.dedup();
    let members = visited;
    let mut edges = Vec::new();
    for (lu, &u) in members.iter().enumerate() {
        for &v in g.neighbors(u) {
            if let Ok(lv) = members.binary_search(&v) {
                edges.push((lu, lv));
            }
        }
    }
    Ok(Subgraph {
        node_norm: vec![1.0; members.len()],
        edge_norm: vec![1.0; edges.len()],
        members,
        edges,
        roots,
    })
}

/// Occurrence-based normalization: `λ_v = M / max(C_v, 1)` and
/// `α_uv = max(C_v, 1) / max(C_uv, 1)` for an arc into `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormCoeffs {
    pub samples: usize,
    pub node_counts: Vec<u64>,
    /// Indexed by host arc position (CSR order).
    pub arc_counts: Vec<u64>,
}

impl NormCoeffs {
    pub fn estimate(g: &TextAttributedGraph, r: usize, l: usize, pre_samples: usize, rng: &mut impl Rng) -> Result<Self> {
        if pre_samples == 0 {
            return Err(Error::Config("pre_samples must be at least 1".into()));
        }
        let mut node_counts = vec![0u64; g.num_nodes()];
        let mut arc_counts = vec![0u64; g.num_arcs()];
        for _ in 0..pre_samples {
            let s = sample_subgraph(g, r, l, rng)?;
            for &v in &s.members {
                node_counts[v] += 1;
            }
            for &(a, b) in &s.edges {
                let idx = g.arc_index(s.members[a], s.members[b]).expect("induced arc exists in host");
                arc_counts[idx] += 1;
            }
        }
        Ok(Self {
            samples: pre_samples,
            node_counts,
            arc_counts,
        })
    }

    pub fn node_weight(&self, v: usize) -> f64 {
        self.samples as f64 / self.node_counts[v].max(1) as f64
    }

    pub fn arc_weight(&self, g: &TextAttributedGraph, u: usize, v: usize) -> f64 {
        let cuv = g.arc_index(u, v).map_or(0, |i| self.arc_counts[i]);
        self.node_counts[v].max(1) as f64 / cuv.max(1) as f64
    }

    /// Fills `node_norm` and `edge_norm` of a sampled subgraph.
    pub fn apply(&self, g: &TextAttributedGraph, s: &mut Subgraph) {
        s.node_norm = s.members.iter().map(|&v| self.node_weight(v)).collect();
        s.edge_norm = s
            .edges
            .iter()
            .map(|&(a, b)| self.arc_weight(g, s.members[a], s.members[b]))
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, VecDeque};

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph(n: usize, edges: &[(usize, usize)]) -> TextAttributedGraph {
        TextAttributedGraph::new(vec![String::new(); n], vec![None; n], BTreeMap::new(), edges.to_vec(), false).unwrap()
    }

    fn hops_from(g: &TextAttributedGraph, roots: &[usize]) -> Vec<usize> {
        let mut dist = vec![usize::MAX; g.num_nodes()];
        let mut q = VecDeque::new();
        for &r in roots {
            dist[r] = 0;
            q.push_back(r);
        }
        while let Some(u) = q.pop_front() {
            for &v in g.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    q.push_back(v);
                }
            }
        }
        dist
    }

    #[test]
    fn zero_length_walk_keeps_roots() {
        let g = graph(10, &[(0, 1), (1, 2)]);
        let s = sample_subgraph(&g, 4, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut roots = s.roots.clone();
        roots.sort_unstable();
        roots.dedup();
        assert_eq!(s.members, roots);
    }

    #[test]
    fn isolated_root_stays_alone() {
        let g = graph(1, &[]);
        let s = sample_subgraph(&g, 1, 7, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.members, vec![0]);
        assert!(s.edges.is_empty());
    }

    #[test]
    fn path_walks_give_contiguous_segments() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        for seed in 0..500 {
            let l = (seed % 4) as usize;
            let s = sample_subgraph(&g, 1, l, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(s.members.windows(2).all(|w| w[1] == w[0] + 1));
            assert!(s.members.contains(&s.roots[0]));
            assert!(s.members.len() <= l + 1);
        }
    }

    #[test]
    fn induced_edges_are_exact_and_members_within_reach() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let edges: Vec<_> = (0..120).map(|_| (rng.random_range(0..60), rng.random_range(0..60))).collect();
        let edges: Vec<_> = edges.into_iter().filter(|(a, b)| a != b).collect();
        let g = graph(60, &edges);
        for seed in 0..50 {
            let s = sample_subgraph(&g, 5, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut expected = Vec::new();
            for (a, &u) in s.members.iter().enumerate() {
                for (b, &v) in s.members.iter().enumerate() {
                    if g.has_arc(u, v) {
                        expected.push((a, b));
                    }
                }
            }
            assert_eq!(s.edges, expected);
            let dist = hops_from(&g, &s.roots);
            assert!(s.members.iter().all(|&v| dist[v] <= 3));
        }
    }

    #[test]
    fn same_seed_same_subgraph() {
        let g = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]);
        let a = sample_subgraph(&g, 3, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_subgraph(&g, 3, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_arguments_are_errors() {
        assert!(sample_subgraph(&graph(0, &[]), 1, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(sample_subgraph(&graph(2, &[]), 0, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(NormCoeffs::estimate(&graph(2, &[]), 1, 1, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn always_sampled_node_has_smallest_weight_and_unseen_is_clipped() {
        // Star: walks from any leaf pass the hub within one step.
        let g = graph(7, &[(0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6)]);
        let c = NormCoeffs::estimate(&g, 2, 2, 300, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(c.node_counts[0], 300);
        let hub = c.node_weight(0);
        assert!((0..7).all(|v| c.node_weight(v) >= hub));
        let never = NormCoeffs {
            samples: 10,
            node_counts: vec![0],
            arc_counts: vec![],
        };
        assert_eq!(never.node_weight(0), 10.0);
    }

    #[test]
    fn self_loop_bias_is_zero_and_weights_are_positive() {
        let g = graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = NormCoeffs::estimate(&g, 2, 2, 100, &mut rng).unwrap();
        let mut s = sample_subgraph(&g, 2, 2, &mut rng).unwrap();
        c.apply(&g, &mut s);
        assert!(s.node_norm.iter().chain(&s.edge_norm).all(|&w| w > 0.0 && w.is_finite()));
        let gg = s.gat_graph();
        if let Some(b) = &gg.log_bias {
            for e in 0..gg.num_edges() {
                if gg.src[e] == gg.dst[e] {
                    assert_eq!(b[e], 0.0);
                }
            }
        }
    }

    #[test]
    fn cycle_coverage_matches_walk_enumeration() {
        // One 2-step walk on a 4-cycle covers a fixed node with probability
        // 1/4 (root) + 1/2 · 1/2 (adjacent root) + 1/4 · 1/2 (opposite root).
        let q = 0.25 + 0.5 * 0.5 + 0.25 * 0.5;
        let p = 1.0 - (1.0 - q) * (1.0 - q);
        let g = graph(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
        let m = 10_000;
        let c = NormCoeffs::estimate(&g, 2, 2, m, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let sigma = (p * (1.0 - p) / m as f64).sqrt();
        for v in 0..4 {
            let freq = c.node_counts[v] as f64 / m as f64;
            assert!((freq - p).abs() <= 3.0 * sigma, "node {v}: {freq} vs {p}");
        }
    }

    #[test]
    fn repeated_sampling_covers_connected_graph() {
        let n = 40;
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).chain((0..n).map(|i| (i, (i + 7) % n))).collect();
        let g = graph(n, &edges);
        let c = NormCoeffs::estimate(&g, 4, 4, 200, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert!(c.node_counts.iter().all(|&k| k > 0));
    }
}
