//! Text-attributed graph storage and file formats.
//!
//! Nodes file: `id<TAB>label_id<TAB>text` per line (label may be empty), or
//! JSON lines `{"id": 0, "label": 1, "text": "..."}`.
//! Edges file: `src<TAB>dst` per line.
//! Label texts file: `label_id<TAB>label text` per line.
//! Blank lines and lines starting with `#` are skipped everywhere.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// A graph whose nodes carry raw text, stored as CSR with sorted rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextAttributedGraph {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    texts: Vec<String>,
    labels: Vec<Option<usize>>,
    label_texts: BTreeMap<usize, String>,
    directed: bool,
}

impl TextAttributedGraph {
    /// Builds a validated graph. Undirected inputs are symmetrized and
    /// duplicate arcs collapse to one.
    pub fn new(
        texts: Vec<String>,
        labels: Vec<Option<usize>>,
        mut label_texts: BTreeMap<usize, String>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        directed: bool,
    ) -> Result<Self> {
        let n = texts.len();
        if labels.len() != n {
            return Err(Error::Integrity(format!("{} texts but {} labels", n, labels.len())));
        }
        let mut arcs = Vec::new();
        for (u, v) in edges {
            for x in [u, v] {
                if x >= n {
                    return Err(Error::Integrity(format!("edge ({u}, {v}) references missing node {x}")));
                }
            }
            arcs.push((u, v));
            if !directed && u != v {
                arcs.push((v, u));
            }
        }
        arcs.sort_unstable();
        arcs.dedup();
        let mut offsets = vec![0; n + 1];
        for &(u, _) in &arcs {
            offsets[u + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let targets = arcs.into_iter().map(|(_, v)| v).collect();
        for c in labels.iter().flatten() {
            label_texts.entry(*c).or_insert_with(|| format!("class {c}"));
        }
        Ok(Self {
            offsets,
            targets,
            texts,
            labels,
            label_texts,
            directed,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.texts.len()
    }

    /// Number of stored directed arcs (an undirected edge counts twice).
    pub fn num_arcs(&self) -> usize {
        self.targets.len()
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Out-neighbors of `v` in ascending id order.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// CSR position of arc `u → v`, if present.
    pub fn arc_index(&self, u: usize, v: usize) -> Option<usize> {
        self.neighbors(u).binary_search(&v).ok().map(|i| self.offsets[u] + i)
    }

    pub fn has_arc(&self, u: usize, v: usize) -> bool {
        self.arc_index(u, v).is_some()
    }

    /// All arcs `(src, dst)` in CSR order.
    pub fn arcs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| self.neighbors(u).iter().map(move |&v| (u, v)))
    }

    pub fn text(&self, v: usize) -> &str {
        &self.texts[v]
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn label(&self, v: usize) -> Option<usize> {
        self.labels[v]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn label_text(&self, class: usize) -> Option<&str> {
        self.label_texts.get(&class).map(String::as_str)
    }

    pub fn label_texts(&self) -> &BTreeMap<usize, String> {
        &self.label_texts
    }

    /// Distinct class ids carried by labeled nodes, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.labels.iter().flatten().copied().collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Labeled nodes of `class`, ascending.
    pub fn nodes_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&v| self.labels[v] == Some(class)).collect()
    }

    pub fn check_node(&self, v: usize) -> Result<()> {
        if v < self.num_nodes() {
            Ok(())
        } else {
            Err(Error::NodeOutOfRange {
                node: v,
                len: self.num_nodes(),
            })
        }
    }
}

/// A target node with (up to a cap of) its first-order neighbors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EgoGraph {
    pub target: usize,
    /// Global ids; `members[0] == target`.
    pub members: Vec<usize>,
    /// Induced arcs in local ids.
    pub edges: Vec<(usize, usize)>,
    pub size_cap: usize,
}

/// Default neighbor cap for ego graphs.
pub const EGO_CAP: usize = 100;

/// Ego graph of `v`: the node plus its first `cap` neighbors in ascending
/// id order, with the induced arcs among them.
pub fn extract_ego_graph(g: &TextAttributedGraph, v: usize, cap: usize) -> Result<EgoGraph> {
    g.check_node(v)?;
    let mut members = vec![v];
    members.extend(g.neighbors(v).iter().copied().filter(|&u| u != v).take(cap));
    let local: HashMap<usize, usize> = members.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let mut edges = Vec::new();
    for (i, &u) in members.iter().enumerate() {
        for w in g.neighbors(u) {
            if let Some(&j) = local.get(w) {
                edges.push((i, j));
            }
        }
    }
    Ok(EgoGraph {
        target: v,
        members,
        edges,
        size_cap: cap,
    })
}

#[derive(Deserialize)]
struct JsonNode {
    id: usize,
    #[serde(default)]
    label: Option<usize>,
    #[serde(default)]
    text: String,
}

pub(crate) fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub(crate) fn data_lines(content: &str) -> impl Iterator<Item = (usize, &str)> {
    content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

pub(crate) fn parse_usize(path: &Path, line: usize, field: &str, what: &str) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid {what} `{field}`")))
}

fn read_nodes(path: &Path) -> Result<(Vec<String>, Vec<Option<usize>>)> {
    let content = fs::read_to_string(path).map_err(Error::file(path))?;
    let mut records: BTreeMap<usize, (String, Option<usize>)> = BTreeMap::new();
    for (line, l) in data_lines(&content) {
        let (id, label, text) = if l.trim_start().starts_with('{') {
            let rec: JsonNode = serde_json::from_str(l).map_err(|e| parse_err(path, line, e.to_string()))?;
            (rec.id, rec.label, rec.text)
        } else {
            let mut parts = l.splitn(3, '\t');
            let id = parse_usize(path, line, parts.next().unwrap_or(""), "node id")?;
            let label = match parts.next() {
                Some(s) if !s.trim().is_empty() => Some(parse_usize(path, line, s, "label id")?),
                Some(_) => None,
                None => return Err(parse_err(path, line, "expected `id<TAB>label<TAB>text`")),
            };
            (id, label, parts.next().unwrap_or("").to_string())
        };
        if records.insert(id, (text, label)).is_some() {
            return Err(parse_err(path, line, format!("duplicate node id {id}")));
        }
    }
    if let Some((&last, _)) = records.iter().next_back() {
        if last + 1 != records.len() {
            return Err(Error::Integrity(format!(
                "{}: node ids must be 0..{}, found id {last}",
                path.display(),
                records.len()
            )));
        }
    }
    Ok(records.into_values().unzip())
}

fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let content = fs::read_to_string(path).map_err(Error::file(path))?;
    data_lines(&content)
        .map(|(line, l)| {
            let mut parts = l.split(['\t', ' ']).filter(|s| !s.is_empty());
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => Ok((
                    parse_usize(path, line, a, "source")?,
                    parse_usize(path, line, b, "target")?,
                )),
                _ => Err(parse_err(path, line, "expected `src<TAB>dst`")),
            }
        })
        .collect()
}

pub fn read_label_texts(path: &Path) -> Result<BTreeMap<usize, String>> {
    let content = fs::read_to_string(path).map_err(Error::file(path))?;
    data_lines(&content)
        .map(|(line, l)| {
            let (id, text) = l
                .split_once('\t')
                .ok_or_else(|| parse_err(path, line, "expected `label_id<TAB>label text`"))?;
            Ok((parse_usize(path, line, id, "label id")?, text.to_string()))
        })
        .collect()
}

/// Loads an undirected graph from node, edge and optional label-text files.
pub fn load_tag(nodes: &Path, edges: &Path, label_texts: Option<&Path>) -> Result<TextAttributedGraph> {
    load_tag_with(nodes, edges, label_texts, false)
}

pub fn load_tag_with(
    nodes: &Path,
    edges: &Path,
    label_texts: Option<&Path>,
    directed: bool,
) -> Result<TextAttributedGraph> {
    let (texts, labels) = read_nodes(nodes)?;
    let arcs = read_edges(edges)?;
    let lt = label_texts.map(read_label_texts).transpose()?.unwrap_or_default();
    let n = texts.len();
    if let Some(&(u, v)) = arcs.iter().find(|&&(u, v)| u >= n || v >= n) {
        return Err(Error::Integrity(format!(
            "{}: edge ({u}, {v}) references a node outside 0..{n}",
            edges.display()
        )));
    }
    TextAttributedGraph::new(texts, labels, lt, arcs, directed)
}

/// Writes the three files read by [`load_tag`]. Undirected edges are written once.
pub fn save_tag(g: &TextAttributedGraph, nodes: &Path, edges: &Path, label_texts: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(nodes).map_err(Error::file(nodes))?);
    for v in 0..g.num_nodes() {
        let label = g.label(v).map(|c| c.to_string()).unwrap_or_default();
        let text = g.text(v).replace(['\t', '\n', '\r'], " ");
        writeln!(w, "{v}\t{label}\t{text}")?;
    }
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(edges).map_err(Error::file(edges))?);
    for (u, v) in g.arcs() {
        if g.is_directed() || u <= v {
            writeln!(w, "{u}\t{v}")?;
        }
    }
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(label_texts).map_err(Error::file(label_texts))?);
    for (c, t) in g.label_texts() {
        writeln!(w, "{c}\t{t}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("node {i}")).collect()
    }

    fn graph(n: usize, edges: &[(usize, usize)]) -> TextAttributedGraph {
        TextAttributedGraph::new(texts(n), vec![None; n], BTreeMap::new(), edges.iter().copied(), false).unwrap()
    }

    #[test]
    fn single_undirected_edge_is_symmetrized() {
        let g = graph(3, &[(0, 1)]);
        assert_eq!(g.arcs().collect::<Vec<_>>(), vec![(0, 1), (1, 0)]);
        assert_eq!(g.offsets(), &[0, 1, 2, 2]);
    }

    #[test]
    fn duplicate_edges_collapse() {
        let g = graph(3, &[(0, 1), (1, 0), (0, 1), (2, 2), (2, 2)]);
        assert_eq!(g.num_arcs(), 3);
        assert!(g.has_arc(2, 2));
    }

    #[test]
    fn dangling_endpoint_is_rejected() {
        let r = TextAttributedGraph::new(texts(3), vec![None; 3], BTreeMap::new(), [(0, 5)], false);
        assert!(matches!(r, Err(Error::Integrity(_))));
    }

    #[test]
    fn directed_graph_keeps_orientation() {
        let g = TextAttributedGraph::new(texts(2), vec![None; 2], BTreeMap::new(), [(0, 1)], true).unwrap();
        assert!(g.has_arc(0, 1));
        assert!(!g.has_arc(1, 0));
    }

    #[test]
    fn labeled_classes_always_have_label_text() {
        let g = TextAttributedGraph::new(texts(2), vec![Some(3), None], BTreeMap::new(), [], false).unwrap();
        assert_eq!(g.label_text(3), Some("class 3"));
    }

    #[test]
    fn ego_graph_of_isolated_node() {
        let g = graph(4, &[(1, 2)]);
        let ego = extract_ego_graph(&g, 0, EGO_CAP).unwrap();
        assert_eq!(ego.members, vec![0]);
        assert!(ego.edges.is_empty());
    }

    #[test]
    fn ego_graph_below_cap() {
        let g = graph(5, &[(0, 1), (0, 2), (0, 3), (1, 2), (3, 4)]);
        let ego = extract_ego_graph(&g, 0, EGO_CAP).unwrap();
        assert_eq!(ego.members, vec![0, 1, 2, 3]);
        // 0-1, 0-2, 0-3, 1-2 in both directions; 3-4 is outside.
        assert_eq!(ego.edges.len(), 8);
        assert!(ego.edges.contains(&(1, 2)) && ego.edges.contains(&(2, 1)));
    }

    #[test]
    fn ego_graph_caps_at_hundred_lowest_ids() {
        let edges: Vec<_> = (1..=150).map(|u| (0, u)).collect();
        let g = graph(151, &edges);
        let ego = extract_ego_graph(&g, 0, EGO_CAP).unwrap();
        assert_eq!(ego.members.len(), 101);
        assert_eq!(ego.members[0], 0);
        assert_eq!(*ego.members.last().unwrap(), 100);
        assert_eq!(extract_ego_graph(&g, 0, EGO_CAP).unwrap(), ego);
    }

    #[test]
    fn ego_graph_out_of_range() {
        let g = graph(2, &[]);
        assert!(matches!(extract_ego_graph(&g, 2, 5), Err(Error::NodeOutOfRange { .. })));
    }
}
