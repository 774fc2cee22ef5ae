//! N-way K-shot task sampling and the task file format.
//!
//! ```text
//! # n_way=3 k_shot=5 q_size=10 groups=5 tasks_per_group=50 seed=0 test_classes=0,1,2
//! 0	0	2,0,1	17:2,40:2,...	3:2,...
//! ```
//! Data lines hold `group`, `task`, classes, support and query; pairs are
//! `node:class`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{data_lines, parse_err, parse_usize, TextAttributedGraph};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotTask {
    pub classes: Vec<usize>,
    /// `(node, class)`, class-major in `classes` order.
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl FewShotTask {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    /// Position of `class` in `classes`.
    pub fn class_index(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// Checks sizes, per-class counts, disjointness and labels against `g`.
    pub fn validate(&self, g: &TextAttributedGraph, k: usize, q: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Integrity(msg));
        let n = self.n_way();
        if self.classes.iter().collect::<BTreeSet<_>>().len() != n {
            return bad(format!("duplicate classes in {:?}", self.classes));
        }
        if self.support.len() != n * k || self.query.len() != n * q {
            return bad(format!(
                "expected {} support and {} query nodes, got {} and {}",
                n * k,
                n * q,
                self.support.len(),
                self.query.len()
            ));
        }
        let mut seen = BTreeSet::new();
        for (set, per) in [(&self.support, k), (&self.query, q)] {
            for (i, &(v, c)) in set.iter().enumerate() {
                g.check_node(v)?;
                if !seen.insert(v) {
                    return bad(format!("node {v} appears twice"));
                }
                if c != self.classes[i / per] {
                    return bad(format!("node {v} out of class-major order"));
                }
                if g.label(v) != Some(c) {
                    return bad(format!("node {v} is not labeled {c}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_size: usize,
    pub groups: usize,
    pub tasks_per_group: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 3,
            q_size: 10,
            groups: 5,
            tasks_per_group: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSet {
    pub spec: TaskSpec,
    pub test_classes: Vec<usize>,
    pub groups: Vec<Vec<FewShotTask>>,
}

impl TaskSet {
    /// `(group, task index, task)` in file order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &FewShotTask)> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| g.iter().enumerate().map(move |(ti, t)| (gi, ti, t)))
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_tsv(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "# n_way={} k_shot={} q_size={} groups={} tasks_per_group={} seed={} test_classes={}\n",
            s.n_way,
            s.k_shot,
            s.q_size,
            s.groups,
            s.tasks_per_group,
            s.seed,
            join(self.test_classes.iter())
        );
        let pairs = |p: &[(usize, usize)]| join(p.iter().map(|(v, c)| format!("{v}:{c}")));
        for (g, t, task) in self.iter() {
            let _ = writeln!(
                out,
                "{g}\t{t}\t{}\t{}\t{}",
                join(task.classes.iter()),
                pairs(&task.support),
                pairs(&task.query)
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(Error::file(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).map_err(Error::file(path))?;
        Self::parse(&content, path)
    }

    /// Parses a task file; `path` only labels errors.
    pub fn parse(content: &str, path: &Path) -> Result<Self> {
        let header = content
            .lines()
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| parse_err(path, 1, "missing `#` header"))?;
        let mut spec = TaskSpec::default();
        let mut test_classes = Vec::new();
        for field in header.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| parse_err(path, 1, format!("bad header field `{field}`")))?;
            let num = || parse_usize(path, 1, v, k);
            match k {
                "n_way" => spec.n_way = num()?,
                "k_shot" => spec.k_shot = num()?,
                "q_size" => spec.q_size = num()?,
                "groups" => spec.groups = num()?,
                "tasks_per_group" => spec.tasks_per_group = num()?,
                "seed" => spec.seed = v.parse().map_err(|_| parse_err(path, 1, format!("invalid seed `{v}`")))?,
                "test_classes" => test_classes = split_ids(path, 1, v, "class")?,
                _ => return Err(parse_err(path, 1, format!("unknown header field `{k}`"))),
            }
        }
        let mut groups: Vec<Vec<FewShotTask>> = vec![Vec::new(); spec.groups];
        for (line, l) in data_lines(content) {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != 5 {
                return Err(parse_err(path, line, "expected 5 tab-separated columns"));
            }
            let g = parse_usize(path, line, cols[0], "group")?;
            let t = parse_usize(path, line, cols[1], "task")?;
            let slot = groups
                .get_mut(g)
                .ok_or_else(|| parse_err(path, line, format!("group {g} beyond header count")))?;
            if t != slot.len() {
                return Err(parse_err(path, line, format!("task {t} out of order")));
            }
            slot.push(FewShotTask {
                classes: split_ids(path, line, cols[2], "class")?,
                support: split_pairs(path, line, cols[3])?,
                query: split_pairs(path, line, cols[4])?,
            });
        }
        Ok(Self {
            spec,
            test_classes,
            groups,
        })
    }
}

fn join<D: std::fmt::Display>(items: impl Iterator<Item = D>) -> String {
    items.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split_ids(path: &Path, line: usize, s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|x| !x.is_empty())
        .map(|x| parse_usize(path, line, x, what))
        .collect()
}

fn split_pairs(path: &Path, line: usize, s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .filter(|x| !x.is_empty())
        .map(|p| {
            let (v, c) = p
                .split_once(':')
                .ok_or_else(|| parse_err(path, line, format!("expected `node:class`, got `{p}`")))?;
            Ok((parse_usize(path, line, v, "node")?, parse_usize(path, line, c, "class")?))
        })
        .collect()
}

/// Draws `groups × tasks_per_group` tasks. Each picks `n_way` classes from
/// `test_classes`, then `k_shot + q_size` nodes per class, all without
/// replacement.
pub fn sample_tasks(
    g: &TextAttributedGraph,
    test_classes: &[usize],
    spec: &TaskSpec,
    rng: &mut impl Rng,
) -> Result<TaskSet> {
    let (n, k, q) = (spec.n_way, spec.k_shot, spec.q_size);
    if n < 2 || k == 0 || q == 0 {
        return Err(Error::Config(format!("need n_way ≥ 2, k_shot ≥ 1 and q_size ≥ 1; got {n}, {k}, {q}")));
    }
    let unique: BTreeSet<_> = test_classes.iter().collect();
    if unique.len() != test_classes.len() {
        return Err(Error::Config(format!("duplicate test classes in {test_classes:?}")));
    }
    if test_classes.len() < n {
        return Err(Error::Config(format!(
            "{n}-way tasks need at least {n} test classes, got {}",
            test_classes.len()
        )));
    }
    let pools: Vec<Vec<usize>> = test_classes.iter().map(|&c| g.nodes_of_class(c)).collect();
    for (&c, pool) in test_classes.iter().zip(&pools) {
        if pool.len() < k + q {
            return Err(Error::InsufficientClass {
                class: c,
                have: pool.len(),
                need: k + q,
            });
        }
    }
    let groups = (0..spec.groups)
        .map(|_| {
            (0..spec.tasks_per_group)
                .map(|_| {
                    let picks = index::sample(rng, test_classes.len(), n).into_vec();
                    let mut task = FewShotTask {
                        classes: picks.iter().map(|&i| test_classes[i]).collect(),
                        support: Vec::with_capacity(n * k),
                        query: Vec::with_capacity(n * q),
                    };
                    for &i in &picks {
                        let pool = &pools[i];
                        let chosen = index::sample(rng, pool.len(), k + q).into_vec();
                        let c = test_classes[i];
                        task.support.extend(chosen[..k].iter().map(|&j| (pool[j], c)));
                        task.query.extend(chosen[k..].iter().map(|&j| (pool[j], c)));
                    }
                    task
                })
                .collect()
        })
        .collect();
    Ok(TaskSet {
        spec: spec.clone(),
        test_classes: test_classes.to_vec(),
        groups,
    })
}
