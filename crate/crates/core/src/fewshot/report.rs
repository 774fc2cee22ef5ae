//! Per-task records and group aggregation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fewshot::task::TaskSpec;
use crate::graph::{data_lines, parse_err, parse_usize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub group: usize,
    pub task: usize,
    pub correct: usize,
    pub total: usize,
}

impl TaskRecord {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_size: usize,
    pub group_means: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of the group means.
    pub std: f64,
    pub config: serde_json::Value,
}

/// Group means of task accuracies, then mean and std across groups.
pub fn aggregate(mode: &str, spec: &TaskSpec, records: &[TaskRecord], config: serde_json::Value) -> Result<EvalReport> {
    let groups = records.iter().map(|r| r.group + 1).max().unwrap_or(0);
    let mut sums = vec![(0.0, 0usize); groups];
    for r in records {
        if r.total == 0 {
            return Err(Error::Config(format!("task {}/{} has no queries", r.group, r.task)));
        }
        sums[r.group].0 += r.accuracy();
        sums[r.group].1 += 1;
    }
    if let Some(g) = sums.iter().position(|s| s.1 == 0) {
        return Err(Error::Config(format!("group {g} has no tasks")));
    }
    let group_means: Vec<f64> = sums.iter().map(|(s, n)| s / *n as f64).collect();
    let k = group_means.len().max(1) as f64;
    let mean = group_means.iter().sum::<f64>() / k;
    let std = (group_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / k).sqrt();
    Ok(EvalReport {
        mode: mode.to_string(),
        n_way: spec.n_way,
        k_shot: spec.k_shot,
        q_size: spec.q_size,
        group_means,
        mean,
        std,
        config,
    })
}

impl EvalReport {
    /// `mode N K Q group mean_acc` rows and an `overall mean std` row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# mode\tN\tK\tQ\tgroup\tmean_acc\n");
        for (g, m) in self.group_means.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{g}\t{m:.6}", self.mode, self.n_way, self.k_shot, self.q_size);
        }
        let _ = writeln!(out, "overall\t{:.6}\t{:.6}", self.mean, self.std);
        out
    }
}

pub fn records_to_tsv(records: &[TaskRecord]) -> String {
    let mut out = String::from("# group\ttask\tcorrect\ttotal\n");
    for r in records {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.group, r.task, r.correct, r.total);
    }
    out
}

pub fn load_records(path: &Path) -> Result<Vec<TaskRecord>> {
    let content = fs::read_to_string(path).map_err(Error::file(path))?;
    data_lines(&content)
        .map(|(line, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 4 {
                return Err(parse_err(path, line, "expected `group<TAB>task<TAB>correct<TAB>total`"));
            }
            Ok(TaskRecord {
                group: parse_usize(path, line, f[0], "group")?,
                task: parse_usize(path, line, f[1], "task")?,
                correct: parse_usize(path, line, f[2], "correct count")?,
                total: parse_usize(path, line, f[3], "total count")?,
            })
        })
        .collect()
}
