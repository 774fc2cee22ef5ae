//! Inference modes behind one trait, looked up by name.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use autograd::{archive, ParamStore, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fewshot::logreg::{fit_logistic_regression, LogRegConfig};
use crate::fewshot::report::TaskRecord;
use crate::fewshot::task::{FewShotTask, TaskSet};
use crate::gnn::GatGraph;
use crate::graph::TextAttributedGraph;
use crate::model::Model;
use crate::prompt::{predict, tune_prompt, PromptConfig, PromptContext, PromptState};
use crate::text::Vocabulary;

/// Everything a mode may read. Whole-graph features are computed once and
/// shared across tasks.
pub struct EvalContext<'a, T: Real> {
    pub graph: &'a TextAttributedGraph,
    pub vocab: &'a Vocabulary,
    pub model: &'a Model,
    pub params: &'a ParamStore<T>,
    pub batch_size: usize,
    pub prompt: PromptConfig,
    pub logreg: LogRegConfig,
    pub seed: u64,
    /// When set, tuned prompt parameters are archived here as
    /// `prompt_<stream>.bin`.
    pub prompt_dir: Option<PathBuf>,
    lm: OnceLock<Vec<T>>,
    gnn: OnceLock<Vec<T>>,
    random: OnceLock<Vec<T>>,
}

fn cached<T>(cell: &OnceLock<Vec<T>>, f: impl FnOnce() -> Result<Vec<T>>) -> Result<&[T]> {
    if let Some(v) = cell.get() {
        return Ok(v);
    }
    let v = f()?;
    Ok(cell.get_or_init(|| v))
}

impl<'a, T: Real> EvalContext<'a, T> {
    pub fn new(
        graph: &'a TextAttributedGraph,
        vocab: &'a Vocabulary,
        model: &'a Model,
        params: &'a ParamStore<T>,
    ) -> Self {
        Self {
            graph,
            vocab,
            model,
            params,
            batch_size: 64,
            prompt: PromptConfig::default(),
            logreg: LogRegConfig::default(),
            seed: 0,
            prompt_dir: None,
            lm: OnceLock::new(),
            gnn: OnceLock::new(),
            random: OnceLock::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.model.hidden()
    }

    /// `[CLS]` embeddings of every node, `[n, d]`.
    pub fn lm_features(&self) -> Result<&[T]> {
        cached(&self.lm, || {
            let nodes: Vec<usize> = (0..self.graph.num_nodes()).collect();
            self.model
                .lm
                .embed_texts(self.params, self.vocab, self.graph, &nodes, self.batch_size)
        })
    }

    /// Full-neighbor GNN outputs over the LM features, `[n, d]`.
    pub fn gnn_features(&self) -> Result<&[T]> {
        let x = self.lm_features()?;
        cached(&self.gnn, || {
            self.model
                .gnn
                .full_neighbor_inference(self.params, &GatGraph::from_tag(self.graph), x, self.batch_size)
        })
    }

    /// Standard normal vectors, one per node, fixed by `seed`.
    pub fn random_features(&self) -> Result<&[T]> {
        cached(&self.random, || {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let n = self.graph.num_nodes() * self.dim();
            Ok((0..n).map(|_| T::c(StandardNormal.sample(&mut rng))).collect())
        })
    }

    pub fn label_embeddings(&self, classes: &[usize]) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(classes.len() * self.dim());
        for &c in classes {
            let fallback = format!("class {c}");
            let text = self.graph.label_text(c).unwrap_or(&fallback);
            out.extend(self.model.lm.embed_label_text(self.params, self.vocab, text)?);
        }
        Ok(out)
    }
}

/// One way of turning a task into query predictions.
pub trait InferenceMode<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Shared precomputation, run once before tasks are evaluated.
    fn prepare(&self, _ctx: &EvalContext<'_, T>) -> Result<()> {
        Ok(())
    }

    /// Predicted class id per query node, in query order. `stream`
    /// distinguishes tasks for any randomness the mode needs.
    fn predict(&self, ctx: &EvalContext<'_, T>, task: &FewShotTask, stream: u64) -> Result<Vec<usize>>;
}

/// Logistic regression on fixed node features `[n, d]`; returns predicted
/// class ids for the query nodes.
pub fn linear_probe<T: Real>(features: &[T], d: usize, task: &FewShotTask, cfg: &LogRegConfig) -> Result<Vec<usize>> {
    let rows = |pairs: &[(usize, usize)]| -> Vec<f64> {
        pairs
            .iter()
            .flat_map(|&(v, _)| features[v * d..(v + 1) * d].iter().map(|x| x.to_f64().unwrap_or(f64::NAN)))
            .collect()
    };
    let labels = support_labels(task)?;
    let model = fit_logistic_regression(&rows(&task.support), d, &labels, task.n_way(), cfg)?;
    Ok(model.predict(&rows(&task.query)).into_iter().map(|i| task.classes[i]).collect())
}

fn support_labels(task: &FewShotTask) -> Result<Vec<usize>> {
    task.support
        .iter()
        .map(|&(v, c)| {
            task.class_index(c)
                .ok_or_else(|| Error::Integrity(format!("support node {v} has class {c} outside the task")))
        })
        .collect()
}

pub struct LmMode;
pub struct GnnMode;
pub struct PromptMode;
/// Chance-level control: random node features.
pub struct RandomMode;

impl<T: Real> InferenceMode<T> for LmMode {
    fn name(&self) -> &'static str {
        "lm"
    }

    fn prepare(&self, ctx: &EvalContext<'_, T>) -> Result<()> {
        ctx.lm_features().map(drop)
    }

    fn predict(&self, ctx: &EvalContext<'_, T>, task: &FewShotTask, _stream: u64) -> Result<Vec<usize>> {
        linear_probe(ctx.lm_features()?, ctx.dim(), task, &ctx.logreg)
    }
}

impl<T: Real> InferenceMode<T> for GnnMode {
    fn name(&self) -> &'static str {
        "gnn"
    }

    fn prepare(&self, ctx: &EvalContext<'_, T>) -> Result<()> {
        ctx.gnn_features().map(drop)
    }

    fn predict(&self, ctx: &EvalContext<'_, T>, task: &FewShotTask, _stream: u64) -> Result<Vec<usize>> {
        linear_probe(ctx.gnn_features()?, ctx.dim(), task, &ctx.logreg)
    }
}

impl<T: Real> InferenceMode<T> for RandomMode {
    fn name(&self) -> &'static str {
        "random"
    }

    fn prepare(&self, ctx: &EvalContext<'_, T>) -> Result<()> {
        ctx.random_features().map(drop)
    }

    fn predict(&self, ctx: &EvalContext<'_, T>, task: &FewShotTask, _stream: u64) -> Result<Vec<usize>> {
        linear_probe(ctx.random_features()?, ctx.dim(), task, &ctx.logreg)
    }
}

impl<T: Real> InferenceMode<T> for PromptMode {
    fn name(&self) -> &'static str {
        "prompt"
    }

    fn prepare(&self, ctx: &EvalContext<'_, T>) -> Result<()> {
        ctx.lm_features().map(drop)
    }

    fn predict(&self, ctx: &EvalContext<'_, T>, task: &FewShotTask, stream: u64) -> Result<Vec<usize>> {
        let pctx = PromptContext {
            graph: ctx.graph,
            gnn: &ctx.model.gnn,
            params: ctx.params,
            features: ctx.lm_features()?,
            d: ctx.dim(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        rng.set_stream(stream);
        let mut state = PromptState::new(&ctx.label_embeddings(&task.classes)?, ctx.dim(), &ctx.prompt, &mut rng)?;
        let support: Vec<(usize, usize)> = task.support.iter().map(|p| p.0).zip(support_labels(task)?).collect();
        tune_prompt(&pctx, &mut state, &support, &ctx.prompt, ctx.seed)?;
        if let Some(dir) = &ctx.prompt_dir {
            let path = dir.join(format!("prompt_{stream}.bin"));
            archive::save(&state.store, &path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        }
        let query: Vec<usize> = task.query.iter().map(|p| p.0).collect();
        Ok(predict(&pctx, &state, &query)?.into_iter().map(|i| task.classes[i]).collect())
    }
}

/// Name → mode table.
pub struct ModeRegistry<T: Real> {
    modes: BTreeMap<&'static str, Box<dyn InferenceMode<T>>>,
}

impl<T: Real> Default for ModeRegistry<T> {
    /// `lm`, `gnn`, `prompt` and `random`.
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(LmMode));
        r.register(Box::new(GnnMode));
        r.register(Box::new(PromptMode));
        r.register(Box::new(RandomMode));
        r
    }
}

impl<T: Real> ModeRegistry<T> {
    pub fn empty() -> Self {
        Self { modes: BTreeMap::new() }
    }

    /// Adds or replaces the mode under its name.
    pub fn register(&mut self, mode: Box<dyn InferenceMode<T>>) {
        self.modes.insert(mode.name(), mode);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.modes.keys().copied()
    }

    pub fn get(&self, name: &str) -> Result<&dyn InferenceMode<T>> {
        self.modes.get(name).map(|m| m.as_ref()).ok_or_else(|| {
            Error::Config(format!(
                "unknown mode `{name}`; available: {}",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }
}

/// Runs `mode` on every task of `set` with `workers` threads (0 means all
/// cores). Records come back in file order.
pub fn evaluate<T: Real>(
    mode: &dyn InferenceMode<T>,
    ctx: &EvalContext<'_, T>,
    set: &TaskSet,
    workers: usize,
) -> Result<Vec<TaskRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        mode.prepare(ctx)?;
        let per_group = set.spec.tasks_per_group as u64;
        let tasks: Vec<_> = set.iter().collect();
        tasks
            .par_iter()
            .map(|&(group, index, task)| {
                let preds = mode.predict(ctx, task, group as u64 * per_group + index as u64)?;
                let correct = preds.iter().zip(&task.query).filter(|(p, q)| **p == q.1).count();
                Ok(TaskRecord {
                    group,
                    task: index,
                    correct,
                    total: task.query.len(),
                })
            })
            .collect()
    })
}
