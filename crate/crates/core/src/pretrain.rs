//! Joint masked-language-model pre-training of the LM and the GNN over
//! random-walk subgraphs.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use autograd::{AdamW, AdamWConfig, AutogradError, ParamStore, Real, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, Checkpoint};
use crate::error::{Error, Result};
use crate::graph::TextAttributedGraph;
use crate::lm::trim_padding;
use crate::model::{MlmHead, Model, ModelConfig};
use crate::sampler::{sample_subgraph, NormCoeffs, Subgraph};
use crate::text::{mask_tokens, MaskedSequence, Vocabulary};

pub const METRICS_FILE: &str = "metrics.tsv";

/// Stream ids reserved for non-step randomness; training steps use their
/// own index as stream.
const INIT_STREAM: u64 = u64::MAX;
const NORM_STREAM: u64 = u64::MAX - 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    /// Total steps; derived from `epochs` when absent.
    pub steps: Option<u64>,
    pub epochs: u64,
    pub mask_rate: f64,
    pub roots: usize,
    pub walk_length: usize,
    pub seq_len: usize,
    pub vocab_cap: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Use unit node and edge weights instead of estimated coefficients.
    pub uniform_norm: bool,
    pub pre_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: None,
            epochs: 3,
            mask_rate: 0.75,
            roots: 10,
            walk_length: 10,
            seq_len: 128,
            vocab_cap: 8192,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            checkpoint_every: 100,
            uniform_norm: false,
            pre_samples: 200,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask rate must lie in (0, 1), got {}", self.mask_rate)));
        }
        if self.steps == Some(0) || (self.steps.is_none() && self.epochs == 0) {
            return Err(Error::Config("training needs at least one step".into()));
        }
        if self.roots == 0 || self.seq_len < 3 || self.checkpoint_every == 0 || self.pre_samples == 0 {
            return Err(Error::Config(
                "roots, checkpoint cadence and pre_samples must be positive; seq_len ≥ 3".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// One epoch visits about `n` node slots at `r·(l+1)` per subgraph.
    pub fn total_steps(&self, num_nodes: usize) -> u64 {
        self.steps.unwrap_or_else(|| {
            let per = (self.roots * (self.walk_length + 1)) as u64;
            self.epochs * (num_nodes as u64).div_ceil(per).max(1)
        })
    }

    /// Hash of everything except the run length, which may be extended on resume.
    pub fn resume_key(&self) -> String {
        config_hash(&Self {
            steps: None,
            epochs: 0,
            ..self.clone()
        })
    }

    fn optim(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Head inputs `[h_i; o_t]` for every masked position, in sequence order.
pub struct HeadInputs {
    pub z: Var,
    pub targets: Vec<usize>,
    /// Sequence index of each row.
    pub owner: Vec<usize>,
}

/// Gathers `[h_i; o_t]` rows; `o` is `[B·S, d]`, `h` is `[B, d]`. `None`
/// when nothing is masked.
pub fn head_inputs<T: Real>(
    tape: &mut Tape<T>,
    o: Var,
    h: Var,
    seq_len: usize,
    masked: &[MaskedSequence],
) -> Result<Option<HeadInputs>> {
    let (mut o_rows, mut owner, mut targets) = (Vec::new(), Vec::new(), Vec::new());
    for (b, m) in masked.iter().enumerate() {
        for &t in &m.positions {
            o_rows.push(b * seq_len + t);
            owner.push(b);
            targets.push(m.original[t] as usize);
        }
    }
    if o_rows.is_empty() {
        return Ok(None);
    }
    let hz = tape.gather_rows(h, &owner)?;
    let oz = tape.gather_rows(o, &o_rows)?;
    let z = tape.concat_cols(&[hz, oz])?;
    Ok(Some(HeadInputs { z, targets, owner }))
}

pub struct MlmLoss {
    pub loss: Var,
    pub masked_tokens: usize,
}

/// Mean negative log-likelihood of the original tokens at masked
/// positions, optionally weighted per sequence. Zero when nothing is masked.
#[allow(clippy::too_many_arguments)]
pub fn mlm_loss<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    head: &MlmHead,
    o: Var,
    h: Var,
    seq_len: usize,
    masked: &[MaskedSequence],
    node_weights: Option<&[f64]>,
) -> Result<MlmLoss> {
    let Some(inputs) = head_inputs(tape, o, h, seq_len, masked)? else {
        let loss = tape.constant(&[], vec![T::zero()])?;
        return Ok(MlmLoss { loss, masked_tokens: 0 });
    };
    let logits = head.forward(tape, store, inputs.z)?;
    let weights: Vec<T> = inputs
        .owner
        .iter()
        .map(|&b| node_weights.map_or(T::one(), |w| T::c(w[b])))
        .collect();
    let loss = tape.cross_entropy(logits, &inputs.targets, &weights)?;
    Ok(MlmLoss {
        loss,
        masked_tokens: inputs.targets.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub masked_tokens: usize,
    pub subgraph_nodes: usize,
    pub seconds: f64,
}

impl StepMetrics {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{}\t{}\t{:.4}",
            self.step, self.loss, self.masked_tokens, self.subgraph_nodes, self.seconds
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return None;
        }
        Some(Self {
            step: f[0].parse().ok()?,
            loss: f[1].parse().ok()?,
            masked_tokens: f[2].parse().ok()?,
            subgraph_nodes: f[3].parse().ok()?,
            seconds: f[4].parse().ok()?,
        })
    }
}

/// A sampled subgraph with its members' masked texts.
pub struct Batch {
    pub subgraph: Subgraph,
    pub masked: Vec<MaskedSequence>,
}

pub struct Trainer<'g, T: Real> {
    pub config: PretrainConfig,
    pub graph: &'g TextAttributedGraph,
    pub vocab: Vocabulary,
    pub model: Model,
    pub params: ParamStore<T>,
    pub optim: AdamW<T>,
    encoded: Vec<Vec<u32>>,
    norms: Option<NormCoeffs>,
    /// Steps completed so far.
    pub step: u64,
    /// Batches that masked no token.
    pub degenerate: u64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<'g, T: Real> Trainer<'g, T> {
    /// Fresh model with a vocabulary built from the graph's texts.
    pub fn new(graph: &'g TextAttributedGraph, config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::build(graph.texts().iter().map(String::as_str), config.vocab_cap)?;
        let model = Model::new(&config.model, vocab.len(), config.seq_len)?;
        let params = model.init_params(&mut stream_rng(config.seed, INIT_STREAM));
        Self::assemble(graph, config, vocab, model, params, 0)
    }

    /// Resumes from a checkpoint written by [`Trainer::save`].
    pub fn resume(graph: &'g TextAttributedGraph, ckpt: Checkpoint<T>) -> Result<Self> {
        let config = ckpt.manifest.config.clone();
        config.validate()?;
        let model = Model::new(&config.model, ckpt.vocab.len(), config.seq_len)?;
        let mut t = Self::assemble(graph, config, ckpt.vocab, model, ckpt.params, ckpt.manifest.step)?;
        let moments = ckpt
            .moments
            .ok_or_else(|| Error::Checkpoint("optimizer state missing; cannot resume".into()))?;
        t.optim.restore(ckpt.manifest.optim_step, moments)?;
        Ok(t)
    }

    fn assemble(
        graph: &'g TextAttributedGraph,
        config: PretrainConfig,
        vocab: Vocabulary,
        model: Model,
        params: ParamStore<T>,
        step: u64,
    ) -> Result<Self> {
        if graph.num_nodes() == 0 {
            return Err(Error::Config("cannot pre-train on an empty graph".into()));
        }
        let encoded = graph.texts().iter().map(|t| vocab.encode(t, config.seq_len)).collect();
        let norms = if config.uniform_norm {
            None
        } else {
            let mut rng = stream_rng(config.seed, NORM_STREAM);
            Some(NormCoeffs::estimate(
                graph,
                config.roots,
                config.walk_length,
                config.pre_samples,
                &mut rng,
            )?)
        };
        let optim = AdamW::new(config.optim(), &params, &[""]);
        Ok(Self {
            config,
            graph,
            vocab,
            model,
            params,
            optim,
            encoded,
            norms,
            step,
            degenerate: 0,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.config.total_steps(self.graph.num_nodes())
    }

    /// Randomness for step `step` (1-based), independent of history.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        stream_rng(self.config.seed, step)
    }

    pub fn sample_batch(&self, rng: &mut impl Rng) -> Result<Batch> {
        let mut subgraph = sample_subgraph(self.graph, self.config.roots, self.config.walk_length, rng)?;
        if let Some(n) = &self.norms {
            n.apply(self.graph, &mut subgraph);
        }
        let masked = subgraph
            .members
            .iter()
            .map(|&v| mask_tokens(&self.encoded[v], self.config.mask_rate, rng))
            .collect();
        Ok(Batch { subgraph, masked })
    }

    /// Builds the joint forward pass for `batch` on `tape`.
    pub fn batch_loss(&self, tape: &mut Tape<T>, batch: &Batch, rng: &mut impl Rng) -> Result<MlmLoss> {
        let ids: Vec<Vec<u32>> = batch.masked.iter().map(|m| m.masked.clone()).collect();
        let lm = self.model.lm.forward(tape, &self.params, &trim_padding(&ids), rng)?;
        let x = tape.gather_rows(lm.hidden, &lm.cls_rows())?;
        let gg = batch.subgraph.gat_graph();
        let h = self.model.gnn.forward(tape, &self.params, &gg, x, rng)?.hidden;
        let weights = (!self.config.uniform_norm).then_some(batch.subgraph.node_norm.as_slice());
        mlm_loss(
            tape,
            &self.params,
            &self.model.head,
            lm.hidden,
            h,
            lm.seq_len,
            &batch.masked,
            weights,
        )
    }

    /// Loss of `batch` in eval mode, without touching parameters.
    pub fn eval_loss(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::eval();
        let l = self.batch_loss(&mut tape, batch, &mut rand::rng())?;
        Ok(tape.scalar(l.loss).to_f64().unwrap_or(f64::NAN))
    }

    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let start = Instant::now();
        let step = self.step + 1;
        let non_finite = |e: Error| match e {
            Error::Autograd(AutogradError::NonFinite(_)) => Error::NonFiniteLoss {
                step,
                seed: self.config.seed,
                stream: step,
            },
            other => other,
        };
        let mut rng = self.step_rng(step);
        let batch = self.sample_batch(&mut rng)?;
        let mut tape = Tape::new();
        let out = self.batch_loss(&mut tape, &batch, &mut rng).map_err(non_finite)?;
        let loss = tape.scalar(out.loss).to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(non_finite(Error::Autograd(AutogradError::NonFinite("loss".into()))));
        }
        if out.masked_tokens == 0 {
            self.degenerate += 1;
            log::warn!("step {step}: no masked tokens in batch");
        } else {
            let grads = tape
                .backward(out.loss)
                .map_err(|e| non_finite(e.into()))?
                .params(&tape);
            self.optim.step(&mut self.params, &grads)?;
        }
        self.step = step;
        Ok(StepMetrics {
            step,
            loss,
            masked_tokens: out.masked_tokens,
            subgraph_nodes: batch.subgraph.len(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        Checkpoint::save(dir, &self.config, self.step, &self.vocab, &self.params, Some(&self.optim))
    }
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub steps: u64,
    pub metrics: Vec<StepMetrics>,
    pub degenerate: u64,
}

/// Trains to the configured step count, checkpointing into `out` every
/// `checkpoint_every` steps and at the end. With `resume`, continues from
/// the checkpoint already in `out`, whose config must match.
pub fn run_pretraining<T: Real>(
    g: &TextAttributedGraph,
    config: &PretrainConfig,
    out: &Path,
    resume: bool,
) -> Result<PretrainSummary> {
    config.validate()?;
    let mut trainer = if resume {
        let ckpt = Checkpoint::<T>::load(out)?;
        if ckpt.manifest.config.resume_key() != config.resume_key() {
            return Err(Error::Config("checkpoint config differs from the requested config".into()));
        }
        let mut t = Trainer::resume(g, ckpt)?;
        t.config = config.clone();
        t
    } else {
        Trainer::new(g, config.clone())?
    };
    fs::create_dir_all(out).map_err(Error::file(out))?;
    let metrics_path = out.join(METRICS_FILE);
    let kept: String = if resume && metrics_path.exists() {
        fs::read_to_string(&metrics_path)
            .map_err(Error::file(&metrics_path))?
            .lines()
            .filter(|l| StepMetrics::parse(l).is_some_and(|m| m.step <= trainer.step))
            .map(|l| format!("{l}\n"))
            .collect()
    } else {
        String::new()
    };
    fs::write(&metrics_path, kept).map_err(Error::file(&metrics_path))?;
    let mut log_file = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(Error::file(&metrics_path))?;

    let total = trainer.total_steps();
    let mut metrics = Vec::new();
    while trainer.step < total {
        let m = trainer.train_step()?;
        writeln!(log_file, "{}", m.to_line()).map_err(Error::file(&metrics_path))?;
        log::debug!("step {} loss {:.4}", m.step, m.loss);
        metrics.push(m);
        if trainer.step % config.checkpoint_every == 0 && trainer.step < total {
            trainer.save(out)?;
        }
    }
    log_file.flush()?;
    trainer.save(out)?;
    Ok(PretrainSummary {
        steps: trainer.step,
        metrics,
        degenerate: trainer.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_tag, SynthConfig};
    use crate::text::{CLS, MASK, PAD, SEP};

    fn tiny_config() -> PretrainConfig {
        PretrainConfig {
            model: ModelConfig {
                hidden: 16,
                lm_layers: 1,
                lm_heads: 2,
                ff_mult: 2,
                gnn_layers: 2,
                gnn_heads: 2,
                dropout: 0.0,
            },
            steps: Some(6),
            roots: 3,
            walk_length: 2,
            seq_len: 12,
            pre_samples: 20,
            checkpoint_every: 3,
            ..PretrainConfig::default()
        }
    }

    fn tiny_graph() -> TextAttributedGraph {
        generate_synthetic_tag(&SynthConfig::new(3, 20, 6, 0.9, 1)).unwrap()
    }

    fn masked(original: Vec<u32>, positions: Vec<usize>) -> MaskedSequence {
        let mut m = original.clone();
        for &p in &positions {
            m[p] = MASK;
        }
        MaskedSequence {
            original,
            masked: m,
            positions,
            rate: 0.5,
        }
    }

    /// Head whose logits equal `out_bias` regardless of input.
    fn constant_head(v: usize, d: usize, bias: Vec<f64>) -> (MlmHead, ParamStore<f64>) {
        let head = MlmHead { hidden: d, vocab_size: v };
        let mut store = ParamStore::new();
        head.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        store.zeros("head.w2", &[2 * d, d]);
        store.normal("lm.tok_emb", &[v, d], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        store.insert("head.out_bias", &[v], bias);
        (head, store)
    }

    fn loss_with(store: &ParamStore<f64>, head: &MlmHead, seqs: &[MaskedSequence], d: usize) -> f64 {
        let s = seqs[0].original.len();
        let mut t = Tape::new();
        let o = t.var(&[seqs.len() * s, d], (0..seqs.len() * s * d).map(|i| (i as f64).sin()).collect()).unwrap();
        let h = t.var(&[seqs.len(), d], (0..seqs.len() * d).map(|i| (i as f64).cos()).collect()).unwrap();
        let l = mlm_loss(&mut t, store, head, o, h, s, seqs, None).unwrap();
        t.scalar(l.loss)
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let (head, store) = constant_head(100, 4, vec![0.3; 100]);
        let seqs = [masked(vec![CLS, 42, SEP, PAD], vec![1])];
        assert!((loss_with(&store, &head, &seqs, 4) - 100f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn two_token_vocab_matches_hand_softmax() {
        let (a, b) = (0.7_f64, -1.2_f64);
        let (head, store) = constant_head(2, 3, vec![a, b]);
        let seqs = [masked(vec![0, 1, 0], vec![1, 2])];
        let p1 = b.exp() / (a.exp() + b.exp());
        let p0 = a.exp() / (a.exp() + b.exp());
        let expected = -(p1.ln() + p0.ln()) / 2.0;
        assert!((loss_with(&store, &head, &seqs, 3) - expected).abs() < 1e-12);
    }

    #[test]
    fn no_masked_tokens_gives_zero_loss() {
        let (head, store) = constant_head(10, 4, vec![0.0; 10]);
        let seqs = [masked(vec![CLS, 5, SEP], vec![])];
        assert_eq!(loss_with(&store, &head, &seqs, 4), 0.0);
    }

    #[test]
    fn head_input_is_gnn_row_then_token_row() {
        let d = 2;
        let mut t = Tape::<f64>::new();
        let o = t.var(&[6, d], vec![0., 1., 10., 11., 20., 21., 30., 31., 40., 41., 50., 51.]).unwrap();
        let h = t.var(&[2, d], vec![-1., -2., -3., -4.]).unwrap();
        let seqs = [masked(vec![CLS, 7, SEP], vec![1]), masked(vec![CLS, 8, 9], vec![2])];
        let z = head_inputs(&mut t, o, h, 3, &seqs).unwrap().unwrap();
        assert_eq!(t.value(z.z), &[-1., -2., 10., 11., -3., -4., 50., 51.]);
        assert_eq!(z.targets, vec![7, 9]);
    }

    #[test]
    fn unmasked_positions_do_not_affect_loss() {
        let (head, store) = constant_head(10, 3, vec![0.1; 10]);
        let mut store = store;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        store.normal("head.w2", &[6, 3], 0.5, &mut rng);
        let seqs = [masked(vec![CLS, 5, 6, SEP], vec![2])];
        let run = |o_vals: Vec<f64>| {
            let mut t = Tape::new();
            let o = t.var(&[4, 3], o_vals).unwrap();
            let h = t.var(&[1, 3], vec![0.2, -0.1, 0.4]).unwrap();
            let l = mlm_loss(&mut t, &store, &head, o, h, 4, &seqs, None).unwrap();
            t.scalar(l.loss)
        };
        let base: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let mut other = base.clone();
        for i in (0..12).filter(|i| i / 3 != 2) {
            other[i] = 0.0;
        }
        assert_eq!(run(base), run(other));
    }

    #[test]
    fn single_step_reduces_loss_on_its_batch() {
        let g = tiny_graph();
        let mut trainer = Trainer::<f64>::new(&g, tiny_config()).unwrap();
        let batch = trainer.sample_batch(&mut trainer.step_rng(1)).unwrap();
        let before = trainer.eval_loss(&batch).unwrap();
        trainer.train_step().unwrap();
        assert!(trainer.eval_loss(&batch).unwrap() < before);
    }

    #[test]
    fn one_step_reaches_both_encoders() {
        let g = tiny_graph();
        let trainer = Trainer::<f64>::new(&g, tiny_config()).unwrap();
        let mut rng = trainer.step_rng(1);
        let batch = trainer.sample_batch(&mut rng).unwrap();
        let mut tape = Tape::new();
        let l = trainer.batch_loss(&mut tape, &batch, &mut rng).unwrap();
        let g = tape.backward(l.loss).unwrap().params(&tape);
        let nonzero = |pre: &str| g.iter().any(|(n, v)| n.starts_with(pre) && v.iter().any(|&x| x != 0.0));
        assert!(nonzero("lm.") && nonzero("gnn.") && nonzero("head."));
    }

    #[test]
    fn steps_derive_from_epochs() {
        let c = PretrainConfig {
            steps: None,
            epochs: 3,
            roots: 10,
            walk_length: 10,
            ..PretrainConfig::default()
        };
        assert_eq!(c.total_steps(900), 3 * 9);
        assert_eq!(c.total_steps(1), 3);
        assert!(PretrainConfig { mask_rate: 1.0, ..c.clone() }.validate().is_err());
        assert!(PretrainConfig { steps: Some(0), ..c }.validate().is_err());
    }

    #[test]
    fn identical_seeds_give_identical_logs_and_resume_matches() {
        let g = tiny_graph();
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let full = run_pretraining::<f64>(&g, &cfg, &dir.path().join("a"), false).unwrap();
        let again = run_pretraining::<f64>(&g, &cfg, &dir.path().join("b"), false).unwrap();
        let strip = |m: &[StepMetrics]| m.iter().map(|x| (x.step, x.loss.to_bits(), x.masked_tokens, x.subgraph_nodes)).collect::<Vec<_>>();
        assert_eq!(strip(&full.metrics), strip(&again.metrics));

        // Stop after 3 steps (a checkpoint), then resume to 6.
        let c = dir.path().join("c");
        run_pretraining::<f64>(&g, &PretrainConfig { steps: Some(3), ..cfg.clone() }, &c, false).unwrap();
        let resumed = run_pretraining::<f64>(&g, &cfg, &c, true).unwrap();
        assert_eq!(strip(&resumed.metrics), strip(&full.metrics[3..]));
        let a = Checkpoint::<f64>::load(&dir.path().join("a")).unwrap();
        let r = Checkpoint::<f64>::load(&c).unwrap();
        assert_eq!(a.params, r.params);
        let lines = fs::read_to_string(c.join(METRICS_FILE)).unwrap();
        assert_eq!(lines.lines().count(), 6);
    }

    #[test]
    fn checkpoint_round_trip_and_dtype_check() {
        let g = tiny_graph();
        let dir = tempfile::tempdir().unwrap();
        let cfg = PretrainConfig { steps: Some(1), ..tiny_config() };
        run_pretraining::<f32>(&g, &cfg, dir.path(), false).unwrap();
        let c = Checkpoint::<f32>::load(dir.path()).unwrap();
        assert_eq!(c.manifest.step, 1);
        assert_eq!(c.manifest.config.epochs, 3);
        assert!(c.moments.is_some());
        assert!(Checkpoint::<f64>::load(dir.path()).is_err());
    }
}
