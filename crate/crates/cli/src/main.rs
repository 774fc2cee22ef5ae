use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use autograd::{DType, ParamStore, Real};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use tagprompt::checkpoint::{write_json, Checkpoint, Manifest, MANIFEST_FILE};
use tagprompt::fewshot::{aggregate, evaluate, report, sample_tasks, EvalContext, LogRegConfig, ModeRegistry, TaskSet, TaskSpec};
use tagprompt::gnn::GatGraph;
use tagprompt::graph::{load_tag_with, save_tag};
use tagprompt::model::{Model, ModelConfig};
use tagprompt::pretrain::{run_pretraining, PretrainConfig};
use tagprompt::prompt::{PromptConfig, Readout, Threshold};
use tagprompt::{generate_synthetic_tag, SynthConfig, TextAttributedGraph};

mod config;

#[derive(Parser, Debug)]
#[command(name = "tagprompt", version, about = "Pre-train an LM + GNN pair on a text-attributed graph and evaluate few-shot node classification")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic text-attributed graph.
    Synth(SynthArgs),
    /// Masked-token pre-training of the LM and GNN.
    Pretrain(PretrainArgs),
    /// Write node embeddings from a checkpoint.
    Embed(EmbedArgs),
    /// Sample N-way K-shot tasks into a task file.
    Tasks(TasksArgs),
    /// Evaluate one inference mode on a task file.
    Eval(EvalArgs),
}

/// Node, edge and label-text files.
#[derive(Args, Debug, Serialize)]
struct GraphArgs {
    /// Node file: `id<TAB>label<TAB>text`.
    #[arg(long)]
    nodes: PathBuf,
    /// Edge file: `src<TAB>dst`.
    #[arg(long)]
    edges: PathBuf,
    /// Optional `label_id<TAB>text` file.
    #[arg(long)]
    label_texts: Option<PathBuf>,
    /// Keep edges directed instead of symmetrizing them.
    #[arg(long, default_value_t = false)]
    directed: bool,
}

impl GraphArgs {
    fn load(&self) -> Result<TextAttributedGraph> {
        Ok(load_tag_with(&self.nodes, &self.edges, self.label_texts.as_deref(), self.directed)?)
    }
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    /// Config file of `key = value` lines; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 300)]
    nodes_per_class: usize,
    #[arg(long, default_value_t = 12)]
    vocab_per_class: usize,
    /// Probability that an edge stays within a class.
    #[arg(long, default_value_t = 0.9)]
    homophily: f64,
    #[arg(long, default_value_t = 6)]
    avg_degree: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for nodes.tsv, edges.tsv, labels.tsv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug, Serialize)]
struct PretrainArgs {
    /// Config file of `key = value` lines; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, default_value_t = 0.75)]
    mask_rate: f64,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 10)]
    walk_length: usize,
    #[arg(long, default_value_t = 10)]
    roots: usize,
    #[arg(long, default_value_t = 3)]
    epochs: u64,
    /// Fixed step count; overrides --epochs.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    lm_layers: usize,
    #[arg(long, default_value_t = 4)]
    lm_heads: usize,
    #[arg(long, default_value_t = 2)]
    gnn_layers: usize,
    #[arg(long, default_value_t = 4)]
    gnn_heads: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 8192)]
    vocab_cap: usize,
    #[arg(long, default_value_t = 100)]
    checkpoint_every: u64,
    /// Subgraphs drawn to estimate normalization coefficients.
    #[arg(long, default_value_t = 200)]
    pre_samples: usize,
    /// Weight every node equally in the loss.
    #[arg(long, default_value_t = false)]
    uniform_norm: bool,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    dtype: Precision,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue from the checkpoint already in --out.
    #[arg(long, default_value_t = false)]
    resume: bool,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
enum EmbedMode {
    Lm,
    Gnn,
}

#[derive(Args, Debug, Serialize)]
struct EmbedArgs {
    /// Config file of `key = value` lines; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = EmbedMode::Lm)]
    mode: EmbedMode,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Output TSV: node id then one column per dimension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TasksArgs {
    /// Config file of `key = value` lines; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    graph: GraphArgs,
    /// Comma-separated class ids; all labeled classes when omitted.
    #[arg(long, value_delimiter = ',')]
    test_classes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 3)]
    k_shot: usize,
    #[arg(long, default_value_t = 10)]
    q_size: usize,
    #[arg(long, default_value_t = 5)]
    groups: usize,
    #[arg(long, default_value_t = 50)]
    tasks_per_group: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Config file of `key = value` lines; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// lm, gnn, prompt or random.
    #[arg(long, default_value = "prompt")]
    mode: String,
    /// `inf`, `median`, `q<fraction>` or an absolute dot-product value.
    #[arg(long, default_value = "q0.5")]
    sigma_inner: Threshold,
    #[arg(long, default_value = "q0.9")]
    sigma_inter: Threshold,
    #[arg(long, default_value_t = 0)]
    extra_tokens: usize,
    #[arg(long, default_value_t = 50)]
    prompt_epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    prompt_lr: f64,
    #[arg(long, default_value = "mean")]
    readout: Readout,
    /// L2 strength of the logistic-regression probe.
    #[arg(long, default_value_t = 1.0)]
    reg: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Threads for task evaluation; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Archive tuned prompt parameters into this directory.
    #[arg(long)]
    save_prompts: Option<PathBuf>,
    /// Report TSV; per-task records and a manifest are written beside it.
    #[arg(long)]
    report: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv = match config::expand(std::env::args_os().collect::<Vec<OsString>>()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            let config = e
                .chain()
                .find_map(|c| c.downcast_ref::<tagprompt::Error>())
                .is_some_and(tagprompt::Error::is_config);
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}

/// The error chain joined by `: `, skipping causes already quoted by
/// their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Pretrain(a) => match a.dtype {
            Precision::F32 => pretrain::<f32>(&a),
            Precision::F64 => pretrain::<f64>(&a),
        },
        Command::Embed(a) => match checkpoint_dtype(&a.checkpoint)? {
            DType::F32 => embed::<f32>(&a),
            DType::F64 => embed::<f64>(&a),
        },
        Command::Tasks(a) => tasks(&a),
        Command::Eval(a) => match checkpoint_dtype(&a.checkpoint)? {
            DType::F32 => eval::<f32>(&a),
            DType::F64 => eval::<f64>(&a),
        },
    }
}

fn manifest(path: &Path, command: &str, args: &impl Serialize, extra: serde_json::Value) -> Result<()> {
    let value = json!({ "command": command, "version": env!("CARGO_PKG_VERSION"), "args": args, "resolved": extra });
    write_json(&value, path).with_context(|| format!("writing {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        avg_degree: a.avg_degree,
        ..SynthConfig::new(a.classes, a.nodes_per_class, a.vocab_per_class, a.homophily, a.seed)
    };
    let g = generate_synthetic_tag(&cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_tag(&g, &a.out.join("nodes.tsv"), &a.out.join("edges.tsv"), &a.out.join("labels.tsv"))?;
    manifest(&a.out.join(MANIFEST_FILE), "synth", a, serde_json::to_value(&cfg)?)?;
    log::info!(
        "wrote {} nodes, {} arcs, edge homophily {:.3} to {}",
        g.num_nodes(),
        g.num_arcs(),
        tagprompt::edge_homophily(&g),
        a.out.display()
    );
    Ok(())
}

fn pretrain<T: Real>(a: &PretrainArgs) -> Result<()> {
    let g = a.graph.load()?;
    let config = PretrainConfig {
        model: ModelConfig {
            hidden: a.hidden,
            lm_layers: a.lm_layers,
            lm_heads: a.lm_heads,
            ff_mult: ModelConfig::default().ff_mult,
            gnn_layers: a.gnn_layers,
            gnn_heads: a.gnn_heads,
            dropout: a.dropout,
        },
        steps: a.steps,
        epochs: a.epochs,
        mask_rate: a.mask_rate,
        roots: a.roots,
        walk_length: a.walk_length,
        seq_len: a.seq_len,
        vocab_cap: a.vocab_cap,
        lr: a.lr,
        weight_decay: a.weight_decay,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        uniform_norm: a.uniform_norm,
        pre_samples: a.pre_samples,
    };
    log::info!("pre-training for {} steps", config.total_steps(g.num_nodes()));
    let summary = run_pretraining::<T>(&g, &config, &a.out, a.resume)?;
    manifest(&a.out.join("run.json"), "pretrain", a, json!({ "config": config, "steps": summary.steps, "degenerate_batches": summary.degenerate }))?;
    if let (Some(first), Some(last)) = (summary.metrics.first(), summary.metrics.last()) {
        log::info!("loss {:.4} at step {} -> {:.4} at step {}", first.loss, first.step, last.loss, last.step);
    }
    Ok(())
}

fn checkpoint_dtype(dir: &Path) -> Result<DType> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|source| tagprompt::Error::File { path: path.clone(), source })?;
    let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(m.dtype)
}

fn load_model<T: Real>(dir: &Path) -> Result<(Checkpoint<T>, Model)> {
    let ckpt = Checkpoint::<T>::load(dir)?;
    let cfg = &ckpt.manifest.config;
    let model = Model::new(&cfg.model, ckpt.vocab.len(), cfg.seq_len)?;
    Ok((ckpt, model))
}

fn embed<T: Real>(a: &EmbedArgs) -> Result<()> {
    let g = a.graph.load()?;
    let (ckpt, model) = load_model::<T>(&a.checkpoint)?;
    let nodes: Vec<usize> = (0..g.num_nodes()).collect();
    let mut x = model.lm.embed_texts(&ckpt.params, &ckpt.vocab, &g, &nodes, a.batch_size)?;
    if let EmbedMode::Gnn = a.mode {
        x = model.gnn.full_neighbor_inference(&ckpt.params, &GatGraph::from_tag(&g), &x, a.batch_size)?;
    }
    create_parent(&a.out)?;
    let mut w = std::io::BufWriter::new(fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    for (v, row) in x.chunks(model.hidden()).enumerate() {
        let cols: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{v}\t{}", cols.join("\t"))?;
    }
    w.flush()?;
    manifest(&sibling(&a.out, "manifest.json"), "embed", a, json!({ "dim": model.hidden(), "checkpoint_step": ckpt.manifest.step }))
}

fn tasks(a: &TasksArgs) -> Result<()> {
    let g = a.graph.load()?;
    let classes = a.test_classes.clone().unwrap_or_else(|| g.classes());
    let spec = TaskSpec {
        n_way: a.n_way,
        k_shot: a.k_shot,
        q_size: a.q_size,
        groups: a.groups,
        tasks_per_group: a.tasks_per_group,
        seed: a.seed,
    };
    let set = sample_tasks(&g, &classes, &spec, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    create_parent(&a.out)?;
    set.save(&a.out)?;
    manifest(&sibling(&a.out, "manifest.json"), "tasks", a, json!({ "spec": spec, "test_classes": classes }))?;
    log::info!("wrote {} tasks to {}", set.len(), a.out.display());
    Ok(())
}

fn eval<T: Real>(a: &EvalArgs) -> Result<()> {
    let registry = ModeRegistry::<T>::default();
    let mode = registry.get(&a.mode)?;
    let g = a.graph.load()?;
    let set = TaskSet::load(&a.tasks)?;
    for (group, index, task) in set.iter() {
        task.validate(&g, set.spec.k_shot, set.spec.q_size)
            .with_context(|| format!("task {group}/{index} of {}", a.tasks.display()))?;
    }
    let (ckpt, model) = load_model::<T>(&a.checkpoint)?;
    let params: &ParamStore<T> = &ckpt.params;
    let mut ctx = EvalContext::new(&g, &ckpt.vocab, &model, params);
    ctx.batch_size = a.batch_size;
    ctx.seed = a.seed;
    ctx.logreg = LogRegConfig {
        reg: a.reg,
        ..LogRegConfig::default()
    };
    ctx.prompt = PromptConfig {
        extra_tokens: a.extra_tokens,
        sigma_inner: a.sigma_inner,
        sigma_inter: a.sigma_inter,
        epochs: a.prompt_epochs,
        lr: a.prompt_lr,
        readout: a.readout,
        ..PromptConfig::default()
    };
    if let Some(dir) = &a.save_prompts {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        ctx.prompt_dir = Some(dir.clone());
    }
    let records = evaluate(mode, &ctx, &set, a.workers)?;
    let resolved = json!({
        "spec": set.spec,
        "prompt": ctx.prompt,
        "logreg": ctx.logreg,
        "checkpoint_step": ckpt.manifest.step,
        "dtype": T::DTYPE,
    });
    let rep = aggregate(mode.name(), &set.spec, &records, resolved.clone())?;
    create_parent(&a.report)?;
    fs::write(&a.report, rep.to_tsv()).with_context(|| format!("writing {}", a.report.display()))?;
    let rec_path = sibling(&a.report, "records.tsv");
    fs::write(&rec_path, report::records_to_tsv(&records)).with_context(|| format!("writing {}", rec_path.display()))?;
    manifest(&sibling(&a.report, "manifest.json"), "eval", a, resolved)?;
    log::info!("{} accuracy {:.4} ± {:.4} over {} groups", rep.mode, rep.mean, rep.std, rep.group_means.len());
    println!("{}\t{:.6}\t{:.6}", rep.mode, rep.mean, rep.std);
    Ok(())
}
