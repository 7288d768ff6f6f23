use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use ctxmod_core::blackbox::Arch;
use ctxmod_core::data::{chw_to_image, load_contexts, targets_of, ContextData};
use ctxmod_core::eval::{evaluate_run, readout_batch, score_quadrants, EvalConfig};
use ctxmod_core::metrics::{Bandwidth, MetricsReport, MmdConfig};
use ctxmod_core::vae::{LossWeights, Mode, Model, ModelConfig, TrainConfig};
use ctxmod_ident::{run_experiment, IdentConfig, SampleEstimator};
use ctxmod_quad::{decode_payload, generate_dataset, ContextId, Dataset, DatasetConfig, Image};

use crate::config::{config_hash, RunConfig};
use crate::grid::{parse_grid, square_grid, write_grid};

#[derive(Debug, Parser)]
#[command(name = "ctxmod", version, about = "Context-module VAE toolkit", propagate_version = true)]
pub struct Cli {
    /// Flat key = value file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Single worker thread for bitwise-reproducible reductions.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads (ignored with --deterministic).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic quad dataset.
    Quad {
        #[command(subcommand)]
        command: QuadCommand,
    },
    /// Train a model on a quad dataset.
    Train(TrainArgs),
    /// Draw samples from a context.
    Sample(SampleArgs),
    /// Draw samples from a multi-target context never seen in training.
    Compose(SampleArgs),
    /// Reconstruction and generation metrics for checkpoints.
    Eval(EvalArgs),
    /// Linear-Gaussian identifiability experiment.
    Ident(IdentArgs),
    /// Tile a raw image payload into a PNG.
    Grid(GridArgs),
}

#[derive(Debug, Subcommand)]
pub enum QuadCommand {
    /// Render a dataset directory.
    Gen(GenArgs),
    /// Tile images of one context into a PNG.
    View(ViewArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 5000)]
    pub per_context: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training contexts; defaults to obs and the six single interventions.
    #[arg(long, value_delimiter = ',')]
    pub contexts: Vec<ContextId>,
    /// Held-out pair contexts such as quad1+quad4, or `all` for the evaluation set.
    #[arg(long, value_delimiter = ',')]
    pub double: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub ctx: ContextId,
    #[arg(long, default_value = "8x8")]
    pub grid: String,
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
    #[arg(long)]
    pub png: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchChoice {
    Mlp,
    Conv3,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "context_module")]
    pub mode: Mode,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda_gl: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda_l2: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.3)]
    pub val_fraction: f64,
    /// Cap on validation images per context.
    #[arg(long)]
    pub val_limit: Option<usize>,
    /// Cap on images loaded per context.
    #[arg(long)]
    pub per_context: Option<usize>,
    #[arg(long, value_enum, default_value_t = ArchChoice::Mlp)]
    pub arch: ArchChoice,
    #[arg(long, default_value_t = 512)]
    pub hidden: usize,
    #[arg(long, default_value_t = 128)]
    pub dim_e: usize,
    /// Continue from a checkpoint of the same mode.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub freeze_blackbox: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines epoch log; defaults to OUT.log.jsonl.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub ctx: ContextId,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub png: Option<PathBuf>,
    /// ROWSxCOLS; defaults to the smallest near-square grid.
    #[arg(long)]
    pub grid: Option<String>,
    /// Raw f32 little-endian NHWC payload.
    #[arg(long)]
    pub raw: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One checkpoint per training seed.
    #[arg(long, required = true, value_delimiter = ',')]
    pub ckpt: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset with held-out pair contexts; defaults to the pairs in --data.
    #[arg(long)]
    pub ood: Option<PathBuf>,
    /// Evaluation seeds per checkpoint.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 1000)]
    pub max_samples: usize,
    /// Fixed RBF bandwidth instead of the median heuristic.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub latex: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorChoice {
    Plugin,
    Logistic,
}

#[derive(Debug, Args)]
pub struct IdentArgs {
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub m: usize,
    #[arg(long, default_value_t = 8)]
    pub de: usize,
    #[arg(long, default_value_t = 50_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1.0)]
    pub omega: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = EstimatorChoice::Plugin)]
    pub estimator: EstimatorChoice,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Raw f32 little-endian NHWC payload.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
    #[arg(long)]
    pub png: PathBuf,
}

/// Subcommand names from the root to the leaf.
fn leaf_path(m: &ArgMatches) -> (Vec<String>, &ArgMatches) {
    let mut path = Vec::new();
    let mut cur = m;
    while let Some((name, sub)) = cur.subcommand() {
        path.push(name.to_string());
        cur = sub;
    }
    (path, cur)
}

/// `(long, id, is_bool)` for every configurable flag of the leaf command.
fn leaf_args(path: &[String]) -> Vec<(String, String, bool)> {
    let mut cmd = Cli::command();
    cmd.build();
    let mut cur = &cmd;
    for p in path {
        cur = cur.find_subcommand(p).expect("parsed subcommand exists");
    }
    cur.get_arguments()
        .filter_map(|a| {
            let long = a.get_long()?;
            let skip = matches!(long, "config" | "help" | "version");
            let is_bool = matches!(a.get_action(), ArgAction::SetTrue);
            (!skip).then(|| (long.to_string(), a.get_id().to_string(), is_bool))
        })
        .collect()
}

/// Inserts `extra` right after the subcommand tokens in `argv`.
fn splice(argv: &[String], path: &[String], extra: Vec<String>) -> Vec<String> {
    let mut pos = 1;
    let mut want = path.iter();
    let mut next = want.next();
    let mut skip_value = false;
    while let Some(name) = next {
        let Some(tok) = argv.get(pos) else { break };
        if skip_value {
            skip_value = false;
        } else if tok == "--config" || tok == "--threads" {
            skip_value = true;
        } else if tok == name {
            next = want.next();
        }
        pos += 1;
    }
    let mut out = argv[..pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos..]);
    out
}

fn resolved_values(m: &ArgMatches) -> BTreeMap<String, String> {
    m.ids()
        .filter(|id| id.as_str() != "config")
        .filter_map(|id| {
            let raw = m.get_raw(id.as_str())?;
            let v: Vec<String> = raw.map(|s| s.to_string_lossy().into_owned()).collect();
            Some((id.to_string(), v.join(",")))
        })
        .collect()
}

/// The command tree with no argument required, so a config file can supply them.
fn relaxed(cmd: clap::Command) -> clap::Command {
    let names: Vec<String> = cmd.get_subcommands().map(|c| c.get_name().to_string()).collect();
    names
        .iter()
        .fold(cmd.mut_args(|a| a.required(false)), |c, name| c.mut_subcommand(name, relaxed))
}

/// Parses `argv` (including the program name), applying `--config` when given.
pub fn parse(argv: &[String]) -> std::result::Result<(Cli, BTreeMap<String, String>), clap::Error> {
    let first = relaxed(Cli::command()).try_get_matches_from(argv)?;
    let matches = match first.get_one::<PathBuf>("config") {
        None => Cli::command().try_get_matches_from(argv)?,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Cli::command().error(clap::error::ErrorKind::Io, format!("reading {}: {e}", path.display()))
            })?;
            let (sub, leaf) = leaf_path(&first);
            let args = leaf_args(&sub);
            let flags: BTreeMap<String, bool> = args.iter().map(|(l, _, b)| (l.clone(), *b)).collect();
            let explicit: Vec<String> = args
                .iter()
                .filter(|(_, id, _)| leaf.value_source(id) == Some(ValueSource::CommandLine))
                .map(|(l, _, _)| l.clone())
                .collect();
            let extra = RunConfig::parse(&text)
                .and_then(|rc| rc.to_args(&sub.join(" "), &flags, &explicit))
                .map_err(|e| Cli::command().error(clap::error::ErrorKind::InvalidValue, e))?;
            Cli::command().try_get_matches_from(splice(argv, &sub, extra))?
        }
    };
    let resolved = resolved_values(leaf_path(&matches).1);
    let cli = Cli::from_arg_matches(&matches)?;
    Ok((cli, resolved))
}

/// Entry point returning the process exit code.
pub fn main_with(argv: Vec<String>) -> i32 {
    let _ = env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .parse_default_env()
        .format_timestamp_secs()
        .try_init();
    let (cli, resolved) = match parse(&argv) {
        Ok(v) => v,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli, &resolved) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", render_chain(&e));
            1
        }
    }
}

/// Joins the error chain, dropping causes already quoted by the message above them.
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

pub fn run(cli: Cli, resolved: &BTreeMap<String, String>) -> Result<()> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(t) = threads {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    log::info!(
        "ctxmod {} config_hash={} seed={}",
        env!("CARGO_PKG_VERSION"),
        config_hash(resolved),
        resolved.get("seed").map_or("-", String::as_str)
    );
    match cli.command {
        Command::Quad { command: QuadCommand::Gen(a) } => quad_gen(a),
        Command::Quad { command: QuadCommand::View(a) } => quad_view(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a, false),
        Command::Compose(a) => sample(a, true),
        Command::Eval(a) => eval(a),
        Command::Ident(a) => ident(a),
        Command::Grid(a) => grid(a),
    }
}

fn grid_dims(spec: Option<&str>, count: usize) -> Result<(usize, usize)> {
    Ok(match spec {
        Some(s) => parse_grid(s)?,
        None => square_grid(count),
    })
}

fn quad_gen(a: GenArgs) -> Result<()> {
    let mut contexts = if a.contexts.is_empty() { ContextId::training_set() } else { a.contexts };
    for d in &a.double {
        if d == "all" {
            contexts.extend(ContextId::eval_doubles());
            continue;
        }
        let ctx: ContextId = d.parse()?;
        if ctx.targets().len() != 2 {
            bail!("--double expects pair contexts, got {d:?}");
        }
        contexts.push(ctx);
    }
    let config = DatasetConfig { n: a.n, contexts: contexts.iter().map(|c| (c.clone(), a.per_context)).collect(), seed: a.seed };
    let manifest = generate_dataset(&config, &a.out)?;
    log::info!("wrote {} contexts of {} images to {}", manifest.contexts.len(), a.per_context, a.out.display());
    Ok(())
}

fn quad_view(a: ViewArgs) -> Result<()> {
    let ds = Dataset::open(&a.input)?;
    let images = ds.load(&a.ctx)?;
    let (rows, cols) = parse_grid(&a.grid)?;
    let tail = images.get(a.offset..).unwrap_or_default();
    write_grid(tail, rows, cols, &a.png)
}

fn split_contexts(data: Vec<ContextData>) -> (Vec<ContextData>, Vec<ContextData>) {
    data.into_iter().partition(|c| c.targets.len() <= 1)
}

fn cap(mut data: Vec<ContextData>, per_context: Option<usize>) -> Vec<ContextData> {
    if let Some(k) = per_context {
        for c in &mut data {
            let keep = k.min(c.len()) * c.pixels();
            c.images.truncate(keep);
        }
    }
    data
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let (train, held_out) = split_contexts(load_contexts(&ds, &[])?);
    if !held_out.is_empty() {
        log::info!("holding out {} multi-target contexts", held_out.len());
    }
    let train = cap(train, a.per_context);
    let mut model = match &a.init {
        Some(p) => {
            let m = Model::load(p)?;
            if m.config.mode != a.mode {
                bail!("checkpoint mode {} differs from --mode {}", m.config.mode.name(), a.mode.name());
            }
            m
        }
        None => {
            let mut config = ModelConfig::quad(ds.manifest.n, a.mode);
            config.arch = match a.arch {
                ArchChoice::Mlp => Arch::Mlp { hidden: a.hidden },
                ArchChoice::Conv3 => Arch::Conv3,
            };
            config.dim_e = a.dim_e;
            Model::new(config, a.seed)?
        }
    };
    let cfg = TrainConfig {
        weights: LossWeights { beta: a.beta, lambda_gl: a.lambda_gl, lambda_l2: a.lambda_l2 },
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        val_fraction: a.val_fraction,
        val_limit: a.val_limit,
        freeze_blackbox: a.freeze_blackbox,
    };
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log_file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut write_err = None;
    model.train(&train, &cfg, |e| {
        log::info!(
            "epoch {} loss {:.4} elbo_bpd {:.4} recon_bpd {:.4} kl {:.3} ({:.1}s)",
            e.epoch, e.train_loss, e.elbo_bpd, e.recon_bpd, e.kl, e.seconds
        );
        let line = serde_json::to_string(e).expect("epoch log serialises");
        if let Err(err) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        bail!("writing {}: {err}", log_path.display());
    }
    model.save(&a.out)?;
    log::info!("saved {}", a.out.display());
    Ok(())
}

fn images_of(x: &ctxmod_autodiff::Tensor, n: usize) -> Result<Vec<Image>> {
    let pixels = 3 * n * n;
    Ok(x.data().chunks(pixels).map(|row| chw_to_image(row, n)).collect::<ctxmod_core::Result<_>>()?)
}

fn write_raw(images: &[Image], path: &Path) -> Result<()> {
    let bytes: Vec<u8> = images.iter().flat_map(|im| im.data().iter().flat_map(|v| v.to_le_bytes())).collect();
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn sample(a: SampleArgs, compose: bool) -> Result<()> {
    if compose && a.ctx.targets().len() < 2 {
        bail!("compose needs a multi-target context such as quad1+quad4, got {}", a.ctx);
    }
    let model = Model::load(&a.ckpt)?;
    let targets = targets_of(&a.ctx);
    let x = model.generate(&targets, a.count, a.seed)?;
    let n = model.config.n;
    let images = images_of(&x, n)?;
    if let Some(png) = &a.png {
        let (rows, cols) = grid_dims(a.grid.as_deref(), a.count)?;
        write_grid(&images, rows, cols, png)?;
    }
    if let Some(raw) = &a.raw {
        write_raw(&images, raw)?;
    }
    let score = score_quadrants(&readout_batch(&x, n)?, &targets);
    println!("{}", serde_json::json!({ "context": a.ctx.label(), "count": a.count, "quadrants": score }));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let (train, mut ood) = split_contexts(load_contexts(&Dataset::open(&a.data)?, &[])?);
    if let Some(dir) = &a.ood {
        ood = split_contexts(load_contexts(&Dataset::open(dir)?, &[])?).1;
    }
    if ood.is_empty() {
        log::warn!("no held-out pair contexts; the ood group will be empty");
    }
    let mmd = MmdConfig {
        max_samples: a.max_samples,
        seed: a.seed,
        bandwidth: a.sigma.map_or(Bandwidth::Median, Bandwidth::Fixed),
    };
    let mut runs = Vec::new();
    let mut quadrants = Vec::new();
    for path in &a.ckpt {
        let model = Model::load(path)?;
        for s in 0..a.seeds {
            let seed = a.seed.wrapping_add(s as u64);
            let cfg = EvalConfig { count: a.count, seed, mmd };
            let mut run = evaluate_run(&model, &train, &ood, &cfg)?;
            run.seed = model.train_config.map_or(seed, |t| t.seed);
            log::info!("{}: elbo_bpd {:.4}", path.display(), run.elbo_bpd);
            runs.push(run);
        }
        let mut scores = BTreeMap::new();
        for c in train.iter().chain(&ood) {
            let x = model.generate(&c.targets, a.count, a.seed)?;
            scores.insert(c.label.clone(), score_quadrants(&readout_batch(&x, model.config.n)?, &c.targets));
        }
        quadrants.push(serde_json::json!({ "ckpt": path.display().to_string(), "contexts": scores }));
    }
    let report = MetricsReport::aggregate(mmd, runs);
    fs::write(&a.out, report.to_json()).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(tex) = &a.latex {
        fs::write(tex, report.to_latex()).with_context(|| format!("writing {}", tex.display()))?;
    }
    println!("{}", serde_json::to_string_pretty(&quadrants)?);
    Ok(())
}

fn ident(a: IdentArgs) -> Result<()> {
    let config = IdentConfig {
        n: a.n,
        m: a.m,
        d_e: a.de,
        samples: a.samples,
        omega: a.omega,
        seed: a.seed,
        estimator: match a.estimator {
            EstimatorChoice::Plugin => SampleEstimator::GaussianPlugIn,
            EstimatorChoice::Logistic => SampleEstimator::Logistic,
        },
    };
    let report = run_experiment(config)?;
    if let Some(out) = &a.out {
        fs::write(out, report.to_json()).with_context(|| format!("writing {}", out.display()))?;
    }
    let summary = serde_json::json!({
        "assumptions_hold": report.assumptions.holds,
        "llr_max_abs_diff": report.llr.max_abs_diff,
        "oracle_rel_error": report.oracle.as_ref().map(|r| r.rel_error),
        "sample_rel_error": report.sampled.as_ref().map(|r| r.rel_error),
        "support_exact": report.sampled.as_ref().map(|r| r.support_exact),
        "permutation_identified": report.permutation.as_ref().map(|p| p.identified),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn grid(a: GridArgs) -> Result<()> {
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let images = decode_payload(&bytes, a.n)?;
    let tail = images.get(a.offset..).unwrap_or_default();
    let (rows, cols) = grid_dims(a.grid.as_deref(), tail.len())?;
    write_grid(tail, rows, cols, &a.png)
}
