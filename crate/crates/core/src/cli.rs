//! Command-line front end. Every subcommand writes into a fresh run
//! directory `<out_dir>/<timestamp>-<hash>-<command>`.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{ExperimentConfig, DEFAULT_CONFIG_TOML};
use crate::error::{Error, Result};
use crate::harness::eval::{evaluate_all, layer_stats};
use crate::harness::experiment::{build_model, prepare, run_prepared};
use crate::harness::tasks::{gen_tasks, Datasets, PAD};
use crate::harness::train::{lr_at, MetricRecord};
use crate::harness::{run_ablation, TaskEval};
use crate::model::{
    checkpoint_step, count_params, freeze_report, load_checkpoint, measured_active, save_checkpoint, Gating,
    ParamCount, Sample, TokenBatch, ToyBackbone,
};
use crate::routing::{route_stats_csv, RoutingMode};
use crate::seed::derive_seed;

pub const CONFIG_FILE: &str = "config.toml";
pub const HASH_FILE: &str = "config_hash.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Parser)]
#[command(name = "moelora", version, about = "Mixture-of-LoRA-experts toy experiments")]
pub struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `output.out_dir`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Routing mode: `soft` or `topk:K`.
    #[arg(long, global = true)]
    pub mode: Option<RoutingMode>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a commented default config.
    Init {
        path: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the backbone, train adapters, save metrics and a checkpoint.
    Train,
    /// Evaluate a trained run, or the untrained adapted model without `--run`.
    Eval {
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Compare per-layer expert allocation strategies.
    Ablate,
    /// Trainable, active and frozen parameter counts.
    CountParams,
    /// Per-layer routing statistics on the specialist eval sets.
    RouteStats {
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

/// Exit code for an error: 2 invalid config, 3 divergence, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    step: Option<usize>,
    exit_code: i32,
}

pub fn error_json(e: &Error) -> String {
    let (kind, field, step) = match e {
        Error::Config { field, .. } => ("config", Some(field.as_str()), None),
        Error::Divergence { step, .. } => ("divergence", None, Some(*step)),
        Error::Tensor(_) => ("tensor", None, None),
        Error::Index { .. } => ("index", None, None),
        Error::Domain(_) => ("domain", None, None),
        Error::Key(_) => ("key", None, None),
        Error::Io { .. } => ("io", None, None),
        Error::Checkpoint(_) => ("checkpoint", None, None),
    };
    let rec = ErrorRecord { error: kind, message: e.to_string(), field, step, exit_code: exit_code(e) };
    serde_json::to_string(&rec).expect("error record serializes")
}

/// Parses `args`, runs the command and returns the process exit code.
/// Errors are printed to stderr as one JSON line.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(out) => {
            println!("{}", out.display());
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}

/// Loads the config named by the global flags and applies the overrides.
pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            ExperimentConfig::from_toml_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.train.mode = mode;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output.out_dir = dir.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one subcommand; returns the path it wrote.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    match &cli.command {
        Command::Init { path, force } => cmd_init(path, *force),
        Command::Train => cmd_train(&load_config(cli)?),
        Command::Eval { run } => cmd_eval(&load_config(cli)?, run.as_deref(), cli.mode),
        Command::Ablate => cmd_ablate(&load_config(cli)?),
        Command::CountParams => cmd_count_params(&load_config(cli)?),
        Command::RouteStats { run } => cmd_route_stats(&load_config(cli)?, run.as_deref(), cli.mode),
    }
}

pub fn cmd_init(path: &Path, force: bool) -> Result<PathBuf> {
    if path.exists() && !force {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::AlreadyExists, "refusing to overwrite without --force"),
        ));
    }
    fs::write(path, DEFAULT_CONFIG_TOML).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Creates a new run directory holding the config copy and its hash.
pub fn create_run_dir(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    let root = PathBuf::from(&cfg.output.out_dir);
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let hash = cfg.hash();
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let base = format!("{stamp}-{}-{command}", &hash[..12]);
    let mut attempt = 0;
    let dir = loop {
        let name = if attempt == 0 { base.clone() } else { format!("{base}-{attempt}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => break dir,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => attempt += 1,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    };
    write_file(&dir.join(CONFIG_FILE), &cfg.to_toml_string())?;
    write_file(&dir.join(HASH_FILE), &format!("{hash}\n"))?;
    Ok(dir)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_file(path, &(text + "\n"))
}

struct MetricsWriter {
    path: PathBuf,
    file: fs::File,
}

impl MetricsWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    fn write(&mut self, r: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config_hash: String,
    param_count: ParamCount,
    final_eval: &'a std::collections::BTreeMap<String, TaskEval>,
    deltas: &'a std::collections::BTreeMap<String, f64>,
    mean_entropy: Option<f64>,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = create_run_dir(cfg, "train")?;
    let result = (|| {
        let mut metrics = MetricsWriter::create(dir.join(METRICS_FILE))?;
        let prepared = prepare(cfg)?;
        let outcome = run_prepared(cfg, &prepared, &mut |r| metrics.write(r))?;
        save_checkpoint(&outcome.model, &cfg.hash(), cfg.train.total_steps, &dir.join(CHECKPOINT_DIR))?;
        write_file(&dir.join("route_stats.csv"), &route_stats_csv(&outcome.metrics.routing))?;
        write_json(
            &dir.join("summary.json"),
            &TrainSummary {
                config_hash: cfg.hash(),
                param_count: outcome.metrics.param_count,
                final_eval: &outcome.metrics.final_eval().tasks,
                deltas: &outcome.metrics.deltas,
                mean_entropy: outcome.metrics.mean_entropy(),
            },
        )
    })();
    finish(dir, result)
}

/// Records a failure inside the run directory before passing it on.
fn finish(dir: PathBuf, result: Result<()>) -> Result<PathBuf> {
    match result {
        Ok(()) => Ok(dir),
        Err(e) => {
            let _ = fs::write(dir.join("error.json"), error_json(&e) + "\n");
            Err(e)
        }
    }
}

/// Rebuilds a trained model from a run directory. Returns the model, its
/// config and the checkpoint step.
pub fn load_run(run: &Path) -> Result<(ToyBackbone, ExperimentConfig, usize)> {
    let cfg_path = run.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = ExperimentConfig::from_toml_str(&text)?;
    let mut model = ToyBackbone::new(cfg.backbone.clone(), 0)?;
    model.attach_adapters(&cfg.adapter, 0)?;
    let ck = run.join(CHECKPOINT_DIR);
    load_checkpoint(&mut model, &cfg.hash(), &ck)?;
    Ok((model, cfg, checkpoint_step(&ck)?))
}

fn data_for(cfg: &ExperimentConfig) -> Result<Datasets> {
    gen_tasks(&cfg.tasks.specialists, &cfg.tasks.general, cfg.train.seed)
}

/// The untrained adapted model of `cfg`: pretrained backbone plus zero-delta adapters.
fn fresh_model(cfg: &ExperimentConfig) -> Result<(ToyBackbone, Datasets)> {
    let prepared = prepare(cfg)?;
    let (model, _) = build_model(cfg, &prepared)?;
    Ok((model, prepared.data))
}

fn resolve(cfg: &ExperimentConfig, run: Option<&Path>, mode: Option<RoutingMode>) -> Result<(ToyBackbone, ExperimentConfig, Datasets, usize)> {
    let (model, mut run_cfg, data, step) = match run {
        Some(run) => {
            let (model, run_cfg, step) = load_run(run)?;
            let data = data_for(&run_cfg)?;
            (model, run_cfg, data, step)
        }
        None => {
            let (model, data) = fresh_model(cfg)?;
            (model, cfg.clone(), data, 0)
        }
    };
    if let Some(m) = mode {
        run_cfg.train.mode = m;
    }
    run_cfg.output = cfg.output.clone();
    run_cfg.validate()?;
    Ok((model, run_cfg, data, step))
}

pub fn cmd_eval(cfg: &ExperimentConfig, run: Option<&Path>, mode: Option<RoutingMode>) -> Result<PathBuf> {
    let (model, run_cfg, data, step) = resolve(cfg, run, mode)?;
    let dir = create_run_dir(&run_cfg, "eval")?;
    let result = (|| {
        let mut metrics = MetricsWriter::create(dir.join(METRICS_FILE))?;
        let (evals, gates) = evaluate_all(&model, &data, &Gating::from(run_cfg.train.mode), run_cfg.train.eval_batch_size)?;
        let lr = lr_at(step.min(run_cfg.train.total_steps), &run_cfg.train)?;
        for task in data.all() {
            let e = &evals[&task.spec.id];
            metrics.write(&MetricRecord {
                step,
                task: task.spec.id.clone(),
                split: "eval".into(),
                loss: e.loss,
                accuracy: Some(e.accuracy),
                entropy_mean: e.entropy_mean,
                tau_mean: e.tau_mean,
                lr,
            })?;
        }
        write_file(&dir.join("route_stats.csv"), &route_stats_csv(&layer_stats(&model, &gates)))?;
        for (id, e) in &evals {
            println!("{id:<12} loss {:.4}  accuracy {:.3}", e.loss, e.accuracy);
        }
        Ok(())
    })();
    finish(dir, result)
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = create_run_dir(cfg, "ablate")?;
    let result = (|| {
        let prepared = prepare(cfg)?;
        let table = run_ablation(cfg, &prepared, &cfg.ablation.strategies)?;
        write_file(&dir.join("ablation.csv"), &table.to_csv())?;
        let mut text = table.to_table();
        if let Some(ok) = table.top_heavy_at_least_uniform() {
            text.push_str(&format!("top_heavy >= uniform (average accuracy): {ok}\n"));
        }
        write_file(&dir.join("ablation.txt"), &text)?;
        print!("{text}");
        Ok(())
    })();
    finish(dir, result)
}

#[derive(Serialize)]
struct CountReport {
    mode: String,
    #[serde(flatten)]
    count: ParamCount,
    active_ratio: f64,
    measured_active_per_token: f64,
    tensors: Vec<crate::model::FreezeEntry>,
}

pub fn cmd_count_params(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = create_run_dir(cfg, "count-params")?;
    let result = (|| {
        let mut model = ToyBackbone::new(cfg.backbone.clone(), derive_seed(cfg.train.seed, "backbone", &[]))?;
        model.attach_adapters(&cfg.adapter, derive_seed(cfg.train.seed, "adapters", &[]))?;
        let count = count_params(&model, cfg.train.mode)?;
        let data = data_for(cfg)?;
        let probe: Vec<&Sample> = data.tasks.iter().flat_map(|t| t.eval.iter().take(8)).collect();
        let batch = TokenBatch::new(&probe, PAD)?;
        let measured = measured_active(&model, &batch, cfg.train.mode)?;
        println!(
            "mode {}  trainable {}  active {}  frozen {}  measured active/token {:.1}",
            cfg.train.mode, count.trainable, count.active, count.frozen, measured
        );
        write_json(
            &dir.join("count_params.json"),
            &CountReport {
                mode: cfg.train.mode.to_string(),
                count,
                active_ratio: count.active_ratio(),
                measured_active_per_token: measured,
                tensors: freeze_report(&model),
            },
        )
    })();
    finish(dir, result)
}

pub fn cmd_route_stats(cfg: &ExperimentConfig, run: Option<&Path>, mode: Option<RoutingMode>) -> Result<PathBuf> {
    let (model, run_cfg, data, _) = resolve(cfg, run, mode)?;
    let dir = create_run_dir(&run_cfg, "route-stats")?;
    let result = (|| {
        let (_, gates) = evaluate_all(&model, &data, &Gating::from(run_cfg.train.mode), run_cfg.train.eval_batch_size)?;
        let csv = route_stats_csv(&layer_stats(&model, &gates));
        print!("{csv}");
        write_file(&dir.join("route_stats.csv"), &csv)
    })();
    finish(dir, result)
}
