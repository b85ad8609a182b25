//! `mtl-lab` command-line driver: data generation, training, evaluation,
//! gradient checks, parameter budgets and comparison reports.

// `!(x > 0.0)` guards are written that way to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use mtl_lab::architectures::{count_params, count_spec_params, sharing_analysis, ArchitectureSpec, Model, StreamSpec};
use mtl_lab::experiments::Variant;
use mtl_lab::gradcheck::{run_suite, OPS};
use mtl_lab::io_util::{write_atomic, write_json};
use mtl_lab::losses::Task;
use mtl_lab::synthdata::{generate, load_dataset, write_dataset, Dataset, SceneSpec, Split};
use mtl_lab::trainer::{
    evaluate, load_checkpoint, save_checkpoint, write_epoch_log, Checkpoint, EvalOptions, TrainConfig, Trainer,
};
use mtl_lab::{Precision, Real};
use serde::Serialize;

use config::{read_config, DataConfig, ExperimentConfig};
use report::{build_report, collect_runs, emit_report, render_predictions, run_dir, Format, RunRecord};

/// Bad input from the user; maps to exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Invalid(pub String);

#[derive(Debug, Parser)]
#[command(name = "mtl-lab", version, about = "Shared-encoder multi-task perception lab")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed for data generation or training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Add a creation timestamp to written records and reports.
    #[arg(long, global = true)]
    pub stamp: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic driving-scene dataset.
    GenData(GenDataArgs),
    /// Train one model and write its checkpoint, epoch log and run record.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every differentiable op.
    GradCheck(GradCheckArgs),
    /// Parameter and MAC budget of a model, with its single-task counterparts.
    Params(ParamsArgs),
    /// Train several variants over several seeds and tabulate them.
    Compare(CompareArgs),
    /// Tabulate previously completed runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Drop a task's labels from a fraction of training samples, e.g. `detection=0.5`.
    #[arg(long = "drop", value_parser = parse_drop)]
    pub drop: Vec<(Task, f64)>,
    /// Also write a PPM panel per sample.
    #[arg(long)]
    pub ppm: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub base_width: Option<usize>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "val", value_parser = parse_split)]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Check every op.
    #[arg(long, conflicts_with = "op")]
    pub all: bool,
    #[arg(long)]
    pub op: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Comma-separated variant names; all of them by default.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<Variant>,
    /// Comma-separated seeds; `--seed` alone gives one, otherwise 1,2,3.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "csv,json,md")]
    pub format: Vec<Format>,
    /// Number of validation samples to render as PPM.
    #[arg(long, default_value_t = 0)]
    pub render: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory of runs written by `compare`.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "csv,json,md")]
    pub format: Vec<Format>,
    #[arg(long, default_value_t = 0)]
    pub render: usize,
}

fn parse_drop(s: &str) -> Result<(Task, f64), String> {
    let (task, frac) = s.split_once('=').ok_or("expected TASK=FRACTION")?;
    let task: Task = serde_json::from_value(serde_json::Value::String(task.to_string()))
        .map_err(|_| format!("unknown task `{task}`"))?;
    let frac: f64 = frac.parse().map_err(|_| format!("bad fraction `{frac}`"))?;
    Ok((task, frac))
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        other => Err(format!("unknown split `{other}` (train, val)")),
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// 1 for invalid input, 2 for failures while running.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.downcast_ref::<Invalid>().is_some() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<mtl_lab::Error>() {
            return if err.is_validation() { 1 } else { 2 };
        }
    }
    2
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(&cli.common, a),
        Command::Train(a) => train_cmd(&cli.common, a),
        Command::Eval(a) => eval_cmd(&cli.common, a),
        Command::GradCheck(a) => grad_check(&cli.common, a),
        Command::Params(a) => params_cmd(&cli.common, a),
        Command::Compare(a) => compare(&cli.common, a),
        Command::Report(a) => report_cmd(&cli.common, a),
    }
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Invalid("--out is required".into()).into())
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Invalid(format!("{what} {} does not exist", path.display())).into())
    }
}

fn stamp(common: &Common) -> Option<u64> {
    common.stamp.then(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    })
}

/// Prints to stdout, or writes to `--out` when given.
fn emit(common: &Common, text: &str) -> Result<()> {
    match &common.out {
        Some(p) => Ok(write_atomic(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn load_data(path: &Path) -> Result<Dataset> {
    existing(path, "dataset")?;
    Ok(load_dataset(path)?)
}

fn experiment(common: &Common) -> Result<ExperimentConfig> {
    Ok(match &common.config {
        Some(p) => read_config(p)?,
        None => ExperimentConfig::default(),
    })
}

fn gen_data(common: &Common, a: &GenDataArgs) -> Result<()> {
    let mut cfg: DataConfig = match &common.config {
        Some(p) => read_config(p)?,
        None => DataConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.scene.seed = s;
    }
    if let Some(n) = a.train {
        cfg.train = n;
    }
    if let Some(n) = a.val {
        cfg.val = n;
    }
    if let Some(n) = a.image_size {
        cfg.scene.image_size = n;
    }
    cfg.label_drop.extend(a.drop.iter().copied());
    cfg.ppm |= a.ppm;
    let out = require_out(common)?;
    let ds = generate(&cfg.scene, cfg.train, cfg.val, &cfg.label_drop)?;
    write_dataset(&ds, out, cfg.ppm)?;
    info!("wrote {} samples to {}", ds.samples.len(), out.display());
    println!("{}", ds.fingerprint());
    Ok(())
}

/// Trains at the configured precision, logging each epoch.
fn fit_at<T: Real>(
    model: &Model,
    resume: Option<&Checkpoint>,
    ds: &Dataset,
    cfg: &TrainConfig,
    tag: &str,
) -> Result<(Checkpoint, Vec<mtl_lab::trainer::EpochRecord>)> {
    let mut trainer = match resume {
        Some(c) => Trainer::<T>::resume(c, cfg.clone())?,
        None => Trainer::<T>::new(model, cfg.clone())?,
    };
    while trainer.epoch() < cfg.epochs {
        let rec = trainer.run_epoch(ds)?;
        info!("{tag} epoch {}/{} total {:.5}", rec.epoch + 1, cfg.epochs, rec.total);
    }
    Ok((trainer.checkpoint()?, trainer.log().to_vec()))
}

struct RunSpec<'a> {
    name: String,
    arch: ArchitectureSpec,
    cfg: TrainConfig,
    dataset: &'a Dataset,
    dataset_path: &'a Path,
    resume: Option<Checkpoint>,
    out: PathBuf,
    created_unix: Option<u64>,
}

fn execute_run(run: RunSpec<'_>) -> Result<RunRecord> {
    let tag = format!("{} seed {}", run.name, run.cfg.seed);
    let model = match &run.resume {
        Some(c) => c.model.clone(),
        None => Model::new(run.arch.clone(), run.cfg.seed)?,
    };
    let (ckpt, log) = match run.cfg.precision {
        Precision::Train32 => fit_at::<f32>(&model, run.resume.as_ref(), run.dataset, &run.cfg, &tag)?,
        Precision::Check64 => fit_at::<f64>(&model, run.resume.as_ref(), run.dataset, &run.cfg, &tag)?,
    };
    save_checkpoint(&ckpt, &run.out.join(report::CHECKPOINT_DIR))?;
    write_epoch_log(&log, &run.out.join(report::LOG_FILE))?;
    let metrics = evaluate(&ckpt.model, run.dataset, Split::Val, &EvalOptions::default())?;
    let record = RunRecord {
        variant: run.name,
        seed: run.cfg.seed,
        epochs: ckpt.epoch,
        dataset: run.dataset_path.to_path_buf(),
        dataset_fingerprint: run.dataset.fingerprint().to_string(),
        params: count_params(&ckpt.model)?.total,
        architecture: run.arch,
        metrics,
        created_unix: run.created_unix,
    };
    write_json(&run.out.join(report::RUN_FILE), &record)?;
    info!("{tag}: mean IoU {:?}", record.metrics.mean_iou);
    Ok(record)
}

fn train_cmd(common: &Common, a: &TrainArgs) -> Result<()> {
    let mut exp = experiment(common)?;
    if a.variant.is_some() {
        exp.variant = a.variant;
        exp.architecture = None;
        exp.strategy = None;
    }
    if let Some(w) = a.base_width {
        exp.base_width = w;
    }
    if let Some(e) = a.epochs {
        exp.train.epochs = e;
    }
    let data_path = a
        .dataset
        .clone()
        .or_else(|| exp.dataset.clone())
        .ok_or_else(|| Invalid("no dataset: pass --dataset or set `dataset` in the config".into()))?;
    let out = match (&common.out, &exp.report) {
        (Some(o), _) => o.clone(),
        (None, Some(r)) => r.clone(),
        (None, None) => return Err(Invalid("--out is required".into()).into()),
    };
    let ds = load_data(&data_path)?;
    let (arch, cfg) = exp.resolve(ds.spec(), common.seed.unwrap_or(0))?;
    let resume = match &a.resume {
        Some(p) => {
            existing(p, "checkpoint")?;
            Some(load_checkpoint(p, Some(&arch))?)
        }
        None => None,
    };
    let record = execute_run(RunSpec {
        name: exp
            .variant
            .map(|v| v.name().to_string())
            .unwrap_or_else(|| "custom".into()),
        arch,
        cfg,
        dataset: &ds,
        dataset_path: &data_path,
        resume,
        out: out.clone(),
        created_unix: stamp(common),
    })?;
    print!("{}", to_json(&record.metrics));
    Ok(())
}

fn eval_cmd(common: &Common, a: &EvalArgs) -> Result<()> {
    existing(&a.checkpoint, "checkpoint")?;
    let ckpt = load_checkpoint(&a.checkpoint, None)?;
    let ds = load_data(&a.dataset)?;
    let report = evaluate(&ckpt.model, &ds, a.split, &EvalOptions::default())?;
    emit(common, &to_json(&report))
}

fn grad_check(common: &Common, a: &GradCheckArgs) -> Result<()> {
    let ops: Vec<&str> = if a.all || a.op.is_empty() {
        OPS.to_vec()
    } else {
        a.op.iter().map(String::as_str).collect()
    };
    if let Some(bad) = ops.iter().find(|o| !OPS.contains(o)) {
        return Err(Invalid(format!("unknown op `{bad}`; known ops: {}", OPS.join(", "))).into());
    }
    if !(a.tolerance > 0.0) || a.cases == 0 {
        return Err(Invalid("--tolerance must be positive and --cases at least 1".into()).into());
    }
    let results = run_suite(&ops, a.cases, a.tolerance)?;
    let mut table = format!(
        "{:<20} {:>6} {:>9} {:>12}  result\n",
        "op", "cases", "failures", "max_error"
    );
    for r in &results {
        table.push_str(&format!(
            "{:<20} {:>6} {:>9} {:>12.3e}  {}\n",
            r.op,
            r.cases,
            r.failures,
            r.max_error,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    emit(common, &table)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        anyhow::bail!("gradient check failed for {}", failed.join(", "))
    }
}

#[derive(Serialize)]
struct ParamsOutput {
    variant: Option<Variant>,
    budget: mtl_lab::architectures::ParamBudget,
    single_task: BTreeMap<String, mtl_lab::architectures::ParamBudget>,
    sharing: Option<mtl_lab::architectures::SharingReport>,
}

/// Single-decoder counterpart of each decoder; two streams only where the decoder reads fused features.
fn single_task_specs(arch: &ArchitectureSpec) -> Vec<(String, ArchitectureSpec)> {
    arch.decoders
        .iter()
        .filter(|d| !arch.is_auxiliary(&d.name))
        .map(|d| {
            let streams = if d.reads_fused() {
                arch.streams
            } else {
                StreamSpec::single()
            };
            let spec = ArchitectureSpec {
                encoder: arch.encoder,
                streams,
                decoders: vec![d.clone()],
                auxiliary: Default::default(),
            };
            (d.name.clone(), spec)
        })
        .collect()
}

fn params_cmd(common: &Common, a: &ParamsArgs) -> Result<()> {
    let mut exp = experiment(common)?;
    if a.variant.is_some() {
        exp.variant = a.variant;
        exp.architecture = None;
    }
    if let Some(w) = a.base_width {
        exp.base_width = w;
    }
    let mut scene = SceneSpec::default();
    if let Some(n) = a.image_size {
        scene.image_size = n;
    }
    let arch = exp.architecture(&scene)?;
    let budget = count_spec_params(&arch)?;
    let mut single_task = BTreeMap::new();
    for (name, spec) in single_task_specs(&arch) {
        single_task.insert(name, count_spec_params(&spec)?);
    }
    let sharing = if single_task.len() >= 2 {
        let stl: Vec<_> = single_task.values().cloned().collect();
        Some(sharing_analysis(&stl, &budget)?)
    } else {
        None
    };
    emit(
        common,
        &to_json(&ParamsOutput {
            variant: exp.variant,
            budget,
            single_task,
            sharing,
        }),
    )
}

fn threads() -> Result<usize> {
    match std::env::var("MTL_LAB_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Invalid(format!("MTL_LAB_THREADS must be a positive integer, got `{v}`")).into()),
        },
    }
}

fn compare(common: &Common, a: &CompareArgs) -> Result<()> {
    let mut exp = experiment(common)?;
    if let Some(w) = a.base_width {
        exp.base_width = w;
    }
    if let Some(e) = a.epochs {
        exp.train.epochs = e;
    }
    let out = require_out(common)?;
    let data_path = a
        .dataset
        .clone()
        .or_else(|| exp.dataset.clone())
        .ok_or_else(|| Invalid("no dataset: pass --dataset or set `dataset` in the config".into()))?;
    let ds = load_data(&data_path)?;
    let variants: Vec<Variant> = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants.clone()
    };
    let seeds: Vec<u64> = match (a.seeds.is_empty(), common.seed) {
        (false, _) => a.seeds.clone(),
        (true, Some(s)) => vec![s],
        (true, None) => vec![1, 2, 3],
    };
    let runs_root = out.join("runs");
    let mut jobs = Vec::new();
    for &v in &variants {
        let mut e = exp.clone();
        e.variant = Some(v);
        e.architecture = None;
        e.strategy = None;
        for &seed in &seeds {
            let (arch, cfg) = e.resolve(ds.spec(), seed)?;
            jobs.push((v, arch, cfg));
        }
    }
    let workers = threads()?.min(jobs.len()).max(1);
    info!("{} runs on {workers} worker(s)", jobs.len());
    let queue = Mutex::new(jobs.into_iter().collect::<std::collections::VecDeque<_>>());
    let failures: Mutex<Vec<anyhow::Error>> = Mutex::new(Vec::new());
    let created = stamp(common);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let Some((v, arch, cfg)) = queue.lock().expect("queue").pop_front() else {
                    break;
                };
                let seed = cfg.seed;
                let run = RunSpec {
                    name: v.name().to_string(),
                    arch,
                    cfg,
                    dataset: &ds,
                    dataset_path: &data_path,
                    resume: None,
                    out: run_dir(&runs_root, v.name(), seed),
                    created_unix: created,
                };
                if let Err(e) = execute_run(run) {
                    failures
                        .lock()
                        .expect("failures")
                        .push(e.context(format!("{v} seed {seed}")));
                }
            });
        }
    });
    if let Some(e) = failures.into_inner().expect("failures").into_iter().next() {
        return Err(e);
    }
    let names: Vec<String> = variants.iter().map(|v| v.name().to_string()).collect();
    write_report(common, &runs_root, Some(&names), &a.format, a.render, out)
}

fn write_report(
    common: &Common,
    runs_root: &Path,
    variants: Option<&[String]>,
    formats: &[Format],
    render: usize,
    out: &Path,
) -> Result<()> {
    let runs = collect_runs(runs_root)?;
    let records: Vec<RunRecord> = runs.iter().map(|(_, r)| r.clone()).collect();
    let mut report = build_report(&records, variants)?;
    report.created_unix = stamp(common);
    for p in emit_report(&report, formats, out)? {
        info!("wrote {}", p.display());
    }
    if render > 0 {
        let order: Vec<String> = report.rows.iter().map(|r| r.variant.clone()).collect();
        let written = render_predictions(&runs, &order, render, out)?;
        info!("wrote {} renders", written.len());
    }
    if formats.contains(&Format::Md) {
        print!("{}", report.to_markdown());
    }
    Ok(())
}

fn report_cmd(common: &Common, a: &ReportArgs) -> Result<()> {
    existing(&a.runs, "runs directory")?;
    let out = require_out(common)?;
    let variants = (!a.variants.is_empty()).then_some(a.variants.as_slice());
    write_report(common, &a.runs, variants, &a.format, a.render, out).context("report")
}
