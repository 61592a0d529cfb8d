//! `rscd`: train, evaluate, ablate, gradient-check and export features of
//! the bitemporal change-detection model on synthetic scenes.
//!
//! Exit codes: 0 success, 1 failed check or internal error, 2 invalid
//! configuration or usage, 3 I/O or file-format failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use rscd_core::ablation::{run_ablation, AblationAxis, VariantResult};
use rscd_core::checkpoint::Checkpoint;
use rscd_core::data::{dataset_digest, generate_dataset};
use rscd_core::export::export_features;
use rscd_core::gradcheck::{run_suite, GradcheckOptions};
use rscd_core::head::TaskKind;
use rscd_core::metrics::{format_table, write_csv, MetricRow};
use rscd_core::model::{Model, ModelConfig};
use rscd_core::scan::ConcatMode;
use rscd_core::train::{evaluate, train, StageSelect, TrainConfig, TraceRow, TraceWriter};
use rscd_core::Error;

#[derive(Parser, Debug)]
#[command(name = "rscd", version, about = "Unified bitemporal change detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, loss trace and manifest.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to continue from (required for `--stage two`).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Score a checkpoint on a synthetic dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Also write metrics.csv and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model and one variant under identical seeds and compare.
    Ablate {
        #[arg(long)]
        axis: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Only run cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Negate convolution weight gradients (canary for the suite itself).
        #[arg(long, hide = true)]
        inject_conv_sign_flip: bool,
    },
    /// Write per-stage feature magnitude heatmaps (PGM) and raw tensors (UTSR).
    ExportFeatures {
        /// Trained checkpoint; without it a freshly initialized model is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Encoder stage 1-4; repeatable. Defaults to all four.
        #[arg(long = "stage")]
        stages: Vec<usize>,
        /// Index of the scene within the dataset.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/features")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Table,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Bcd,
    Scd,
    Bda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    One,
    Two,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ThresholdArg {
    Learned,
    Fixed,
    Single,
}

/// Task selection shared by every command.
#[derive(Args, Debug, Clone, Default)]
struct TaskArgs {
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Semantic classes for `--task scd`.
    #[arg(long)]
    classes: Option<usize>,
    /// Damage levels for `--task bda`.
    #[arg(long)]
    levels: Option<usize>,
}

impl TaskArgs {
    /// The task named by the flags, if any, with `fallback` supplying counts.
    fn resolve(&self, fallback: Option<TaskKind>) -> Option<TaskKind> {
        let classes = self.classes.or(match fallback {
            Some(TaskKind::Scd { classes }) => Some(classes),
            _ => None,
        });
        let levels = self.levels.or(match fallback {
            Some(TaskKind::Bda { levels }) => Some(levels),
            _ => None,
        });
        match self.task {
            Some(TaskArg::Bcd) => Some(TaskKind::Bcd),
            Some(TaskArg::Scd) => Some(TaskKind::Scd { classes: classes.unwrap_or(3) }),
            Some(TaskArg::Bda) => Some(TaskKind::Bda { levels: levels.unwrap_or(4) }),
            None => match fallback {
                Some(TaskKind::Scd { .. }) => Some(TaskKind::Scd { classes: classes.unwrap_or(3) }),
                Some(TaskKind::Bda { .. }) => Some(TaskKind::Bda { levels: levels.unwrap_or(4) }),
                other => other,
            },
        }
    }
}

/// Dataset specification for evaluation and export.
#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Disable pseudo-change distractors.
    #[arg(long)]
    no_distractors: bool,
}

/// Training configuration: defaults, then `--config`, then flags.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON configuration or a previous run manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    task: TaskArgs,
    /// Desk-scale model (the default).
    #[arg(long, conflicts_with_all = ["tiny", "small"])]
    toy: bool,
    /// Smallest model.
    #[arg(long, conflicts_with = "small")]
    tiny: bool,
    /// Narrow model.
    #[arg(long)]
    small: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    stage2_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
    #[arg(long)]
    stage_split: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    no_fcpg: bool,
    #[arg(long)]
    no_spm: bool,
    #[arg(long, value_enum)]
    thresholds: Option<ThresholdArg>,
    #[arg(long)]
    channel_concat: bool,
}

/// Record of one invocation, written next to its outputs.
#[derive(Serialize, Debug)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config_path: Option<PathBuf>,
    /// Fully resolved configuration; `--config` accepts this file to re-run.
    resolved: Value,
    seed: u64,
    artifacts: Vec<PathBuf>,
    wall_clock_secs: f64,
    version: &'static str,
}

impl RunManifest {
    fn new(command: &str, config_path: Option<PathBuf>, resolved: Value, seed: u64) -> Self {
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            config_path,
            resolved,
            seed,
            artifacts: Vec::new(),
            wall_clock_secs: 0.0,
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    fn write(mut self, dir: &Path, start: Instant) -> rscd_core::Result<()> {
        self.wall_clock_secs = start.elapsed().as_secs_f64();
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Data(_) | Error::Json(_) | Error::Argument { .. } => 2,
        Error::Io(_) | Error::Format(_) => 3,
        _ => 1,
    }
}

fn category(e: &Error) -> &'static str {
    match exit_code(e) {
        2 => "usage",
        3 => "io",
        _ => "internal",
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_json(path: &Path) -> rscd_core::Result<Value> {
    let text = std::fs::read_to_string(path)?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    // A run manifest carries the resolved configuration it was run with.
    Ok(match v.get("resolved") {
        Some(r) if v.get("command").is_some() => r.clone(),
        _ => v,
    })
}

impl ConfigArgs {
    fn resolve(&self) -> rscd_core::Result<TrainConfig> {
        let file = self.config.as_deref().map(read_json).transpose()?;
        let file_task: Option<TaskKind> = file
            .as_ref()
            .and_then(|f| f.pointer("/model/task"))
            .map(|t| serde_json::from_value(t.clone()))
            .transpose()
            .map_err(|e| Error::Config(format!("task in config: {e}")))?;
        let task = self.task.resolve(file_task).unwrap_or(TaskKind::Bcd);

        let mut v = serde_json::to_value(TrainConfig::toy(task))?;
        if let Some(f) = file {
            merge(&mut v, f);
        }
        let mut c: TrainConfig =
            serde_json::from_value(v).map_err(|e| Error::Config(format!("configuration: {e}")))?;
        c.model.task = task;
        let preset = if self.tiny {
            Some(ModelConfig::tiny(task))
        } else if self.small {
            Some(ModelConfig::small(task))
        } else if self.toy {
            Some(ModelConfig::toy(task))
        } else {
            None
        };
        if let Some(p) = preset {
            c.model = p.with_concat(c.model.concat);
        }
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {$(
                if let Some(x) = self.$flag {
                    $field = x;
                }
            )*};
        }
        set!(seed => c.seed, data_seed => c.data_seed, iters => c.max_iters, lr => c.lr,
             stage2_lr => c.stage2_lr, weight_decay => c.weight_decay, batch => c.batch_size,
             samples => c.samples, size => c.image_size, stage_split => c.stage_split);
        if let Some(s) = self.stage {
            c.stage = match s {
                StageArg::One => StageSelect::One,
                StageArg::Two => StageSelect::Two,
                StageArg::Both => StageSelect::Both,
            };
        }
        if self.grad_clip.is_some() {
            c.grad_clip = self.grad_clip;
        }
        if self.no_augment {
            c.augment = false;
        }
        if self.no_fcpg {
            c.model.encoder.fcpg_enabled = false;
        }
        if self.no_spm {
            c.model.encoder.fcpg.spm = false;
        }
        if let Some(t) = self.thresholds {
            use rscd_core::fcpg::ThresholdMode;
            c.model.encoder.fcpg.thresholds = match t {
                ThresholdArg::Learned => ThresholdMode::Learned,
                ThresholdArg::Fixed => ThresholdMode::Fixed,
                ThresholdArg::Single => ThresholdMode::Single,
            };
        }
        if self.channel_concat {
            c.model = c.model.with_concat(ConcatMode::Channel);
        }
        c.validate()?;
        Ok(c)
    }
}

fn emit(rows: &[MetricRow], format: Format) -> rscd_core::Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match format {
        Format::Csv => write_csv(rows, &mut out)?,
        Format::Table => out.write_all(format_table(rows).as_bytes())?,
    }
    Ok(())
}

fn save_csv(rows: &[MetricRow], path: &Path) -> rscd_core::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_csv(rows, &mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_train(cfg_args: &ConfigArgs, init: Option<&Path>, out: &Path) -> rscd_core::Result<()> {
    let start = Instant::now();
    let cfg = cfg_args.resolve()?;
    let init = init.map(Checkpoint::load).transpose()?;
    let data = generate_dataset(
        cfg.model.task,
        cfg.samples,
        cfg.image_size,
        cfg.image_size,
        cfg.data_seed,
        &cfg.distractors,
    )?;
    std::fs::create_dir_all(out)?;
    let trace_path = out.join("trace.tsv");
    let mut trace = TraceWriter::new(BufWriter::new(File::create(&trace_path)?));
    let st = train(&cfg, &data, init, &mut |r: &TraceRow| Ok(trace.write(r)?))?;
    trace.into_inner().flush()?;

    let ck_path = out.join("checkpoint.uckp");
    st.checkpoint().save(&ck_path)?;
    let ev = evaluate(&st.model, &st.params, &data, cfg.batch_size)?;
    let rows = ev.rows("train");
    let metrics_path = out.join("metrics.csv");
    save_csv(&rows, &metrics_path)?;
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?)?;
    emit(&rows, Format::Table)?;

    let mut m = RunManifest::new("train", cfg_args.config.clone(), serde_json::to_value(&cfg)?, cfg.seed);
    m.artifacts = vec![ck_path, trace_path, metrics_path, cfg_path];
    m.write(out, start)
}

fn cmd_eval(checkpoint: &Path, data: &DataArgs, format: Format, out: Option<&Path>) -> rscd_core::Result<()> {
    let start = Instant::now();
    let ck = Checkpoint::load(checkpoint)?;
    let task = ck.model.task;
    if let Some(t) = data.task.resolve(Some(task)) {
        if t != task {
            return Err(Error::Config(format!(
                "checkpoint was trained for {task:?}, dataset is {t:?}"
            )));
        }
    }
    let distractors = if data.no_distractors {
        rscd_core::data::DistractorConfig::none()
    } else {
        rscd_core::data::DistractorConfig::default()
    };
    let set = generate_dataset(task, data.samples, data.size, data.size, data.data_seed, &distractors)?;
    let (model, _) = Model::new(&ck.model, 0)?;
    let ev = evaluate(&model, &ck.params, &set, 8)?;
    for f in &ev.flags {
        eprintln!("warning: degenerate metric ({f})");
    }
    let name = format!("synthetic-{:016x}", dataset_digest(&set));
    let rows = ev.rows(&name);
    emit(&rows, format)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("metrics.csv");
        save_csv(&rows, &path)?;
        let resolved = serde_json::json!({
            "checkpoint": checkpoint,
            "task": task,
            "samples": data.samples,
            "size": data.size,
            "data_seed": data.data_seed,
            "distractors": distractors,
        });
        let mut m = RunManifest::new("eval", None, resolved, data.data_seed);
        m.artifacts = vec![path];
        m.write(dir, start)?;
    }
    Ok(())
}

fn ablation_rows(results: &[VariantResult]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for r in results {
        let ds = format!("synthetic-{:016x}", r.train_digest);
        for (m, v) in &r.train.metrics {
            rows.push(MetricRow::new(&ds, &r.variant, m, *v));
        }
        if let Some(a) = r.distractor_activation {
            let bs = format!("benchmark-{:016x}", r.benchmark_digest);
            rows.push(MetricRow::new(&bs, &r.variant, "distractor_activation", a));
        }
    }
    rows
}

fn cmd_ablate(axis: &str, cfg_args: &ConfigArgs, format: Format, out: &Path) -> rscd_core::Result<()> {
    let start = Instant::now();
    let axis: AblationAxis = axis.parse()?;
    let cfg = cfg_args.resolve()?;
    std::fs::create_dir_all(out)?;
    let mut traces = Vec::new();
    let mut current = String::new();
    let mut writer: Option<TraceWriter<BufWriter<File>>> = None;
    let results = run_ablation(&cfg, axis, &mut |name: &str, r: &TraceRow| {
        if current != name {
            if let Some(w) = writer.take() {
                w.into_inner().flush()?;
            }
            let p = out.join(format!("trace-{name}.tsv"));
            writer = Some(TraceWriter::new(BufWriter::new(File::create(&p)?)));
            traces.push(p);
            current = name.to_string();
        }
        Ok(writer.as_mut().expect("writer opened above").write(r)?)
    })?;
    if let Some(w) = writer.take() {
        w.into_inner().flush()?;
    }
    let rows = ablation_rows(&results);
    let path = out.join("ablation.csv");
    save_csv(&rows, &path)?;
    emit(&rows, format)?;
    let resolved = serde_json::json!({ "axis": axis, "train": cfg });
    let mut m = RunManifest::new("ablate", cfg_args.config.clone(), resolved, cfg.seed);
    m.artifacts = traces;
    m.artifacts.push(path);
    m.write(out, start)
}

fn cmd_gradcheck(filter: Option<&str>, seed: u64, out: Option<&Path>, flip: bool) -> rscd_core::Result<bool> {
    let start = Instant::now();
    rscd_core::kernels::inject_conv_grad_sign_flip(flip);
    let opts = GradcheckOptions { seed, ..Default::default() };
    let reports = run_suite(&opts, filter)?;
    rscd_core::kernels::inject_conv_grad_sign_flip(false);
    let stdout = std::io::stdout();
    let mut o = stdout.lock();
    writeln!(o, "{:<22} {:>12} {:>7} {:>6}  worst tensor", "op", "max_rel_err", "coords", "result")?;
    for r in &reports {
        writeln!(
            o,
            "{:<22} {:>12.3e} {:>7} {:>6}  {}",
            r.op,
            r.max_rel_err,
            r.coords,
            if r.passed { "PASS" } else { "FAIL" },
            r.worst
        )?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    let ok = failed.is_empty();
    writeln!(
        o,
        "{} of {} ops within {:e} in {:.1}s",
        reports.len() - failed.len(),
        reports.len(),
        opts.tol,
        start.elapsed().as_secs_f64()
    )?;
    if !ok {
        eprintln!("gradient check failed: {}", failed.join(", "));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("gradcheck.json");
        std::fs::write(&path, serde_json::to_string_pretty(&reports)?)?;
        let resolved = serde_json::json!({ "filter": filter, "h": opts.h, "tol": opts.tol, "samples": opts.samples });
        let mut m = RunManifest::new("gradcheck", None, resolved, seed);
        m.artifacts = vec![path];
        m.write(dir, start)?;
    }
    Ok(ok)
}

fn cmd_export(
    checkpoint: Option<&Path>,
    stages: &[usize],
    sample: usize,
    data: &DataArgs,
    seed: u64,
    out: &Path,
) -> rscd_core::Result<()> {
    let start = Instant::now();
    let stages: Vec<usize> = if stages.is_empty() { vec![1, 2, 3, 4] } else { stages.to_vec() };
    if let Some(&s) = stages.iter().find(|&&s| !(1..=4).contains(&s)) {
        return Err(Error::Usage(format!("stage {s} out of range 1..=4")));
    }
    let (cfg, params) = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (ck.model, ck.params)
        }
        None => {
            let task = data.task.resolve(None).unwrap_or(TaskKind::Bcd);
            let cfg = ModelConfig::toy(task);
            let (_, params) = Model::new(&cfg, seed)?;
            (cfg, params)
        }
    };
    let (model, _) = Model::new(&cfg, 0)?;
    let distractors = if data.no_distractors {
        rscd_core::data::DistractorConfig::none()
    } else {
        rscd_core::data::DistractorConfig::default()
    };
    let n = data.samples.max(sample + 1);
    let set = generate_dataset(cfg.task, n, data.size, data.size, data.data_seed, &distractors)?;
    let exports = export_features(&model, &params, &set[sample], &stages, out)?;
    let stdout = std::io::stdout();
    let mut o = stdout.lock();
    writeln!(o, "stage,width,height,change_ratio,pgm")?;
    for e in &exports {
        let ratio = e.change_ratio.map_or("nan".to_string(), |r| format!("{r:.6}"));
        writeln!(o, "{},{},{},{},{}", e.stage, e.width, e.height, ratio, e.pgm.display())?;
    }
    let resolved = serde_json::json!({
        "checkpoint": checkpoint,
        "model": cfg,
        "stages": stages,
        "sample": sample,
        "size": data.size,
        "data_seed": data.data_seed,
        "distractors": distractors,
        "exports": exports,
    });
    let mut m = RunManifest::new("export-features", None, resolved, seed);
    m.artifacts = exports.iter().flat_map(|e| [e.pgm.clone(), e.utsr.clone()]).collect();
    m.write(out, start)
}

fn run(cli: Cli) -> rscd_core::Result<bool> {
    match &cli.cmd {
        Command::Train { cfg, init, out } => cmd_train(cfg, init.as_deref(), out).map(|_| true),
        Command::Eval { checkpoint, data, format, out } => {
            cmd_eval(checkpoint, data, *format, out.as_deref()).map(|_| true)
        }
        Command::Ablate { axis, cfg, format, out } => cmd_ablate(axis, cfg, *format, out).map(|_| true),
        Command::Gradcheck { filter, seed, out, inject_conv_sign_flip } => {
            cmd_gradcheck(filter.as_deref(), *seed, out.as_deref(), *inject_conv_sign_flip)
        }
        Command::ExportFeatures { checkpoint, stages, sample, data, seed, out } => {
            cmd_export(checkpoint.as_deref(), stages, *sample, data, *seed, out).map(|_| true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error[{}]: {e}", category(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
