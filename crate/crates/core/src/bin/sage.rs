//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sage::learner::{gen_atomic_tasks, gen_tasks, TaskKind, TemplateFamily};
use sage::lora_store::AdapterConfig;
use sage::pipeline::sweep::{grid, rank_lr_sweep, score_detection_set, threshold_sweep, weights_sweep, SweepKind};
use sage::pipeline::{
    detection_set, load_or_pretrain, seed_stability_run, write_run_outputs, Pipeline, PipelineConfig, ScriptedStream,
};
use sage::sample::{read_jsonl, write_jsonl, Sample};
use sage::SageError;

#[derive(Parser)]
#[command(name = "sage", version, about = "Trigger-guided test-time adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a JSONL stream and write a report directory.
    Run(RunArgs),
    /// Sensitivity sweep over thresholds, trigger weights or adapter rank and learning rate.
    Sweep(SweepArgs),
    /// Repeat the pipeline over shuffled stream orders and summarize held-out EM.
    Seeds(SeedsArgs),
    /// Generate synthetic arithmetic tasks as JSONL.
    GenTasks(GenTasksArgs),
    /// Write the scripted stream and its held-out set as JSONL.
    GenStream(GenStreamArgs),
}

#[derive(Args)]
struct Common {
    /// TOML configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input: PathBuf,
    /// Held-out samples evaluated before and after adaptation.
    #[arg(long)]
    holdout: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    kind: SweepKind,
    /// Labelled samples for threshold/weights sweeps, training samples for rank_lr.
    /// Defaults to a synthetic set.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Grid start, end and step for threshold and weight axes.
    #[arg(long, default_value_t = 0.0)]
    lo: f64,
    #[arg(long, default_value_t = 1.0)]
    hi: f64,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 8, 12])]
    ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.03, 0.1, 0.2])]
    lrs: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SeedsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    /// Stream to shuffle; defaults to the scripted stream.
    #[arg(long, requires = "holdout")]
    input: Option<PathBuf>,
    #[arg(long, requires = "input")]
    holdout: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenTasksArgs {
    #[arg(long, value_enum)]
    kind: TaskKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = TemplateFamily::Story)]
    family: TemplateFamily,
    #[arg(long, default_value_t = 1)]
    level: u32,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenStreamArgs {
    #[arg(long, default_value_t = 72)]
    per_template: usize,
    #[arg(long, default_value_t = 36)]
    id_samples: usize,
    #[arg(long, default_value_t = 100)]
    holdout_per_template: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Directory receiving stream.jsonl and holdout.jsonl.
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    error: SageError,
}

fn usage(error: SageError) -> Failure {
    Failure { code: 1, error }
}

fn data(error: SageError) -> Failure {
    Failure { code: 2, error }
}

fn runtime(error: SageError) -> Failure {
    let code = if matches!(error, SageError::Config(_)) { 1 } else { 3 };
    Failure { code, error }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Seeds(a) => seeds(a),
        Command::GenTasks(a) => gen(a),
        Command::GenStream(a) => gen_stream(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(common: &Common) -> Result<(PipelineConfig, String), Failure> {
    match &common.config {
        Some(p) => PipelineConfig::load(p).map_err(usage),
        None => {
            let c = PipelineConfig::default();
            let text = c.to_toml();
            Ok((c, text))
        }
    }
}

fn read_samples(path: &Path) -> Result<Vec<Sample>, Failure> {
    read_jsonl(path).map_err(data)
}

fn run(a: RunArgs) -> Result<(), Failure> {
    let (config, text) = load_config(&a.common)?;
    let stream = read_samples(&a.input)?;
    let holdout = match &a.holdout {
        Some(p) => read_samples(p)?,
        None => Vec::new(),
    };
    let model = load_or_pretrain(&config.learner).map_err(runtime)?;
    let embedder = config.embedder.build().map_err(usage)?;
    let pipeline = Pipeline::new(config, &model, embedder.as_ref())
        .map_err(runtime)?
        .with_config_text(text);
    let outcome = pipeline.run_stream(&stream, &holdout, a.seed).map_err(runtime)?;
    write_run_outputs(&outcome, &a.out).map_err(runtime)?;
    let r = &outcome.report;
    println!(
        "{} samples, {} anomalies, {} searches, EM {}",
        r.n_samples,
        r.n_anomalies,
        r.searches.len(),
        r.metrics.em.value().map_or("undefined".into(), |v| format!("{v:.4}"))
    );
    if let Some(h) = &r.heldout {
        println!("held-out EM {:.4} -> {:.4}", h.pre_em, h.post_em);
    }
    println!("report written to {}", a.out.display());
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let (config, _) = load_config(&a.common)?;
    let input = match &a.input {
        Some(p) => Some(read_samples(p)?),
        None => None,
    };
    let model = load_or_pretrain(&config.learner).map_err(runtime)?;
    let embedder = config.embedder.build().map_err(usage)?;
    let report = match a.kind {
        SweepKind::RankLr => {
            let samples = match input {
                Some(s) => s,
                None => gen_atomic_tasks(TaskKind::Add, 1, 60, a.seed)
                    .map_err(runtime)?
                    .iter()
                    .map(|t| t.to_sample())
                    .collect(),
            };
            let base = AdapterConfig::default();
            rank_lr_sweep(&model, &samples, &a.ranks, &a.lrs, &base, a.seed).map_err(usage)?
        }
        kind => {
            let samples = match input {
                Some(s) => s,
                None => detection_set(100, 100, &TaskKind::ALL, a.seed).map_err(runtime)?,
            };
            if samples.iter().any(|s| s.label.is_none()) {
                return Err(data(SageError::InvalidInput("detection sweeps need labelled samples".into())));
            }
            let pipeline = Pipeline::new(config, &model, embedder.as_ref()).map_err(runtime)?;
            let scored = score_detection_set(&pipeline, &samples).map_err(runtime)?;
            let default_step = if kind == SweepKind::Threshold { 0.01 } else { 0.1 };
            let g = grid(a.lo, a.hi, a.step.unwrap_or(default_step)).map_err(usage)?;
            if kind == SweepKind::Threshold {
                threshold_sweep(pipeline.trigger(), &scored, &g).map_err(usage)?
            } else {
                weights_sweep(pipeline.trigger(), &scored, &g, &g).map_err(usage)?
            }
        }
    };
    report.write(&a.out).map_err(runtime)?;
    println!("sweep {} written to {}", a.kind.name(), a.out.display());
    Ok(())
}

fn seeds(a: SeedsArgs) -> Result<(), Failure> {
    let (config, text) = load_config(&a.common)?;
    let (stream, holdout) = match (&a.input, &a.holdout) {
        (Some(i), Some(h)) => (read_samples(i)?, read_samples(h)?),
        _ => ScriptedStream::default().generate().map_err(runtime)?,
    };
    let model = load_or_pretrain(&config.learner).map_err(runtime)?;
    let embedder = config.embedder.build().map_err(usage)?;
    let pipeline = Pipeline::new(config, &model, embedder.as_ref())
        .map_err(runtime)?
        .with_config_text(text);
    let report = seed_stability_run(&pipeline, &stream, &holdout, &a.seeds).map_err(|e| match e {
        SageError::InvalidInput(_) => usage(e),
        e => runtime(e),
    })?;
    std::fs::create_dir_all(&a.out).map_err(|e| runtime(SageError::Io { path: a.out.clone(), source: e }))?;
    let path = a.out.join("seeds.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&path, json).map_err(|e| runtime(SageError::Io { path: path.clone(), source: e }))?;
    let s = &report.summary;
    for (seed, em) in s.seeds.iter().zip(&s.post_em) {
        println!("seed {seed}: held-out EM {em:.4}");
    }
    println!("mean {:.4}, std {:.4}", s.mean, s.std);
    Ok(())
}

fn gen(a: GenTasksArgs) -> Result<(), Failure> {
    let tasks = gen_tasks(a.family, a.kind, a.level, a.n, a.seed).map_err(usage)?;
    let samples: Vec<Sample> = tasks.iter().map(|t| t.to_sample()).collect();
    match &a.out {
        Some(p) => write_jsonl(p, &samples).map_err(runtime)?,
        None => {
            for s in &samples {
                println!("{}", serde_json::to_string(s).expect("sample serializes"));
            }
        }
    }
    Ok(())
}

fn gen_stream(a: GenStreamArgs) -> Result<(), Failure> {
    let script = ScriptedStream {
        per_template: a.per_template,
        id_samples: a.id_samples,
        holdout_per_template: a.holdout_per_template,
        seed: a.seed,
        ..ScriptedStream::default()
    };
    let (stream, holdout) = script.generate().map_err(usage)?;
    std::fs::create_dir_all(&a.out).map_err(|e| runtime(SageError::Io { path: a.out.clone(), source: e }))?;
    write_jsonl(&a.out.join("stream.jsonl"), &stream).map_err(runtime)?;
    write_jsonl(&a.out.join("holdout.jsonl"), &holdout).map_err(runtime)?;
    println!("{} stream and {} held-out samples written to {}", stream.len(), holdout.len(), a.out.display());
    Ok(())
}
