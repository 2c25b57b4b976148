//! `sparsevl` command-line interface.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sparsevl_core::cost::{self, CostModelSpec, GOLDEN_TABLE};
use sparsevl_core::sparse::{self, GenerationMode};

use crate::checkpoint::Checkpoint;
use crate::config::{ReportFormat, RunConfig};
use crate::experiment::{self, RunKind, StepRecord};
use crate::trace::{self, ModeName};
use crate::verify::{self, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
pub const VERIFY_SCHEMA_VERSION: u32 = 1;

/// Fraction of the final training steps averaged into the summary.
pub const FINAL_WINDOW: f64 = 0.1;

#[derive(Parser, Debug)]
#[command(name = "sparsevl", version, about = "Dynamic vision-language context sparsification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train model and predictors on the configured synthetic task.
    Train(CommonArgs),
    /// Sparsified greedy generation from a checkpoint.
    Generate(GenerateArgs),
    /// FLOPs and KV-memory ledger for a named scenario or custom dimensions.
    Flops(FlopsArgs),
    /// Run the equivalence, stability, masking, gradient and golden suites.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `run.output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    WithCache,
    NoCache,
}

#[derive(Args, Debug, Clone)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "with-cache")]
    pub mode: ModeArg,
    /// Evaluation-split task sample supplying the image and prompt.
    #[arg(long, default_value_t = 0)]
    pub sample: u64,
    /// Comma-separated prompt token ids replacing the sample's prompt.
    #[arg(long)]
    pub text: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct FlopsArgs {
    /// Named scenario (see `--list`).
    #[arg(long, conflicts_with_all = ["hidden", "runs"])]
    pub scenario: Option<String>,
    /// List the known scenarios.
    #[arg(long)]
    pub list: bool,
    /// Hidden width C for a custom spec.
    #[arg(long, requires = "runs")]
    pub hidden: Option<u64>,
    /// Layer runs `COUNTxTOKENS`, comma separated, e.g. `2x576,30x115`.
    #[arg(long, requires = "hidden")]
    pub runs: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub batch: u64,
    /// Sparsification layer for the decode trajectories (custom specs).
    #[arg(long)]
    pub sparsify_layer: Option<usize>,
    /// Decode steps for the trajectories; 0 reports prefill only.
    #[arg(long, default_value_t = 0)]
    pub decode_steps: u64,
    #[arg(long, default_value_t = 0.5)]
    pub r_ot: f64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Also check mode equivalence on this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Reduced case counts.
    #[arg(long)]
    pub quick: bool,
    /// Multiply STE adjoints by this factor (mutation test; 1 is correct).
    #[arg(long, default_value_t = 1.0)]
    pub ste_adjoint_scale: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error("{0}")]
    Core(#[from] sparsevl_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub steps: usize,
    pub final_window: usize,
    pub final_cross_entropy: f64,
    pub final_total_loss: f64,
    pub final_image_keep_fraction: f64,
    pub final_output_keep_fraction: f64,
    pub target_image_keep_rate: f64,
    pub target_output_keep_rate: f64,
}

#[derive(Serialize)]
struct VerifyRecord<'a> {
    schema_version: u32,
    passed: bool,
    suites: &'a [verify::SuiteReport],
}

fn load_config(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.run.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn to_json<T: Serialize>(value: &T, format: ReportFormat) -> Result<String, CliError> {
    Ok(match format {
        ReportFormat::Json => serde_json::to_string(value)?,
        ReportFormat::JsonPretty => serde_json::to_string_pretty(value)?,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T, format: ReportFormat) -> Result<(), CliError> {
    let mut text = to_json(value, format)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn summarize(cfg: &RunConfig, log: &[StepRecord]) -> TrainSummary {
    let f = experiment::final_stats(log, FINAL_WINDOW);
    TrainSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        seed: cfg.seed,
        steps: log.len(),
        final_window: f.window,
        final_cross_entropy: f.cross_entropy,
        final_total_loss: f.total,
        final_image_keep_fraction: f.image_keep_fraction,
        final_output_keep_fraction: f.output_keep_fraction,
        target_image_keep_rate: cfg.sparsity.image_keep_rate,
        target_output_keep_rate: cfg.sparsity.output_keep_rate,
    }
}

fn cmd_train(args: &CommonArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = load_config(args)?;
    let dir = &cfg.run.output_dir;
    fs::create_dir_all(dir)?;
    let run = experiment::train_run(
        cfg.model_config(),
        cfg.predictor_config(),
        cfg.train_config(),
        &cfg.task,
        RunKind::Learned,
        |_| {},
    )?;
    let mut log = String::new();
    for rec in &run.log {
        log.push_str(&serde_json::to_string(rec)?);
        log.push('\n');
    }
    fs::write(dir.join("train_log.jsonl"), log)?;
    Checkpoint {
        model: run.model,
        predictor: run.predictor,
    }
    .save(&dir.join("model.ckpt"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    let summary = summarize(&cfg, &run.log);
    write_json(&dir.join("summary.json"), &summary, cfg.run.report_format)?;
    writeln!(out, "{}", to_json(&summary, ReportFormat::Json)?)?;
    Ok(EXIT_OK)
}

fn parse_ids(text: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| CliError::Usage(format!("--text: bad token id '{s}'"))))
        .collect()
}

fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = load_config(&args.common)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    ckpt.check_compatible(&cfg.model_config(), &cfg.predictor_config())?;
    let sample = cfg.task.sample(experiment::EVAL_SPLIT, args.sample);
    let text_ids = match &args.text {
        Some(t) => parse_ids(t)?,
        None => sample.text_ids.clone(),
    };
    if text_ids.is_empty() {
        return Err(CliError::Usage("empty prompt: at least one text token is required".into()));
    }
    let state = ckpt.model.embed_inputs(&sample.image_features, &text_ids)?;
    let mode: GenerationMode = match args.mode {
        ModeArg::WithCache => ModeName::WithCache,
        ModeArg::NoCache => ModeName::NoCache,
    }
    .into();
    let sp = cfg.sparsity_config();
    let budget = cfg.run.max_new_tokens.min(cfg.model.max_seq_len.saturating_sub(state.len()));
    if budget == 0 {
        return Err(CliError::Usage("prompt fills max_seq_len; nothing to generate".into()));
    }
    let g = sparse::sparse_generate(&ckpt.model, &ckpt.predictor, &state, &sp, budget, mode, true)?;
    let tr = trace::build_trace(&cfg.model_config(), sp.sparsify_layer, state.n_image(), &text_ids, mode, &g);
    let dir = &cfg.run.output_dir;
    fs::create_dir_all(dir)?;
    let name = match args.mode {
        ModeArg::WithCache => "trace_with_cache.json",
        ModeArg::NoCache => "trace_no_cache.json",
    };
    write_json(&dir.join(name), &tr, cfg.run.report_format)?;
    writeln!(out, "{}", serde_json::to_string(&tr.tokens)?)?;
    Ok(EXIT_OK)
}

/// Parses `COUNTxTOKENS[,COUNTxTOKENS...]`.
pub fn parse_runs(text: &str) -> Result<Vec<(usize, u64)>, CliError> {
    let bad = || CliError::Usage(format!("--runs: expected COUNTxTOKENS[,...], got '{text}'"));
    let runs: Vec<(usize, u64)> = text
        .split(',')
        .map(|part| {
            let (c, n) = part.trim().split_once('x').ok_or_else(bad)?;
            Ok((c.trim().parse().map_err(|_| bad())?, n.trim().parse().map_err(|_| bad())?))
        })
        .collect::<Result<_, CliError>>()?;
    if runs.is_empty() || runs.iter().all(|r| r.0 == 0) {
        return Err(bad());
    }
    Ok(runs)
}

fn cmd_flops(args: &FlopsArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    if args.list {
        for row in GOLDEN_TABLE {
            writeln!(out, "{:<24} {:<28} printed {:.1}T", row.scenario, row.model, row.printed_tera)?;
        }
        return Ok(EXIT_OK);
    }
    let (name, mut spec) = match (&args.scenario, args.hidden, &args.runs) {
        (Some(s), _, _) => {
            let row = cost::golden_row(s).ok_or_else(|| CliError::Usage(format!("unknown scenario '{s}' (try --list)")))?;
            (s.clone(), row.spec())
        }
        (None, Some(h), Some(r)) => ("custom".to_string(), CostModelSpec::from_runs(&parse_runs(r)?, h)),
        _ => return Err(CliError::Usage("give --scenario NAME, --list, or --hidden with --runs".into())),
    };
    spec.batch = args.batch;
    if let Some(l) = args.sparsify_layer {
        if l > spec.num_layers() {
            return Err(CliError::Usage(format!("--sparsify-layer {l} exceeds {} layers", spec.num_layers())));
        }
        spec.sparsify_layer = l;
    }
    if !(args.r_ot > 0.0 && args.r_ot <= 1.0) {
        return Err(CliError::Usage("--r-ot must lie in (0, 1]".into()));
    }
    let survivors = spec.schedule.last().copied().unwrap_or(0);
    let report = trace::cost_report(&spec, survivors, args.r_ot, args.decode_steps)?;
    let baseline = if name == "custom" {
        None
    } else {
        let full = spec.schedule.first().copied().unwrap_or(0);
        let dense = CostModelSpec {
            schedule: vec![full; spec.num_layers()],
            ..spec.clone()
        };
        Some(trace::cost_report(&dense, full, 1.0, args.decode_steps)?)
    };
    let record = trace::cost_record(&name, &spec, &report, baseline.as_ref());
    let text = serde_json::to_string_pretty(&record)?;
    match &args.out {
        Some(p) => fs::write(p, text + "\n")?,
        None => writeln!(out, "{text}")?,
    }
    Ok(EXIT_OK)
}

fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = load_config(&args.common)?;
    let ckpt = match &args.checkpoint {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            c.check_compatible(&cfg.model_config(), &cfg.predictor_config())?;
            Some(c)
        }
        None => None,
    };
    let mut opts = VerifyOptions {
        seed: cfg.seed,
        ste_adjoint_scale: args.ste_adjoint_scale,
        ..VerifyOptions::default()
    };
    if args.quick {
        opts.equivalence_models = 5;
        opts.stability_runs = 5;
        opts.stability_tokens = 16;
        opts.masked_pairs = 10;
    }
    let suites = verify::run_all(&opts, ckpt.as_ref());
    let passed = suites.iter().all(|s| s.passed);
    for s in &suites {
        writeln!(
            out,
            "{} {} (cases {}, failures {}, worst {:.3e})",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.cases,
            s.failures,
            s.worst
        )?;
    }
    let dir = &cfg.run.output_dir;
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join("verify.json"),
        &VerifyRecord {
            schema_version: VERIFY_SCHEMA_VERSION,
            passed,
            suites: &suites,
        },
        cfg.run.report_format,
    )?;
    Ok(if passed { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

/// Runs a parsed command, writing human output to `out` and errors to `err`.
pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let res = match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Generate(a) => cmd_generate(a, out),
        Command::Flops(a) => cmd_flops(a, out),
        Command::Verify(a) => cmd_verify(a, out),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_USAGE
        }
    }
}

/// Parses `args` (including the program name) and executes.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli, out, err),
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{e}");
                EXIT_OK
            }
        }
    }
}
