//! Command-line front end. Exit codes: 0 success, 2 usage, 3 runtime.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::archive::Archive;
use crate::encoder::{load_pretrained, EncoderWeights};
use crate::error::{Error, Result};
use crate::eval::{self, BenchOptions, MetricsReport, PerceptualWeights};
use crate::network::Precision;
use crate::stylize::{self, RenderJob, StylePlan, Stylizer, DEFAULT_SMOOTH_KERNEL};
use crate::temporal::TemporalMode;
use crate::train::{self, CheckpointMeta, Dataset, TrainConfig, Trainer};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "colorista", version, about = "Photorealistic video style transfer")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stylize a directory of PNG frames.
    Stylize(StylizeArgs),
    /// Run the style-removal network over a directory of PNG frames.
    RemoveStyle(RemoveArgs),
    /// Train the removal and restoration networks.
    Train(TrainArgs),
    /// Score stylized outputs or time inference.
    Eval(EvalArgs),
}

fn parse_lambda(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("stylization factor must lie in [0, 1], got {v}"))
    }
}

#[derive(Debug, Args)]
pub struct StylizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `IMG[,IMG@START...]`: styles and the frame each one starts at.
    #[arg(long)]
    pub style: String,
    #[arg(long, default_value_t = 1.0, value_parser = parse_lambda)]
    pub lambda: f64,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub whiten: Option<u8>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub consecutive: Option<u8>,
    #[arg(long, default_value_t = DEFAULT_SMOOTH_KERNEL as u64, value_parser = clap::value_parser!(u64).range(1..))]
    pub smooth_kernel: u64,
    #[arg(long, value_enum)]
    pub temporal_mode: Option<TemporalMode>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Print the resolved job as JSON and exit.
    #[arg(long)]
    pub dry_run: bool,
    /// Proceed when whiten/consecutive counts differ from the checkpoint.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RemoveArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Style reference the removal network restyles towards.
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long, default_value_t = 1.0, value_parser = parse_lambda)]
    pub lambda: f64,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub whiten: Option<u8>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from a checkpoint; epochs and output directory come from
    /// `--config`, everything else from the checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON list of (content, style, output) paths.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Encoder archive, when no checkpoint is given.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Calibrated perceptual-distance weights.
    #[arg(long)]
    pub perceptual_weights: Option<PathBuf>,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Time inference instead of (or as well as) scoring pairs.
    #[arg(long)]
    pub bench: bool,
    /// Comma-separated `WxH` list.
    #[arg(long, default_value = "600x360")]
    pub resolutions: String,
    #[arg(long, default_value_t = 80)]
    pub frames: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, value_enum)]
    pub temporal_mode: Option<TemporalMode>,
}

/// Distinguishes argument problems (exit 2) from failures while running.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn stylize_job(a: &StylizeArgs) -> std::result::Result<RenderJob, Failure> {
    let plan = StylePlan {
        styles: StylePlan::parse_styles(&a.style).map_err(usage)?,
        lambda: a.lambda,
        consecutive: a.consecutive.map(usize::from),
        whiten: a.whiten.map(usize::from),
        smooth_kernel: a.smooth_kernel as usize,
    };
    plan.validate().map_err(usage)?;
    Ok(RenderJob {
        input: a.input.clone(),
        output: a.output.clone(),
        checkpoint: a.checkpoint.clone(),
        plan,
        temporal_mode: a.temporal_mode,
        precision: a.precision,
        force: a.force,
    })
}

fn remove_job(a: &RemoveArgs) -> RenderJob {
    RenderJob {
        input: a.input.clone(),
        output: a.output.clone(),
        checkpoint: a.checkpoint.clone(),
        plan: StylePlan {
            styles: vec![stylize::StyleRef { path: a.style.clone(), start: 0 }],
            lambda: a.lambda,
            consecutive: None,
            whiten: a.whiten.map(usize::from),
            smooth_kernel: 1,
        },
        temporal_mode: Some(TemporalMode::NoRecurrence),
        precision: a.precision,
        force: a.force,
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run_train(a: &TrainArgs) -> std::result::Result<(), Failure> {
    let config = TrainConfig::load(&a.config).map_err(usage)?;
    if a.dry_run {
        return Ok(print_json(&config)?);
    }
    let (Some(content), Some(styles)) = (&config.content_root, &config.style_root) else {
        return Err(Failure::Usage("config needs content_root and style_root".into()));
    };
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::load_checkpoint(path)?;
            t.config.epochs = config.epochs;
            t.config.output_dir = config.output_dir.clone();
            t
        }
        None => {
            let encoder = match &config.encoder {
                Some(path) => load_pretrained(path)?,
                None => {
                    log::warn!("no encoder archive configured; using seeded random encoder weights");
                    EncoderWeights::random(config.seed, config.network.precision.dtype())?
                }
            };
            Trainer::new(config.clone(), encoder)?
        }
    };
    let dataset = Dataset::ingest(content, styles, trainer.config.crop)?;
    let checkpoint = train::fit(&mut trainer, &dataset)?;
    if trainer.config.output_dir.is_none() {
        log::warn!("no output_dir configured; final checkpoint not written");
    }
    let last = trainer.history.last().map(|m| m.loss_total);
    println!("trained {} epochs, {} steps, final loss {last:?}", trainer.epoch, trainer.step);
    drop(checkpoint);
    Ok(())
}

fn run_eval(a: &EvalArgs) -> std::result::Result<(), Failure> {
    if a.pairs.is_none() && !a.bench {
        return Err(Failure::Usage("eval needs --pairs and/or --bench".into()));
    }
    let archive = a.checkpoint.as_ref().map(Archive::load).transpose()?;
    let mut report = MetricsReport::default();
    let weights = match &a.perceptual_weights {
        Some(p) => PerceptualWeights::load(p)?,
        None => PerceptualWeights::uncalibrated(),
    };
    report.metadata.perceptual_weights = weights.label().into();
    if let (Some(path), Some(archive)) = (&a.checkpoint, &archive) {
        report.metadata.checkpoint_sha256 = Some(eval::sha256_file(path)?);
        report.metadata.config = archive.extra.clone();
        if let Ok(meta) = CheckpointMeta::from_archive(archive) {
            report.metadata.config = serde_json::json!({
                "train": meta.train_config,
                "removal": meta.removal,
                "restoration": meta.restoration,
            });
        }
    }
    if let Some(pairs) = &a.pairs {
        let encoder = match (&archive, &a.encoder) {
            (Some(archive), _) => EncoderWeights::from_archive(archive, "encoder", candle_core::DType::F32)?,
            (None, Some(path)) => load_pretrained(path)?,
            (None, None) => return Err(Failure::Usage("scoring pairs needs --checkpoint or --encoder".into())),
        };
        let entries = eval::load_pairs_manifest(pairs)?;
        let scored = eval::evaluate_pairs(&entries, &encoder, &weights)?;
        report.pairs = scored.pairs;
        report.aggregate_pairs();
    }
    if a.bench {
        let Some(archive) = &archive else {
            return Err(Failure::Usage("--bench needs --checkpoint".into()));
        };
        let resolutions = a
            .resolutions
            .split(',')
            .map(eval::parse_resolution)
            .collect::<Result<Vec<_>>>()
            .map_err(usage)?;
        let (stylizer, mut warnings) =
            Stylizer::from_checkpoint(archive, Precision::F32, a.temporal_mode, None, None, false)?;
        let opts = BenchOptions { frames: a.frames, warmup: a.warmup, ..BenchOptions::default() };
        let (rows, skipped) = eval::benchmark(&stylizer, &resolutions, &opts)?;
        warnings.extend(skipped);
        report.timing = rows;
        report.metadata.warnings.extend(warnings);
    }
    print!("{}", eval::emit_report(&report, &a.out)?);
    Ok(())
}

fn dispatch(cli: &Cli) -> std::result::Result<(), Failure> {
    match &cli.command {
        Command::Stylize(a) => {
            let job = stylize_job(a)?;
            if a.dry_run {
                return Ok(print_json(&job)?);
            }
            let report = stylize::stylize_video(&job)?;
            println!("stylized {} frames, {:.3}s/frame", report.frames, report.mean_seconds);
        }
        Command::RemoveStyle(a) => {
            let job = remove_job(a);
            if a.dry_run {
                return Ok(print_json(&job)?);
            }
            let report = stylize::remove_style(&job)?;
            println!("processed {} frames, {:.3}s/frame", report.frames, report.mean_seconds);
        }
        Command::Train(a) => run_train(a)?,
        Command::Eval(a) => run_eval(a)?,
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `colorista --help` for usage.");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
