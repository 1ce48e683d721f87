//! Command-line entry points.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::audio::AudioStats;
use crate::config::{ConfigSources, RunConfig};
use crate::data::{generate_synthetic, Manifest, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::InputMode;
use crate::numerics::GradcheckConfig;
use crate::reconstruct::{reconstruct, ReconstructOptions};
use crate::training::{self, compute_audio_stats, load_checkpoint, load_splits, Dataset, Stage};
use crate::verify::{gradcheck, Fault};

#[derive(Debug, Parser)]
#[command(name = "social-mae", version, about = "Audiovisual masked autoencoder: synthesis, training, evaluation")]
pub struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic correlated audio/video dataset.
    Synth(SynthArgs),
    /// Self-supervised pre-training (masked reconstruction + contrastive).
    Pretrain(PretrainArgs),
    /// Fine-tune a pre-trained checkpoint with a task head.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint in audio, video and audiovisual modes.
    Eval(EvalArgs),
    /// Dump masked-input / reconstruction / original triptychs.
    Reconstruct(ReconstructArgs),
    /// Compare analytic and finite-difference gradients of the pre-training loss.
    Gradcheck(GradcheckArgs),
    /// Print log-mel mean,std of a dataset's training split.
    Stats(StatsArgs),
    /// Print the resolved configuration as TOML.
    Config(ConfigArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Named preset, applied in order (repeatable).
    #[arg(long = "preset")]
    pub presets: Vec<String>,
    /// TOML file layered over the presets.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shrink the model and inputs to the desk-scale configuration.
    #[arg(long)]
    pub desk_scale: bool,
    /// Log-mel normalization statistics as `mean,std`.
    #[arg(long, value_parser = parse_stats)]
    pub audio_stats: Option<AudioStats>,
}

fn parse_stats(s: &str) -> std::result::Result<AudioStats, String> {
    AudioStats::parse(s).map_err(|e| e.to_string())
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        self.resolve_with(self.desk_scale)
    }

    fn resolve_with(&self, desk_scale: bool) -> Result<RunConfig> {
        RunConfig::resolve(&ConfigSources {
            presets: self.presets.clone(),
            desk_scale,
            file: self.config.as_deref(),
            seed: self.seed,
            audio_stats: self.audio_stats,
        })
    }

    fn is_empty(&self) -> bool {
        self.presets.is_empty() && self.config.is_none() && self.seed.is_none() && !self.desk_scale
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub clips: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.25)]
    pub eval_fraction: f64,
    /// Label clips with 5 trait scores instead of a class id.
    #[arg(long)]
    pub traits: bool,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 660.0)]
    pub duration_ms: f64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset directory or manifest; the training split is used. Without
    /// it a synthetic set is generated in memory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Pre-trained checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Inputs used while fine-tuning (overrides the recipe).
    #[arg(long, value_parser = parse_mode)]
    pub modality: Option<InputMode>,
}

fn parse_mode(s: &str) -> std::result::Result<InputMode, String> {
    InputMode::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Evaluate one mode only; all three by default.
    #[arg(long, value_parser = parse_mode)]
    pub modality: Option<InputMode>,
    #[arg(long, default_value = "eval", value_parser = parse_split)]
    pub split: Split,
    /// Directory for metrics.csv.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| format!("unknown split `{s}` (train|eval)"))
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Pre-training checkpoint (must include the decoder).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Clip id; defaults to the first clip of the split.
    #[arg(long)]
    pub clip: Option<String>,
    #[arg(long, default_value = "train", value_parser = parse_split)]
    pub split: Split,
    /// Defaults to the checkpoint's pre-training mask ratio.
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Defaults to the checkpoint's seed.
    #[arg(long)]
    pub mask_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// Scale analytic gradients by (1 + EPS) before comparing.
    #[arg(long, hide = true)]
    pub inject_fault: Option<f64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub dataset: PathBuf,
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Stats(a) => {
            let cfg = a.cfg.resolve()?;
            let s = compute_audio_stats(&Manifest::load(&a.dataset)?, &cfg)?;
            println!("{},{}", s.mean, s.std);
            Ok(0)
        }
        Command::Config(a) => {
            print!("{}", a.resolve()?.to_toml());
            Ok(0)
        }
    }
}

/// Parse arguments, run, and map the outcome to a process exit code.
pub fn main_exit() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Error::usage(format!("missing required flag --{flag}")))
}

fn synth(a: SynthArgs) -> Result<i32> {
    let spec = SyntheticSpec {
        classes: a.classes,
        clips: a.clips,
        noise: a.noise,
        eval_fraction: a.eval_fraction,
        traits: a.traits,
        frames: a.frames,
        image_size: a.image_size,
        duration_ms: a.duration_ms,
        seed: a.seed,
        ..Default::default()
    };
    let manifest = generate_synthetic(&spec, &a.output)?;
    println!(
        "wrote {} clips ({} train, {} eval) to {}",
        manifest.records.len(),
        manifest.split(Split::Train).count(),
        manifest.split(Split::Eval).count(),
        a.output.display()
    );
    Ok(0)
}

fn pretrain(a: PretrainArgs) -> Result<i32> {
    let cfg = a.cfg.resolve()?;
    cfg.validate()?;
    let data = match &a.dataset {
        Some(dir) => {
            let manifest = Manifest::load(dir)?;
            let stats = training::resolve_stats(&cfg, &manifest)?;
            Dataset::load(&manifest, Split::Train, &cfg, stats)?
        }
        None => {
            let spec = SyntheticSpec {
                image_size: cfg.patch.image_size,
                frames: cfg.patch.video_frames.max(8),
                seed: cfg.seed,
                ..Default::default()
            };
            println!("no --dataset given: using {} in-memory synthetic clips", spec.clips);
            Dataset::synthetic(&cfg, &spec)?
        }
    };
    println!(
        "pre-training on {} clips: {} epochs, batch {}, lr {:e} x{} every {} epochs, mask {}",
        data.len(),
        cfg.pretrain.epochs,
        cfg.pretrain.batch_size,
        cfg.pretrain.base_lr,
        cfg.pretrain.lr_decay,
        cfg.pretrain.decay_every,
        cfg.pretrain.mask_ratio
    );
    let outcome = training::pretrain(&cfg, &data, Some(&a.output))?;
    if let (Some(first), Some(last)) = (outcome.steps.first(), outcome.steps.last()) {
        println!(
            "Lc {:.4} -> {:.4}, Lr {:.4} -> {:.4} over {} steps",
            first.lc,
            last.lc,
            first.lr_loss,
            last.lr_loss,
            outcome.steps.len()
        );
    }
    println!("checkpoint: {}", a.output.join(training::PRETRAIN_CHECKPOINT).display());
    Ok(0)
}

fn finetune(a: FinetuneArgs) -> Result<i32> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(m) = a.modality {
        if let Some(f) = cfg.finetune.as_mut() {
            f.modality = m;
        }
    }
    let recipe = cfg.finetune_recipe()?.clone();
    println!("task: {}", recipe.task);
    println!("{}", recipe.summary());
    println!(
        "learning rates: encoder {:e}, head {:e}; inputs: {}",
        recipe.encoder_lr,
        recipe.head_lr,
        recipe.modality.name()
    );
    cfg.validate()?;
    let checkpoint = require(&a.checkpoint, "checkpoint")?;
    let dataset = require(&a.dataset, "dataset")?;
    let (store, model, meta) = load_checkpoint(checkpoint, Some(&cfg))?;
    if meta.stage != Stage::Pretrain {
        log::warn!("{} is a fine-tuned checkpoint; its head is replaced", checkpoint.display());
    }
    cfg.audio_stats.get_or_insert(meta.audio_stats);
    let (train, eval) = load_splits(dataset, &cfg)?;
    let eval = (!eval.is_empty()).then_some(&eval);
    let outcome = training::finetune(&cfg, store, model, &train, eval, Some(&a.output))?;
    if let Some((_, report)) = outcome.epoch_metrics.last() {
        println!("{report}");
        fs::write(a.output.join("metrics.csv"), report.to_csv())?;
    }
    println!("checkpoint: {}", a.output.join(training::FINETUNE_CHECKPOINT).display());
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<i32> {
    let checkpoint = require(&a.checkpoint, "checkpoint")?;
    let dataset = require(&a.dataset, "dataset")?;
    let (store, model, meta) = load_checkpoint(checkpoint, None)?;
    if model.head.is_none() {
        return Err(Error::usage(format!(
            "{} has no task head; run finetune first",
            checkpoint.display()
        )));
    }
    let manifest = Manifest::load(dataset)?;
    let data = Dataset::load(&manifest, a.split, &meta.run, meta.audio_stats)?;
    let modes = a.modality.map_or(InputMode::ALL.to_vec(), |m| vec![m]);
    let report = training::evaluate(&store, &model, &data, &modes)?;
    println!("{report}");
    if let Some(out) = &a.output {
        fs::create_dir_all(out)?;
        fs::write(out.join("metrics.csv"), report.to_csv())?;
    }
    Ok(0)
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<i32> {
    let (store, model, meta) = load_checkpoint(&a.checkpoint, None)?;
    if model.decoder.is_none() {
        return Err(Error::usage(format!(
            "{} has no decoder (fine-tuned checkpoint); reconstruction needs a pre-training checkpoint",
            a.checkpoint.display()
        )));
    }
    let manifest = Manifest::load(&a.dataset)?;
    let data = Dataset::load(&manifest, a.split, &meta.run, meta.audio_stats)?;
    let example = match &a.clip {
        Some(id) => data
            .examples
            .iter()
            .find(|e| &e.id == id)
            .ok_or_else(|| Error::usage(format!("clip `{id}` not found in the {:?} split", a.split)))?,
        None => data
            .examples
            .first()
            .ok_or_else(|| Error::data("dataset", "split has no clips"))?,
    };
    let opts = ReconstructOptions {
        mask_ratio: a.mask_ratio.unwrap_or(meta.run.pretrain.mask_ratio),
        seed: a.mask_seed.unwrap_or(meta.run.seed),
        normalized_video: meta.run.loss.normalize_video_targets,
        normalized_audio: meta.run.loss.normalize_audio_targets,
    };
    let result = reconstruct(&store, &model, example, &opts, Some(&a.output))?;
    let show = |v: Option<f64>| v.map_or("n/a".to_owned(), |v| format!("{v:.5}"));
    println!(
        "{}: masked {} audio / {} video tokens; masked-region MAE audio {} video {}",
        result.id,
        result.audio_plan.masked.len(),
        result.video_plan.masked.len(),
        show(result.audio_mae),
        show(result.video_mae)
    );
    println!("wrote {} images to {}", result.files.len(), a.output.display());
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    if !a.cfg.is_empty() && !a.cfg.desk_scale {
        log::warn!("gradcheck always starts from the desk-scale configuration");
    }
    let cfg = a.cfg.resolve_with(true)?;
    let check = GradcheckConfig {
        samples: a.samples,
        step: a.step,
        tolerance: a.tolerance,
        ..Default::default()
    };
    let fault = a.inject_fault.map_or(Fault::None, Fault::Scale);
    let report = gradcheck(&cfg, &check, fault)?;
    let failures = report.failures().count();
    if let Some(w) = report.worst() {
        println!(
            "worst: {}[{}] analytic {:.6e} numeric {:.6e} rel {:.3e}",
            w.param, w.index, w.analytic, w.numeric, w.rel_error
        );
    }
    println!(
        "{}: max relative error {:.3e} over {} coordinates (tolerance {:e}, {} above)",
        if report.passed() { "PASS" } else { "FAIL" },
        report.max_rel_error,
        report.checks.len(),
        report.tolerance,
        failures
    );
    Ok(if report.passed() { 0 } else { 1 })
}
