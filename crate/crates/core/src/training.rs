//! Pre-training and fine-tuning loops, evaluation, run logs and checkpoints.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{normalize, pad_or_crop, AudioFrontend, AudioStats, Spectrogram};
use crate::config::{architecture_diff, LossKind, RunConfig};
use crate::data::{generate_clips, load_raw, SyntheticSpec, sample_frame_indices, select_frames, FrameMode, Label, Manifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{trait_accuracy, ConfusionMatrix, MetricsReport, ModeMetrics};
use crate::model::{InputMode, SocialMae, TaskKind, HEAD_PREFIX};
use crate::numerics::{Checkpoint, Graph, OptimizerState, ParamStore, Real, Tensor, Var};
use crate::objectives::{average_terms, combine, combine_vars, contrastive_loss, cross_entropy, mean_absolute_error, reconstruction_loss, LossConfig};
use crate::tokenizer::{sample_mask, select_visible, tokenize_audio, tokenize_video, MaskPlan, Modality};

pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const FINETUNE_LOG: &str = "finetune_log.csv";
pub const EPOCH_METRICS_LOG: &str = "epoch_metrics.csv";
pub const PRETRAIN_CHECKPOINT: &str = "pretrain.smae";
pub const FINETUNE_CHECKPOINT: &str = "finetune.smae";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const RUN_INFO: &str = "run.json";

// independent RNG streams derived from the run seed
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_FRAMES: u64 = 3;
const STREAM_HEAD: u64 = 4;

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Step decay: `base · decay^⌊epoch/every⌋`.
pub fn scheduled_lr(base: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    base * decay.powi((epoch / every.max(1)) as i32)
}

/// One clip ready for the model: normalized spectrogram and every stored frame.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub label: Option<Label>,
    pub spectrogram: Spectrogram,
    pub frames: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub stats: AudioStats,
}

/// log-Mel → normalize → pad/crop.
pub fn audio_features(frontend: &AudioFrontend, wave: &[f32], stats: AudioStats, target_frames: usize) -> Result<Spectrogram> {
    let spec = frontend.logmel(wave)?;
    Ok(pad_or_crop(&normalize(&spec, stats)?, target_frames))
}

/// Dataset-level log-Mel mean/std over the training split.
pub fn compute_audio_stats(manifest: &Manifest, cfg: &RunConfig) -> Result<AudioStats> {
    let frontend = AudioFrontend::new(&cfg.audio)?;
    let mut specs = Vec::new();
    for r in manifest.split(Split::Train) {
        let raw = load_raw(manifest, r, &cfg.audio, cfg.patch.image_size)?;
        specs.push(frontend.logmel(&raw.waveform)?);
    }
    if specs.is_empty() {
        return Err(Error::data("manifest", "no training clips to derive audio statistics from"));
    }
    let stats = AudioStats::compute(&specs);
    if !(stats.std > 0.0) {
        return Err(Error::data("manifest", "training spectrograms have zero variance"));
    }
    Ok(stats)
}

pub fn resolve_stats(cfg: &RunConfig, manifest: &Manifest) -> Result<AudioStats> {
    match cfg.audio_stats {
        Some(s) => Ok(s),
        None => {
            let s = compute_audio_stats(manifest, cfg)?;
            log::info!("audio statistics from training split: mean {:.4}, std {:.4}", s.mean, s.std);
            Ok(s)
        }
    }
}

impl Dataset {
    pub fn load(manifest: &Manifest, split: Split, cfg: &RunConfig, stats: AudioStats) -> Result<Self> {
        let frontend = AudioFrontend::new(&cfg.audio)?;
        let examples = manifest
            .split(split)
            .map(|r| {
                let raw = load_raw(manifest, r, &cfg.audio, cfg.patch.image_size)?;
                Ok(Example {
                    id: raw.id,
                    label: raw.label,
                    spectrogram: audio_features(&frontend, &raw.waveform, stats, cfg.audio.target_frames)?,
                    frames: raw.frames,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { examples, stats })
    }

    /// Generated clips of both splits, normalized with their own statistics.
    pub fn synthetic(cfg: &RunConfig, spec: &SyntheticSpec) -> Result<Self> {
        let frontend = AudioFrontend::new(&cfg.audio)?;
        let clips = generate_clips(spec)?;
        let raw = clips.iter().map(|c| frontend.logmel(&c.waveform)).collect::<Result<Vec<_>>>()?;
        let stats = cfg.audio_stats.unwrap_or_else(|| AudioStats::compute(&raw));
        let examples = clips
            .into_iter()
            .zip(raw)
            .map(|(c, spec)| {
                Ok(Example {
                    spectrogram: pad_or_crop(&normalize(&spec, stats)?, cfg.audio.target_frames),
                    id: c.id,
                    label: Some(c.label),
                    frames: c.frames,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { examples, stats })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Append-only CSV written line by line (and mirrored in memory).
#[derive(Debug)]
pub struct RunLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    file: Option<File>,
}

impl RunLog {
    pub fn create(path: Option<&Path>, columns: &[&str]) -> Result<Self> {
        let mut file = path.map(File::create).transpose()?;
        if let Some(f) = &mut file {
            writeln!(f, "{}", columns.join(","))?;
        }
        Ok(Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            file,
        })
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Internal(format!("log row has {} fields, expected {}", row.len(), self.columns.len())));
        }
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", row.join(","))?;
            f.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Everything needed to rebuild a model from a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub run: RunConfig,
    pub stage: Stage,
    pub epoch: usize,
    pub audio_stats: AudioStats,
    pub head: Option<TaskKind>,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>, meta: &CheckpointMeta) -> Result<()> {
    Checkpoint::new(store, serde_json::to_value(meta)?, meta.run.hash()).save(path)
}

/// Load a checkpoint and bind the model. With `expect`, the architecture
/// sections must match field for field.
pub fn load_checkpoint(path: &Path, expect: Option<&RunConfig>) -> Result<(ParamStore<f32>, SocialMae, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ckpt.config.clone()).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("unreadable metadata: {e}"),
    })?;
    if let Some(cfg) = expect {
        let diff = architecture_diff(&serde_json::to_value(&meta.run)?, &serde_json::to_value(cfg)?);
        if !diff.is_empty() {
            return Err(Error::config(format!(
                "checkpoint {} does not match the current configuration:\n  {}",
                path.display(),
                diff.join("\n  ")
            )));
        }
    }
    let mut store = ckpt.params;
    let model = SocialMae::bind(&mut store, &meta.run.model, &meta.run.geometry()?, meta.head)?;
    Ok((store, model, meta))
}

/// Inputs of one clip for a pre-training step.
#[derive(Clone, Debug)]
pub struct PretrainItem<'a> {
    pub spectrogram: &'a Spectrogram,
    pub frames: Tensor<f32>,
    pub audio_plan: MaskPlan,
    pub video_plan: MaskPlan,
}

/// Graph nodes of the pre-training objective.
#[derive(Clone, Copy, Debug)]
pub struct PretrainTerms {
    pub total: Var,
    pub lc: Var,
    pub lr: Var,
    pub lr_audio: Option<Var>,
    pub lr_video: Option<Var>,
}

fn mean_of<T: Real>(g: &mut Graph<'_, T>, vars: &[Var]) -> Result<Option<Var>> {
    if vars.is_empty() {
        return Ok(None);
    }
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(Some(g.scale(acc, T::of(1.0 / vars.len() as f64))))
}

/// `λc·Lc + Lr` over a batch: per clip, mask each modality, encode the
/// visible tokens, pool for the contrastive term, decode for reconstruction.
pub fn pretrain_objective<T: Real>(
    g: &mut Graph<'_, T>,
    model: &SocialMae,
    items: &[PretrainItem<'_>],
    loss: &LossConfig,
) -> Result<PretrainTerms> {
    let d = model.config.embed_dim;
    let (mut pooled_a, mut pooled_v) = (Vec::new(), Vec::new());
    let (mut rec_a, mut rec_v) = (Vec::new(), Vec::new());
    for item in items {
        let a = tokenize_audio(g, item.spectrogram, &model.tables, &model.geometry)?;
        let v = tokenize_video(g, &item.frames, &model.tables, &model.geometry)?;
        let a_vis = select_visible(g, &a, &item.audio_plan)?;
        let v_vis = select_visible(g, &v, &item.video_plan)?;
        let out = model.encode(g, &a_vis, &v_vis)?;
        pooled_a.push(g.reshape(out.audio.pooled, &[1, d])?);
        pooled_v.push(g.reshape(out.video.pooled, &[1, d])?);
        let rec = model.decode(g, out.joint, &item.audio_plan, &item.video_plan)?;
        if let Some(l) = reconstruction_loss(g, rec.audio, &a.raw_patches, &item.audio_plan, loss.normalize_audio_targets)? {
            rec_a.push(l);
        }
        if let Some(l) = reconstruction_loss(g, rec.video, &v.raw_patches, &item.video_plan, loss.normalize_video_targets)? {
            rec_v.push(l);
        }
    }
    let ca = g.cat_rows(&pooled_a)?;
    let cv = g.cat_rows(&pooled_v)?;
    let lc = contrastive_loss(g, ca, cv, loss.tau, loss.symmetric)?;
    let lr_audio = mean_of(g, &rec_a)?;
    let lr_video = mean_of(g, &rec_v)?;
    let lr = average_terms(g, &[lr_audio, lr_video])?;
    let total = combine_vars(g, lc, lr, loss.lambda_c)?;
    Ok(PretrainTerms {
        total,
        lc,
        lr,
        lr_audio,
        lr_video,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainStep {
    pub step: usize,
    pub epoch: usize,
    pub lc: f64,
    pub lr_loss: f64,
    pub total: f64,
    pub lr_audio: Option<f64>,
    pub lr_video: Option<f64>,
    pub lr: f64,
}

pub struct PretrainOutcome {
    pub store: ParamStore<f32>,
    pub model: SocialMae,
    pub steps: Vec<PretrainStep>,
    pub log: RunLog,
}

/// Shuffled batches of example indices. A trailing batch smaller than
/// `min_size` is folded into the previous one.
fn batches(n: usize, size: usize, min_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_size) {
        let tail = out.pop().expect("len > 1");
        out.last_mut().expect("len > 1").extend(tail);
    }
    out
}

fn write_run_info(out: &Path, cfg: &RunConfig, stage: Stage, stats: AudioStats) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut snapshot = cfg.clone();
    snapshot.audio_stats = Some(stats);
    fs::write(out.join(CONFIG_SNAPSHOT), snapshot.to_toml())?;
    let info = serde_json::json!({
        "stage": stage,
        "seed": cfg.seed,
        "config_hash": snapshot.hash(),
        "audio_stats": stats,
    });
    fs::write(out.join(RUN_INFO), serde_json::to_string_pretty(&info)?)?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Pre-train from scratch (or continue from `init`). Writes logs and
/// checkpoints into `out` when given.
pub fn pretrain(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let recipe = &cfg.pretrain;
    if data.len() < 2 {
        return Err(Error::usage(format!(
            "pre-training needs at least 2 clips for in-batch negatives, dataset has {}",
            data.len()
        )));
    }
    let geometry = cfg.geometry()?;
    let mut store = ParamStore::<f32>::new();
    let model = SocialMae::init(&mut store, &cfg.model, &geometry, cfg.patch.positional_init, &mut seeded(cfg.seed, STREAM_INIT))?;
    let mut opt = OptimizerState::new(&store, recipe.adam.clone());
    let mut rng_shuffle = seeded(cfg.seed, STREAM_SHUFFLE);
    let mut rng_mask = seeded(cfg.seed, STREAM_MASK);
    let mut rng_frames = seeded(cfg.seed, STREAM_FRAMES);
    let stage_meta = |epoch: usize| CheckpointMeta {
        run: cfg.clone(),
        stage: Stage::Pretrain,
        epoch,
        audio_stats: data.stats,
        head: None,
    };
    if let Some(out) = out {
        write_run_info(out, cfg, Stage::Pretrain, data.stats)?;
    }
    let mut log = RunLog::create(out.map(|o| o.join(PRETRAIN_LOG)).as_deref(), &["step", "epoch", "Lc", "Lr", "L", "lr", "Lr_audio", "Lr_video"])?;
    let mut steps = Vec::new();
    let (na, nv) = (geometry.tokens(Modality::Audio), geometry.tokens(Modality::Video));

    for epoch in 0..recipe.epochs {
        let lr = scheduled_lr(recipe.base_lr, recipe.lr_decay, recipe.decay_every, epoch);
        for batch in batches(data.len(), recipe.batch_size, 2, &mut rng_shuffle) {
            let mut items = Vec::with_capacity(batch.len());
            for &i in &batch {
                let ex = &data.examples[i];
                let idx = sample_frame_indices(ex.frames.shape()[0], geometry.video_frames, FrameMode::Train, &mut rng_frames)?;
                items.push(PretrainItem {
                    spectrogram: &ex.spectrogram,
                    frames: select_frames(&ex.frames, &idx)?,
                    audio_plan: sample_mask(na, recipe.mask_ratio, &mut rng_mask)?,
                    video_plan: sample_mask(nv, recipe.mask_ratio, &mut rng_mask)?,
                });
            }
            let ids = || batch.iter().map(|&i| data.examples[i].id.as_str()).collect::<Vec<_>>().join(", ");
            let (breakdown, grads) = {
                let mut g = Graph::new(&store);
                let terms = pretrain_objective(&mut g, &model, &items, &cfg.loss)?;
                let scalar = |v: Var| g.value(v).item().to_f64();
                let mut b = combine(scalar(terms.lc), scalar(terms.lr), cfg.loss.lambda_c).map_err(|e| {
                    if let Some(out) = out {
                        let _ = fs::write(out.join("last_batch.txt"), ids());
                    }
                    Error::NonFinite(format!("{e} at epoch {epoch}, step {}; batch: {}", steps.len(), ids()))
                })?;
                b.lr_audio = terms.lr_audio.map(scalar);
                b.lr_video = terms.lr_video.map(scalar);
                (b, g.backward(terms.total)?)
            };
            store.zero_grad();
            grads.accumulate_into(&mut store);
            opt.step(&mut store, |_| lr).map_err(|e| Error::NonFinite(format!("{e}; batch: {}", ids())))?;
            let step = PretrainStep {
                step: steps.len(),
                epoch,
                lc: breakdown.lc,
                lr_loss: breakdown.lr,
                total: breakdown.total,
                lr_audio: breakdown.lr_audio,
                lr_video: breakdown.lr_video,
                lr,
            };
            log.push(vec![
                step.step.to_string(),
                epoch.to_string(),
                fmt(step.lc),
                fmt(step.lr_loss),
                fmt(step.total),
                fmt(lr),
                step.lr_audio.map(fmt).unwrap_or_default(),
                step.lr_video.map(fmt).unwrap_or_default(),
            ])?;
            steps.push(step);
        }
        if let Some(last) = steps.last() {
            log::info!("epoch {epoch}: Lc {:.4} Lr {:.4} L {:.4} lr {lr:e}", last.lc, last.lr_loss, last.total);
        }
        if let Some(out) = out {
            if recipe.checkpoint_every > 0 && (epoch + 1) % recipe.checkpoint_every == 0 && epoch + 1 < recipe.epochs {
                save_checkpoint(&out.join(format!("pretrain_epoch{:03}.smae", epoch + 1)), &store, &stage_meta(epoch + 1))?;
            }
        }
    }
    if let Some(out) = out {
        save_checkpoint(&out.join(PRETRAIN_CHECKPOINT), &store, &stage_meta(recipe.epochs))?;
    }
    Ok(PretrainOutcome { store, model, steps, log })
}

/// Which tokens a forward pass sees for a given input mode.
fn mode_inputs(mode: InputMode) -> (bool, bool) {
    match mode {
        InputMode::Audio => (true, false),
        InputMode::Video => (false, true),
        InputMode::AudioVisual => (true, true),
    }
}

/// Head output for one clip, full (unmasked) sequences.
pub fn forward_head<T: Real>(g: &mut Graph<'_, T>, model: &SocialMae, spec: &Spectrogram, frames: &Tensor<f32>, mode: InputMode) -> Result<Var> {
    let (use_a, use_v) = mode_inputs(mode);
    let a = use_a.then(|| tokenize_audio(g, spec, &model.tables, &model.geometry)).transpose()?;
    let v = use_v.then(|| tokenize_video(g, frames, &model.tables, &model.geometry)).transpose()?;
    for seq in a.iter().chain(v.iter()) {
        if seq.len() != model.geometry.tokens(seq.modality) {
            return Err(Error::Internal("fine-tuning forward received a masked sequence".into()));
        }
    }
    model.classify(g, a.as_ref(), v.as_ref())
}

fn eval_frames(ex: &Example, n: usize) -> Result<Tensor<f32>> {
    // eval-mode sampling draws no randomness
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let idx = sample_frame_indices(ex.frames.shape()[0], n, FrameMode::Eval, &mut unused)?;
    select_frames(&ex.frames, &idx)
}

/// Head outputs (logits or trait scores) for one example.
pub fn predict(store: &ParamStore<f32>, model: &SocialMae, ex: &Example, mode: InputMode) -> Result<Vec<f32>> {
    let frames = eval_frames(ex, model.geometry.video_frames)?;
    let mut g = Graph::new(store);
    let out = forward_head(&mut g, model, &ex.spectrogram, &frames, mode)?;
    Ok(g.value(out).data().to_vec())
}

/// Pooled unmasked audio and video representations of one example.
pub fn pooled_pair(store: &ParamStore<f32>, model: &SocialMae, ex: &Example) -> Result<(Vec<f32>, Vec<f32>)> {
    let frames = eval_frames(ex, model.geometry.video_frames)?;
    let mut g = Graph::new(store);
    let a = tokenize_audio(&mut g, &ex.spectrogram, &model.tables, &model.geometry)?;
    let v = tokenize_video(&mut g, &frames, &model.tables, &model.geometry)?;
    let out = model.encode(&mut g, &a, &v)?;
    Ok((g.value(out.audio.pooled).data().to_vec(), g.value(out.video.pooled).data().to_vec()))
}

fn class_label(ex: &Example, classes: usize) -> Result<usize> {
    match &ex.label {
        Some(Label::Class(c)) if *c < classes => Ok(*c),
        other => Err(Error::data(&ex.id, format!("label {other:?} is not a class id below {classes}"))),
    }
}

fn trait_label(ex: &Example, outputs: usize) -> Result<&[f32]> {
    match &ex.label {
        Some(Label::Traits(t)) if t.len() == outputs => Ok(t),
        other => Err(Error::data(&ex.id, format!("label {other:?} is not {outputs} trait scores"))),
    }
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Task metric per input mode.
pub fn evaluate(store: &ParamStore<f32>, model: &SocialMae, data: &Dataset, modes: &[InputMode]) -> Result<MetricsReport> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| Error::usage("evaluation needs a fine-tuned model with a task head"))?;
    if data.is_empty() {
        return Err(Error::data("dataset", "no clips to evaluate"));
    }
    let mut report = MetricsReport::default();
    for &mode in modes {
        match head.kind {
            TaskKind::Classification { classes } => {
                let mut cm = ConfusionMatrix::new(classes);
                for ex in &data.examples {
                    let truth = class_label(ex, classes)?;
                    cm.add(truth, argmax(&predict(store, model, ex, mode)?))?;
                }
                report.modes.push(ModeMetrics::classification(mode, &cm)?);
            }
            TaskKind::Regression { outputs } => {
                let (mut preds, mut targets) = (Vec::new(), Vec::new());
                for ex in &data.examples {
                    targets.extend_from_slice(trait_label(ex, outputs)?);
                    preds.extend(predict(store, model, ex, mode)?);
                }
                let acc = trait_accuracy(&preds, &targets, outputs)?;
                report.modes.push(ModeMetrics::regression(mode, data.len(), acc));
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneStep {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub encoder_lr: f64,
    pub head_lr: f64,
}

pub struct FinetuneOutcome {
    pub store: ParamStore<f32>,
    pub model: SocialMae,
    pub steps: Vec<FinetuneStep>,
    pub epoch_metrics: Vec<(usize, MetricsReport)>,
    pub log: RunLog,
}

/// Replace the decoder with a fresh head and train with two learning-rate
/// groups (encoder, head). Evaluates `eval` in every mode after each epoch.
pub fn finetune(
    cfg: &RunConfig,
    mut store: ParamStore<f32>,
    pretrained: SocialMae,
    train: &Dataset,
    eval: Option<&Dataset>,
    out: Option<&Path>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let recipe = cfg.finetune_recipe()?.clone();
    if train.is_empty() {
        return Err(Error::data("dataset", "no training clips"));
    }
    let model = pretrained.into_finetune(&mut store, recipe.head, &mut seeded(cfg.seed, STREAM_HEAD))?;
    let mut opt = OptimizerState::new(&store, recipe.adam.clone());
    let mut rng_shuffle = seeded(cfg.seed, STREAM_SHUFFLE);
    let mut rng_frames = seeded(cfg.seed, STREAM_FRAMES);
    let lr_for = |name: &str| if name.starts_with(HEAD_PREFIX) { recipe.head_lr } else { recipe.encoder_lr };
    if let Some(out) = out {
        write_run_info(out, cfg, Stage::Finetune, train.stats)?;
    }
    let mut log = RunLog::create(out.map(|o| o.join(FINETUNE_LOG)).as_deref(), &["step", "epoch", "L", "lr", "head_lr"])?;
    let mut epoch_log = match (out, eval) {
        (Some(o), Some(_)) => Some(RunLog::create(
            Some(&o.join(EPOCH_METRICS_LOG)),
            &["epoch", "mode", "micro_f1", "macro_f1", "trait_avg"],
        )?),
        _ => None,
    };
    let k = recipe.head.outputs();
    let mut steps = Vec::new();
    let mut epoch_metrics = Vec::new();

    for epoch in 0..recipe.epochs {
        for batch in batches(train.len(), recipe.batch_size, 1, &mut rng_shuffle) {
            let grads = {
                let mut g = Graph::new(&store);
                let mut outs = Vec::with_capacity(batch.len());
                for &i in &batch {
                    let ex = &train.examples[i];
                    let idx = sample_frame_indices(ex.frames.shape()[0], model.geometry.video_frames, FrameMode::Train, &mut rng_frames)?;
                    let frames = select_frames(&ex.frames, &idx)?;
                    let o = forward_head(&mut g, &model, &ex.spectrogram, &frames, recipe.modality)?;
                    outs.push(g.reshape(o, &[1, k])?);
                }
                let outs = g.cat_rows(&outs)?;
                let ids: Vec<String> = batch.iter().map(|&i| train.examples[i].id.clone()).collect();
                let loss = match recipe.loss {
                    LossKind::Ce => {
                        let labels = batch
                            .iter()
                            .map(|&i| class_label(&train.examples[i], k))
                            .collect::<Result<Vec<_>>>()?;
                        cross_entropy(&mut g, outs, &labels, &ids)?
                    }
                    LossKind::Mae => {
                        let mut t = Vec::with_capacity(batch.len() * k);
                        for &i in &batch {
                            t.extend_from_slice(trait_label(&train.examples[i], k)?);
                        }
                        mean_absolute_error(&mut g, outs, &Tensor::new(&[batch.len(), k], t)?)?
                    }
                };
                let value = g.value(loss).item().to_f64();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "fine-tuning loss {value} at epoch {epoch}; batch: {}",
                        ids.join(", ")
                    )));
                }
                steps.push(FinetuneStep {
                    step: steps.len(),
                    epoch,
                    loss: value,
                    encoder_lr: recipe.encoder_lr,
                    head_lr: recipe.head_lr,
                });
                g.backward(loss)?
            };
            store.zero_grad();
            grads.accumulate_into(&mut store);
            opt.step(&mut store, lr_for)?;
            let s = steps.last().expect("pushed above");
            log.push(vec![s.step.to_string(), epoch.to_string(), fmt(s.loss), fmt(s.encoder_lr), fmt(s.head_lr)])?;
        }
        if let Some(eval) = eval {
            let report = evaluate(&store, &model, eval, &InputMode::ALL)?;
            if let Some(l) = &mut epoch_log {
                for m in &report.modes {
                    let o = |v: Option<f64>| v.map(fmt).unwrap_or_default();
                    l.push(vec![
                        epoch.to_string(),
                        m.mode.name().into(),
                        o(m.micro_f1),
                        o(m.macro_f1),
                        o(m.traits.as_ref().map(|t| t.average)),
                    ])?;
                }
            }
            log::info!("epoch {epoch}: loss {:.4}\n{report}", steps.last().map_or(f64::NAN, |s| s.loss));
            epoch_metrics.push((epoch, report));
        }
    }
    if let Some(out) = out {
        let meta = CheckpointMeta {
            run: cfg.clone(),
            stage: Stage::Finetune,
            epoch: recipe.epochs,
            audio_stats: train.stats,
            head: Some(recipe.head),
        };
        save_checkpoint(&out.join(FINETUNE_CHECKPOINT), &store, &meta)?;
    }
    Ok(FinetuneOutcome {
        store,
        model,
        steps,
        epoch_metrics,
        log,
    })
}

/// Resolve a dataset directory's manifest and load both splits.
pub fn load_splits(dataset: &Path, cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let manifest = Manifest::load(dataset)?;
    let stats = resolve_stats(cfg, &manifest)?;
    Ok((
        Dataset::load(&manifest, Split::Train, cfg, stats)?,
        Dataset::load(&manifest, Split::Eval, cfg, stats)?,
    ))
}
