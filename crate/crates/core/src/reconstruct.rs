//! Masked reconstruction with a pre-trained checkpoint, written out as
//! side-by-side images for inspection.

use std::path::{Path, PathBuf};

use crate::data::{sample_frame_indices, save_rgb_png, select_frames, FrameMode};
use crate::error::{Error, Result};
use crate::model::SocialMae;
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::objectives::PATCH_NORM_EPS;
use crate::tokenizer::{
    patchify_audio, patchify_video, sample_mask, select_visible, tokenize_audio, tokenize_video, unpatchify_audio,
    unpatchify_video, MaskPlan, Modality,
};
use crate::training::{seeded, Example};

/// Gray level painted over masked patches in the "masked input" panel.
const MASK_GRAY: f32 = 0.5;

#[derive(Clone, Debug)]
pub struct ReconstructOptions {
    pub mask_ratio: f64,
    pub seed: u64,
    /// Video predictions are per-patch normalized and get mapped back with
    /// each original patch's mean and std.
    pub normalized_video: bool,
    pub normalized_audio: bool,
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub id: String,
    pub audio_plan: MaskPlan,
    pub video_plan: MaskPlan,
    /// Mean absolute error over masked patches only, in input units.
    pub audio_mae: Option<f64>,
    pub video_mae: Option<f64>,
    /// `[n_mels, frames]` with masked patches taken from the prediction.
    pub audio: Tensor<f32>,
    /// `[F, H, W, C]` with masked tubelets taken from the prediction.
    pub video: Tensor<f32>,
    pub files: Vec<PathBuf>,
}

struct Composed {
    masked: Tensor<f32>,
    composed: Tensor<f32>,
    mae: Option<f64>,
}

/// Replace masked rows of `original` with `pred` (optionally de-normalized)
/// and build the grayed-out input alongside.
fn compose(original: &Tensor<f32>, pred: &Tensor<f32>, plan: &MaskPlan, normalized: bool, gray: f32) -> Result<Composed> {
    let (n, d) = original.dims2()?;
    if pred.shape() != original.shape() {
        return Err(Error::shape("compose", original.shape(), pred.shape()));
    }
    let mut composed = original.clone();
    let mut masked = original.clone();
    let mut abs_sum = 0.0f64;
    for &r in &plan.masked {
        if r >= n {
            return Err(Error::Internal(format!("masked index {r} out of range {n}")));
        }
        let src = original.row(r);
        let (mean, std) = if normalized {
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            (mean, (var + PATCH_NORM_EPS).sqrt())
        } else {
            (0.0, 1.0)
        };
        let p = pred.row(r);
        for c in 0..d {
            let v = (p[c] as f64 * std + mean) as f32;
            abs_sum += (v - src[c]).abs() as f64;
            composed.data_mut()[r * d + c] = v;
            masked.data_mut()[r * d + c] = gray;
        }
    }
    let mae = (!plan.masked.is_empty()).then(|| abs_sum / (plan.masked.len() * d) as f64);
    Ok(Composed { masked, composed, mae })
}

/// Mask one example, run encoder and decoder on it, and optionally write
/// `{id}_audio.png` plus one `{id}_frame{t}.png` per model frame into `out`.
/// Each image is a triptych: masked input, reconstruction, original.
pub fn reconstruct(
    store: &ParamStore<f32>,
    model: &SocialMae,
    example: &Example,
    opts: &ReconstructOptions,
    out: Option<&Path>,
) -> Result<ReconstructionResult> {
    if model.decoder.is_none() {
        return Err(Error::usage(
            "checkpoint has no decoder; reconstruction needs a pre-training checkpoint",
        ));
    }
    if !(0.0..1.0).contains(&opts.mask_ratio) {
        return Err(Error::usage(format!("mask ratio must be in [0, 1), got {}", opts.mask_ratio)));
    }
    let geom = &model.geometry;
    let mut frame_rng = seeded(opts.seed, 3);
    let idx = sample_frame_indices(example.frames.shape()[0], geom.video_frames, FrameMode::Eval, &mut frame_rng)?;
    let frames = select_frames(&example.frames, &idx)?;
    let mut rng = seeded(opts.seed, 2);
    let audio_plan = sample_mask(geom.tokens(Modality::Audio), opts.mask_ratio, &mut rng)?;
    let video_plan = sample_mask(geom.tokens(Modality::Video), opts.mask_ratio, &mut rng)?;

    let (pred_a, pred_v) = {
        let mut g = Graph::new(store);
        let a = tokenize_audio(&mut g, &example.spectrogram, &model.tables, geom)?;
        let v = tokenize_video(&mut g, &frames, &model.tables, geom)?;
        let a_vis = select_visible(&mut g, &a, &audio_plan)?;
        let v_vis = select_visible(&mut g, &v, &video_plan)?;
        let enc = model.encode(&mut g, &a_vis, &v_vis)?;
        let rec = model.decode(&mut g, enc.joint, &audio_plan, &video_plan)?;
        (g.value(rec.audio).clone(), g.value(rec.video).clone())
    };

    let orig_a = patchify_audio(&example.spectrogram, geom)?.data;
    let orig_v = patchify_video(&frames, geom)?.data;
    let lo = orig_a.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = orig_a.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let audio = compose(&orig_a, &pred_a, &audio_plan, opts.normalized_audio, lo + MASK_GRAY * (hi - lo))?;
    let video = compose(&orig_v, &pred_v, &video_plan, opts.normalized_video, MASK_GRAY)?;

    let spec = unpatchify_audio(&audio.composed, geom)?;
    let clip = unpatchify_video(&video.composed, geom)?;
    let mut files = Vec::new();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let panels = [
            unpatchify_audio(&audio.masked, geom)?,
            spec.clone(),
            unpatchify_audio(&orig_a, geom)?,
        ];
        let path = dir.join(format!("{}_audio.png", example.id));
        write_spectrogram_triptych(&path, &panels, lo, hi)?;
        files.push(path);
        let panels = [
            unpatchify_video(&video.masked, geom)?,
            clip.clone(),
            unpatchify_video(&orig_v, geom)?,
        ];
        for t in 0..geom.video_frames {
            let path = dir.join(format!("{}_frame{t}.png", example.id));
            write_frame_triptych(&path, &panels, t)?;
            files.push(path);
        }
    }
    Ok(ReconstructionResult {
        id: example.id.clone(),
        audio_plan,
        video_plan,
        audio_mae: audio.mae,
        video_mae: video.mae,
        audio: spec,
        video: clip,
        files,
    })
}

/// Three `[n_mels, frames]` panels side by side, low mel bins at the bottom,
/// scaled to `[lo, hi]`.
fn write_spectrogram_triptych(path: &Path, panels: &[Tensor<f32>; 3], lo: f32, hi: f32) -> Result<()> {
    let (mels, frames) = panels[0].dims2()?;
    let width = 3 * frames;
    let range = (hi - lo).max(f32::EPSILON);
    let mut rgb = vec![0.0f32; width * mels * 3];
    for (p, panel) in panels.iter().enumerate() {
        for m in 0..mels {
            let y = mels - 1 - m;
            for f in 0..frames {
                let v = (panel.at(m, f) - lo) / range;
                let px = (y * width + p * frames + f) * 3;
                rgb[px..px + 3].fill(v);
            }
        }
    }
    save_rgb_png(path, &rgb, width, mels)
}

/// Frame `t` of three `[F, H, W, C]` clips side by side.
fn write_frame_triptych(path: &Path, panels: &[Tensor<f32>; 3], t: usize) -> Result<()> {
    let s = panels[0].shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    let width = 3 * w;
    let mut rgb = vec![0.0f32; width * h * 3];
    for (p, panel) in panels.iter().enumerate() {
        let frame = &panel.data()[t * h * w * c..(t + 1) * h * w * c];
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * c;
                let dst = (y * width + p * w + x) * 3;
                for ch in 0..3 {
                    rgb[dst + ch] = frame[src + ch.min(c - 1)];
                }
            }
        }
    }
    save_rgb_png(path, &rgb, width, h)
}
