//! Patch and tubelet tokenization, positional/modality embeddings, and
//! random mask plans.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioFrontendConfig, Spectrogram};
use crate::error::{Error, Result};
use crate::model::ParamSource;
use crate::numerics::{Graph, ParamId, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalInit {
    #[default]
    TruncNormal,
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    /// (mel bins, frames)
    pub audio_patch: [usize; 2],
    /// (frames, rows, cols)
    pub video_tubelet: [usize; 3],
    pub embed_dim: usize,
    pub image_size: usize,
    pub video_frames: usize,
    pub channels: usize,
    #[serde(default)]
    pub positional_init: PositionalInit,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            audio_patch: [16, 16],
            video_tubelet: [2, 16, 16],
            embed_dim: 768,
            image_size: 224,
            video_frames: 8,
            channels: 3,
            positional_init: PositionalInit::TruncNormal,
        }
    }
}

impl PatchConfig {
    /// Four 32-pixel frames, 16-dimensional embeddings.
    pub fn desk() -> Self {
        Self {
            embed_dim: 16,
            image_size: 32,
            video_frames: 4,
            ..Default::default()
        }
    }
}

/// Input geometry shared by tokenizer and model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub n_mels: usize,
    pub frames: usize,
    pub audio_patch: [usize; 2],
    pub video_frames: usize,
    pub image_size: usize,
    pub channels: usize,
    pub tubelet: [usize; 3],
}

impl Geometry {
    pub fn new(audio: &AudioFrontendConfig, patch: &PatchConfig) -> Result<Self> {
        let g = Self {
            n_mels: audio.n_mels,
            frames: audio.target_frames,
            audio_patch: patch.audio_patch,
            video_frames: patch.video_frames,
            image_size: patch.image_size,
            channels: patch.channels,
            tubelet: patch.video_tubelet,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let [pm, pf] = self.audio_patch;
        let [tt, th, tw] = self.tubelet;
        if pm == 0 || pf == 0 || tt == 0 || th == 0 || tw == 0 {
            problems.push("patch dimensions must be >= 1".to_string());
        } else {
            if self.n_mels % pm != 0 {
                problems.push(format!("n_mels {} not divisible by audio patch height {pm}", self.n_mels));
            }
            if self.frames % pf != 0 {
                problems.push(format!("target_frames {} not divisible by audio patch width {pf}", self.frames));
            }
            if self.video_frames % tt != 0 {
                problems.push(format!(
                    "video_frames {} not divisible by tubelet depth {tt}",
                    self.video_frames
                ));
            }
            if self.image_size % th != 0 || self.image_size % tw != 0 {
                problems.push(format!(
                    "image_size {} not divisible by tubelet {th}x{tw}",
                    self.image_size
                ));
            }
        }
        if self.channels == 0 {
            problems.push("channels must be >= 1".into());
        }
        if self.video_frames == 0 || self.image_size == 0 || self.n_mels == 0 || self.frames == 0 {
            problems.push("input dimensions must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// (mel rows, frame columns) of the audio patch grid.
    pub fn audio_grid(&self) -> (usize, usize) {
        (self.n_mels / self.audio_patch[0], self.frames / self.audio_patch[1])
    }

    /// (time, rows, cols) of the tubelet grid.
    pub fn video_grid(&self) -> (usize, usize, usize) {
        (
            self.video_frames / self.tubelet[0],
            self.image_size / self.tubelet[1],
            self.image_size / self.tubelet[2],
        )
    }

    pub fn tokens(&self, m: Modality) -> usize {
        match m {
            Modality::Audio => {
                let (r, c) = self.audio_grid();
                r * c
            }
            Modality::Video => {
                let (t, r, c) = self.video_grid();
                t * r * c
            }
        }
    }

    pub fn patch_volume(&self, m: Modality) -> usize {
        match m {
            Modality::Audio => self.audio_patch[0] * self.audio_patch[1],
            Modality::Video => self.tubelet.iter().product::<usize>() * self.channels,
        }
    }

    /// Grid coordinate `(t, row, col)` of token `i`; `t` is 0 for audio.
    pub fn coord(&self, m: Modality, i: usize) -> [usize; 3] {
        match m {
            Modality::Audio => {
                let (_, c) = self.audio_grid();
                [0, i / c, i % c]
            }
            Modality::Video => {
                let (_, r, c) = self.video_grid();
                [i / (r * c), (i / c) % r, i % c]
            }
        }
    }
}

/// Flattened patches of one input, `[N, patch_volume]`, in token order.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub modality: Modality,
    pub data: Tensor<f32>,
}

impl Patches {
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn volume(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Split an `n_mels × frames` spectrogram into non-overlapping patches,
/// ordered row-major over (mel row, frame column); each patch flattened
/// row-major over (mel, frame).
pub fn patchify_audio(spec: &Spectrogram, geom: &Geometry) -> Result<Patches> {
    if spec.n_mels() != geom.n_mels || spec.frames() != geom.frames {
        return Err(Error::config(format!(
            "spectrogram is {}x{}, geometry expects {}x{}",
            spec.n_mels(),
            spec.frames(),
            geom.n_mels,
            geom.frames
        )));
    }
    let [ph, pw] = geom.audio_patch;
    let (rows, cols) = geom.audio_grid();
    let src = spec.grid.data();
    let mut out = Vec::with_capacity(rows * cols * ph * pw);
    for r in 0..rows {
        for c in 0..cols {
            for m in 0..ph {
                let base = (r * ph + m) * geom.frames + c * pw;
                out.extend_from_slice(&src[base..base + pw]);
            }
        }
    }
    Ok(Patches {
        modality: Modality::Audio,
        data: Tensor::new(&[rows * cols, ph * pw], out)?,
    })
}

/// Split a `[frames, H, W, C]` clip into tubelets ordered row-major over
/// (tubelet time, row, col); each tubelet flattened over (dt, dy, dx, c).
pub fn patchify_video(frames: &Tensor<f32>, geom: &Geometry) -> Result<Patches> {
    let expected = [geom.video_frames, geom.image_size, geom.image_size, geom.channels];
    if frames.shape() != expected {
        return Err(Error::shape("patchify_video", frames.shape(), &expected));
    }
    let [tt, th, tw] = geom.tubelet;
    let (gt, gr, gc) = geom.video_grid();
    let (h, w, ch) = (geom.image_size, geom.image_size, geom.channels);
    let src = frames.data();
    let vol = tt * th * tw * ch;
    let mut out = Vec::with_capacity(gt * gr * gc * vol);
    for t in 0..gt {
        for r in 0..gr {
            for c in 0..gc {
                for dt in 0..tt {
                    for dy in 0..th {
                        let f = t * tt + dt;
                        let y = r * th + dy;
                        let base = ((f * h + y) * w + c * tw) * ch;
                        out.extend_from_slice(&src[base..base + tw * ch]);
                    }
                }
            }
        }
    }
    Ok(Patches {
        modality: Modality::Video,
        data: Tensor::new(&[gt * gr * gc, vol], out)?,
    })
}

/// Inverse of [`patchify_video`].
pub fn unpatchify_video(patches: &Tensor<f32>, geom: &Geometry) -> Result<Tensor<f32>> {
    let [tt, th, tw] = geom.tubelet;
    let (gt, gr, gc) = geom.video_grid();
    let (h, w, ch) = (geom.image_size, geom.image_size, geom.channels);
    let vol = tt * th * tw * ch;
    if patches.shape() != [gt * gr * gc, vol] {
        return Err(Error::shape("unpatchify_video", patches.shape(), &[gt * gr * gc, vol]));
    }
    let mut out = vec![0f32; geom.video_frames * h * w * ch];
    let src = patches.data();
    let mut k = 0;
    for t in 0..gt {
        for r in 0..gr {
            for c in 0..gc {
                for dt in 0..tt {
                    for dy in 0..th {
                        let base = (((t * tt + dt) * h + r * th + dy) * w + c * tw) * ch;
                        out[base..base + tw * ch].copy_from_slice(&src[k..k + tw * ch]);
                        k += tw * ch;
                    }
                }
            }
        }
    }
    Tensor::new(&[geom.video_frames, h, w, ch], out)
}

/// Inverse of [`patchify_audio`], returning an `n_mels × frames` grid.
pub fn unpatchify_audio(patches: &Tensor<f32>, geom: &Geometry) -> Result<Tensor<f32>> {
    let [ph, pw] = geom.audio_patch;
    let (rows, cols) = geom.audio_grid();
    if patches.shape() != [rows * cols, ph * pw] {
        return Err(Error::shape("unpatchify_audio", patches.shape(), &[rows * cols, ph * pw]));
    }
    let mut out = vec![0f32; geom.n_mels * geom.frames];
    let src = patches.data();
    for r in 0..rows {
        for c in 0..cols {
            let p = &src[(r * cols + c) * ph * pw..(r * cols + c + 1) * ph * pw];
            for m in 0..ph {
                let base = (r * ph + m) * geom.frames + c * pw;
                out[base..base + pw].copy_from_slice(&p[m * pw..(m + 1) * pw]);
            }
        }
    }
    Tensor::new(&[geom.n_mels, geom.frames], out)
}

/// Trainable projection, positional and modality parameters.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub audio_proj_w: ParamId,
    pub audio_proj_b: ParamId,
    pub video_proj_w: ParamId,
    pub video_proj_b: ParamId,
    pub audio_pos: ParamId,
    pub video_pos: ParamId,
    pub modality_audio: ParamId,
    pub modality_video: ParamId,
}

impl EmbeddingTables {
    pub(crate) fn build<T: Real>(
        src: &mut ParamSource<'_, T>,
        geom: &Geometry,
        dim: usize,
        pos_init: PositionalInit,
    ) -> Result<Self> {
        use crate::model::Init;
        let va = geom.patch_volume(Modality::Audio);
        let vv = geom.patch_volume(Modality::Video);
        let pos = match pos_init {
            PositionalInit::TruncNormal => Init::TruncNormal(0.02),
            PositionalInit::Sinusoidal => Init::Sinusoidal,
        };
        Ok(Self {
            audio_proj_w: src.get("patch.audio_proj.weight", &[va, dim], Init::Xavier)?,
            audio_proj_b: src.get("patch.audio_proj.bias", &[dim], Init::Zeros)?,
            video_proj_w: src.get("patch.video_proj.weight", &[vv, dim], Init::Xavier)?,
            video_proj_b: src.get("patch.video_proj.bias", &[dim], Init::Zeros)?,
            audio_pos: src.get("patch.audio_pos", &[geom.tokens(Modality::Audio), dim], pos)?,
            video_pos: src.get("patch.video_pos", &[geom.tokens(Modality::Video), dim], pos)?,
            modality_audio: src.get("patch.modality_audio", &[dim], Init::TruncNormal(0.02))?,
            modality_video: src.get("patch.modality_video", &[dim], Init::TruncNormal(0.02))?,
        })
    }

    fn ids(&self, m: Modality) -> (ParamId, ParamId, ParamId, ParamId) {
        match m {
            Modality::Audio => (self.audio_proj_w, self.audio_proj_b, self.audio_pos, self.modality_audio),
            Modality::Video => (self.video_proj_w, self.video_proj_b, self.video_pos, self.modality_video),
        }
    }
}

/// Embedded tokens of one clip and modality.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub modality: Modality,
    /// `[len, embed_dim]` node in the graph that produced it.
    pub embeddings: Var,
    /// Original patch index of every token, in order.
    pub positions: Vec<usize>,
    /// All patches of the clip (reconstruction targets), not just `positions`.
    pub raw_patches: Tensor<f32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// `W·patch + b + pos[i] + modality`
pub fn embed<T: Real>(g: &mut Graph<'_, T>, patches: &Patches, tables: &EmbeddingTables) -> Result<TokenSequence> {
    let (w, b, pos, modality) = tables.ids(patches.modality);
    let n = patches.len();
    let table_len = g.store().get(pos).value.shape()[0];
    if n > table_len {
        return Err(Error::config(format!(
            "{} token count {n} exceeds positional table length {table_len}",
            patches.modality.name()
        )));
    }
    let x = g.constant(patches.data.cast());
    let (w, b, pos, modality) = (g.param(w), g.param(b), g.param(pos), g.param(modality));
    let proj = g.linear(x, w, b)?;
    let pos = if n == table_len {
        pos
    } else {
        g.gather_rows(pos, &(0..n).collect::<Vec<_>>())?
    };
    let with_pos = g.add(proj, pos)?;
    let embeddings = g.add_row(with_pos, modality)?;
    Ok(TokenSequence {
        modality: patches.modality,
        embeddings,
        positions: (0..n).collect(),
        raw_patches: patches.data.clone(),
    })
}

pub fn tokenize_audio<T: Real>(
    g: &mut Graph<'_, T>,
    spec: &Spectrogram,
    tables: &EmbeddingTables,
    geom: &Geometry,
) -> Result<TokenSequence> {
    embed(g, &patchify_audio(spec, geom)?, tables)
}

pub fn tokenize_video<T: Real>(
    g: &mut Graph<'_, T>,
    frames: &Tensor<f32>,
    tables: &EmbeddingTables,
    geom: &Geometry,
) -> Result<TokenSequence> {
    embed(g, &patchify_video(frames, geom)?, tables)
}

/// Partition of `0..len` into masked and visible token indices, both sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub ratio: f64,
}

impl MaskPlan {
    pub fn none(len: usize) -> Self {
        Self {
            masked: Vec::new(),
            visible: (0..len).collect(),
            ratio: 0.0,
        }
    }

    pub fn from_masked(len: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= len) {
            return Err(Error::Internal(format!("mask index out of range for {len} tokens")));
        }
        let mut is_masked = vec![false; len];
        masked.iter().for_each(|&m| is_masked[m] = true);
        let visible = (0..len).filter(|&i| !is_masked[i]).collect();
        let ratio = if len == 0 { 0.0 } else { masked.len() as f64 / len as f64 };
        Ok(Self { masked, visible, ratio })
    }

    pub fn len(&self) -> usize {
        self.masked.len() + self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of tokens masked at ratio `p`: `round(p·n)`, leaving at least
/// one token visible so the encoder always has something to pool.
pub fn masked_count(n: usize, p: f64) -> usize {
    ((p * n as f64).round() as usize).min(n.saturating_sub(1))
}

/// Uniformly random subset of `round(p·n)` indices.
pub fn sample_mask(n: usize, p: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::usage(format!("mask ratio must lie in [0, 1), got {p}")));
    }
    let k = masked_count(n, p);
    let masked = rand::seq::index::sample(rng, n, k).into_vec();
    let mut plan = MaskPlan::from_masked(n, masked)?;
    plan.ratio = p;
    Ok(plan)
}

/// Keep only the plan's visible tokens, in order.
pub fn select_visible<T: Real>(g: &mut Graph<'_, T>, seq: &TokenSequence, plan: &MaskPlan) -> Result<TokenSequence> {
    if plan.len() != seq.len() {
        return Err(Error::Internal(format!(
            "mask plan covers {} tokens, sequence has {}",
            plan.len(),
            seq.len()
        )));
    }
    if plan.masked.is_empty() {
        return Ok(seq.clone());
    }
    let embeddings = g.gather_rows(seq.embeddings, &plan.visible)?;
    Ok(TokenSequence {
        modality: seq.modality,
        embeddings,
        positions: plan.visible.iter().map(|&i| seq.positions[i]).collect(),
        raw_patches: seq.raw_patches.clone(),
    })
}
