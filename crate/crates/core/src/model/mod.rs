//! The audiovisual masked autoencoder: modality encoders, a shared joint
//! encoder with per-path terminal norms, a joint decoder with a learnable
//! mask token, and task heads for fine-tuning.

mod layers;

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use layers::{Norm, TransformerLayer};

use crate::error::{Error, Result};
use crate::numerics::{sinusoidal_table, trunc_normal, xavier_uniform, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::tokenizer::{EmbeddingTables, Geometry, MaskPlan, Modality, PositionalInit, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub modality_encoder_depth: usize,
    pub joint_encoder_depth: usize,
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub num_heads: usize,
    pub decoder_num_heads: usize,
    pub mlp_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 768,
            modality_encoder_depth: 11,
            joint_encoder_depth: 1,
            decoder_depth: 8,
            decoder_dim: 512,
            num_heads: 12,
            decoder_num_heads: 16,
            mlp_ratio: 4.0,
        }
    }
}

impl ModelConfig {
    /// dim 16, depths 2/1/2.
    pub fn desk() -> Self {
        Self {
            embed_dim: 16,
            modality_encoder_depth: 2,
            joint_encoder_depth: 1,
            decoder_depth: 2,
            decoder_dim: 12,
            num_heads: 2,
            decoder_num_heads: 2,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (key, v) in [
            ("model.modality_encoder_depth", self.modality_encoder_depth),
            ("model.joint_encoder_depth", self.joint_encoder_depth),
            ("model.decoder_depth", self.decoder_depth),
            ("model.embed_dim", self.embed_dim),
            ("model.decoder_dim", self.decoder_dim),
            ("model.num_heads", self.num_heads),
            ("model.decoder_num_heads", self.decoder_num_heads),
        ] {
            if v == 0 {
                problems.push(format!("{key} must be >= 1"));
            }
        }
        if self.num_heads > 0 && self.embed_dim % self.num_heads != 0 {
            problems.push(format!(
                "model.embed_dim {} not divisible by model.num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.decoder_num_heads > 0 && self.decoder_dim % self.decoder_num_heads != 0 {
            problems.push(format!(
                "model.decoder_dim {} not divisible by model.decoder_num_heads {}",
                self.decoder_dim, self.decoder_num_heads
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            problems.push("model.mlp_ratio must be > 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn mlp_dim(&self, dim: usize) -> usize {
        ((dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Xavier,
    TruncNormal(f64),
    Sinusoidal,
}

/// Creates parameters (init mode) or looks them up by name (bind mode), so
/// one construction path serves fresh models and loaded checkpoints.
pub struct ParamSource<'s, T: Real> {
    store: &'s mut ParamStore<T>,
    rng: Option<&'s mut dyn RngCore>,
}

impl<'s, T: Real> ParamSource<'s, T> {
    pub fn init(store: &'s mut ParamStore<T>, rng: &'s mut dyn RngCore) -> Self {
        Self { store, rng: Some(rng) }
    }

    pub fn bind(store: &'s mut ParamStore<T>) -> Self {
        Self { store, rng: None }
    }

    pub(crate) fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        match &mut self.rng {
            Some(rng) => {
                let mut rng = &mut **rng;
                let value = match init {
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::ones(shape),
                    Init::Xavier => {
                        let (fi, fo) = (shape[0], shape[1..].iter().product());
                        xavier_uniform(fi, fo, &mut rng).reshape(shape)?
                    }
                    Init::TruncNormal(std) => trunc_normal(shape, std, &mut rng),
                    Init::Sinusoidal => sinusoidal_table(shape[0], shape[1]),
                };
                self.store.insert(name, value)
            }
            None => {
                let id = self
                    .store
                    .id(name)
                    .ok_or_else(|| Error::config(format!("checkpoint is missing parameter `{name}`")))?;
                let have = self.store.get(id).value.shape();
                if have != shape {
                    return Err(Error::config(format!(
                        "parameter `{name}` has shape {have:?}, model expects {shape:?}"
                    )));
                }
                Ok(id)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression { outputs: usize },
}

impl TaskKind {
    pub fn outputs(self) -> usize {
        match self {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression { outputs } => outputs,
        }
    }
}

/// Linear head replacing the decoder for fine-tuning.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub kind: TaskKind,
    pub weight: ParamId,
    pub bias: ParamId,
}

pub const HEAD_PREFIX: &str = "head.";
pub const DECODER_PREFIX: &str = "decoder.";

/// Decoder-side parameters.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub mask_token: ParamId,
    pub audio_pos: ParamId,
    pub video_pos: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub norm: Norm,
    pub audio_head_w: ParamId,
    pub audio_head_b: ParamId,
    pub video_head_w: ParamId,
    pub video_head_b: ParamId,
}

/// Which inputs a forward pass sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Audio,
    Video,
    #[serde(rename = "av")]
    AudioVisual,
}

impl InputMode {
    pub const ALL: [InputMode; 3] = [InputMode::Audio, InputMode::Video, InputMode::AudioVisual];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(InputMode::Audio),
            "video" => Ok(InputMode::Video),
            "av" => Ok(InputMode::AudioVisual),
            other => Err(Error::usage(format!("modality must be audio|video|av, got `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputMode::Audio => "audio",
            InputMode::Video => "video",
            InputMode::AudioVisual => "av",
        }
    }
}

/// Token outputs of one unimodal pass.
#[derive(Clone, Copy, Debug)]
pub struct UnimodalOutput {
    pub tokens: Var,
    /// `[embed_dim]` mean of `tokens`.
    pub pooled: Var,
}

/// Everything the pre-training losses need from the encoder side.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub audio: UnimodalOutput,
    pub video: UnimodalOutput,
    /// Concatenated `[audio; video]` stream after the joint encoder and the
    /// multimodal norm.
    pub joint: Var,
}

/// Per-modality patch predictions, `[N, patch_volume]`, in patch order.
#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    pub audio: Var,
    pub video: Var,
}

#[derive(Clone, Debug)]
pub struct SocialMae {
    pub config: ModelConfig,
    pub geometry: Geometry,
    pub tables: EmbeddingTables,
    pub audio_encoder: Vec<TransformerLayer>,
    pub video_encoder: Vec<TransformerLayer>,
    pub joint_encoder: Vec<TransformerLayer>,
    pub norm_audio: Norm,
    pub norm_video: Norm,
    pub norm_multimodal: Norm,
    pub decoder: Option<Decoder>,
    pub head: Option<TaskHead>,
}

fn stack<T: Real>(src: &mut ParamSource<'_, T>, prefix: &str, depth: usize, dim: usize, heads: usize, mlp: usize) -> Result<Vec<TransformerLayer>> {
    (0..depth)
        .map(|i| TransformerLayer::build(src, &format!("{prefix}.layer{i}"), dim, heads, mlp))
        .collect()
}

impl SocialMae {
    fn build<T: Real>(
        src: &mut ParamSource<'_, T>,
        config: &ModelConfig,
        geometry: &Geometry,
        pos_init: PositionalInit,
        with_decoder: bool,
        head: Option<TaskKind>,
    ) -> Result<Self> {
        config.validate()?;
        geometry.validate()?;
        let d = config.embed_dim;
        let mlp = config.mlp_dim(d);
        let tables = EmbeddingTables::build(src, geometry, d, pos_init)?;
        let audio_encoder = stack(src, "audio_encoder", config.modality_encoder_depth, d, config.num_heads, mlp)?;
        let video_encoder = stack(src, "video_encoder", config.modality_encoder_depth, d, config.num_heads, mlp)?;
        let joint_encoder = stack(src, "joint_encoder", config.joint_encoder_depth, d, config.num_heads, mlp)?;
        let norm_audio = Norm::build(src, "joint_encoder.norm_audio", d)?;
        let norm_video = Norm::build(src, "joint_encoder.norm_video", d)?;
        let norm_multimodal = Norm::build(src, "joint_encoder.norm_multimodal", d)?;

        let decoder = if with_decoder {
            let dd = config.decoder_dim;
            let pos = match pos_init {
                PositionalInit::TruncNormal => Init::TruncNormal(0.02),
                PositionalInit::Sinusoidal => Init::Sinusoidal,
            };
            Some(Decoder {
                embed_w: src.get("decoder.embed.weight", &[d, dd], Init::Xavier)?,
                embed_b: src.get("decoder.embed.bias", &[dd], Init::Zeros)?,
                mask_token: src.get("decoder.mask_token", &[dd], Init::TruncNormal(0.02))?,
                audio_pos: src.get("decoder.audio_pos", &[geometry.tokens(Modality::Audio), dd], pos)?,
                video_pos: src.get("decoder.video_pos", &[geometry.tokens(Modality::Video), dd], pos)?,
                layers: stack(src, "decoder", config.decoder_depth, dd, config.decoder_num_heads, config.mlp_dim(dd))?,
                norm: Norm::build(src, "decoder.norm", dd)?,
                audio_head_w: src.get("decoder.audio_head.weight", &[dd, geometry.patch_volume(Modality::Audio)], Init::Xavier)?,
                audio_head_b: src.get("decoder.audio_head.bias", &[geometry.patch_volume(Modality::Audio)], Init::Zeros)?,
                video_head_w: src.get("decoder.video_head.weight", &[dd, geometry.patch_volume(Modality::Video)], Init::Xavier)?,
                video_head_b: src.get("decoder.video_head.bias", &[geometry.patch_volume(Modality::Video)], Init::Zeros)?,
            })
        } else {
            None
        };
        let head = head.map(|kind| Self::build_head(src, d, kind)).transpose()?;

        Ok(Self {
            config: config.clone(),
            geometry: geometry.clone(),
            tables,
            audio_encoder,
            video_encoder,
            joint_encoder,
            norm_audio,
            norm_video,
            norm_multimodal,
            decoder,
            head,
        })
    }

    fn build_head<T: Real>(src: &mut ParamSource<'_, T>, dim: usize, kind: TaskKind) -> Result<TaskHead> {
        let k = kind.outputs();
        if k == 0 {
            return Err(Error::config("task head needs at least one output"));
        }
        Ok(TaskHead {
            kind,
            weight: src.get("head.weight", &[dim, k], Init::TruncNormal(0.02))?,
            bias: src.get("head.bias", &[k], Init::Zeros)?,
        })
    }

    /// Fresh pre-training model (encoders + decoder) with new parameters.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        geometry: &Geometry,
        pos_init: PositionalInit,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        Self::build(&mut ParamSource::init(store, rng), config, geometry, pos_init, true, None)
    }

    /// Attach to parameters already in `store` (e.g. from a checkpoint).
    /// The decoder is bound when its parameters are present.
    pub fn bind<T: Real>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        geometry: &Geometry,
        head: Option<TaskKind>,
    ) -> Result<Self> {
        let with_decoder = store.id("decoder.mask_token").is_some();
        Self::build(
            &mut ParamSource::bind(store),
            config,
            geometry,
            PositionalInit::TruncNormal,
            with_decoder,
            head,
        )
    }

    /// Remove the decoder and attach a randomly initialized head.
    pub fn into_finetune<T: Real>(self, store: &mut ParamStore<T>, kind: TaskKind, rng: &mut dyn RngCore) -> Result<Self> {
        store.retain(|n| !n.starts_with(DECODER_PREFIX) && !n.starts_with(HEAD_PREFIX));
        let mut model = Self::bind(store, &self.config, &self.geometry, None)?;
        model.head = Some(Self::build_head(&mut ParamSource::init(store, rng), self.config.embed_dim, kind)?);
        Ok(model)
    }

    fn encoder_stack(&self, m: Modality) -> &[TransformerLayer] {
        match m {
            Modality::Audio => &self.audio_encoder,
            Modality::Video => &self.video_encoder,
        }
    }

    fn terminal_norm(&self, m: Modality) -> &Norm {
        match m {
            Modality::Audio => &self.norm_audio,
            Modality::Video => &self.norm_video,
        }
    }

    fn check_len<T: Real>(&self, g: &Graph<'_, T>, seq: &TokenSequence) -> Result<()> {
        let max = self.geometry.tokens(seq.modality);
        if seq.len() > max {
            return Err(Error::config(format!(
                "{} sequence of {} tokens exceeds positional table of {max}",
                seq.modality.name(),
                seq.len()
            )));
        }
        if g.shape(seq.embeddings) != [seq.len(), self.config.embed_dim] {
            return Err(Error::shape(
                "encoder input",
                g.shape(seq.embeddings),
                &[seq.len(), self.config.embed_dim],
            ));
        }
        Ok(())
    }

    /// Modality-specific transformer stack only.
    pub fn encode_modality<T: Real>(&self, g: &mut Graph<'_, T>, seq: &TokenSequence) -> Result<Var> {
        self.check_len(g, seq)?;
        let mut x = seq.embeddings;
        for layer in self.encoder_stack(seq.modality) {
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }

    /// Shared joint layers followed by the given terminal norm.
    pub fn joint_pass<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, norm: &Norm) -> Result<Var> {
        let mut x = x;
        for layer in &self.joint_encoder {
            x = layer.forward(g, x)?;
        }
        norm.forward(g, x)
    }

    fn unimodal_from<T: Real>(&self, g: &mut Graph<'_, T>, encoded: Var, m: Modality) -> Result<UnimodalOutput> {
        let tokens = self.joint_pass(g, encoded, self.terminal_norm(m))?;
        let pooled = g.mean_axis(tokens, 0)?;
        Ok(UnimodalOutput { tokens, pooled })
    }

    /// Modality encoder → joint encoder → modality norm → mean pool.
    pub fn encode_unimodal<T: Real>(&self, g: &mut Graph<'_, T>, seq: &TokenSequence) -> Result<UnimodalOutput> {
        let encoded = self.encode_modality(g, seq)?;
        self.unimodal_from(g, encoded, seq.modality)
    }

    /// Each modality through its own encoder, then `[audio; video]` through
    /// the joint encoder and the multimodal norm.
    pub fn encode_joint<T: Real>(&self, g: &mut Graph<'_, T>, audio: &TokenSequence, video: &TokenSequence) -> Result<Var> {
        let a = self.encode_modality(g, audio)?;
        let v = self.encode_modality(g, video)?;
        let cat = g.cat_rows(&[a, v])?;
        self.joint_pass(g, cat, &self.norm_multimodal)
    }

    /// All three joint-encoder paths, reusing one pass of each modality encoder.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, audio: &TokenSequence, video: &TokenSequence) -> Result<EncoderOutput> {
        if audio.modality != Modality::Audio || video.modality != Modality::Video {
            return Err(Error::usage("encode expects (audio, video) sequences"));
        }
        let a = self.encode_modality(g, audio)?;
        let v = self.encode_modality(g, video)?;
        let audio_out = self.unimodal_from(g, a, Modality::Audio)?;
        let video_out = self.unimodal_from(g, v, Modality::Video)?;
        let cat = g.cat_rows(&[a, v])?;
        let joint = self.joint_pass(g, cat, &self.norm_multimodal)?;
        Ok(EncoderOutput {
            audio: audio_out,
            video: video_out,
            joint,
        })
    }

    /// Predict every patch of both modalities from the joint tokens of the
    /// visible positions in `audio_plan` / `video_plan`.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        joint: Var,
        audio_plan: &MaskPlan,
        video_plan: &MaskPlan,
    ) -> Result<Reconstruction> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::usage("model has no decoder (fine-tuned checkpoint?)"))?;
        let (na, nv) = (self.geometry.tokens(Modality::Audio), self.geometry.tokens(Modality::Video));
        if audio_plan.len() != na || video_plan.len() != nv {
            return Err(Error::Internal(format!(
                "mask plans cover {}/{} tokens, geometry has {na}/{nv}",
                audio_plan.len(),
                video_plan.len()
            )));
        }
        let (va, vv) = (audio_plan.visible.len(), video_plan.visible.len());
        if g.shape(joint)[0] != va + vv {
            return Err(Error::Internal(format!(
                "joint stream has {} tokens, plans expect {}",
                g.shape(joint)[0],
                va + vv
            )));
        }
        let dd = self.config.decoder_dim;
        let (w, b) = (g.param(dec.embed_w), g.param(dec.embed_b));
        let proj = g.linear(joint, w, b)?;
        let m = g.param(dec.mask_token);
        let m = g.reshape(m, &[1, dd])?;

        let mut streams = Vec::with_capacity(2);
        for (plan, offset, n, pos) in [(audio_plan, 0, na, dec.audio_pos), (video_plan, va, nv, dec.video_pos)] {
            let visible = plan.visible.len();
            let part = g.gather_rows(proj, &(offset..offset + visible).collect::<Vec<_>>())?;
            // row `visible` of `pool` is the mask token
            let pool = g.cat_rows(&[part, m])?;
            let mut slot = vec![visible; n];
            for (k, &i) in plan.visible.iter().enumerate() {
                slot[i] = k;
            }
            let full = g.gather_rows(pool, &slot)?;
            let pos = g.param(pos);
            streams.push(g.add(full, pos)?);
        }
        let mut x = g.cat_rows(&streams)?;
        for layer in &dec.layers {
            x = layer.forward(g, x)?;
        }
        x = dec.norm.forward(g, x)?;
        let xa = g.gather_rows(x, &(0..na).collect::<Vec<_>>())?;
        let xv = g.gather_rows(x, &(na..na + nv).collect::<Vec<_>>())?;
        let (aw, ab) = (g.param(dec.audio_head_w), g.param(dec.audio_head_b));
        let audio = g.linear(xa, aw, ab)?;
        let (vw, vb) = (g.param(dec.video_head_w), g.param(dec.video_head_b));
        let video = g.linear(xv, vw, vb)?;
        Ok(Reconstruction { audio, video })
    }

    /// Pooled representation for one input mode, without masking.
    pub fn pooled<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        audio: Option<&TokenSequence>,
        video: Option<&TokenSequence>,
    ) -> Result<Var> {
        match (audio, video) {
            (Some(a), Some(v)) => {
                let joint = self.encode_joint(g, a, v)?;
                g.mean_axis(joint, 0)
            }
            (Some(s), None) | (None, Some(s)) => Ok(self.encode_unimodal(g, s)?.pooled),
            (None, None) => Err(Error::usage("classify needs at least one modality")),
        }
    }

    /// Head outputs for one clip: `[K]` logits, or sigmoid scores for regression.
    pub fn classify<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        audio: Option<&TokenSequence>,
        video: Option<&TokenSequence>,
    ) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::usage("model has no task head"))?;
        let pooled = self.pooled(g, audio, video)?;
        let d = self.config.embed_dim;
        let row = g.reshape(pooled, &[1, d])?;
        let (w, b) = (g.param(head.weight), g.param(head.bias));
        let out = g.linear(row, w, b)?;
        let k = head.kind.outputs();
        let out = g.reshape(out, &[k])?;
        Ok(match head.kind {
            TaskKind::Classification { .. } => out,
            TaskKind::Regression { .. } => g.sigmoid(out),
        })
    }
}
