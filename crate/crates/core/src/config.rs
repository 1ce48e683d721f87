//! Run configuration: defaults, shipped presets, TOML files and overrides,
//! merged into one [`RunConfig`] that is serialized next to every artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{AudioFrontendConfig, AudioStats};
use crate::error::{Error, Result};
use crate::model::{InputMode, ModelConfig, TaskKind};
use crate::numerics::AdamConfig;
use crate::objectives::LossConfig;
use crate::tokenizer::{Geometry, PatchConfig};

const PRESETS: [(&str, &str); 4] = [
    ("pretrain-default", include_str!("../presets/pretrain-default.toml")),
    ("crema-d", include_str!("../presets/crema-d.toml")),
    ("first-impressions", include_str!("../presets/first-impressions.toml")),
    ("ndc-me", include_str!("../presets/ndc-me.toml")),
];
const DESK: &str = include_str!("../presets/desk.toml");

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainRecipe {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub mask_ratio: f64,
    pub batch_size: usize,
    /// Also checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

impl Default for PretrainRecipe {
    fn default() -> Self {
        Self {
            epochs: 25,
            base_lr: 1e-4,
            lr_decay: 0.5,
            decay_every: 5,
            mask_ratio: 0.75,
            batch_size: 8,
            checkpoint_every: 5,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Mae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRecipe {
    pub task: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub encoder_lr: f64,
    pub head_lr: f64,
    pub loss: LossKind,
    pub head: TaskKind,
    /// Inputs seen during fine-tuning.
    #[serde(default = "default_modality")]
    pub modality: InputMode,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_modality() -> InputMode {
    InputMode::AudioVisual
}

impl FinetuneRecipe {
    /// e.g. `head: 6 classes, CE, 20 epochs, batch 8`
    pub fn summary(&self) -> String {
        let head = match self.head {
            TaskKind::Classification { classes } => format!("{classes} classes"),
            TaskKind::Regression { outputs } => format!("{outputs} outputs (sigmoid)"),
        };
        let loss = match self.loss {
            LossKind::Ce => "CE",
            LossKind::Mae => "MAE",
        };
        format!("head: {head}, {loss}, {} epochs, batch {}", self.epochs, self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub audio: AudioFrontendConfig,
    pub patch: PatchConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub pretrain: PretrainRecipe,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneRecipe>,
    /// Spectrogram normalization; derived from the training split when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_stats: Option<AudioStats>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            audio: AudioFrontendConfig::default(),
            patch: PatchConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            pretrain: PretrainRecipe::default(),
            finetune: None,
            audio_stats: None,
        }
    }
}

/// Layers applied in order over the defaults.
#[derive(Clone, Debug, Default)]
pub struct ConfigSources<'a> {
    pub presets: Vec<String>,
    pub desk_scale: bool,
    pub file: Option<&'a Path>,
    pub seed: Option<u64>,
    pub audio_stats: Option<AudioStats>,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() && k != "head" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn parse_layer(src: &str, origin: &str) -> Result<toml::Value> {
    toml::from_str(src).map_err(|e| Error::config(format!("{origin}: {e}")))
}

impl RunConfig {
    pub fn desk() -> Self {
        Self::resolve(&ConfigSources {
            desk_scale: true,
            ..Default::default()
        })
        .expect("shipped desk config is valid")
    }

    /// Defaults → presets → desk scale → config file → flags, then validate.
    pub fn resolve(src: &ConfigSources<'_>) -> Result<Self> {
        let mut value = toml::Value::try_from(RunConfig::default())
            .map_err(|e| Error::Internal(format!("serializing defaults: {e}")))?;
        for name in &src.presets {
            let text = preset_source(name).ok_or_else(|| {
                Error::usage(format!(
                    "unknown preset `{name}` (available: {})",
                    preset_names().collect::<Vec<_>>().join(", ")
                ))
            })?;
            merge(&mut value, parse_layer(text, name)?);
        }
        if src.desk_scale {
            merge(&mut value, parse_layer(DESK, "desk")?);
        }
        if let Some(path) = src.file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            merge(&mut value, parse_layer(&text, &path.display().to_string())?);
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        if let Some(seed) = src.seed {
            cfg.seed = seed;
        }
        if let Some(stats) = src.audio_stats {
            cfg.audio_stats = Some(stats);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Every problem across all sections, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut collect = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(match e {
                    Error::Config(m) | Error::Usage(m) => m,
                    other => other.to_string(),
                });
            }
        };
        collect(self.audio.validate());
        collect(self.model.validate());
        collect(self.loss.validate());
        collect(Geometry::new(&self.audio, &self.patch).map(|_| ()));
        if self.patch.embed_dim != self.model.embed_dim {
            problems.push(format!(
                "patch.embed_dim {} differs from model.embed_dim {}",
                self.patch.embed_dim, self.model.embed_dim
            ));
        }
        let p = &self.pretrain;
        if p.epochs == 0 {
            problems.push("pretrain.epochs must be >= 1".into());
        }
        if !(p.base_lr > 0.0) {
            problems.push(format!("pretrain.base_lr must be > 0 (got {})", p.base_lr));
        }
        if !(p.lr_decay > 0.0) {
            problems.push(format!("pretrain.lr_decay must be > 0 (got {})", p.lr_decay));
        }
        if p.decay_every == 0 {
            problems.push("pretrain.decay_every must be >= 1".into());
        }
        if !(0.0..1.0).contains(&p.mask_ratio) {
            problems.push(format!("pretrain.mask_ratio must lie in [0, 1) (got {})", p.mask_ratio));
        }
        if p.batch_size < 2 {
            problems.push(format!(
                "pretrain.batch_size must be >= 2 for in-batch negatives (got {})",
                p.batch_size
            ));
        }
        if let Some(f) = &self.finetune {
            if f.epochs == 0 {
                problems.push("finetune.epochs must be >= 1".into());
            }
            if f.batch_size == 0 {
                problems.push("finetune.batch_size must be >= 1".into());
            }
            if !(f.encoder_lr > 0.0) {
                problems.push(format!("finetune.encoder_lr must be > 0 (got {})", f.encoder_lr));
            }
            if !(f.head_lr > 0.0) {
                problems.push(format!("finetune.head_lr must be > 0 (got {})", f.head_lr));
            }
            if f.head.outputs() == 0 {
                problems.push("finetune.head needs at least one output".into());
            }
            match (f.loss, f.head) {
                (LossKind::Ce, TaskKind::Classification { .. }) | (LossKind::Mae, TaskKind::Regression { .. }) => {}
                _ => problems.push(format!("finetune.loss {:?} does not match finetune.head {:?}", f.loss, f.head)),
            }
        }
        if let Some(s) = self.audio_stats {
            if !(s.std > 0.0) {
                problems.push(format!("audio_stats.std must be > 0 (got {})", s.std));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(&self.audio, &self.patch)
    }

    pub fn finetune_recipe(&self) -> Result<&FinetuneRecipe> {
        self.finetune
            .as_ref()
            .ok_or_else(|| Error::usage("no [finetune] recipe; pass a task preset such as --preset crema-d"))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_value(self).expect("config serializes"))
    }
}

pub fn config_hash(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Field-level differences between the architecture sections (audio, patch,
/// model) of two serialized configs.
pub fn architecture_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let null = serde_json::Value::Null;
                    walk(&format!("{path}.{k}"), x.get(k).unwrap_or(&null), y.get(k).unwrap_or(&null), out);
                }
            }
            _ if a != b => out.push(format!("{path}: {a} != {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    for section in ["audio", "patch", "model"] {
        let null = serde_json::Value::Null;
        walk(section, a.get(section).unwrap_or(&null), b.get(section).unwrap_or(&null), &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        for name in preset_names() {
            for desk in [false, true] {
                let cfg = RunConfig::resolve(&ConfigSources {
                    presets: vec![name.to_string()],
                    desk_scale: desk,
                    ..Default::default()
                })
                .unwrap();
                assert_eq!(cfg.model.embed_dim, if desk { 16 } else { 768 });
            }
        }
    }

    #[test]
    fn task_recipes_as_stated() {
        let get = |n: &str| {
            RunConfig::resolve(&ConfigSources {
                presets: vec![n.into()],
                ..Default::default()
            })
            .unwrap()
            .finetune
            .unwrap()
        };
        let c = get("crema-d");
        assert_eq!(c.summary(), "head: 6 classes, CE, 20 epochs, batch 8");
        assert_eq!((c.encoder_lr, c.head_lr), (1e-4, 1e-5));
        let f = get("first-impressions");
        assert_eq!(f.head, TaskKind::Regression { outputs: 5 });
        assert_eq!((f.epochs, f.loss), (10, LossKind::Mae));
        let n = get("ndc-me");
        assert_eq!(n.head, TaskKind::Classification { classes: 3 });
        assert_eq!((n.encoder_lr, n.head_lr), (1e-5, 1e-4));
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let cfg = RunConfig::desk();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn validation_lists_every_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "[model]\nnum_heads = 5\n[pretrain]\nbatch_size = 1\nmask_ratio = 1.5\n").unwrap();
        let err = RunConfig::resolve(&ConfigSources {
            file: Some(&p),
            ..Default::default()
        })
        .unwrap_err();
        let msg = err.to_string();
        for key in ["model.num_heads", "pretrain.batch_size", "pretrain.mask_ratio"] {
            assert!(msg.contains(key), "{key} missing from {msg}");
        }
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::resolve(&ConfigSources {
            presets: vec!["nope".into()],
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn diff_names_fields() {
        let a = serde_json::to_value(RunConfig::desk()).unwrap();
        let mut b = a.clone();
        b["model"]["embed_dim"] = 32.into();
        b["seed"] = 9.into();
        assert_eq!(architecture_diff(&a, &b), vec!["model.embed_dim: 16 != 32".to_string()]);
    }
}
