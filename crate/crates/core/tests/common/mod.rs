#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde::{Deserialize, Serialize};
use social_mae::config::RunConfig;
use social_mae::data::SyntheticSpec;
use social_mae::numerics::ParamStore;
use social_mae::model::SocialMae;
use social_mae::reconstruct::{reconstruct, ReconstructOptions};
use social_mae::training::{pooled_pair, pretrain, seeded, Dataset, PretrainOutcome};

pub const ORACLE_FILE: &str = "tests/oracle/overfit.json";

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_social-mae")
}

pub fn run_cli(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn oracle_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(ORACLE_FILE)
}

/// Desk model, one full batch of 8 clips per step, constant learning rate.
pub fn overfit_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg.pretrain.epochs = 200;
    cfg.pretrain.batch_size = 8;
    cfg.pretrain.base_lr = 1e-2;
    cfg.pretrain.lr_decay = 1.0;
    cfg.pretrain.checkpoint_every = 0;
    cfg
}

/// Eight 4-class clips holding exactly the frames the model consumes.
pub fn overfit_spec(cfg: &RunConfig) -> SyntheticSpec {
    SyntheticSpec {
        classes: 4,
        clips: 8,
        frames: cfg.patch.video_frames,
        image_size: cfg.patch.image_size,
        eval_fraction: 0.0,
        seed: cfg.seed,
        ..Default::default()
    }
}

pub struct OverfitRun {
    pub cfg: RunConfig,
    pub data: Dataset,
    pub outcome: PretrainOutcome,
}

pub fn run_overfit(seed: u64) -> OverfitRun {
    let cfg = overfit_config(seed);
    let data = Dataset::synthetic(&cfg, &overfit_spec(&cfg)).unwrap();
    let outcome = pretrain(&cfg, &data, None).unwrap();
    OverfitRun { cfg, data, outcome }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Fraction of clips whose audio vector is closer (cosine) to its own video
/// vector than to the mean over the other clips' video vectors.
pub fn matched_fraction(store: &ParamStore<f32>, model: &SocialMae, data: &Dataset) -> f64 {
    let pairs: Vec<_> = data
        .examples
        .iter()
        .map(|ex| pooled_pair(store, model, ex).unwrap())
        .collect();
    let n = pairs.len();
    let wins = (0..n)
        .filter(|&i| {
            let matched = cosine(&pairs[i].0, &pairs[i].1);
            let others: f64 = (0..n).filter(|&j| j != i).map(|j| cosine(&pairs[i].0, &pairs[j].1)).sum();
            matched > others / (n - 1) as f64
        })
        .count();
    wins as f64 / n as f64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverfitThresholds {
    pub lr_ratio: f64,
    pub lc_margin: f64,
    pub matched_fraction: f64,
    pub masked_video_mae: f64,
}

/// Values measured by the recorded oracle run, plus the pass thresholds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverfitOracle {
    pub seed: u64,
    pub clips: usize,
    pub steps: usize,
    pub base_lr: f64,
    pub initial_lr_loss: f64,
    pub final_lr_loss: f64,
    pub final_lc: f64,
    pub matched_fraction: f64,
    pub untrained_masked_video_mae: f64,
    pub masked_video_mae: f64,
    pub thresholds: OverfitThresholds,
}

pub fn load_oracle() -> OverfitOracle {
    let text = std::fs::read_to_string(oracle_path()).expect("oracle record present");
    serde_json::from_str(&text).expect("oracle record parses")
}

/// Mean masked-region video MAE over every clip, mask ratio 0.75.
pub fn mean_masked_video_mae(store: &ParamStore<f32>, model: &SocialMae, cfg: &RunConfig, data: &Dataset) -> f64 {
    let opts = ReconstructOptions {
        mask_ratio: cfg.pretrain.mask_ratio,
        seed: cfg.seed,
        normalized_video: cfg.loss.normalize_video_targets,
        normalized_audio: cfg.loss.normalize_audio_targets,
    };
    let total: f64 = data
        .examples
        .iter()
        .map(|ex| reconstruct(store, model, ex, &opts, None).unwrap().video_mae.unwrap())
        .sum();
    total / data.len() as f64
}

/// The model pre-training starts from (same initialization stream).
pub fn untrained(cfg: &RunConfig) -> (ParamStore<f32>, SocialMae) {
    let mut store = ParamStore::new();
    let model = SocialMae::init(
        &mut store,
        &cfg.model,
        &cfg.geometry().unwrap(),
        cfg.patch.positional_init,
        &mut seeded(cfg.seed, 0),
    )
    .unwrap();
    (store, model)
}
