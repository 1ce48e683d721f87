//! Finite-difference check of the full pre-training objective in f64.

use crate::config::RunConfig;
use crate::data::{select_frames, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::SocialMae;
use crate::numerics::{finite_difference_check, GradcheckConfig, GradcheckReport, Graph, ParamStore};
use crate::tokenizer::{sample_mask, Modality};
use crate::training::{pretrain_objective, seeded, Dataset, PretrainItem};

/// How the analytic gradient is corrupted before comparison (test hook).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Fault {
    #[default]
    None,
    /// Multiply every analytic gradient by `1 + eps`.
    Scale(f64),
}

/// Build the configured model in f64, evaluate `λc·Lc + Lr` on two
/// synthetic clips with fixed masks, and compare its gradient against
/// central differences.
pub fn gradcheck(cfg: &RunConfig, check: &GradcheckConfig, fault: Fault) -> Result<GradcheckReport> {
    if check.samples == 0 {
        return Err(Error::usage("gradcheck needs at least one sample"));
    }
    if !(check.step > 0.0) {
        return Err(Error::usage(format!("finite-difference step must be > 0, got {}", check.step)));
    }
    cfg.validate()?;
    let geometry = cfg.geometry()?;
    let hop = cfg.audio.hop_samples() as f64;
    let samples = (cfg.audio.target_frames - 1) as f64 * hop + cfg.audio.window_samples() as f64;
    let spec = SyntheticSpec {
        classes: 2,
        clips: 2,
        eval_fraction: 0.0,
        sample_rate: cfg.audio.sample_rate,
        duration_ms: 1000.0 * samples / cfg.audio.sample_rate as f64,
        frames: geometry.video_frames,
        image_size: geometry.image_size,
        seed: cfg.seed,
        ..Default::default()
    };
    let data = Dataset::synthetic(cfg, &spec)?;

    let mut store = ParamStore::<f64>::new();
    let model = SocialMae::init(&mut store, &cfg.model, &geometry, cfg.patch.positional_init, &mut seeded(cfg.seed, 0))?;
    let mut rng = seeded(cfg.seed, 2);
    let frames: Vec<usize> = (0..geometry.video_frames).collect();
    let items = data
        .examples
        .iter()
        .map(|ex| {
            Ok(PretrainItem {
                spectrogram: &ex.spectrogram,
                frames: select_frames(&ex.frames, &frames)?,
                audio_plan: sample_mask(geometry.tokens(Modality::Audio), cfg.pretrain.mask_ratio, &mut rng)?,
                video_plan: sample_mask(geometry.tokens(Modality::Video), cfg.pretrain.mask_ratio, &mut rng)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let loss = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store);
        let terms = pretrain_objective(&mut g, &model, &items, &cfg.loss)?;
        Ok(g.value(terms.total).item())
    };
    let grads = {
        let mut g = Graph::new(&store);
        let terms = pretrain_objective(&mut g, &model, &items, &cfg.loss)?;
        g.backward(terms.total)?
    };
    store.zero_grad();
    grads.accumulate_into(&mut store);
    if let Fault::Scale(eps) = fault {
        for (_, p) in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|v| *v *= 1.0 + eps);
        }
    }
    finite_difference_check(&mut store, loss, check, &mut seeded(cfg.seed, 5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_samples_is_usage_error() {
        let check = GradcheckConfig {
            samples: 0,
            ..Default::default()
        };
        assert_eq!(gradcheck(&RunConfig::desk(), &check, Fault::None).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn desk_objective_passes_and_scaled_gradient_fails() {
        let check = GradcheckConfig {
            samples: 40,
            ..Default::default()
        };
        let cfg = RunConfig::desk();
        let report = gradcheck(&cfg, &check, Fault::None).unwrap();
        let worst = report.worst().unwrap();
        assert!(report.passed(), "worst {} [{}]: {} vs {}", worst.param, worst.index, worst.analytic, worst.numeric);
        let faulty = gradcheck(&cfg, &check, Fault::Scale(0.1)).unwrap();
        assert!(!faulty.passed());
    }
}
