//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use super::params::ParamStore;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is numerically zero are judged on absolute error.
    pub denominator_floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            step: 1e-3,
            tolerance: 1e-3,
            denominator_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.max_rel_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordinateCheck> {
        self.checks.iter().filter(|c| c.rel_error >= self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compare `store`'s gradient buffers against `(L(θ+h) − L(θ−h)) / 2h` at
/// sampled coordinates. Parameters are visited round-robin in a shuffled
/// order so every tensor is covered before any is sampled twice. `store` is
/// restored exactly after each probe.
pub fn finite_difference_check(
    store: &mut ParamStore<f64>,
    mut loss: impl FnMut(&ParamStore<f64>) -> Result<f64>,
    cfg: &GradcheckConfig,
    rng: &mut impl Rng,
) -> Result<GradcheckReport> {
    let mut ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable && !p.value.is_empty())
        .map(|(id, _)| id)
        .collect();
    ids.shuffle(rng);

    let mut checks = Vec::with_capacity(cfg.samples);
    for s in 0..cfg.samples {
        if ids.is_empty() {
            break;
        }
        let id = ids[s % ids.len()];
        let len = store.get(id).value.len();
        let index = rng.random_range(0..len);
        let original = store.get(id).value.data()[index];
        let analytic = store.get(id).grad.data()[index];

        store.get_mut(id).value.data_mut()[index] = original + cfg.step;
        let plus = loss(store);
        store.get_mut(id).value.data_mut()[index] = original - cfg.step;
        let minus = loss(store);
        store.get_mut(id).value.data_mut()[index] = original;
        let numeric = (plus? - minus?) / (2.0 * cfg.step);

        checks.push(CoordinateCheck {
            param: store.get(id).name.clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, cfg.denominator_floor),
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        checks,
        max_rel_error,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quadratic(store: &ParamStore<f64>) -> Result<f64> {
        let mut g = Graph::new(store);
        let w = g.param_named("w")?;
        let sq = g.mul(w, w)?;
        let s = g.sum(sq);
        Ok(g.value(s).item())
    }

    #[test]
    fn quadratic_loss_checks_to_machine_precision() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::from_f64(&[4], &[0.5, -1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        {
            let mut g = Graph::new(&store);
            let w = g.param_named("w").unwrap();
            let sq = g.mul(w, w).unwrap();
            let s = g.sum(sq);
            let grads = g.backward(s).unwrap();
            let mut acc = store.clone();
            grads.accumulate_into(&mut acc);
            store = acc;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GradcheckConfig {
            samples: 16,
            ..Default::default()
        };
        let report = finite_difference_check(&mut store, quadratic, &cfg, &mut rng).unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
        assert!(report.passed());
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut store = ParamStore::new();
        let id = store
            .insert("w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap())
            .unwrap();
        store.get_mut(id).grad = Tensor::from_f64(&[2], &[2.0, 5.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GradcheckConfig {
            samples: 8,
            ..Default::default()
        };
        let report = finite_difference_check(&mut store, quadratic, &cfg, &mut rng).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst().unwrap().index, 1);
    }
}
