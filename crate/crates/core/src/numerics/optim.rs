use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam moments and step counter for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
    lr: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
            lr: 0.0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate used by the most recent step (for the default group).
    pub fn current_lr(&self) -> f64 {
        self.lr
    }

    /// One Adam update. `lr_for` maps a parameter name to its group's
    /// learning rate. Gradients are checked for NaN/Inf before anything is
    /// written, so a rejected step leaves parameters and moments untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr_for: impl Fn(&str) -> f64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Internal(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            if p.trainable && !p.grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let eps = T::of(self.config.eps);
        let wd = self.config.weight_decay;

        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let lr = lr_for(&p.name);
            self.lr = lr;
            let step_size = T::of(lr / bc1);
            let decay = T::of(1.0 - lr * wd);
            let inv_bc2_sqrt = T::of(1.0 / bc2.sqrt());
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let g = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1t * m[i] + (T::one() - b1t) * g[i];
                v[i] = b2t * v[i] + (T::one() - b2t) * g[i] * g[i];
                if wd != 0.0 {
                    *w *= decay;
                }
                *w -= step_size * m[i] / (v[i].sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::from_f64(&[1], &[value]).unwrap()).unwrap();
        s.get_mut(id).grad = Tensor::from_f64(&[1], &[grad]).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with(1.5, 0.0);
        let mut opt = OptimizerState::new(&s, AdamConfig::default());
        opt.step(&mut s, |_| 0.1).unwrap();
        assert_eq!(s.by_name("w").unwrap().value.item(), 1.5);
    }

    #[test]
    fn first_step_on_square_moves_toward_zero() {
        // f(w) = w², w = 1 → grad 2. The bias-corrected first step is -lr·sign(g).
        let mut s = store_with(1.0, 2.0);
        let mut opt = OptimizerState::new(&s, AdamConfig::default());
        opt.step(&mut s, |_| 0.1).unwrap();
        let w = s.by_name("w").unwrap().value.item();
        assert!(w.abs() < 1.0);
        assert!((w - 0.9).abs() < 1e-6);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn frozen_parameter_is_unchanged() {
        let mut s = store_with(1.0, 5.0);
        s.set_trainable("w", false);
        let mut opt = OptimizerState::new(&s, AdamConfig::default());
        opt.step(&mut s, |_| 0.1).unwrap();
        assert_eq!(s.by_name("w").unwrap().value.item(), 1.0);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut s = store_with(1.0, f64::NAN);
        let mut opt = OptimizerState::new(&s, AdamConfig::default());
        let err = opt.step(&mut s, |_| 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.by_name("w").unwrap().value.item(), 1.0);
        assert_eq!(opt.step_count(), 0);
    }
}
