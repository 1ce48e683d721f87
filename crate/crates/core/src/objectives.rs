//! Pre-training losses (contrastive alignment plus masked reconstruction)
//! and the fine-tuning losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::tokenizer::MaskPlan;

const NORM_EPS: f64 = 1e-12;
pub const PATCH_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_c: f64,
    pub tau: f64,
    pub normalize_audio_targets: bool,
    pub normalize_video_targets: bool,
    /// Average both retrieval directions (audio→video and video→audio).
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_c: 0.01,
            tau: 0.05,
            normalize_audio_targets: false,
            normalize_video_targets: true,
            symmetric: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.tau > 0.0) {
            problems.push(format!("loss.tau must be > 0 (got {})", self.tau));
        }
        if !(self.lambda_c >= 0.0) {
            problems.push(format!("loss.lambda_c must be >= 0 (got {})", self.lambda_c));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// InfoNCE over pooled vectors: row `i` of `c_a` and `c_v` form the positive
/// pair, every other row in the batch is a negative.
pub fn contrastive_loss<T: Real>(g: &mut Graph<'_, T>, c_a: Var, c_v: Var, tau: f64, symmetric: bool) -> Result<Var> {
    let (n, d) = g.value(c_a).dims2()?;
    if g.shape(c_v) != [n, d] {
        return Err(Error::shape("contrastive_loss", g.shape(c_a), g.shape(c_v)));
    }
    if n < 2 {
        return Err(Error::usage(format!(
            "contrastive loss needs at least 2 clips per batch for negatives, got {n}"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("loss.tau must be > 0 (got {tau})")));
    }
    let a = g.l2_normalize_rows(c_a, T::of(NORM_EPS))?;
    let v = g.l2_normalize_rows(c_v, T::of(NORM_EPS))?;
    let s = g.matmul_t(a, v)?;
    let s = g.scale(s, T::of(1.0 / tau));
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let rows = g.log_softmax_rows(s)?;
    let rows = g.pick(rows, &diag)?;
    let mut total = g.sum(rows);
    let mut count = n;
    if symmetric {
        let st = g.transpose(s)?;
        let cols = g.log_softmax_rows(st)?;
        let cols = g.pick(cols, &diag)?;
        let cols = g.sum(cols);
        total = g.add(total, cols)?;
        count *= 2;
    }
    Ok(g.scale(total, T::of(-1.0 / count as f64)))
}

/// Each row shifted to zero mean and scaled to unit (population) variance.
pub fn normalize_patches(patches: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (n, d) = patches.dims2()?;
    let mut out = patches.clone();
    for r in 0..n {
        let row = &mut out.data_mut()[r * d..(r + 1) * d];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + PATCH_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * inv) as f32);
    }
    Ok(out)
}

/// MSE between predicted and target patches at the masked positions only.
/// `None` when nothing is masked.
pub fn reconstruction_loss<T: Real>(
    g: &mut Graph<'_, T>,
    predicted: Var,
    targets: &Tensor<f32>,
    plan: &MaskPlan,
    normalize: bool,
) -> Result<Option<Var>> {
    if g.shape(predicted) != targets.shape() {
        return Err(Error::shape("reconstruction_loss", g.shape(predicted), targets.shape()));
    }
    if plan.len() != targets.shape()[0] {
        return Err(Error::Internal(format!(
            "mask plan covers {} patches, prediction has {}",
            plan.len(),
            targets.shape()[0]
        )));
    }
    if plan.masked.is_empty() {
        return Ok(None);
    }
    let d = targets.shape()[1];
    let mut picked = Vec::with_capacity(plan.masked.len() * d);
    for &i in &plan.masked {
        picked.extend_from_slice(targets.row(i));
    }
    let mut target = Tensor::new(&[plan.masked.len(), d], picked)?;
    if normalize {
        target = normalize_patches(&target)?;
    }
    let pred = g.gather_rows(predicted, &plan.masked)?;
    let target = g.constant(target.cast());
    Ok(Some(g.mse(pred, target)?))
}

/// Equal-weight mean of the available per-modality terms; zero (with a
/// warning) when no modality had a masked token.
pub fn average_terms<T: Real>(g: &mut Graph<'_, T>, terms: &[Option<Var>]) -> Result<Var> {
    let present: Vec<Var> = terms.iter().flatten().copied().collect();
    if present.is_empty() {
        log::warn!("no masked tokens in either modality; reconstruction loss set to 0");
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let mut acc = present[0];
    for &v in &present[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(g.scale(acc, T::of(1.0 / present.len() as f64)))
}

/// `λc·Lc + Lr` on graph nodes.
pub fn combine_vars<T: Real>(g: &mut Graph<'_, T>, lc: Var, lr: Var, lambda_c: f64) -> Result<Var> {
    let weighted = g.scale(lc, T::of(lambda_c));
    g.add(weighted, lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lc: f64,
    pub lr: f64,
    pub lambda_c: f64,
    pub total: f64,
    pub lr_audio: Option<f64>,
    pub lr_video: Option<f64>,
}

/// Scalar form of `λc·Lc + Lr`; rejects non-finite terms.
pub fn combine(lc: f64, lr: f64, lambda_c: f64) -> Result<LossBreakdown> {
    if !lc.is_finite() || !lr.is_finite() || !lambda_c.is_finite() {
        return Err(Error::NonFinite(format!("loss terms Lc={lc} Lr={lr} lambda_c={lambda_c}")));
    }
    Ok(LossBreakdown {
        lc,
        lr,
        lambda_c,
        total: lambda_c * lc + lr,
        lr_audio: None,
        lr_video: None,
    })
}

/// Mean softmax cross-entropy of `[B, K]` logits; `ids` name the records
/// for error messages.
pub fn cross_entropy<T: Real>(g: &mut Graph<'_, T>, logits: Var, labels: &[usize], ids: &[String]) -> Result<Var> {
    let (b, k) = g.value(logits).dims2()?;
    if labels.len() != b {
        return Err(Error::Internal(format!("{} labels for {b} outputs", labels.len())));
    }
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            let id = ids.get(i).map(String::as_str).unwrap_or("?");
            return Err(Error::data(id, format!("label {y} out of range for {k} classes")));
        }
    }
    let lp = g.log_softmax_rows(logits)?;
    let idx: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
    let picked = g.pick(lp, &idx)?;
    let s = g.sum(picked);
    Ok(g.scale(s, T::of(-1.0 / b as f64)))
}

/// Mean absolute error between `[B, K]` predictions and targets.
pub fn mean_absolute_error<T: Real>(g: &mut Graph<'_, T>, preds: Var, targets: &Tensor<f32>) -> Result<Var> {
    if g.shape(preds) != targets.shape() {
        return Err(Error::shape("mean_absolute_error", g.shape(preds), targets.shape()));
    }
    let t = g.constant(targets.cast());
    let diff = g.sub(preds, t)?;
    let abs = g.abs(diff);
    g.mean(abs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lc_of(a: Vec<f64>, v: Vec<f64>, n: usize, d: usize, tau: f64, symmetric: bool) -> f64 {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::new(&[n, d], a).unwrap());
        let v = g.constant(Tensor::new(&[n, d], v).unwrap());
        let l = contrastive_loss(&mut g, a, v, tau, symmetric).unwrap();
        g.value(l).item()
    }

    #[test]
    fn aligned_orthogonal_pairs() {
        let e = std::f64::consts::E;
        let want = -(e / (e + 1.0)).ln();
        let lc = lc_of(vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0, 1.0], 2, 2, 1.0, true);
        assert_abs_diff_eq!(lc, want, epsilon = 1e-12);
        assert_abs_diff_eq!(want, 0.3133, epsilon = 1e-4);
    }

    #[test]
    fn equal_similarities_give_log_n() {
        let a = [0.3, -1.0, 2.0].repeat(4);
        let v = [1.0, 0.5, -0.2].repeat(4);
        let lc = lc_of(a, v, 4, 3, 0.05, true);
        assert_abs_diff_eq!(lc, 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn identical_audio_rows_bound_below_by_log_n() {
        // identical audio rows make every video-side softmax uniform; the
        // audio side can only add (Jensen), so the total is at least log N
        let a = [0.3, -1.0, 2.0].repeat(4);
        let v: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).cos()).collect();
        let lc = lc_of(a, v, 4, 3, 0.05, true);
        assert!(lc >= 4f64.ln() - 1e-12);
    }

    #[test]
    fn single_clip_is_usage_error() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::ones(&[1, 3]));
        let err = contrastive_loss(&mut g, a, a, 0.05, true).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn reconstruction_examples() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let pred = g.variable(Tensor::zeros(&[2, 4]));
        let targets = Tensor::<f32>::ones(&[2, 4]);
        let plan = MaskPlan::from_masked(2, vec![1]).unwrap();
        let l = reconstruction_loss(&mut g, pred, &targets, &plan, false).unwrap().unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let grads = g.backward(l).unwrap();
        let gp = grads.wrt(pred).unwrap();
        assert!(gp.row(0).iter().all(|&x| x == 0.0));
        assert!(gp.row(1).iter().all(|&x| x != 0.0));
        assert!(reconstruction_loss(&mut g, pred, &targets, &MaskPlan::none(2), false)
            .unwrap()
            .is_none());
    }

    #[test]
    fn empty_masks_give_zero() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let l = average_terms(&mut g, &[None, None]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(3.0));
        let l = average_terms(&mut g, &[Some(a), Some(b)]).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let l = average_terms(&mut g, &[None, Some(b)]).unwrap();
        assert_eq!(g.value(l).item(), 3.0);
    }

    #[test]
    fn combine_examples() {
        assert_abs_diff_eq!(combine(2.0, 1.0, 0.01).unwrap().total, 1.02, epsilon = 1e-12);
        assert_eq!(combine(5.0, 0.3, 0.0).unwrap().total, 0.3);
        assert_eq!(combine(0.0, 0.0, 0.01).unwrap().total, 0.0);
        assert!(matches!(combine(f64::NAN, 0.0, 0.01), Err(Error::NonFinite(_))));
    }

    #[test]
    fn finetune_examples() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let logits = g.constant(Tensor::zeros(&[2, 6]));
        let ids = vec!["a".to_string(), "b".to_string()];
        let ce = cross_entropy(&mut g, logits, &[0, 5], &ids).unwrap();
        assert_abs_diff_eq!(g.value(ce).item(), 6f64.ln(), epsilon = 1e-12);
        let err = cross_entropy(&mut g, logits, &[0, 6], &ids).unwrap_err();
        assert!(err.to_string().contains('b'), "{err}");

        let preds = g.constant(Tensor::full(&[1, 5], 0.5));
        let t = Tensor::new(&[1, 5], vec![0.4f32, 0.6, 0.5, 0.3, 0.7]).unwrap();
        let mae = mean_absolute_error(&mut g, preds, &t).unwrap();
        assert_abs_diff_eq!(g.value(mae).item(), 0.12, epsilon = 1e-6);
    }

    #[test]
    fn patch_normalization() {
        let t = Tensor::new(&[1, 4], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let n = normalize_patches(&t).unwrap();
        let mean: f32 = n.data().iter().sum::<f32>() / 4.0;
        let var: f32 = n.data().iter().map(|v| v * v).sum::<f32>() / 4.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-5);
    }

    proptest! {
        #[test]
        fn lc_nonnegative_and_swap_invariant(
            a in prop::collection::vec(-3.0f64..3.0, 12),
            v in prop::collection::vec(-3.0f64..3.0, 12),
            tau in 0.05f64..2.0,
        ) {
            let x = lc_of(a.clone(), v.clone(), 4, 3, tau, true);
            let y = lc_of(v, a, 4, 3, tau, true);
            prop_assert!(x >= 0.0);
            prop_assert!((x - y).abs() < 1e-9);
        }

        #[test]
        fn lc_permutation_invariant(
            a in prop::collection::vec(-3.0f64..3.0, 9),
            v in prop::collection::vec(-3.0f64..3.0, 9),
        ) {
            let perm = [2usize, 0, 1];
            let shuffle = |x: &[f64]| perm.iter().flat_map(|&r| x[r * 3..r * 3 + 3].to_vec()).collect::<Vec<_>>();
            let x = lc_of(a.clone(), v.clone(), 3, 3, 0.1, true);
            let y = lc_of(shuffle(&a), shuffle(&v), 3, 3, 0.1, true);
            prop_assert!((x - y).abs() < 1e-9);
        }

        #[test]
        fn combine_is_linear(lc in 0.0f64..10.0, lr in 0.0f64..10.0, lam in 0.0f64..1.0) {
            let one = combine(lc, lr, lam).unwrap().total;
            let two = combine(lc, 2.0 * lr, lam).unwrap().total;
            prop_assert!((two - one - lr).abs() < 1e-12);
        }
    }
}
