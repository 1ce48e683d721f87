//! Micro/macro F1 over a confusion matrix and per-trait `1 - MAE` accuracy.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InputMode;

/// `K×K` counts; rows are the true class, columns the prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_pairs(k: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Internal(format!(
                "{} labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut cm = Self::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::usage("confusion matrix must be square"));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.k || pred >= self.k {
            return Err(Error::data(
                "confusion matrix",
                format!("class ({truth}, {pred}) out of range for {} classes", self.k),
            ));
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Internal(format!("merging {}x{0} into {}x{1}", other.k, self.k)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// (tp, fp, fn) for class `c`.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let predicted: u64 = (0..self.k).map(|r| self.get(r, c)).sum();
        let actual: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
        (tp, predicted - tp, actual - tp)
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::data("confusion matrix", "no samples; F1 is undefined"))
        } else {
            Ok(())
        }
    }
}

/// Pooled `TP / (TP + (FP + FN)/2)`; equals accuracy for single-label data.
pub fn f1_micro(cm: &ConfusionMatrix) -> Result<f64> {
    cm.check_nonempty()?;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for c in 0..cm.classes() {
        let (t, p, n) = cm.class_counts(c);
        tp += t;
        fp += p;
        fn_ += n;
    }
    Ok(tp as f64 / (tp as f64 + 0.5 * (fp + fn_) as f64))
}

/// Unweighted mean of per-class F1; a class never seen nor predicted scores 0.
pub fn f1_macro(cm: &ConfusionMatrix) -> Result<f64> {
    cm.check_nonempty()?;
    let k = cm.classes();
    let sum: f64 = (0..k)
        .map(|c| {
            let (tp, fp, fn_) = cm.class_counts(c);
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum();
    Ok(sum / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraitAccuracy {
    pub per_trait: Vec<f64>,
    pub average: f64,
}

/// `1 - mean |pred - target|` per column of `n×t` row-major inputs.
pub fn trait_accuracy(preds: &[f32], targets: &[f32], traits: usize) -> Result<TraitAccuracy> {
    if traits == 0 || preds.len() != targets.len() || preds.len() % traits != 0 || preds.is_empty() {
        return Err(Error::Internal(format!(
            "trait_accuracy: {} predictions, {} targets, {traits} traits",
            preds.len(),
            targets.len()
        )));
    }
    if let Some(v) = preds.iter().chain(targets).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::data("trait scores", format!("value {v} outside [0, 1]")));
    }
    let n = preds.len() / traits;
    let per_trait: Vec<f64> = (0..traits)
        .map(|t| {
            let mae = (0..n)
                .map(|i| (preds[i * traits + t] as f64 - targets[i * traits + t] as f64).abs())
                .sum::<f64>()
                / n as f64;
            1.0 - mae
        })
        .collect();
    let average = per_trait.iter().sum::<f64>() / traits as f64;
    Ok(TraitAccuracy { per_trait, average })
}

/// Scores for one input mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub mode: InputMode,
    pub samples: usize,
    pub micro_f1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub traits: Option<TraitAccuracy>,
}

impl ModeMetrics {
    pub fn classification(mode: InputMode, cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            mode,
            samples: cm.total() as usize,
            micro_f1: Some(f1_micro(cm)?),
            macro_f1: Some(f1_macro(cm)?),
            traits: None,
        })
    }

    pub fn regression(mode: InputMode, samples: usize, acc: TraitAccuracy) -> Self {
        Self {
            mode,
            samples,
            micro_f1: None,
            macro_f1: None,
            traits: Some(acc),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub modes: Vec<ModeMetrics>,
}

impl MetricsReport {
    pub fn get(&self, mode: InputMode) -> Option<&ModeMetrics> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// One row per mode.
    pub fn to_csv(&self) -> String {
        let traits = self
            .modes
            .iter()
            .find_map(|m| m.traits.as_ref().map(|t| t.per_trait.len()))
            .unwrap_or(0);
        let mut out = String::from("mode,samples,micro_f1,macro_f1");
        for t in 0..traits {
            out.push_str(&format!(",trait{t}"));
        }
        if traits > 0 {
            out.push_str(",trait_avg");
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for m in &self.modes {
            out.push_str(&format!(
                "{},{},{},{}",
                m.mode.name(),
                m.samples,
                opt(m.micro_f1),
                opt(m.macro_f1)
            ));
            if let Some(t) = &m.traits {
                for v in &t.per_trait {
                    out.push_str(&format!(",{v:.6}"));
                }
                out.push_str(&format!(",{:.6}", t.average));
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: Option<f64>| v.map(|x| format!("{:6.2}", 100.0 * x)).unwrap_or_else(|| "     -".into());
        let label = |m: InputMode| match m {
            InputMode::Audio => "Audio",
            InputMode::Video => "Visual",
            InputMode::AudioVisual => "AV",
        };
        if self.modes.iter().any(|m| m.traits.is_some()) {
            writeln!(f, "{:<8} {:>7} {:>8}  per-trait", "mode", "n", "avg acc")?;
            for m in &self.modes {
                let t = m.traits.as_ref();
                let per: Vec<String> = t
                    .map(|t| t.per_trait.iter().map(|v| format!("{:.2}", 100.0 * v)).collect())
                    .unwrap_or_default();
                writeln!(
                    f,
                    "{:<8} {:>7} {:>8}  {}",
                    label(m.mode),
                    m.samples,
                    pct(t.map(|t| t.average)),
                    per.join(" ")
                )?;
            }
            return Ok(());
        }
        let cols: Vec<&ModeMetrics> = self.modes.iter().collect();
        let header: Vec<String> = cols.iter().map(|m| format!("{:>6} Mi {:>6} Ma", label(m.mode), label(m.mode))).collect();
        writeln!(f, "{}", header.join(" | "))?;
        let row: Vec<String> = cols
            .iter()
            .map(|m| format!("{:>9} {:>9}", pct(m.micro_f1), pct(m.macro_f1)))
            .collect();
        writeln!(f, "{}", row.join(" | "))
    }
}
