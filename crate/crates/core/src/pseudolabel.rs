//! OOD scoring, dual-threshold calibration, pseudo-label assignment and the
//! ensembled inference rule.
//!
//! Class indices are zero-based; the unknown class uses index `num_classes`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmmstream::ClassDensities;
use crate::losses::normalized_entropy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PseudoLabel {
    Known(usize),
    Unknown,
    Ignored,
}

impl PseudoLabel {
    pub fn known(self) -> Option<usize> {
        match self {
            PseudoLabel::Known(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodMetric {
    Mahalanobis,
    #[default]
    #[serde(alias = "entropy")]
    NormalizedEntropy,
}

/// Squared Mahalanobis distance to the closest initialized class.
pub fn score_mahalanobis(dens: &ClassDensities<'_>, feat: &[f64]) -> Result<f64> {
    let mut best: Option<f64> = None;
    for c in 0..dens.num_classes() {
        if let Some(q) = dens.mahalanobis_sq(feat, c)? {
            best = Some(best.map_or(q, |b| b.min(q)));
        }
    }
    best.ok_or(Error::Uninitialized)
}

/// Normalized entropy of a responsibility vector, in `[0, 1]`.
pub fn score_entropy(p: &[f64]) -> Result<f64> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !v.is_finite() || *v < -1e-6) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(
            "entropy score input is off the simplex".into(),
        ));
    }
    Ok(normalized_entropy(p))
}

/// Linear interpolation between order statistics at level `q`
/// (position `q * (n - 1)` in the sorted sample).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Collects per-batch score quantiles over the first `n_init` batches and
/// then freezes `(tau_l, tau_u)` at their averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibrator {
    p_reject: f64,
    n_init: usize,
    lower_quantiles: Vec<f64>,
    upper_quantiles: Vec<f64>,
    frozen: Option<(f64, f64)>,
}

impl ThresholdCalibrator {
    pub fn new(p_reject: f64, n_init: usize) -> Result<Self> {
        if !(p_reject > 0.0 && p_reject < 1.0) {
            return Err(Error::config(
                "p_reject",
                format!("{p_reject} is outside (0, 1)"),
            ));
        }
        if n_init == 0 {
            return Err(Error::config("n_init", "must be at least 1"));
        }
        Ok(ThresholdCalibrator {
            p_reject,
            n_init,
            lower_quantiles: Vec::with_capacity(n_init),
            upper_quantiles: Vec::with_capacity(n_init),
            frozen: None,
        })
    }

    /// `((1 - p)/2, 1 - (1 - p)/2)`
    pub fn levels(&self) -> (f64, f64) {
        let tail = (1.0 - self.p_reject) / 2.0;
        (tail, 1.0 - tail)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    pub fn observed(&self) -> usize {
        self.lower_quantiles.len()
    }

    pub fn observe(&mut self, batch_scores: &[f64]) -> Result<()> {
        if self.is_frozen() {
            return Err(Error::Contract("calibrator is already frozen".into()));
        }
        if batch_scores.len() < 2 {
            return Err(Error::Contract("need at least two scores per batch".into()));
        }
        if batch_scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::numerical(
                "calibrate_observe",
                "non-finite OOD score",
            ));
        }
        let mut sorted = batch_scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (lo, hi) = self.levels();
        self.lower_quantiles.push(quantile(&sorted, lo));
        self.upper_quantiles.push(quantile(&sorted, hi));
        if self.lower_quantiles.len() == self.n_init {
            self.frozen = self.running_mean();
        }
        Ok(())
    }

    fn running_mean(&self) -> Option<(f64, f64)> {
        let n = self.lower_quantiles.len();
        if n == 0 {
            return None;
        }
        let lo = self.lower_quantiles.iter().sum::<f64>() / n as f64;
        let hi = self.upper_quantiles.iter().sum::<f64>() / n as f64;
        if lo > hi {
            let mid = 0.5 * (lo + hi);
            Some((mid, mid))
        } else {
            Some((lo, hi))
        }
    }

    /// Frozen thresholds, or the provisional running averages during warm-up.
    /// `None` before the first observation.
    pub fn thresholds(&self) -> Option<(f64, f64)> {
        self.frozen.or_else(|| self.running_mean())
    }
}

fn argmax(v: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Three-way pseudo-labeling rule; both boundaries are inclusive.
pub fn assign(p: &[f64], score: f64, tau_l: f64, tau_u: f64) -> PseudoLabel {
    if score <= tau_l {
        PseudoLabel::Known(argmax(p.iter().copied()))
    } else if score >= tau_u {
        PseudoLabel::Unknown
    } else {
        PseudoLabel::Ignored
    }
}

/// Final prediction: unknown (`C`) above the midpoint threshold, otherwise
/// the argmax of the summed student and teacher probabilities.
pub fn decide_inference(
    student_probs: &[f64],
    teacher_probs: &[f64],
    score: f64,
    tau_l: f64,
    tau_u: f64,
) -> usize {
    let tau = 0.5 * (tau_l + tau_u);
    if score > tau {
        return student_probs.len();
    }
    argmax(student_probs.iter().zip(teacher_probs).map(|(a, b)| a + b))
}
