//! Adaptation objective: supervised contrastive term over the augmented
//! batch and GMM means, pseudo-label-driven entropy term, and two feature
//! consistency terms. Every loss returns its value together with the
//! gradient with respect to the network output it consumes.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::PseudoLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// entropy
    pub lambda1: f64,
    /// source consistency
    pub lambda2: f64,
    /// student-teacher consistency
    pub lambda3: f64,
    /// contrastive temperature
    pub temperature: f64,
}

/// How the contrastive loss is reduced over the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveReduction {
    /// Plain sum over anchors and positive pairs.
    #[default]
    Sum,
    /// The sum divided by the number of Known-labeled rows.
    PerAnchor,
}

impl ContrastiveReduction {
    pub fn factor(self, labels: &[PseudoLabel]) -> f64 {
        match self {
            ContrastiveReduction::Sum => 1.0,
            ContrastiveReduction::PerAnchor => {
                let k = labels.iter().filter(|l| l.known().is_some()).count();
                1.0 / k.max(1) as f64
            }
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 2.0,
            lambda3: 1.0,
            temperature: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be finite and nonnegative"));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be finite and positive"));
        }
        Ok(())
    }
}

/// A loss value and its gradient with respect to the loss input.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: DMatrix<f64>,
}

/// Student embeddings of the originals followed by their augmentations,
/// with per-row pseudo-labels and the (constant) GMM class means.
#[derive(Debug, Clone, Copy)]
pub struct LabeledEmbeddings<'a> {
    pub reduced: &'a DMatrix<f64>,
    pub labels: &'a [PseudoLabel],
    pub means: &'a DMatrix<f64>,
    /// Which class means take part; inactive ones are skipped entirely.
    pub active: &'a [bool],
}

impl<'a> LabeledEmbeddings<'a> {
    pub fn new(
        reduced: &'a DMatrix<f64>,
        labels: &'a [PseudoLabel],
        means: &'a DMatrix<f64>,
        active: &'a [bool],
    ) -> Result<Self> {
        let m = reduced.nrows();
        if labels.len() != m {
            return Err(Error::dim("contrastive labels", m, labels.len()));
        }
        if !m.is_multiple_of(2) {
            return Err(Error::Contract("embedding count must be 2 * N_b".into()));
        }
        let half = m / 2;
        if (0..half).any(|i| labels[i] != labels[i + half]) {
            return Err(Error::Contract(
                "augmented samples must inherit their original's label".into(),
            ));
        }
        if means.ncols() != reduced.ncols() || active.len() != means.nrows() {
            return Err(Error::dim(
                "contrastive means",
                format!("{}x{}", active.len(), reduced.ncols()),
                format!("{}x{}", means.nrows(), means.ncols()),
            ));
        }
        Ok(LabeledEmbeddings {
            reduced,
            labels,
            means,
            active,
        })
    }
}

fn unit_rows(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for i in 0..m.nrows() {
        let n = m.row(i).norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::numerical(
                "contrastive_loss",
                format!("{what} row {i} has zero or non-finite norm"),
            ));
        }
        out.row_mut(i).unscale_mut(n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// `log sum exp` over the given values, plus the matching softmax weights.
fn log_sum_exp(vals: &[f64]) -> (f64, Vec<f64>) {
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (max + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
}

/// Supervised contrastive loss with cosine similarity.
///
/// Sample term: for every Known anchor `i` and every other sample `j` with
/// the same label, `-(s_ji / t - log sum_{l != i} exp(s_li / t))`.
/// Mean term: every Known anchor against its class mean, normalized over
/// all active class means. Self-pairs are excluded and the means carry no
/// gradient. Returns zero when no sample has a Known label.
pub fn contrastive_loss(emb: &LabeledEmbeddings<'_>, temperature: f64) -> Result<LossValue> {
    if !(temperature > 0.0) {
        return Err(Error::config("temperature", "must be positive"));
    }
    let z = emb.reduced;
    let (m, d) = z.shape();
    let mut grad = DMatrix::zeros(m, d);
    let anchors: Vec<(usize, usize)> = emb
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.known().map(|c| (i, c)))
        .collect();
    if anchors.is_empty() {
        return Ok(LossValue { value: 0.0, grad });
    }

    let (zh, norms) = unit_rows(z, "embedding")?;
    let sims = &zh * zh.transpose();
    let inv_t = 1.0 / temperature;

    // dL/dS, accumulated so that S_ji's gradient sits at (j, i).
    let mut g_sim = DMatrix::<f64>::zeros(m, m);
    let mut value = 0.0;
    let mut col = Vec::with_capacity(m);
    for &(i, _) in &anchors {
        let positives: Vec<usize> = (0..m)
            .filter(|&j| j != i && emb.labels[j] == emb.labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        col.clear();
        col.extend((0..m).filter(|&l| l != i).map(|l| sims[(l, i)] * inv_t));
        let (lse, weights) = log_sum_exp(&col);
        let np = positives.len() as f64;
        for &j in &positives {
            value -= sims[(j, i)] * inv_t - lse;
            g_sim[(j, i)] -= inv_t;
        }
        for (w, l) in weights.iter().zip((0..m).filter(|&l| l != i)) {
            g_sim[(l, i)] += np * w * inv_t;
        }
    }
    let mut g_hat = &g_sim * &zh + g_sim.transpose() * &zh;

    let active: Vec<usize> = (0..emb.active.len()).filter(|&c| emb.active[c]).collect();
    if !active.is_empty() {
        let means = DMatrix::from_fn(active.len(), d, |r, j| emb.means[(active[r], j)]);
        let (mh, _) = unit_rows(&means, "class mean")?;
        for &(i, c) in &anchors {
            let Some(pos) = active.iter().position(|&a| a == c) else {
                continue;
            };
            let logits: Vec<f64> = (0..active.len())
                .map(|r| mh.row(r).dot(&zh.row(i)) * inv_t)
                .collect();
            let (lse, weights) = log_sum_exp(&logits);
            value -= logits[pos] - lse;
            for (r, w) in weights.iter().enumerate() {
                let coef = (w - if r == pos { 1.0 } else { 0.0 }) * inv_t;
                for j in 0..d {
                    g_hat[(i, j)] += coef * mh[(r, j)];
                }
            }
        }
    }

    // Back through the row normalization z / |z|.
    for i in 0..m {
        let zi = zh.row(i);
        let gi = g_hat.row(i);
        let proj = zi.dot(&gi);
        for j in 0..d {
            grad[(i, j)] = (gi[j] - zi[j] * proj) / norms[i];
        }
    }
    Ok(LossValue { value, grad })
}

/// `-(1 / log C) * sum_c p_c log p_c`, with `0 log 0 = 0`. A single class
/// has zero entropy.
///
/// Evaluated as `1 - sum_c p_c log(C p_c) / log C`, clamped to `[0, 1]`,
/// which makes the uniform and one-hot cases come out exactly 1 and 0.
pub fn normalized_entropy(probs: &[f64]) -> f64 {
    if probs.len() < 2 {
        return 0.0;
    }
    let c = probs.len() as f64;
    let kl: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p * c).ln())
        .sum();
    (1.0 - kl / c.ln()).clamp(0.0, 1.0)
}

/// Pushes low entropy on Known samples and high entropy on Unknown ones.
/// Ignored samples still count towards the `1 / N_b` divisor.
///
/// `probs` holds one student softmax row per original sample; the returned
/// gradient is with respect to the matching logits.
pub fn entropy_loss(probs: &DMatrix<f64>, labels: &[PseudoLabel]) -> Result<LossValue> {
    let (n, c) = probs.shape();
    if labels.len() != n {
        return Err(Error::dim("entropy_loss labels", n, labels.len()));
    }
    let mut grad = DMatrix::zeros(n, c);
    if n == 0 || c < 2 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let log_c = (c as f64).ln();
    let mut value = 0.0;
    for i in 0..n {
        let sign = match labels[i] {
            PseudoLabel::Known(_) => 1.0,
            PseudoLabel::Unknown => -1.0,
            PseudoLabel::Ignored => continue,
        };
        let row: Vec<f64> = probs.row(i).iter().copied().collect();
        value += sign * normalized_entropy(&row);
        let plogp: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                grad[(i, j)] = -sign * p * (p.ln() - plogp) / (log_c * n as f64);
            }
        }
    }
    Ok(LossValue {
        value: value / n as f64,
        grad,
    })
}

/// Mean Euclidean distance between matching rows. The gradient is taken
/// with respect to `student`; a zero difference contributes a zero
/// subgradient.
pub fn feature_consistency(student: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<LossValue> {
    if student.shape() != target.shape() {
        return Err(Error::dim(
            "consistency features",
            format!("{:?}", target.shape()),
            format!("{:?}", student.shape()),
        ));
    }
    let n = student.nrows();
    let mut grad = student - target;
    if n == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let mut value = 0.0;
    for i in 0..n {
        let norm = grad.row(i).norm();
        value += norm;
        if norm > 0.0 {
            grad.row_mut(i).unscale_mut(norm * n as f64);
        } else {
            grad.row_mut(i).fill(0.0);
        }
    }
    Ok(LossValue {
        value: value / n as f64,
        grad,
    })
}

/// Distance of the student backbone to the frozen source backbone.
pub fn consistency_src(student: &DMatrix<f64>, source: &DMatrix<f64>) -> Result<LossValue> {
    feature_consistency(student, source)
}

/// Distance of the student backbone to the teacher backbone.
pub fn consistency_mt(student: &DMatrix<f64>, teacher: &DMatrix<f64>) -> Result<LossValue> {
    feature_consistency(student, teacher)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub contrastive: f64,
    pub entropy: f64,
    pub consistency_src: f64,
    pub consistency_mt: f64,
}

/// `L_c + l1 * L_e + l2 * L_src + l3 * L_mt`
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("contrastive", parts.contrastive),
        ("entropy", parts.entropy),
        ("consistency_src", parts.consistency_src),
        ("consistency_mt", parts.consistency_mt),
    ] {
        if !v.is_finite() {
            return Err(Error::numerical(
                "total_loss",
                format!("term `{name}` is {v}"),
            ));
        }
    }
    Ok(parts.contrastive
        + w.lambda1 * parts.entropy
        + w.lambda2 * parts.consistency_src
        + w.lambda3 * parts.consistency_mt)
}
