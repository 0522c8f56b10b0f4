//! Synthetic source data, source-model pretraining and continual target
//! streams with category shift.
//!
//! Classes are isotropic Gaussian blobs whose means sit on a hypersphere.
//! Class ids follow the usual split convention: the first `|Y_s|` ids are
//! source classes and the last `|Y_t|` ids are target classes, overlapping
//! on the shared block.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::normalized_entropy;
use crate::netcore::{backward, forward, sgd_step, OptimizerState, ParamSet, TraceGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ScenarioKind {
    Pda,
    Oda,
    Opda,
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScenarioKind::Pda => "PDA",
            ScenarioKind::Oda => "ODA",
            ScenarioKind::Opda => "OPDA",
        })
    }
}

/// `(|Y_s ∩ Y_t|, |Y_s \ Y_t|, |Y_t \ Y_s|)`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub shared: usize,
    pub source_private: usize,
    pub target_private: usize,
}

impl ClassSplit {
    pub fn new(shared: usize, source_private: usize, target_private: usize) -> Self {
        ClassSplit {
            shared,
            source_private,
            target_private,
        }
    }

    pub fn num_source(&self) -> usize {
        self.shared + self.source_private
    }

    pub fn num_target(&self) -> usize {
        self.shared + self.target_private
    }

    pub fn total(&self) -> usize {
        self.shared + self.source_private + self.target_private
    }

    pub fn source_classes(&self) -> std::ops::Range<usize> {
        0..self.num_source()
    }

    pub fn target_classes(&self) -> std::ops::Range<usize> {
        self.total() - self.num_target()..self.total()
    }

    pub fn validate(&self, kind: ScenarioKind) -> Result<()> {
        let ok = match kind {
            ScenarioKind::Pda => self.target_private == 0 && self.source_private > 0,
            ScenarioKind::Oda => self.source_private == 0 && self.target_private > 0,
            ScenarioKind::Opda => {
                self.shared > 0 && self.source_private > 0 && self.target_private > 0
            }
        };
        if !ok || self.shared == 0 {
            return Err(Error::config(
                "split",
                format!(
                    "({}, {}, {}) is not a valid {kind} split",
                    self.shared, self.source_private, self.target_private
                ),
            ));
        }
        Ok(())
    }
}

/// Affine domain shift `x -> scale * R(theta) x + translation + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// radians, applied in the scenario's rotation plane
    pub rotation: f64,
    /// empty means no translation
    #[serde(default)]
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise_std: f64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec {
            rotation: 0.0,
            translation: Vec::new(),
            scale: 1.0,
            noise_std: 0.0,
        }
    }

    pub fn rotation_deg(deg: f64) -> Self {
        ShiftSpec {
            rotation: deg.to_radians(),
            ..ShiftSpec::identity()
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("scale", "must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std", "must be nonnegative"));
        }
        if !self.rotation.is_finite() {
            return Err(Error::config("rotation", "must be finite"));
        }
        if !self.translation.is_empty() && self.translation.len() != dim {
            return Err(Error::config(
                "translation",
                format!("expected {dim} entries, got {}", self.translation.len()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub shift: ShiftSpec,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub split: ClassSplit,
    pub input_dim: usize,
    pub class_radius: f64,
    pub class_std: f64,
    /// Coordinate pair spanning the rotation plane.
    pub rotation_plane: (usize, usize),
    pub domains: Vec<DomainSpec>,
    pub batch_size: usize,
    pub source_samples_per_class: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    /// Desk-scale stream: D = 8, four domains rotated by 15/30/45/60 degrees,
    /// 60 batches of 64 each.
    pub fn desk(kind: ScenarioKind, split: ClassSplit, seed: u64) -> Self {
        ScenarioConfig {
            kind,
            split,
            input_dim: 8,
            class_radius: 3.0,
            class_std: 1.0,
            rotation_plane: (0, 1),
            domains: [15.0, 30.0, 45.0, 60.0]
                .iter()
                .map(|&d| DomainSpec {
                    shift: ShiftSpec::rotation_deg(d),
                    batches: 60,
                })
                .collect(),
            batch_size: 64,
            source_samples_per_class: 300,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate(self.kind)?;
        if self.input_dim < 2 {
            return Err(Error::config("input_dim", "must be at least 2"));
        }
        let (a, b) = self.rotation_plane;
        if a == b || a >= self.input_dim || b >= self.input_dim {
            return Err(Error::config(
                "rotation_plane",
                "needs two distinct in-range axes",
            ));
        }
        if !(self.class_radius > 0.0) || !(self.class_std >= 0.0) {
            return Err(Error::config(
                "class_radius",
                "radius must be positive, std nonnegative",
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.source_samples_per_class == 0 {
            return Err(Error::config(
                "source_samples_per_class",
                "must be positive",
            ));
        }
        for d in &self.domains {
            d.shift.validate(self.input_dim)?;
        }
        Ok(())
    }

    pub fn total_batches(&self) -> usize {
        self.domains.iter().map(|d| d.batches).sum()
    }
}

/// Labeled source samples (labels are source class ids).
#[derive(Debug, Clone)]
pub struct SourceData {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: DMatrix<f64>,
    /// Ground truth for evaluation only.
    pub true_labels: Vec<usize>,
    pub domain_id: usize,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn class_means<R: Rng + ?Sized>(
    count: usize,
    dim: usize,
    radius: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let mut means = DMatrix::<f64>::zeros(count, dim);
    let min_dist = radius;
    for c in 0..count {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..200 {
            let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x *= radius / n);
            let closest = (0..c)
                .map(|p| {
                    (0..dim)
                        .map(|j| (means[(p, j)] - v[j]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            if best.as_ref().is_none_or(|(d, _)| closest > *d) {
                best = Some((closest, v));
            }
            if closest >= min_dist {
                break;
            }
        }
        let (_, v) = best.expect("at least one candidate");
        for j in 0..dim {
            means[(c, j)] = v[j];
        }
    }
    means
}

fn sample_blobs<R: Rng + ?Sized>(
    means: &DMatrix<f64>,
    labels: &[usize],
    std: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let dim = means.ncols();
    let mut out = DMatrix::zeros(labels.len(), dim);
    for (i, &c) in labels.iter().enumerate() {
        for j in 0..dim {
            out[(i, j)] = means[(c, j)] + std * normal(rng);
        }
    }
    out
}

/// `x -> scale * R(theta) x + translation + noise_std * eta`, row-wise.
pub fn apply_shift<R: Rng + ?Sized>(
    points: &DMatrix<f64>,
    spec: &ShiftSpec,
    plane: (usize, usize),
    rng: &mut R,
) -> DMatrix<f64> {
    let (a, b) = plane;
    let (sin, cos) = spec.rotation.sin_cos();
    let mut out = points.clone();
    for i in 0..points.nrows() {
        let (xa, xb) = (points[(i, a)], points[(i, b)]);
        out[(i, a)] = cos * xa - sin * xb;
        out[(i, b)] = sin * xa + cos * xb;
    }
    if spec.scale != 1.0 {
        out *= spec.scale;
    }
    if !spec.translation.is_empty() {
        for i in 0..out.nrows() {
            for (j, t) in spec.translation.iter().enumerate() {
                out[(i, j)] += t;
            }
        }
    }
    if spec.noise_std > 0.0 {
        for v in out.iter_mut() {
            *v += spec.noise_std * normal(rng);
        }
    }
    out
}

/// Input-space jitter `x + sigma * eta`.
pub fn augment<R: Rng + ?Sized>(inputs: &DMatrix<f64>, sigma: f64, rng: &mut R) -> DMatrix<f64> {
    augment_per_dim(inputs, &vec![sigma; inputs.ncols()], rng)
}

/// Jitter with a separate standard deviation per input column.
pub fn augment_per_dim<R: Rng + ?Sized>(
    inputs: &DMatrix<f64>,
    sigma: &[f64],
    rng: &mut R,
) -> DMatrix<f64> {
    let mut out = inputs.clone();
    if sigma.iter().all(|&s| s == 0.0) {
        return out;
    }
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            out[(i, j)] += sigma[j] * normal(rng);
        }
    }
    out
}

/// Single-pass iterator over the target batches, one domain after another.
/// Each domain is sampled and shuffled when the stream reaches it.
#[derive(Debug, Clone)]
pub struct DomainStream {
    means: DMatrix<f64>,
    cfg: ScenarioConfig,
    rng: ChaCha8Rng,
    next_domain: usize,
    pending: VecDeque<Batch>,
    yielded: usize,
}

impl DomainStream {
    pub fn total_batches(&self) -> usize {
        self.cfg.total_batches()
    }

    pub fn yielded(&self) -> usize {
        self.yielded
    }

    fn load_domain(&mut self, d: usize) {
        let spec = &self.cfg.domains[d];
        let n_b = self.cfg.batch_size;
        let n = spec.batches * n_b;
        let classes: Vec<usize> = self.cfg.split.target_classes().collect();
        let mut labels: Vec<usize> = (0..n).map(|i| classes[i % classes.len()]).collect();
        labels.shuffle(&mut self.rng);
        let base = sample_blobs(&self.means, &labels, self.cfg.class_std, &mut self.rng);
        let shifted = apply_shift(&base, &spec.shift, self.cfg.rotation_plane, &mut self.rng);
        for k in 0..spec.batches {
            let rows = k * n_b..(k + 1) * n_b;
            self.pending.push_back(Batch {
                inputs: shifted.rows(rows.start, n_b).into_owned(),
                true_labels: labels[rows].to_vec(),
                domain_id: d,
            });
        }
    }
}

impl Iterator for DomainStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        while self.pending.is_empty() {
            if self.next_domain >= self.cfg.domains.len() {
                return None;
            }
            let d = self.next_domain;
            self.next_domain += 1;
            self.load_domain(d);
        }
        self.yielded += 1;
        self.pending.pop_front()
    }
}

/// Builds the labeled source set and the target stream for one scenario.
pub fn make_scenario(cfg: &ScenarioConfig) -> Result<(SourceData, DomainStream)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = class_means(cfg.split.total(), cfg.input_dim, cfg.class_radius, &mut rng);

    let mut labels: Vec<usize> = cfg
        .split
        .source_classes()
        .flat_map(|c| std::iter::repeat_n(c, cfg.source_samples_per_class))
        .collect();
    labels.shuffle(&mut rng);
    let inputs = sample_blobs(&means, &labels, cfg.class_std, &mut rng);

    let stream_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let stream = DomainStream {
        means,
        cfg: cfg.clone(),
        rng: stream_rng,
        next_domain: 0,
        pending: VecDeque::new(),
        yielded: 0,
    };
    Ok((SourceData { inputs, labels }, stream))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    /// Training stops early once train accuracy reaches this value.
    pub target_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 60,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 64,
            label_smoothing: 0.1,
            target_accuracy: 0.95,
        }
    }
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(params: &ParamSet, data: &SourceData) -> Result<f64> {
    let t = forward(params, &data.inputs)?;
    let correct = (0..t.probs.nrows())
        .filter(|&i| t.probs.row(i).transpose().argmax().0 == data.labels[i])
        .count();
    Ok(correct as f64 / data.labels.len().max(1) as f64)
}

/// Cross-entropy training with label smoothing. Returns the trained model
/// and its final train accuracy.
pub fn pretrain_source<R: Rng + ?Sized>(
    mut net: ParamSet,
    data: &SourceData,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<(ParamSet, f64)> {
    let n = data.labels.len();
    let classes = net.arch().num_classes;
    if n == 0 || data.inputs.nrows() != n {
        return Err(Error::Contract("source data is empty or mislabeled".into()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!(
            "source label {bad} is not a source class"
        )));
    }
    let smooth = cfg.label_smoothing;
    let mut opt = OptimizerState::new(&net, cfg.learning_rate, cfg.momentum);
    let mut order: Vec<usize> = (0..n).collect();
    let mut acc = accuracy(&net, data)?;
    for _ in 0..cfg.epochs {
        if acc >= cfg.target_accuracy {
            break;
        }
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = DMatrix::from_fn(chunk.len(), data.inputs.ncols(), |i, j| {
                data.inputs[(chunk[i], j)]
            });
            let trace = forward(&net, &x)?;
            let mut tg = TraceGrad::zeros_like(&trace);
            let b = chunk.len() as f64;
            for (i, &idx) in chunk.iter().enumerate() {
                for c in 0..classes {
                    let target = if c == data.labels[idx] {
                        1.0 - smooth + smooth / classes as f64
                    } else {
                        smooth / classes as f64
                    };
                    tg.logits[(i, c)] = (trace.probs[(i, c)] - target) / b;
                }
            }
            let grads = backward(&net, &trace, &tg)?;
            sgd_step(&mut net, &grads, &mut opt)?;
        }
        acc = accuracy(&net, data)?;
    }
    if acc < 0.6 {
        return Err(Error::ScenarioTooHard { accuracy: acc });
    }
    Ok((net, acc))
}

/// Normalized softmax entropy per row, the source-only OOD score.
pub fn softmax_entropy_scores(probs: &DMatrix<f64>) -> Vec<f64> {
    (0..probs.nrows())
        .map(|i| {
            let row: Vec<f64> = probs.row(i).iter().copied().collect();
            normalized_entropy(&row)
        })
        .collect()
}
