//! Reference computations and random instances shared by the integration tests.
#![allow(dead_code)]

use comet_core::engine::{student_objective, ObjectiveInputs};
use comet_core::losses::{entropy_loss, ContrastiveReduction, LossWeights};
use comet_core::netcore::{backward, features, forward, grad_check, Arch, ParamSet, TraceGrad};
use comet_core::pseudolabel::PseudoLabel;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const N_B: usize = 4;
pub const D: usize = 8;
pub const CLASSES: usize = 3;

pub struct Instance {
    params: ParamSet,
    inputs: DMatrix<f64>,
    labels: Vec<PseudoLabel>,
    means: DMatrix<f64>,
    active: Vec<bool>,
    source: DMatrix<f64>,
    teacher: DMatrix<f64>,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Arch::new(D, vec![10, 10], 6, 4, CLASSES).unwrap();
    let params = ParamSet::init(&arch, &mut rng);
    let inputs = DMatrix::from_fn(2 * N_B, D, |_, _| rng.random_range(-2.0..2.0));
    let mut half: Vec<PseudoLabel> = (0..N_B)
        .map(|_| match rng.random_range(0..5) {
            0 => PseudoLabel::Unknown,
            1 => PseudoLabel::Ignored,
            _ => PseudoLabel::Known(rng.random_range(0..CLASSES)),
        })
        .collect();
    half[0] = PseudoLabel::Known(seed as usize % CLASSES);
    let labels: Vec<PseudoLabel> = half.iter().chain(half.iter()).copied().collect();
    let means = DMatrix::from_fn(CLASSES, 4, |_, _| rng.random_range(-1.0..1.0));
    let mut active = vec![true; CLASSES];
    if seed % 4 == 3 {
        active[(seed as usize + 1) % CLASSES] = false;
    }
    let originals = inputs.rows(0, N_B).into_owned();
    let source = features(&ParamSet::init(&arch, &mut rng), &originals).unwrap();
    let teacher = features(&ParamSet::init(&arch, &mut rng), &originals).unwrap();
    Instance {
        params,
        inputs,
        labels,
        means,
        active,
        source,
        teacher,
    }
}

/// Worst relative gradient error of the student objective over `seeds`.
/// Without labels every row is Ignored, which removes the contrastive and
/// entropy terms.
pub fn objective_error(
    weights: LossWeights,
    with_labels: bool,
    reduction: ContrastiveReduction,
    seeds: u64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let inst = instance(seed);
        let labels: Vec<PseudoLabel> = if with_labels {
            inst.labels.clone()
        } else {
            vec![PseudoLabel::Ignored; 2 * N_B]
        };
        let f = |p: &ParamSet| {
            let obj = student_objective(
                p,
                &ObjectiveInputs {
                    inputs: &inst.inputs,
                    labels: &labels,
                    means: &inst.means,
                    active: &inst.active,
                    source_features: &inst.source,
                    teacher_features: &inst.teacher,
                    weights,
                    reduction,
                },
            )?;
            Ok((obj.total, obj.grads))
        };
        let err = grad_check(f, &inst.params, 1e-5, usize::MAX).unwrap();
        worst = worst.max(err);
    }
    worst
}

pub fn w(l1: f64, l2: f64, l3: f64) -> LossWeights {
    LossWeights {
        lambda1: l1,
        lambda2: l2,
        lambda3: l3,
        temperature: 0.1,
    }
}

/// Worst relative gradient error of the entropy term alone over `seeds`.
pub fn entropy_error(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let inst = instance(seed);
        let x = inst.inputs.rows(0, N_B).into_owned();
        let labels = &inst.labels[..N_B];
        let f = |p: &ParamSet| {
            let t = forward(p, &x)?;
            let le = entropy_loss(&t.probs, labels)?;
            let mut tg = TraceGrad::zeros_like(&t);
            tg.logits = le.grad;
            Ok((le.value, backward(p, &t, &tg)?))
        };
        worst = worst.max(grad_check(f, &inst.params, 1e-5, usize::MAX).unwrap());
    }
    worst
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn random_probs(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> DMatrix<f64> {
    let mut p = DMatrix::from_fn(rows, classes, |_, _| rng.random::<f64>().powi(3) + 1e-3);
    for i in 0..rows {
        let s: f64 = p.row(i).sum();
        p.row_mut(i).unscale_mut(s);
    }
    p
}

pub fn weighted_mean(x: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    (0..x.ncols())
        .map(|j| (0..x.nrows()).map(|i| w[i] * x[(i, j)]).sum::<f64>() / total)
        .collect()
}

pub fn weighted_scatter(x: &DMatrix<f64>, w: &[f64], mu: &[f64]) -> DMatrix<f64> {
    let total: f64 = w.iter().sum();
    let d = x.ncols();
    DMatrix::from_fn(d, d, |a, b| {
        (0..x.nrows())
            .map(|i| w[i] * (x[(i, a)] - mu[a]) * (x[(i, b)] - mu[b]))
            .sum::<f64>()
            / total
    })
}

pub fn stack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), b.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Double loop over anchors and pairs, written directly from the loss
/// definition. `self_pairs` admits j = i and l = i as the formula is printed.
pub fn brute_force_contrastive(
    z: &[Vec<f64>],
    labels: &[PseudoLabel],
    means: &[Vec<f64>],
    active: &[bool],
    t: f64,
    self_pairs: bool,
) -> f64 {
    let m = z.len();
    let mut total = 0.0;
    for i in 0..m {
        let PseudoLabel::Known(c) = labels[i] else {
            continue;
        };
        for j in 0..m {
            if (j == i && !self_pairs) || labels[j] != labels[i] {
                continue;
            }
            let mut denom = 0.0;
            for l in 0..m {
                if l != i || self_pairs {
                    denom += (cosine(&z[l], &z[i]) / t).exp();
                }
            }
            total -= ((cosine(&z[j], &z[i]) / t).exp() / denom).ln();
        }
        if active[c] {
            let mut denom = 0.0;
            for (cp, mu) in means.iter().enumerate() {
                if active[cp] {
                    denom += (cosine(mu, &z[i]) / t).exp();
                }
            }
            total -= ((cosine(&means[c], &z[i]) / t).exp() / denom).ln();
        }
    }
    total
}

pub struct ContrastiveCase {
    pub z: DMatrix<f64>,
    pub labels: Vec<PseudoLabel>,
    pub means: DMatrix<f64>,
    pub active: Vec<bool>,
}

pub fn contrastive_case(seed: u64) -> ContrastiveCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..7);
    let c = rng.random_range(2..5);
    let d = rng.random_range(2..6);
    let z = normal_matrix(&mut rng, 2 * n, d);
    let half: Vec<PseudoLabel> = (0..n)
        .map(|_| match rng.random_range(0..4) {
            0 => PseudoLabel::Unknown,
            1 => PseudoLabel::Ignored,
            _ => PseudoLabel::Known(rng.random_range(0..c)),
        })
        .collect();
    let labels = half.iter().chain(half.iter()).copied().collect();
    let means = normal_matrix(&mut rng, c, d);
    let mut active: Vec<bool> = (0..c).map(|_| rng.random::<f64>() < 0.8).collect();
    active[0] = true;
    let mut means = means;
    for k in 0..c {
        if !active[k] {
            means.row_mut(k).fill(0.0);
        }
    }
    ContrastiveCase {
        z,
        labels,
        means,
        active,
    }
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}
