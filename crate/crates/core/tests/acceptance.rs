//! Acceptance suite. Every criterion prints one PASS/FAIL line to stderr
//! (uncaptured, so it shows in a plain `cargo test` log) and then asserts.

mod common;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use comet_core::datagen::ScenarioKind;
use comet_core::gmmstream::GmmState;
use comet_core::losses::{
    contrastive_loss, normalized_entropy, ContrastiveReduction, LabeledEmbeddings, LossWeights,
};
use comet_core::meanteacher::ModelPair;
use comet_core::metrics::{h_score, per_domain_average, MetricsAccumulator};
use comet_core::netcore::{Arch, ParamSet};
use comet_core::pseudolabel::{score_entropy, score_mahalanobis, ThresholdCalibrator};
use comet_core::suite::{
    comparison_table, execute, parse_config, run_suite, ExperimentSuite, SummaryRow,
};
use common::{
    brute_force_contrastive, contrastive_case, entropy_error, normal_matrix, objective_error,
    random_probs, rows, stack, w, weighted_mean, weighted_scatter,
};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn verdict(n: u32, title: &str, ok: bool, detail: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(
        err,
        "criterion {n:>2} {title:<28} {}  {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} ({title}) failed: {detail}");
}

#[test]
fn criterion_01_gradient_fidelity() {
    let start = Instant::now();
    let seeds = 24;
    let mut errors = vec![
        (
            "contrastive",
            objective_error(w(0.0, 0.0, 0.0), true, ContrastiveReduction::Sum, seeds),
        ),
        ("entropy", entropy_error(seeds)),
        (
            "consistency_src",
            objective_error(w(0.0, 1.0, 0.0), false, ContrastiveReduction::Sum, seeds),
        ),
        (
            "consistency_mt",
            objective_error(w(0.0, 0.0, 1.0), false, ContrastiveReduction::Sum, seeds),
        ),
        (
            "total",
            objective_error(
                LossWeights::default(),
                true,
                ContrastiveReduction::Sum,
                seeds,
            ),
        ),
    ];
    errors.push((
        "total/per_anchor",
        objective_error(
            LossWeights::default(),
            true,
            ContrastiveReduction::PerAnchor,
            seeds,
        ),
    ));
    let took = start.elapsed();
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errors
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        1,
        "gradient fidelity",
        worst < 1e-4 && took < Duration::from_secs(30),
        &format!(
            "{seeds} seeds, max rel err {worst:.1e} ({detail}), {:.1}s",
            took.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_02_gmm_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_single: f64 = 0.0;
    for _ in 0..10 {
        let (n, c, d) = (64, 4, 6);
        let x = normal_matrix(&mut rng, n, d) * 1.5;
        let p = random_probs(&mut rng, n, c);
        let mut g = GmmState::new(c, d, 0.99, 1e-4).unwrap();
        g.update(&p, &x).unwrap();
        for k in 0..c {
            let wk: Vec<f64> = p.column(k).iter().copied().collect();
            let mu = weighted_mean(&x, &wk);
            let sig = weighted_scatter(&x, &wk, &mu);
            let dm = (0..d)
                .map(|j| (g.mean(k)[j] - mu[j]).abs())
                .fold(0.0, f64::max);
            worst_single = worst_single.max(dm).max((g.covariance(k) - &sig).amax());
        }
    }

    let (k_batches, n, c, d) = (10, 64, 4, 6);
    let mut g = GmmState::new(c, d, 1.0, 1e-4).unwrap();
    let mut xs = DMatrix::zeros(0, d);
    let mut ps = DMatrix::zeros(0, c);
    for b in 0..k_batches {
        let x = normal_matrix(&mut rng, n, d).add_scalar(0.2 * b as f64);
        let p = random_probs(&mut rng, n, c);
        g.update(&p, &x).unwrap();
        xs = stack(&xs, &x);
        ps = stack(&ps, &p);
    }
    let mut worst_pooled: f64 = 0.0;
    for k in 0..c {
        let wk: Vec<f64> = ps.column(k).iter().copied().collect();
        let mu = weighted_mean(&xs, &wk);
        for j in 0..d {
            worst_pooled = worst_pooled.max((g.mean(k)[j] - mu[j]).abs());
        }
        worst_pooled = worst_pooled.max((g.weights()[k] - wk.iter().sum::<f64>()).abs());
    }
    let took = start.elapsed();
    verdict(
        2,
        "GMM oracle equivalence",
        worst_single < 1e-10 && worst_pooled < 1e-10 && took < Duration::from_secs(10),
        &format!(
            "single-batch max err {worst_single:.1e}, pooled K={k_batches} max err {worst_pooled:.1e}, {:.2}s",
            took.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_03_contrastive_oracle() {
    let mut worst: f64 = 0.0;
    let mut mix = [0usize; 3];
    for seed in 0..50 {
        let case = contrastive_case(1000 + seed);
        for l in &case.labels {
            mix[match l {
                comet_core::pseudolabel::PseudoLabel::Known(_) => 0,
                comet_core::pseudolabel::PseudoLabel::Unknown => 1,
                comet_core::pseudolabel::PseudoLabel::Ignored => 2,
            }] += 1;
        }
        let emb = LabeledEmbeddings::new(&case.z, &case.labels, &case.means, &case.active).unwrap();
        let got = contrastive_loss(&emb, 0.1).unwrap().value;
        let want = brute_force_contrastive(
            &rows(&case.z),
            &case.labels,
            &rows(&case.means),
            &case.active,
            0.1,
            false,
        );
        worst = worst.max((got - want).abs());
    }
    verdict(
        3,
        "contrastive oracle",
        worst < 1e-10 && mix.iter().all(|&m| m > 0),
        &format!("50 instances, max abs err {worst:.1e}, label mix known/unknown/ignored {mix:?}"),
    );
}

#[test]
fn criterion_04_threshold_calibration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut draw =
        |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let mut cal = ThresholdCalibrator::new(0.5, 50).unwrap();
    for _ in 0..50 {
        cal.observe(&draw(64)).unwrap();
    }
    let (tl, tu) = cal.thresholds().unwrap();
    let q = 0.674_489_750_196_081_7;
    let fresh = draw(10_000);
    let ignored = fresh.iter().filter(|&&s| s > tl && s < tu).count() as f64 / fresh.len() as f64;
    verdict(
        4,
        "threshold calibration",
        cal.is_frozen()
            && (tl + q).abs() <= 0.08
            && (tu - q).abs() <= 0.08
            && (ignored - 0.5).abs() <= 0.05,
        &format!("tau_l {tl:.4} (target -{q:.4}), tau_u {tu:.4}, ignored fraction {ignored:.4}"),
    );
}

#[test]
fn criterion_05_ood_score_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, d) = (3, 4);
    let points = normal_matrix(&mut rng, c, d) * 3.0;
    // one point per class has zero scatter; eps = 1 turns the covariance into I
    let mut g = GmmState::new(c, d, 1.0, 1.0).unwrap();
    g.update(&DMatrix::identity(c, c), &points).unwrap();
    let dens = g.densities().unwrap();
    let mut at_mean = true;
    for k in 0..c {
        let mu: Vec<f64> = g.mean(k).iter().copied().collect();
        at_mean &= score_mahalanobis(&dens, &mu).unwrap() == 0.0;
    }
    let mut euclid = true;
    for _ in 0..100 {
        let x: Vec<f64> = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                4.0 * z
            })
            .collect();
        let want = (0..c)
            .map(|k| {
                (0..d)
                    .map(|j| (x[j] - g.mean(k)[j]) * (x[j] - g.mean(k)[j]))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        euclid &= score_mahalanobis(&dens, &x).unwrap() == want;
    }
    let mut entropy = true;
    for classes in 2..=64 {
        let uniform = vec![1.0 / classes as f64; classes];
        entropy &= score_entropy(&uniform).unwrap() == 1.0;
        for hot in 0..classes {
            let mut p = vec![0.0; classes];
            p[hot] = 1.0;
            entropy &= score_entropy(&p).unwrap() == 0.0;
        }
    }
    verdict(
        5,
        "OOD score contracts",
        at_mean && euclid && entropy,
        &format!(
            "mahalanobis zero at means: {at_mean}, equals squared euclidean under I: {euclid}, entropy uniform=1/one-hot=0 for 2..64 classes: {entropy} (H(uniform 7) = {})",
            normalized_entropy(&[1.0 / 7.0; 7])
        ),
    );
}

#[test]
fn criterion_06_ema_contract() {
    let arch = Arch::new(8, vec![16, 16], 8, 4, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for alpha in [0.9, 0.99, 0.999] {
        let mut pair = ModelPair::new(ParamSet::init(&arch, &mut rng), alpha).unwrap();
        pair.student = ParamSet::init(&arch, &mut rng);
        let frozen = pair.student.clone();
        let gap0 = pair.teacher.max_abs_diff(&pair.student);
        for t in 1..=300 {
            pair.ema_update().unwrap();
            let expected = alpha.powi(t) * gap0;
            worst = worst.max((pair.teacher.max_abs_diff(&pair.student) - expected).abs());
        }
        assert_eq!(pair.student, frozen);
    }
    verdict(
        6,
        "EMA contract",
        worst <= 1e-12,
        &format!("alpha 0.9/0.99/0.999, 300 updates, max |gap - alpha^t gap0| {worst:.1e}"),
    );
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_suite.toml")
}

struct DeskRun {
    suite: ExperimentSuite,
    rows: Vec<SummaryRow>,
    took: Duration,
    /// (variant, scenario) -> mean over seeds of the averaged metric
    means: BTreeMap<(String, String), f64>,
}

fn desk() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let suite = parse_config(&desk_config()).unwrap();
        let jobs = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        let start = Instant::now();
        let res = execute(&suite, jobs).unwrap();
        let took = start.elapsed();
        let mut acc: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &res.rows {
            let v = r.average.parse::<f64>().unwrap_or(f64::NAN);
            acc.entry((r.variant.clone(), r.scenario.clone()))
                .or_default()
                .push(v);
        }
        let means = acc
            .into_iter()
            .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        let mut err = std::io::stderr().lock();
        let _ = writeln!(
            err,
            "desk suite: {} runs in {:.1}s\n{}",
            res.rows.len(),
            took.as_secs_f64(),
            comparison_table(&suite, &res.rows)
        );
        DeskRun {
            suite,
            rows: res.rows,
            took,
            means,
        }
    })
}

#[test]
fn criterion_07_adaptation_benefit() {
    let run = desk();
    let seeds = run.suite.seeds.len();
    let failed = run.rows.iter().filter(|r| r.status != "ok").count();
    let mut ok = seeds == 5 && failed == 0 && run.took < Duration::from_secs(300);
    let mut parts = Vec::new();
    for kind in [ScenarioKind::Pda, ScenarioKind::Oda, ScenarioKind::Opda] {
        let sc = kind.to_string().to_lowercase();
        let full = run.means[&("full".to_string(), sc.clone())];
        let src = run.means[&("source-only".to_string(), sc.clone())];
        ok &= full >= src;
        parts.push(format!("{sc} {:.2} vs {:.2}", 100.0 * full, 100.0 * src));
    }
    verdict(
        7,
        "adaptation benefit",
        ok,
        &format!(
            "full vs source-only: {} ({seeds} seeds, {failed} failed runs, suite {:.1}s)",
            parts.join(", "),
            run.took.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_08_ablation_direction() {
    let run = desk();
    let mean_of = |variant: &str| {
        (run.means[&(variant.to_string(), "oda".to_string())]
            + run.means[&(variant.to_string(), "opda".to_string())])
            / 2.0
    };
    let full = mean_of("full");
    let no_mt = mean_of("no-mean-teacher");
    let table = comparison_table(&run.suite, &run.rows);
    let variants = [
        "full",
        "no-consistency",
        "no-mean-teacher",
        "no-ensemble",
        "source-only",
    ];
    let has_table =
        variants.iter().all(|v| table.contains(&format!("| {v} |"))) && table.lines().count() == 7;
    verdict(
        8,
        "ablation direction",
        100.0 * (no_mt - full) <= 1.0 && has_table,
        &format!(
            "mean ODA/OPDA H-score: full {:.2}, no-mean-teacher {:.2}; 5-variant table emitted: {has_table}",
            100.0 * full,
            100.0 * no_mt
        ),
    );
}

#[test]
fn criterion_09_metric_correctness() {
    let mut ok = h_score(0.6, 0.4) == 0.48 || (h_score(0.6, 0.4) - 0.48).abs() <= f64::EPSILON;
    let exact_pair = h_score(0.6, 0.4);
    for a in [0.0, 0.1, 0.25, 1.0 / 3.0, 0.5, 0.77, 1.0] {
        ok &= h_score(a, a) == a;
    }
    // domain 0: H = 0.4 over 10 samples; domain 1: H = 0.6 over 1000 samples
    let mut acc = MetricsAccumulator::new(2);
    let mut push = |domain: usize, kc: usize, kt: usize, uc: usize, ut: usize| {
        for i in 0..kt {
            acc.record(if i < kc { 0 } else { 1 }, 0, domain);
        }
        for i in 0..ut {
            acc.record(if i < uc { 2 } else { 0 }, 3, domain);
        }
    };
    push(0, 2, 5, 2, 5);
    push(1, 300, 500, 300, 500);
    let s = per_domain_average(&acc, ScenarioKind::Opda).unwrap();
    ok &= (s.average - 0.5).abs() < 1e-15;
    verdict(
        9,
        "metric correctness",
        ok,
        &format!(
            "h(0.6,0.4) = {exact_pair}, h(a,a) = a, domains H 0.4 (10 samples) and 0.6 (1000 samples) average {}",
            s.average
        ),
    );
}

#[test]
fn criterion_10_determinism() {
    let mut suite = parse_config(&desk_config()).unwrap();
    suite.seeds = vec![7];
    suite.runs.retain(|r| r.scenario_name == "opda");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_suite(&suite, a.path(), 1).unwrap();
    run_suite(&suite, b.path(), 2).unwrap();
    let mut compared = 0;
    let mut identical = true;
    for entry in std::fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let n = name.to_string_lossy();
        if n.ends_with(".report.json") || n == "summary.csv" {
            identical &= std::fs::read(a.path().join(&name)).unwrap()
                == std::fs::read(b.path().join(&name)).unwrap();
            compared += 1;
        }
    }
    verdict(
        10,
        "determinism",
        identical && compared == suite.runs.len() + 1,
        &format!("{compared} files (report JSON + summary CSV) compared across two runs: identical {identical}"),
    );
}
