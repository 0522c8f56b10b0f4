//! The single-pass adaptation loop: teacher inference, GMM update,
//! pseudo-labeling, student optimization, EMA and prediction.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    augment_per_dim, make_scenario, pretrain_source, softmax_entropy_scores, PretrainConfig,
    ScenarioConfig, ScenarioKind,
};
use crate::error::{Error, Result};
use crate::gmmstream::{GmmState, DEFAULT_COV_REG};
use crate::losses::{
    consistency_mt, consistency_src, contrastive_loss, entropy_loss, total_loss,
    ContrastiveReduction, LabeledEmbeddings, LossParts, LossWeights,
};
use crate::meanteacher::{check_alpha, ModelPair};
use crate::metrics::{per_domain_average, DomainMetric, MetricKind, MetricsAccumulator};
use crate::netcore::{
    backward, features, forward, sgd_step, Arch, ForwardTrace, Gradients, OptimizerState, ParamSet,
    TraceGrad,
};
use crate::pseudolabel::{
    assign, decide_inference, score_entropy, score_mahalanobis, OodMetric, PseudoLabel,
    ThresholdCalibrator,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Switches {
    pub mean_teacher: bool,
    pub ensembling: bool,
    pub consistency_src: bool,
    pub consistency_mt: bool,
    /// Off means the frozen source model with entropy rejection.
    pub adapt: bool,
    /// Predict with the model state after this batch's update (default) or before it.
    pub predict_after_update: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Switches {
            mean_teacher: true,
            ensembling: true,
            consistency_src: true,
            consistency_mt: true,
            adapt: true,
            predict_after_update: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub lr: f64,
    pub momentum: f64,
    pub alpha_mt: f64,
    pub alpha_gmm: f64,
    pub reduced_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub n_init: usize,
    pub p_reject: f64,
    pub metric: OodMetric,
    pub weights: LossWeights,
    pub contrastive_reduction: ContrastiveReduction,
    /// Jitter scale relative to the per-dimension spread of the batch.
    pub aug_sigma: f64,
    pub cov_reg: f64,
    pub switches: Switches,
    pub pretrain: PretrainConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            lr: 0.001,
            momentum: 0.9,
            alpha_mt: 0.99,
            alpha_gmm: 0.99,
            reduced_dim: 8,
            hidden: vec![64, 64],
            feature_dim: 32,
            n_init: 50,
            p_reject: 0.5,
            metric: OodMetric::NormalizedEntropy,
            weights: LossWeights::default(),
            contrastive_reduction: ContrastiveReduction::Sum,
            aug_sigma: 0.1,
            cov_reg: DEFAULT_COV_REG,
            switches: Switches::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be finite and positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        check_alpha("alpha_mt", self.alpha_mt)?;
        check_alpha("alpha_gmm", self.alpha_gmm)?;
        if self.reduced_dim == 0 {
            return Err(Error::config("reduced_dim", "must be positive"));
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        if self.n_init == 0 {
            return Err(Error::config("n_init", "must be positive"));
        }
        if !(self.p_reject > 0.0 && self.p_reject < 1.0) {
            return Err(Error::config(
                "p_reject",
                format!("{} is outside (0, 1)", self.p_reject),
            ));
        }
        self.weights.validate()?;
        if !(self.aug_sigma.is_finite() && self.aug_sigma >= 0.0) {
            return Err(Error::config("aug_sigma", "must be finite and nonnegative"));
        }
        if !(self.cov_reg.is_finite() && self.cov_reg > 0.0) {
            return Err(Error::config("cov_reg", "must be finite and positive"));
        }
        let p = &self.pretrain;
        if !(p.learning_rate > 0.0) || !(0.0..1.0).contains(&p.momentum) || p.batch_size == 0 {
            return Err(Error::config(
                "pretrain",
                "needs lr > 0, momentum in [0, 1), batch_size > 0",
            ));
        }
        if !(0.0..1.0).contains(&p.label_smoothing) {
            return Err(Error::config(
                "pretrain.label_smoothing",
                "must lie in [0, 1)",
            ));
        }
        Ok(())
    }

    /// Loss weights with the consistency ablations applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.switches.consistency_src {
            w.lambda2 = 0.0;
        }
        if !self.switches.consistency_mt {
            w.lambda3 = 0.0;
        }
        w
    }

    pub fn arch(&self, input_dim: usize, num_classes: usize) -> Result<Arch> {
        Arch::new(
            input_dim,
            self.hidden.clone(),
            self.feature_dim,
            self.reduced_dim,
            num_classes,
        )
    }
}

/// Everything the student objective needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    /// Originals stacked over their augmentations (`2 N_b` rows).
    pub inputs: &'a DMatrix<f64>,
    /// One label per row of `inputs`.
    pub labels: &'a [PseudoLabel],
    pub means: &'a DMatrix<f64>,
    pub active: &'a [bool],
    /// Frozen source backbone features of the originals.
    pub source_features: &'a DMatrix<f64>,
    /// Teacher backbone features of the originals.
    pub teacher_features: &'a DMatrix<f64>,
    pub weights: LossWeights,
    pub reduction: ContrastiveReduction,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub total: f64,
    pub parts: LossParts,
    pub grads: Gradients,
    pub trace: ForwardTrace,
}

/// Total adaptation loss of the student and its gradient.
pub fn student_objective(params: &ParamSet, inp: &ObjectiveInputs<'_>) -> Result<Objective> {
    let m = inp.inputs.nrows();
    let n = m / 2;
    if !m.is_multiple_of(2) || inp.source_features.nrows() != n || inp.teacher_features.nrows() != n
    {
        return Err(Error::Contract(
            "objective expects 2 N_b inputs and N_b reference rows".into(),
        ));
    }
    let trace = forward(params, inp.inputs)?;
    let w = inp.weights;
    let emb = LabeledEmbeddings::new(&trace.reduced, inp.labels, inp.means, inp.active)?;
    let mut lc = contrastive_loss(&emb, w.temperature)?;
    let f = inp.reduction.factor(inp.labels);
    if f != 1.0 {
        lc.value *= f;
        lc.grad *= f;
    }

    let orig_probs = trace.probs.rows(0, n).into_owned();
    let orig_feats = trace.features.rows(0, n).into_owned();
    let le = entropy_loss(&orig_probs, &inp.labels[..n])?;
    let ls = consistency_src(&orig_feats, inp.source_features)?;
    let lm = consistency_mt(&orig_feats, inp.teacher_features)?;

    let parts = LossParts {
        contrastive: lc.value,
        entropy: le.value,
        consistency_src: ls.value,
        consistency_mt: lm.value,
    };
    let total = total_loss(&parts, &w)?;

    let mut tg = TraceGrad::zeros_like(&trace);
    tg.reduced = lc.grad;
    for i in 0..n {
        for j in 0..tg.logits.ncols() {
            tg.logits[(i, j)] = w.lambda1 * le.grad[(i, j)];
        }
        for j in 0..tg.features.ncols() {
            tg.features[(i, j)] = w.lambda2 * ls.grad[(i, j)] + w.lambda3 * lm.grad[(i, j)];
        }
    }
    let grads = backward(params, &trace, &tg)?;
    Ok(Objective {
        total,
        parts,
        grads,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub batch: usize,
    pub domain_id: usize,
    /// Known pseudo-label counts per source class.
    pub known: Vec<usize>,
    pub unknown: usize,
    pub ignored: usize,
    pub losses: Option<LossParts>,
    pub total_loss: Option<f64>,
    pub score_min: f64,
    pub score_median: f64,
    pub score_max: f64,
    pub thresholds: Option<(f64, f64)>,
    pub frozen: bool,
    pub skipped: Option<String>,
    /// OOD scores behind each prediction.
    pub scores: Vec<f64>,
    pub predictions: Vec<usize>,
}

impl StepLog {
    fn new(batch: usize, num_classes: usize, n: usize) -> Self {
        StepLog {
            batch,
            domain_id: 0,
            known: vec![0; num_classes],
            unknown: 0,
            ignored: 0,
            losses: None,
            total_loss: None,
            score_min: f64::NAN,
            score_median: f64::NAN,
            score_max: f64::NAN,
            thresholds: None,
            frozen: false,
            skipped: None,
            scores: Vec::with_capacity(n),
            predictions: Vec::with_capacity(n),
        }
    }

    fn record_labels(&mut self, labels: &[PseudoLabel]) {
        for l in labels {
            match l {
                PseudoLabel::Known(c) => self.known[*c] += 1,
                PseudoLabel::Unknown => self.unknown += 1,
                PseudoLabel::Ignored => self.ignored += 1,
            }
        }
    }

    fn record_scores(&mut self, scores: &[f64]) {
        let mut s = scores.to_vec();
        s.sort_by(f64::total_cmp);
        if let (Some(&lo), Some(&hi)) = (s.first(), s.last()) {
            self.score_min = lo;
            self.score_max = hi;
            self.score_median = crate::pseudolabel::quantile(&s, 0.5);
        }
    }

    pub fn histogram_total(&self) -> usize {
        self.known.iter().sum::<usize>() + self.unknown + self.ignored
    }
}

/// Mutable adaptation state. A failed step restores the whole struct.
#[derive(Debug, Clone)]
pub struct EngineState {
    pub models: ModelPair,
    pub gmm: GmmState,
    pub calibrator: ThresholdCalibrator,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct Engine {
    cfg: EngineConfig,
    state: EngineState,
    step: usize,
}

fn column_std(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    (0..x.ncols())
        .map(|j| {
            let col = x.column(j);
            let mean = col.sum() / n;
            (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::Numerical { .. } | Error::Degenerate(_))
}

impl Engine {
    pub fn new(cfg: EngineConfig, source: ParamSet, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let arch = source.arch().clone();
        if arch.reduced_dim != cfg.reduced_dim {
            return Err(Error::dim(
                "source projection",
                cfg.reduced_dim,
                arch.reduced_dim,
            ));
        }
        let gmm = GmmState::new(
            arch.num_classes,
            arch.reduced_dim,
            cfg.alpha_gmm,
            cfg.cov_reg,
        )?;
        let calibrator = ThresholdCalibrator::new(cfg.p_reject, cfg.n_init)?;
        let optimizer = OptimizerState::new(&source, cfg.lr, cfg.momentum);
        let models = ModelPair::new(source, cfg.alpha_mt)?;
        Ok(Engine {
            state: EngineState {
                models,
                gmm,
                calibrator,
                optimizer,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            cfg,
            step: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn num_classes(&self) -> usize {
        self.state.models.source().arch().num_classes
    }

    /// Processes one batch of inputs and returns one prediction per row
    /// (index `num_classes` means unknown).
    pub fn adapt_step(&mut self, inputs: &DMatrix<f64>) -> Result<(Vec<usize>, StepLog)> {
        let arch = self.state.models.source().arch();
        if inputs.ncols() != arch.input_dim {
            return Err(Error::dim("batch", arch.input_dim, inputs.ncols()));
        }
        if inputs.nrows() < 2 {
            return Err(Error::Contract("a batch needs at least two samples".into()));
        }
        let k = self.step;
        self.step += 1;
        let mut log = StepLog::new(k, self.num_classes(), inputs.nrows());

        let mut work = self.state.clone();
        let outcome = if self.cfg.switches.adapt {
            self.adapt_on(&mut work, inputs, &mut log)
        } else {
            self.source_only(&mut work, inputs, &mut log)
        };
        match outcome {
            Ok(preds) => {
                self.state = work;
                log.frozen = self.state.calibrator.is_frozen();
                log.predictions = preds.clone();
                Ok((preds, log))
            }
            Err(e) if recoverable(&e) => {
                let mut fresh = StepLog::new(k, self.num_classes(), inputs.nrows());
                fresh.skipped = Some(e.to_string());
                fresh.frozen = self.state.calibrator.is_frozen();
                fresh.ignored = inputs.nrows();
                let preds = self
                    .predict(inputs)
                    .unwrap_or_else(|_| vec![self.num_classes(); inputs.nrows()]);
                fresh.thresholds = self.state.calibrator.thresholds();
                fresh.predictions = preds.clone();
                Ok((preds, fresh))
            }
            Err(e) => Err(e),
        }
    }

    /// Predictions from the current state without adapting.
    pub fn predict(&self, inputs: &DMatrix<f64>) -> Result<Vec<usize>> {
        let st = &self.state;
        let (tl, tu) = st
            .calibrator
            .thresholds()
            .ok_or_else(|| Error::Contract("no thresholds yet".into()))?;
        if !self.cfg.switches.adapt {
            let src = forward(st.models.source(), inputs)?;
            let scores = softmax_entropy_scores(&src.probs);
            return Ok((0..inputs.nrows())
                .map(|i| {
                    let p = row(&src.probs, i);
                    decide_inference(&p, &p, scores[i], tl, tu)
                })
                .collect());
        }
        let (_, scores, s, t) = self.scored_outputs(st, inputs)?;
        Ok(self.decide(&s, &t, &scores, tl, tu))
    }

    fn decide(
        &self,
        s: &DMatrix<f64>,
        t: &DMatrix<f64>,
        scores: &[f64],
        tl: f64,
        tu: f64,
    ) -> Vec<usize> {
        (0..s.nrows())
            .map(|i| {
                let sp = row(s, i);
                let tp = if self.cfg.switches.ensembling {
                    row(t, i)
                } else {
                    sp.clone()
                };
                decide_inference(&sp, &tp, scores[i], tl, tu)
            })
            .collect()
    }

    fn scores(&self, gmm: &GmmState, reduced: &DMatrix<f64>) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let dens = gmm.densities()?;
        let mut resp = Vec::with_capacity(reduced.nrows());
        let mut scores = Vec::with_capacity(reduced.nrows());
        for i in 0..reduced.nrows() {
            let feat = row(reduced, i);
            let r = dens.responsibilities(&feat)?;
            let score = match self.cfg.metric {
                OodMetric::Mahalanobis => score_mahalanobis(&dens, &feat)?,
                OodMetric::NormalizedEntropy => score_entropy(&r)?,
            };
            if !score.is_finite() {
                return Err(Error::numerical(
                    "ood score",
                    format!("non-finite score for sample {i}"),
                ));
            }
            resp.push(r);
            scores.push(score);
        }
        Ok((resp, scores))
    }

    /// Responsibilities, scores, student probs and teacher probs for a batch.
    #[allow(clippy::type_complexity)]
    fn scored_outputs(
        &self,
        st: &EngineState,
        inputs: &DMatrix<f64>,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let t = forward(&st.models.teacher, inputs)?;
        let s = forward(&st.models.student, inputs)?;
        let (resp, scores) = self.scores(&st.gmm, &t.reduced)?;
        Ok((resp, scores, s.probs, t.probs))
    }

    fn adapt_on(
        &self,
        st: &mut EngineState,
        inputs: &DMatrix<f64>,
        log: &mut StepLog,
    ) -> Result<Vec<usize>> {
        let n = inputs.nrows();
        let sw = self.cfg.switches;

        let teacher = forward(&st.models.teacher, inputs)?;
        st.gmm.update(&teacher.probs, &teacher.reduced)?;
        let (resp, scores) = self.scores(&st.gmm, &teacher.reduced)?;
        log.record_scores(&scores);

        if !st.calibrator.is_frozen() {
            st.calibrator.observe(&scores)?;
        }
        let (tl, tu) = st
            .calibrator
            .thresholds()
            .ok_or_else(|| Error::Contract("calibrator has no observations".into()))?;
        log.thresholds = Some((tl, tu));

        let labels: Vec<PseudoLabel> = (0..n)
            .map(|i| assign(&resp[i], scores[i], tl, tu))
            .collect();
        log.record_labels(&labels);

        let sigma: Vec<f64> = column_std(inputs)
            .iter()
            .map(|s| s * self.cfg.aug_sigma)
            .collect();
        let aug = augment_per_dim(inputs, &sigma, &mut st.rng);
        let mut both = DMatrix::zeros(2 * n, inputs.ncols());
        both.rows_mut(0, n).copy_from(inputs);
        both.rows_mut(n, n).copy_from(&aug);
        let labels2: Vec<PseudoLabel> = labels.iter().chain(labels.iter()).copied().collect();
        let source_features = features(st.models.source(), inputs)?;
        let means = st.gmm.means_matrix();
        let active = st.gmm.initialized().to_vec();

        let obj = student_objective(
            &st.models.student,
            &ObjectiveInputs {
                inputs: &both,
                labels: &labels2,
                means: &means,
                active: &active,
                source_features: &source_features,
                teacher_features: &teacher.features,
                weights: self.cfg.effective_weights(),
                reduction: self.cfg.contrastive_reduction,
            },
        )?;
        log.losses = Some(obj.parts);
        log.total_loss = Some(obj.total);

        sgd_step(&mut st.models.student, &obj.grads, &mut st.optimizer)?;
        if !st.models.student.is_finite() {
            return Err(Error::numerical(
                "sgd_step",
                "student parameters became non-finite",
            ));
        }
        if sw.mean_teacher {
            st.models.ema_update()?;
        } else {
            st.models.sync_teacher();
        }

        if sw.predict_after_update {
            let (_, post_scores, s, t) = self.scored_outputs(st, inputs)?;
            log.scores = post_scores;
            Ok(self.decide(&s, &t, &log.scores, tl, tu))
        } else {
            let s = obj.trace.probs.rows(0, n).into_owned();
            log.scores = scores;
            Ok(self.decide(&s, &teacher.probs, &log.scores, tl, tu))
        }
    }

    fn source_only(
        &self,
        st: &mut EngineState,
        inputs: &DMatrix<f64>,
        log: &mut StepLog,
    ) -> Result<Vec<usize>> {
        let src = forward(st.models.source(), inputs)?;
        let scores = softmax_entropy_scores(&src.probs);
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::numerical("source-only", "non-finite entropy score"));
        }
        log.record_scores(&scores);
        if !st.calibrator.is_frozen() {
            st.calibrator.observe(&scores)?;
        }
        let (tl, tu) = st
            .calibrator
            .thresholds()
            .ok_or_else(|| Error::Contract("calibrator has no observations".into()))?;
        log.thresholds = Some((tl, tu));
        let mut preds = Vec::with_capacity(inputs.nrows());
        for (i, &score) in scores.iter().enumerate() {
            let p = row(&src.probs, i);
            log.record_labels(&[assign(&p, score, tl, tu)]);
            preds.push(decide_inference(&p, &p, score, tl, tu));
        }
        log.scores = scores;
        Ok(preds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: ScenarioKind,
    pub metric: MetricKind,
    pub num_batches: usize,
    pub skipped_steps: usize,
    pub source_accuracy: f64,
    pub per_domain: Vec<DomainMetric>,
    /// Unweighted mean over domains; absent for an empty stream.
    pub average: Option<f64>,
    pub thresholds: Option<(f64, f64)>,
    #[serde(skip)]
    pub steps: Vec<StepLog>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Independent RNG streams derived from one run seed.
pub fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_INIT: u64 = 1;
const STREAM_ENGINE: u64 = 2;

/// Builds and pretrains the source model for a scenario. Depends only on
/// the scenario, the architecture and the pretraining settings.
pub fn source_model(cfg: &EngineConfig, scenario: &ScenarioConfig) -> Result<(ParamSet, f64)> {
    cfg.validate()?;
    let (data, _) = make_scenario(scenario)?;
    let arch = cfg.arch(scenario.input_dim, scenario.split.num_source())?;
    let mut rng = sub_rng(scenario.seed, STREAM_INIT);
    let net = ParamSet::init(&arch, &mut rng);
    pretrain_source(net, &data, &cfg.pretrain, &mut rng)
}

/// Runs one engine over the scenario stream with a given source model.
pub fn run_with_source(
    cfg: &EngineConfig,
    scenario: &ScenarioConfig,
    source: ParamSet,
    source_accuracy: f64,
) -> Result<RunReport> {
    let (_, stream) = make_scenario(scenario)?;
    let num_known = scenario.split.num_source();
    let mut engine = Engine::new(
        cfg.clone(),
        source,
        sub_rng(scenario.seed, STREAM_ENGINE).random(),
    )?;
    let mut acc = MetricsAccumulator::new(num_known);
    let mut steps = Vec::with_capacity(stream.total_batches());
    for (k, batch) in stream.enumerate() {
        let (preds, mut log) = engine.adapt_step(&batch.inputs).map_err(|e| match e {
            Error::Numerical { context, detail } => Error::Numerical {
                context,
                detail: format!("batch {k}: {detail}"),
            },
            Error::Contract(m) => Error::Contract(format!("batch {k}: {m}")),
            other => other,
        })?;
        acc.record_batch(&preds, &batch.true_labels, batch.domain_id);
        log.domain_id = batch.domain_id;
        steps.push(log);
    }
    let metric = MetricKind::for_scenario(scenario.kind);
    let (per_domain, average) = if acc.is_empty() {
        (Vec::new(), None)
    } else {
        let s = per_domain_average(&acc, scenario.kind)?;
        (s.per_domain, Some(s.average))
    };
    Ok(RunReport {
        scenario: scenario.kind,
        metric,
        num_batches: steps.len(),
        skipped_steps: steps.iter().filter(|s| s.skipped.is_some()).count(),
        source_accuracy,
        per_domain,
        average,
        thresholds: engine.state().calibrator.thresholds(),
        steps,
    })
}

/// Pretrains the source model, then adapts over the whole stream once.
pub fn run(cfg: &EngineConfig, scenario: &ScenarioConfig) -> Result<RunReport> {
    let (source, acc) = source_model(cfg, scenario)?;
    run_with_source(cfg, scenario, source, acc)
}
