//! Known/unknown accuracies, H-score and the per-domain averaging protocol.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::ScenarioKind;
use crate::error::{Error, Result};

/// Two-bucket counts for one domain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub known_total: u64,
    pub known_correct: u64,
    pub unknown_total: u64,
    pub unknown_correct: u64,
}

impl Bucket {
    pub fn known_accuracy(&self) -> f64 {
        ratio(self.known_correct, self.known_total)
    }

    pub fn unknown_accuracy(&self) -> f64 {
        ratio(self.unknown_correct, self.unknown_total)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accumulates predictions per domain. Classes `0..num_known` are the source
/// (known) classes; index `num_known` is the unknown label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    num_known: usize,
    domains: BTreeMap<usize, Bucket>,
}

impl MetricsAccumulator {
    pub fn new(num_known: usize) -> Self {
        MetricsAccumulator {
            num_known,
            domains: BTreeMap::new(),
        }
    }

    pub fn unknown_label(&self) -> usize {
        self.num_known
    }

    pub fn record(&mut self, prediction: usize, truth: usize, domain_id: usize) {
        let b = self.domains.entry(domain_id).or_default();
        if truth < self.num_known {
            b.known_total += 1;
            b.known_correct += u64::from(prediction == truth);
        } else {
            b.unknown_total += 1;
            b.unknown_correct += u64::from(prediction == self.num_known);
        }
    }

    pub fn record_batch(&mut self, predictions: &[usize], truths: &[usize], domain_id: usize) {
        for (&p, &t) in predictions.iter().zip(truths) {
            self.record(p, t, domain_id);
        }
    }

    pub fn domains(&self) -> &BTreeMap<usize, Bucket> {
        &self.domains
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }
}

/// Harmonic mean of known and unknown accuracy, 0 when both are 0.
pub fn h_score(acc_k: f64, acc_u: f64) -> f64 {
    if acc_k + acc_u == 0.0 {
        0.0
    } else if acc_k == acc_u {
        acc_k
    } else {
        2.0 * acc_k * acc_u / (acc_k + acc_u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    HScore,
}

impl MetricKind {
    pub fn for_scenario(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::Pda => MetricKind::Accuracy,
            ScenarioKind::Oda | ScenarioKind::Opda => MetricKind::HScore,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::HScore => "h_score",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetric {
    pub domain_id: usize,
    pub known_accuracy: f64,
    pub unknown_accuracy: f64,
    pub value: f64,
    pub counts: Bucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub metric: MetricKind,
    pub per_domain: Vec<DomainMetric>,
    /// Unweighted mean of the per-domain values.
    pub average: f64,
}

/// Per-domain metric (accuracy for PDA, H-score otherwise), then the
/// unweighted mean over domains.
pub fn per_domain_average(
    acc: &MetricsAccumulator,
    scenario: ScenarioKind,
) -> Result<DomainSummary> {
    if acc.is_empty() {
        return Err(Error::Contract("no domain has been recorded".into()));
    }
    let metric = MetricKind::for_scenario(scenario);
    let mut per_domain = Vec::with_capacity(acc.domains.len());
    for (&domain_id, b) in &acc.domains {
        if metric == MetricKind::Accuracy && b.unknown_total > 0 {
            return Err(Error::Contract(format!(
                "PDA domain {domain_id} has {} samples of unknown classes",
                b.unknown_total
            )));
        }
        let (ak, au) = (b.known_accuracy(), b.unknown_accuracy());
        let value = match metric {
            MetricKind::Accuracy => ak,
            MetricKind::HScore => h_score(ak, au),
        };
        per_domain.push(DomainMetric {
            domain_id,
            known_accuracy: ak,
            unknown_accuracy: au,
            value,
            counts: *b,
        });
    }
    let average = per_domain.iter().map(|d| d.value).sum::<f64>() / per_domain.len() as f64;
    Ok(DomainSummary {
        metric,
        per_domain,
        average,
    })
}
