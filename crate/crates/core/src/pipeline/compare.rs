//! Paired model comparison over per-lesion scores.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::eval::EvalRecord;
use super::PipelineError;
use crate::stats::{paired_ttest, StatsError, TestResult};

pub const DEFAULT_ALPHA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dice,
    Robustness,
}

impl Metric {
    pub fn value(self, r: &EvalRecord) -> Option<f64> {
        match self {
            Metric::Dice => Some(r.dice),
            Metric::Robustness => r.robustness,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Dice => "dice",
            Metric::Robustness => "robustness",
        })
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dice" => Ok(Metric::Dice),
            "robustness" => Ok(Metric::Robustness),
            other => Err(format!("unknown metric '{other}'")),
        }
    }
}

/// One paired test of model B against model A on one dataset and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonOutcome {
    pub comparison_id: String,
    pub dataset: String,
    pub metric: Metric,
    pub model_a: String,
    pub model_b: String,
    pub n_pairs: usize,
    /// Pairs dropped because either record is flagged failed.
    pub n_excluded_failed: usize,
    pub alpha: f64,
    pub m_comparisons: usize,
    /// `None` when the test is degenerate.
    pub result: Option<TestResult>,
    pub degenerate: Option<String>,
    pub significant: bool,
}

fn model_of(records: &[EvalRecord]) -> String {
    let ids: BTreeSet<&str> = records.iter().map(|r| r.model_id.as_str()).collect();
    ids.into_iter().collect::<Vec<_>>().join("+")
}

/// Paired two-tailed t-tests of `b` against `a`, one per (dataset, metric),
/// pairing records by lesion id. Differences are `b - a`. P values are
/// Bonferroni-adjusted with `m_comparisons`, defaulting to the number of
/// tests in this call.
pub fn compare_models(
    a: &[EvalRecord],
    b: &[EvalRecord],
    metrics: &[Metric],
    m_comparisons: Option<usize>,
    alpha: f64,
) -> Result<Vec<ComparisonOutcome>, PipelineError> {
    let index = |rs: &[EvalRecord]| -> BTreeMap<String, EvalRecord> {
        rs.iter().map(|r| (r.lesion_id.clone(), r.clone())).collect()
    };
    let (ia, ib) = (index(a), index(b));
    let only_a: Vec<String> = ia.keys().filter(|k| !ib.contains_key(*k)).cloned().collect();
    let only_b: Vec<String> = ib.keys().filter(|k| !ia.contains_key(*k)).cloned().collect();
    if !only_a.is_empty() || !only_b.is_empty() || ia.len() != a.len() || ib.len() != b.len() {
        return Err(PipelineError::PairingMismatch { only_a, only_b });
    }
    let metrics: BTreeSet<Metric> = metrics.iter().copied().collect();
    for &metric in &metrics {
        if ia.values().chain(ib.values()).any(|r| metric.value(r).is_none()) {
            return Err(PipelineError::MissingMetric(metric.to_string()));
        }
    }

    let mut by_dataset: BTreeMap<&str, Vec<(&EvalRecord, &EvalRecord)>> = BTreeMap::new();
    for (id, ra) in &ia {
        by_dataset.entry(ra.dataset.as_str()).or_default().push((ra, &ib[id]));
    }
    let m = m_comparisons.unwrap_or(by_dataset.len() * metrics.len()).max(1);
    let (model_a, model_b) = (model_of(a), model_of(b));

    let mut out = Vec::new();
    for (dataset, pairs) in &by_dataset {
        let kept: Vec<_> = pairs.iter().filter(|(x, y)| !x.is_failed() && !y.is_failed()).collect();
        for &metric in &metrics {
            let xb: Vec<f64> = kept.iter().map(|(_, rb)| metric.value(rb).unwrap()).collect();
            let ya: Vec<f64> = kept.iter().map(|(ra, _)| metric.value(ra).unwrap()).collect();
            let id = format!("{dataset}/{metric}: {model_b} vs {model_a}");
            let (result, degenerate) = match paired_ttest(&xb, &ya) {
                Ok(r) => (Some(r.with_bonferroni(m).with_id(id.clone())), None),
                Err(e @ (StatsError::ZeroVariance { .. } | StatsError::TooFewPairs(_))) => (None, Some(e.to_string())),
                Err(e) => return Err(PipelineError::InvalidArgument(e.to_string())),
            };
            let significant = result.as_ref().is_some_and(|r| r.p_adjusted < alpha);
            out.push(ComparisonOutcome {
                comparison_id: id,
                dataset: dataset.to_string(),
                metric,
                model_a: model_a.clone(),
                model_b: model_b.clone(),
                n_pairs: kept.len(),
                n_excluded_failed: pairs.len() - kept.len(),
                alpha,
                m_comparisons: m,
                result,
                degenerate,
                significant,
            });
        }
    }
    Ok(out)
}
