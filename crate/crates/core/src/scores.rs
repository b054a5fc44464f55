//! Non-learned deferral score functions over a trace's per-token
//! log-probabilities: the sequence log-probability, its length-normalized
//! average, and order-statistic quantiles.
//!
//! All functions here are pure; scoring a dataset twice yields bitwise
//! identical vectors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{Dataset, ExampleTrace};

/// A non-learned scoring rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreRule {
    ChowSum,
    ChowAverage,
    ChowQuantile { alpha: f64 },
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("quantile alpha {0} must lie in [0, 1]")]
    InvalidAlpha(f64),
    #[error("unknown rule name `{0}` (expected chow-sum, chow-average, or chow-quantile@<alpha>)")]
    UnknownRule(String),
}

impl ScoreRule {
    pub fn chow_quantile(alpha: f64) -> Result<Self, ScoreError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(ScoreError::InvalidAlpha(alpha));
        }
        Ok(ScoreRule::ChowQuantile { alpha })
    }
}

impl fmt::Display for ScoreRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreRule::ChowSum => write!(f, "chow-sum"),
            ScoreRule::ChowAverage => write!(f, "chow-average"),
            ScoreRule::ChowQuantile { alpha } => write!(f, "chow-quantile@{alpha}"),
        }
    }
}

impl FromStr for ScoreRule {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, ScoreError> {
        match s {
            "chow-sum" => Ok(ScoreRule::ChowSum),
            "chow-average" => Ok(ScoreRule::ChowAverage),
            _ => {
                if let Some(alpha) = s.strip_prefix("chow-quantile@") {
                    let alpha: f64 = alpha
                        .parse()
                        .map_err(|_| ScoreError::UnknownRule(s.to_string()))?;
                    ScoreRule::chow_quantile(alpha)
                } else {
                    Err(ScoreError::UnknownRule(s.to_string()))
                }
            }
        }
    }
}

/// What produced a score vector. Curve construction only needs the values;
/// the label names table rows and exported files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScoreLabel {
    Rule(ScoreRule),
    Oracle,
    Named(String),
}

impl fmt::Display for ScoreLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreLabel::Rule(rule) => rule.fmt(f),
            ScoreLabel::Oracle => write!(f, "oracle"),
            ScoreLabel::Named(name) => write!(f, "{name}"),
        }
    }
}

/// Per-example deferral scores aligned with dataset order. Lower score means
/// deferred earlier.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub label: ScoreLabel,
    pub values: Vec<f64>,
}

/// Sum of per-token log-probabilities: the log-probability of the whole
/// output sequence.
pub fn chow_sum(t: &ExampleTrace) -> f64 {
    t.token_logprobs.iter().sum()
}

/// Length-normalized sequence log-probability.
pub fn chow_average(t: &ExampleTrace) -> f64 {
    chow_sum(t) / t.len() as f64
}

/// Alpha-quantile of the per-token log-probabilities, with linear
/// interpolation between order statistics. `alpha = 0` is the minimum,
/// `alpha = 1` the maximum.
pub fn chow_quantile(t: &ExampleTrace, alpha: f64) -> f64 {
    let mut sorted = t.token_logprobs.clone();
    sorted.sort_by(f64::total_cmp);
    quantile_of_sorted(&sorted, alpha)
}

/// Linear-interpolation quantile of an ascending-sorted non-empty slice:
/// h = alpha * (n - 1), v[floor(h)] + frac(h) * (v[floor(h)+1] - v[floor(h)]).
pub fn quantile_of_sorted(sorted: &[f64], alpha: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=1.0).contains(&alpha));
    let n = sorted.len();
    let h = alpha * (n - 1) as f64;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Score one trace under a rule.
pub fn score_trace(t: &ExampleTrace, rule: &ScoreRule) -> f64 {
    match rule {
        ScoreRule::ChowSum => chow_sum(t),
        ScoreRule::ChowAverage => chow_average(t),
        ScoreRule::ChowQuantile { alpha } => chow_quantile(t, *alpha),
    }
}

/// Score every example, preserving dataset order.
pub fn score_dataset(dataset: &Dataset, rule: &ScoreRule) -> ScoreVector {
    ScoreVector {
        label: ScoreLabel::Rule(*rule),
        values: dataset
            .examples
            .iter()
            .map(|t| score_trace(t, rule))
            .collect(),
    }
}
