//! Deferral-curve construction, AUC-DF, oracle and random baselines,
//! validation-based quantile selection, golden-label AUC-ROC, and
//! length-bias diagnostics.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::scores::{score_dataset, ScoreLabel, ScoreRule, ScoreVector};
use crate::trace::{Costs, Dataset, Split};

/// One point of the deferral curve: the fraction of examples sent to the
/// large model, and the average quality of the resulting cascade.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub deferral_rate: f64,
    pub cascade_quality: f64,
}

/// Cascade quality as a function of deferral rate, over the N+1 achievable
/// rates, plus its trapezoidal area.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeferralCurve {
    pub points: Vec<CurvePoint>,
    pub auc_df: f64,
}

/// Expected cost at a deferral rate: c1 + rate * c2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostPoint {
    pub deferral_rate: f64,
    pub expected_cost: f64,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("score vector has {scores} values but dataset has {examples} examples")]
    SizeMismatch { scores: usize, examples: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("no candidate alphas supplied")]
    EmptyAlphas,
    #[error("quantile alpha {0} must lie in [0, 1]")]
    InvalidAlpha(f64),
    #[error("golden labels are all identical; AUC-ROC is undefined")]
    DegenerateLabels,
    #[error("golden labels require an accuracy task (or explicit labels)")]
    NotAccuracyTask,
    #[error("labels and scores have different lengths ({labels} vs {scores})")]
    LabelSizeMismatch { labels: usize, scores: usize },
}

/// Examples sorted by score ascending, ties broken by dataset index
/// ascending. This is the deferral order: lowest score goes first.
fn deferral_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order
}

/// Build the deferral curve of a score vector over all N+1 achievable
/// deferral rates: at rate k/N the k lowest-scoring examples are answered by
/// the large model, the rest by the small one. The AUC is the trapezoidal
/// integral of quality over rate in [0, 1].
pub fn deferral_curve(dataset: &Dataset, scores: &ScoreVector) -> Result<DeferralCurve, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if scores.values.len() != dataset.len() {
        return Err(EvalError::SizeMismatch {
            scores: scores.values.len(),
            examples: dataset.len(),
        });
    }
    let n = dataset.len();
    let order = deferral_order(&scores.values);

    // prefix_large[k]: sum of large quality over the k first-deferred
    // examples, accumulated in deferral order.
    let mut prefix_large = vec![0.0; n + 1];
    for k in 0..n {
        prefix_large[k + 1] = prefix_large[k] + dataset.examples[order[k]].large_quality;
    }
    // suffix_small[k]: sum of small quality over the examples still answered
    // by the small model, accumulated from the highest-scoring end.
    let mut suffix_small = vec![0.0; n + 1];
    for k in (0..n).rev() {
        suffix_small[k] = dataset.examples[order[k]].small_quality + suffix_small[k + 1];
    }

    let nf = n as f64;
    let points: Vec<CurvePoint> = (0..=n)
        .map(|k| CurvePoint {
            deferral_rate: k as f64 / nf,
            cascade_quality: (prefix_large[k] + suffix_small[k]) / nf,
        })
        .collect();
    let auc_df = trapezoid_auc(&points);
    Ok(DeferralCurve { points, auc_df })
}

/// Trapezoidal integral of quality over deferral rate.
pub fn trapezoid_auc(points: &[CurvePoint]) -> f64 {
    let mut auc = 0.0;
    for pair in points.windows(2) {
        auc += (pair[1].deferral_rate - pair[0].deferral_rate)
            * (pair[0].cascade_quality + pair[1].cascade_quality)
            / 2.0;
    }
    auc
}

/// Upper-bound curve: defer by the true quality gain of the large model,
/// largest improvement first.
pub fn oracle_curve(dataset: &Dataset) -> Result<DeferralCurve, EvalError> {
    let scores = ScoreVector {
        label: ScoreLabel::Oracle,
        values: dataset.examples.iter().map(|e| -e.quality_gain()).collect(),
    };
    deferral_curve(dataset, &scores)
}

/// AUC-DF of deferring uniformly at random: the expected curve is the line
/// (1-r) * mean_small + r * mean_large, whose exact area is the midpoint.
pub fn random_baseline_auc(dataset: &Dataset) -> Result<f64, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    Ok((dataset.mean_small_quality() + dataset.mean_large_quality()) / 2.0)
}

/// The random-baseline expected curve on the same rate grid as
/// [`deferral_curve`], for export alongside rule curves.
pub fn random_baseline_curve(dataset: &Dataset) -> Result<DeferralCurve, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let n = dataset.len();
    let q1 = dataset.mean_small_quality();
    let q2 = dataset.mean_large_quality();
    let points: Vec<CurvePoint> = (0..=n)
        .map(|k| {
            let r = k as f64 / n as f64;
            CurvePoint {
                deferral_rate: r,
                cascade_quality: (1.0 - r) * q1 + r * q2,
            }
        })
        .collect();
    let auc_df = trapezoid_auc(&points);
    Ok(DeferralCurve { points, auc_df })
}

/// Expected cost at each deferral rate on a k/n grid: c1 + rate * c2.
pub fn cost_curve(costs: &Costs, n: usize) -> Vec<CostPoint> {
    (0..=n)
        .map(|k| {
            let rate = k as f64 / n as f64;
            CostPoint {
                deferral_rate: rate,
                expected_cost: costs.c1 + rate * costs.c2,
            }
        })
        .collect()
}

/// Pick the quantile rule with the highest AUC-DF on the validation split.
/// Ties go to the smallest alpha.
pub fn select_best_quantile(dataset: &Dataset, alphas: &[f64]) -> Result<ScoreRule, EvalError> {
    if alphas.is_empty() {
        return Err(EvalError::EmptyAlphas);
    }
    for &a in alphas {
        if !(0.0..=1.0).contains(&a) {
            return Err(EvalError::InvalidAlpha(a));
        }
    }
    let validation = dataset.subset(Split::Validation);
    if validation.is_empty() {
        return Err(EvalError::EmptyValidation);
    }
    let mut candidates = alphas.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut best: Option<(f64, f64)> = None; // (alpha, auc)
    for alpha in candidates {
        let rule = ScoreRule::ChowQuantile { alpha };
        let curve = deferral_curve(&validation, &score_dataset(&validation, &rule))?;
        match best {
            Some((_, best_auc)) if curve.auc_df <= best_auc => {}
            _ => best = Some((alpha, curve.auc_df)),
        }
    }
    let (alpha, _) = best.expect("non-empty candidates");
    Ok(ScoreRule::ChowQuantile { alpha })
}

/// Golden deferral labels for an accuracy task: 1 iff the large model is
/// correct and the small model is not.
pub fn golden_labels(dataset: &Dataset) -> Result<Vec<bool>, EvalError> {
    if dataset.task_kind != crate::trace::TaskKind::Accuracy {
        return Err(EvalError::NotAccuracyTask);
    }
    Ok(dataset
        .examples
        .iter()
        .map(|e| e.large_quality == 1.0 && e.small_quality == 0.0)
        .collect())
}

/// AUC-ROC of a predictor against binary labels, computed with the
/// Mann-Whitney rank statistic; tied predictor values contribute 1/2.
pub fn auc_roc(labels: &[bool], predictor: &[f64]) -> Result<f64, EvalError> {
    if labels.len() != predictor.len() {
        return Err(EvalError::LabelSizeMismatch {
            labels: labels.len(),
            scores: predictor.len(),
        });
    }
    let n = labels.len();
    let positives = labels.iter().filter(|&&z| z).count();
    let negatives = n - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::DegenerateLabels);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| predictor[a].total_cmp(&predictor[b]));

    // Average 1-based ranks over tie groups, then sum ranks of positives.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && predictor[order[j + 1]] == predictor[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let q = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// AUC-ROC of the deferral score for predicting the golden labels.
///
/// A deferral score defers *low* values first, so the predictor for the
/// positive (defer-benefit) class is the negated score.
pub fn golden_label_auc_roc(dataset: &Dataset, scores: &ScoreVector) -> Result<f64, EvalError> {
    if scores.values.len() != dataset.len() {
        return Err(EvalError::SizeMismatch {
            scores: scores.values.len(),
            examples: dataset.len(),
        });
    }
    let labels = golden_labels(dataset)?;
    let predictor: Vec<f64> = scores.values.iter().map(|s| -s).collect();
    auc_roc(&labels, &predictor)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    if x.is_empty() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}

/// Length statistics for one rule: correlation of its scores with output
/// length, and the mean output length within each score decile (scores are
/// first converted to quantile ranks so deciles are comparable across rules).
#[derive(Clone, Debug, Serialize)]
pub struct RuleLengthStats {
    pub rule: String,
    pub score_length_pearson: Option<f64>,
    pub decile_mean_lengths: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LengthBiasReport {
    pub per_rule: Vec<RuleLengthStats>,
    /// Correlation of the large-over-small quality gain with output length.
    pub gain_length_pearson: Option<f64>,
}

/// Quantile rank in [0, 1] of each value within its own vector, ties
/// averaged.
fn quantile_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 1 {
        return vec![0.0];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg_rank / (n - 1) as f64;
        }
        i = j + 1;
    }
    ranks
}

/// Diagnose how each rule's scores relate to output length.
pub fn length_bias_report(
    dataset: &Dataset,
    rules: &[ScoreRule],
) -> Result<LengthBiasReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let lengths: Vec<f64> = dataset.examples.iter().map(|e| e.len() as f64).collect();
    let gains: Vec<f64> = dataset.examples.iter().map(|e| e.quality_gain()).collect();

    let mut per_rule = Vec::with_capacity(rules.len());
    for rule in rules {
        let scores = score_dataset(dataset, rule);
        let ranks = quantile_ranks(&scores.values);
        let mut sums = [0.0; 10];
        let mut counts = [0usize; 10];
        for (rank, len) in ranks.iter().zip(&lengths) {
            let decile = ((rank * 10.0).floor() as usize).min(9);
            sums[decile] += len;
            counts[decile] += 1;
        }
        let decile_mean_lengths = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c == 0 { None } else { Some(s / c as f64) })
            .collect();
        per_rule.push(RuleLengthStats {
            rule: rule.to_string(),
            score_length_pearson: pearson(&scores.values, &lengths),
            decile_mean_lengths,
        });
    }
    Ok(LengthBiasReport {
        per_rule,
        gain_length_pearson: pearson(&gains, &lengths),
    })
}

/// Mean token probability by position: entry i averages exp(logprob_i) over
/// the examples whose output is longer than i tokens.
pub fn token_position_profile(dataset: &Dataset) -> Vec<f64> {
    let max_len = dataset.examples.iter().map(|e| e.len()).max().unwrap_or(0);
    let mut sums = vec![0.0; max_len];
    let mut counts = vec![0usize; max_len];
    for e in &dataset.examples {
        for (i, &lp) in e.token_logprobs.iter().enumerate() {
            sums[i] += lp.exp();
            counts[i] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| s / c as f64)
        .collect()
}

/// Write a curve as CSV: a header, one `rate,quality` row per point, and an
/// AUC footer comment. Numbers use the shortest decimal form that parses
/// back to the same f64.
pub fn write_curve(curve: &DeferralCurve, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "deferral_rate,cascade_quality")?;
    for p in &curve.points {
        writeln!(out, "{},{}", p.deferral_rate, p.cascade_quality)?;
    }
    writeln!(out, "# auc_df={}", curve.auc_df)
}

pub fn export_curve(curve: &DeferralCurve, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_curve(curve, &mut out)?;
    out.flush()
}

#[derive(Debug, Error)]
pub enum CurveParseError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("missing `deferral_rate,cascade_quality` header")]
    MissingHeader,
    #[error("missing `# auc_df=` footer")]
    MissingFooter,
}

/// Parse a curve written by [`write_curve`]; the round-trip is lossless.
pub fn parse_curve(text: &str) -> Result<DeferralCurve, CurveParseError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(CurveParseError::MissingHeader)?;
    if header.trim() != "deferral_rate,cascade_quality" {
        return Err(CurveParseError::MissingHeader);
    }
    let mut points = Vec::new();
    let mut auc_df = None;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# auc_df=") {
            auc_df = Some(
                rest.parse::<f64>()
                    .map_err(|e| CurveParseError::Malformed {
                        line: line_no,
                        msg: e.to_string(),
                    })?,
            );
            continue;
        }
        let (rate, quality) = line
            .split_once(',')
            .ok_or_else(|| CurveParseError::Malformed {
                line: line_no,
                msg: "expected `rate,quality`".to_string(),
            })?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CurveParseError::Malformed {
                    line: line_no,
                    msg: e.to_string(),
                })
        };
        points.push(CurvePoint {
            deferral_rate: parse(rate)?,
            cascade_quality: parse(quality)?,
        });
    }
    let auc_df = auc_df.ok_or(CurveParseError::MissingFooter)?;
    Ok(DeferralCurve { points, auc_df })
}
