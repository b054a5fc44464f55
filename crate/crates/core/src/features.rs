//! Feature vectors for learned deferral rules.
//!
//! The base representation of a trace is a 22-wide vector: its sequence
//! log-probability, the length-normalized average, and twenty quantiles of
//! the per-token log-probabilities. Embedding variants append the small
//! model's averaged decoder embedding (n1 columns) and the large model's
//! first-token intermediate embedding (n2 columns). Two ablation variants
//! use the raw log-probability vector right-padded with zeros, unsorted or
//! sorted.
//!
//! Note the padding value: 0 is log(1), i.e. a maximally confident token.
//! It is kept anyway because the padded variants exist precisely to show
//! that quantiles align variable-length sequences better than padding does.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::scores::{chow_average, chow_sum, quantile_of_sorted};
use crate::trace::{Dataset, Split};

/// The quantile grid used for features and the default rule sweep:
/// 0 through 0.1 in steps of 0.01, then 0.2 through 1.0 in steps of 0.1.
/// Exactly 20 values.
pub fn canonical_alphas() -> Vec<f64> {
    let mut alphas: Vec<f64> = (0..=10).map(|i| i as f64 / 100.0).collect();
    alphas.extend((2..=10).map(|i| i as f64 / 10.0));
    alphas
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureVariant {
    Quantile,
    Embed1,
    Embed12,
    PaddedProb,
    SortedPaddedProb,
}

impl FeatureVariant {
    pub fn cli_name(&self) -> &'static str {
        match self {
            FeatureVariant::Quantile => "quantile",
            FeatureVariant::Embed1 => "embed1",
            FeatureVariant::Embed12 => "embed12",
            FeatureVariant::PaddedProb => "padded-prob",
            FeatureVariant::SortedPaddedProb => "sorted-padded-prob",
        }
    }
}

impl fmt::Display for FeatureVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for FeatureVariant {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, FeatureError> {
        match s {
            "quantile" => Ok(FeatureVariant::Quantile),
            "embed1" => Ok(FeatureVariant::Embed1),
            "embed12" => Ok(FeatureVariant::Embed12),
            "padded-prob" => Ok(FeatureVariant::PaddedProb),
            "sorted-padded-prob" => Ok(FeatureVariant::SortedPaddedProb),
            _ => Err(FeatureError::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("unknown feature variant `{0}`")]
    UnknownVariant(String),
    #[error("example `{id}` is missing its {field} embedding")]
    MissingEmbedding { id: String, field: &'static str },
    #[error("example `{id}` has {field} embedding of dimension {found}, expected {expected}")]
    EmbeddingDimMismatch {
        id: String,
        field: &'static str,
        found: usize,
        expected: usize,
    },
    #[error("example `{id}` has {len} tokens, longer than pad length {pad_length}")]
    TraceTooLong {
        id: String,
        len: usize,
        pad_length: usize,
    },
    #[error("variant `{0}` requires a pad length")]
    MissingPadLength(FeatureVariant),
    #[error("variant `{variant}` requires embedding dimension {field}")]
    MissingEmbeddingDim {
        variant: FeatureVariant,
        field: &'static str,
    },
    #[error("dataset has no examples to derive a feature spec from")]
    EmptyDataset,
    #[error("cannot fit a normalizer on an empty row set")]
    EmptyFit,
    #[error("normalizer has {norm} columns but matrix has {matrix}")]
    NormalizerWidthMismatch { norm: usize, matrix: usize },
    #[error("quantile alpha {0} must lie in [0, 1]")]
    InvalidAlpha(f64),
}

/// Layout description for a feature matrix: which variant, the quantile
/// grid, and the padding/embedding dimensions the variant needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub variant: FeatureVariant,
    pub alphas: Vec<f64>,
    pub pad_length: Option<usize>,
    pub small_embedding_dim: Option<usize>,
    pub large_embedding_dim: Option<usize>,
}

impl FeatureSpec {
    pub fn quantile() -> Self {
        Self {
            variant: FeatureVariant::Quantile,
            alphas: canonical_alphas(),
            pad_length: None,
            small_embedding_dim: None,
            large_embedding_dim: None,
        }
    }

    pub fn embed1(n1: usize) -> Self {
        Self {
            variant: FeatureVariant::Embed1,
            small_embedding_dim: Some(n1),
            ..Self::quantile()
        }
    }

    pub fn embed12(n1: usize, n2: usize) -> Self {
        Self {
            variant: FeatureVariant::Embed12,
            small_embedding_dim: Some(n1),
            large_embedding_dim: Some(n2),
            ..Self::quantile()
        }
    }

    pub fn padded(sorted: bool, pad_length: usize) -> Self {
        Self {
            variant: if sorted {
                FeatureVariant::SortedPaddedProb
            } else {
                FeatureVariant::PaddedProb
            },
            alphas: Vec::new(),
            pad_length: Some(pad_length),
            small_embedding_dim: None,
            large_embedding_dim: None,
        }
    }

    /// Derive a spec for `variant` from the dataset: embedding dimensions
    /// from the first example carrying them, pad length from the longest
    /// train-split output.
    pub fn for_dataset(variant: FeatureVariant, dataset: &Dataset) -> Result<Self, FeatureError> {
        if dataset.is_empty() {
            return Err(FeatureError::EmptyDataset);
        }
        match variant {
            FeatureVariant::Quantile => Ok(Self::quantile()),
            FeatureVariant::Embed1 => {
                let n1 = embedding_dim(dataset, "small")?;
                Ok(Self::embed1(n1))
            }
            FeatureVariant::Embed12 => {
                let n1 = embedding_dim(dataset, "small")?;
                let n2 = embedding_dim(dataset, "large_intermediate")?;
                Ok(Self::embed12(n1, n2))
            }
            FeatureVariant::PaddedProb | FeatureVariant::SortedPaddedProb => {
                let train_max = dataset
                    .examples
                    .iter()
                    .filter(|e| e.split == Split::Train)
                    .map(|e| e.len())
                    .max()
                    .unwrap_or_else(|| dataset.examples.iter().map(|e| e.len()).max().unwrap_or(0));
                Ok(Self::padded(
                    variant == FeatureVariant::SortedPaddedProb,
                    train_max,
                ))
            }
        }
    }

    /// Total feature width for this spec.
    pub fn width(&self) -> Result<usize, FeatureError> {
        match self.variant {
            FeatureVariant::Quantile => Ok(2 + self.alphas.len()),
            FeatureVariant::Embed1 => {
                let n1 = self
                    .small_embedding_dim
                    .ok_or(FeatureError::MissingEmbeddingDim {
                        variant: self.variant,
                        field: "n1",
                    })?;
                Ok(2 + self.alphas.len() + n1)
            }
            FeatureVariant::Embed12 => {
                let n1 = self
                    .small_embedding_dim
                    .ok_or(FeatureError::MissingEmbeddingDim {
                        variant: self.variant,
                        field: "n1",
                    })?;
                let n2 = self
                    .large_embedding_dim
                    .ok_or(FeatureError::MissingEmbeddingDim {
                        variant: self.variant,
                        field: "n2",
                    })?;
                Ok(2 + self.alphas.len() + n1 + n2)
            }
            FeatureVariant::PaddedProb | FeatureVariant::SortedPaddedProb => self
                .pad_length
                .ok_or(FeatureError::MissingPadLength(self.variant)),
        }
    }
}

fn embedding_dim(dataset: &Dataset, field: &'static str) -> Result<usize, FeatureError> {
    let pick = |e: &crate::trace::ExampleTrace| match field {
        "small" => e.small_embedding.as_ref().map(Vec::len),
        _ => e.large_intermediate_embedding.as_ref().map(Vec::len),
    };
    dataset
        .examples
        .iter()
        .find_map(pick)
        .ok_or(FeatureError::MissingEmbedding {
            id: dataset
                .examples
                .first()
                .map(|e| e.id.clone())
                .unwrap_or_default(),
            field,
        })
}

/// Per-column standardization statistics fitted on train rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub columns: Vec<ColumnStats>,
}

/// Columns with population std below this are treated as constant and only
/// mean-centered, never divided.
pub const DEGENERATE_STD: f64 = 1e-12;

/// Per-example feature rows, aligned with dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub spec: FeatureSpec,
    pub data: Matrix,
    /// Statistics the rows have been standardized with, if any.
    pub normalization: Option<Normalizer>,
}

/// Build the feature matrix for every example in the dataset.
pub fn build_features(
    dataset: &Dataset,
    spec: &FeatureSpec,
) -> Result<FeatureMatrix, FeatureError> {
    for &a in &spec.alphas {
        if !(0.0..=1.0).contains(&a) {
            return Err(FeatureError::InvalidAlpha(a));
        }
    }
    let width = spec.width()?;
    let mut data = Matrix::zeros(dataset.len(), width);
    for (i, example) in dataset.examples.iter().enumerate() {
        let row = data.row_mut(i);
        match spec.variant {
            FeatureVariant::Quantile => {
                fill_quantile_features(example, &spec.alphas, row);
            }
            FeatureVariant::Embed1 => {
                let base = 2 + spec.alphas.len();
                fill_quantile_features(example, &spec.alphas, &mut row[..base]);
                let n1 = spec.small_embedding_dim.expect("checked by width()");
                copy_embedding(
                    example,
                    &example.small_embedding,
                    "small",
                    n1,
                    &mut row[base..],
                )?;
            }
            FeatureVariant::Embed12 => {
                let base = 2 + spec.alphas.len();
                fill_quantile_features(example, &spec.alphas, &mut row[..base]);
                let n1 = spec.small_embedding_dim.expect("checked by width()");
                let n2 = spec.large_embedding_dim.expect("checked by width()");
                copy_embedding(
                    example,
                    &example.small_embedding,
                    "small",
                    n1,
                    &mut row[base..base + n1],
                )?;
                copy_embedding(
                    example,
                    &example.large_intermediate_embedding,
                    "large_intermediate",
                    n2,
                    &mut row[base + n1..],
                )?;
            }
            FeatureVariant::PaddedProb | FeatureVariant::SortedPaddedProb => {
                let pad_length = spec.pad_length.expect("checked by width()");
                if example.len() > pad_length {
                    return Err(FeatureError::TraceTooLong {
                        id: example.id.clone(),
                        len: example.len(),
                        pad_length,
                    });
                }
                let mut logprobs = example.token_logprobs.clone();
                if spec.variant == FeatureVariant::SortedPaddedProb {
                    logprobs.sort_by(f64::total_cmp);
                }
                row[..logprobs.len()].copy_from_slice(&logprobs);
                // remaining entries stay 0 = log(1)
            }
        }
    }
    Ok(FeatureMatrix {
        spec: spec.clone(),
        data,
        normalization: None,
    })
}

fn fill_quantile_features(example: &crate::trace::ExampleTrace, alphas: &[f64], row: &mut [f64]) {
    row[0] = chow_sum(example);
    row[1] = chow_average(example);
    let mut sorted = example.token_logprobs.clone();
    sorted.sort_by(f64::total_cmp);
    for (k, &alpha) in alphas.iter().enumerate() {
        row[2 + k] = quantile_of_sorted(&sorted, alpha);
    }
}

fn copy_embedding(
    example: &crate::trace::ExampleTrace,
    embedding: &Option<Vec<f64>>,
    field: &'static str,
    expected: usize,
    out: &mut [f64],
) -> Result<(), FeatureError> {
    let values = embedding
        .as_ref()
        .ok_or_else(|| FeatureError::MissingEmbedding {
            id: example.id.clone(),
            field,
        })?;
    if values.len() != expected {
        return Err(FeatureError::EmbeddingDimMismatch {
            id: example.id.clone(),
            field,
            found: values.len(),
            expected,
        });
    }
    out.copy_from_slice(values);
    Ok(())
}

/// Fit per-column mean/std on the given rows (the train split). Population
/// standard deviation.
pub fn fit_normalizer(matrix: &FeatureMatrix, rows: &[usize]) -> Result<Normalizer, FeatureError> {
    if rows.is_empty() {
        return Err(FeatureError::EmptyFit);
    }
    let cols = matrix.data.cols();
    let n = rows.len() as f64;
    let mut columns = Vec::with_capacity(cols);
    for c in 0..cols {
        let mean = rows.iter().map(|&r| matrix.data.get(r, c)).sum::<f64>() / n;
        let var = rows
            .iter()
            .map(|&r| {
                let d = matrix.data.get(r, c) - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        columns.push(ColumnStats {
            mean,
            std: var.sqrt(),
        });
    }
    Ok(Normalizer { columns })
}

/// Standardize every row with the fitted statistics: z-score per column, or
/// mean-centering only where the column was (numerically) constant.
pub fn apply_normalizer(
    matrix: &FeatureMatrix,
    normalizer: &Normalizer,
) -> Result<FeatureMatrix, FeatureError> {
    if normalizer.columns.len() != matrix.data.cols() {
        return Err(FeatureError::NormalizerWidthMismatch {
            norm: normalizer.columns.len(),
            matrix: matrix.data.cols(),
        });
    }
    let mut data = matrix.data.clone();
    for r in 0..data.rows() {
        let row = data.row_mut(r);
        for (value, stats) in row.iter_mut().zip(&normalizer.columns) {
            *value -= stats.mean;
            if stats.std >= DEGENERATE_STD {
                *value /= stats.std;
            }
        }
    }
    Ok(FeatureMatrix {
        spec: matrix.spec.clone(),
        data,
        normalization: Some(normalizer.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Costs, ExampleTrace, TaskKind};

    fn trace(id: &str, logprobs: &[f64]) -> ExampleTrace {
        ExampleTrace {
            id: id.to_string(),
            token_logprobs: logprobs.to_vec(),
            small_quality: 0.0,
            large_quality: 1.0,
            small_embedding: None,
            large_intermediate_embedding: None,
            split: Split::Train,
        }
    }

    fn dataset(examples: Vec<ExampleTrace>) -> Dataset {
        Dataset {
            task_kind: TaskKind::Accuracy,
            costs: Costs { c1: 1.0, c2: 2.0 },
            examples,
        }
    }

    #[test]
    fn canonical_grid_is_the_documented_20_values() {
        let alphas = canonical_alphas();
        assert_eq!(alphas.len(), 20);
        assert_eq!(alphas[0], 0.0);
        assert_eq!(alphas[10], 0.10);
        assert_eq!(alphas[11], 0.2);
        assert_eq!(alphas[19], 1.0);
        let expected = vec![
            0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10, 0.2, 0.3, 0.4, 0.5,
            0.6, 0.7, 0.8, 0.9, 1.0,
        ];
        assert_eq!(alphas, expected);
    }

    #[test]
    fn quantile_features_are_22_wide_and_start_with_sum_avg() {
        let d = dataset(vec![trace("a", &[-0.5, -1.5, -3.0]), trace("b", &[-2.0])]);
        let spec = FeatureSpec::quantile();
        let m = build_features(&d, &spec).unwrap();
        assert_eq!(m.data.cols(), 22);
        assert_eq!(m.data.rows(), 2);
        assert_eq!(m.data.get(0, 0), chow_sum(&d.examples[0]));
        assert_eq!(m.data.get(0, 1), chow_average(&d.examples[0]));
        // alpha=0 column is the min, alpha=1 column the max
        assert_eq!(m.data.get(0, 2), -3.0);
        assert_eq!(m.data.get(0, 21), -0.5);
    }

    #[test]
    fn embed_widths_follow_dimension_accounting() {
        let mut e1 = trace("a", &[-1.0]);
        e1.small_embedding = Some(vec![0.0; 4]);
        e1.large_intermediate_embedding = Some(vec![0.0; 8]);
        let mut e2 = trace("b", &[-2.0, -1.0]);
        e2.small_embedding = Some(vec![1.0; 4]);
        e2.large_intermediate_embedding = Some(vec![1.0; 8]);
        let d = dataset(vec![e1, e2]);

        let spec = FeatureSpec::for_dataset(FeatureVariant::Embed1, &d).unwrap();
        assert_eq!(spec.width().unwrap(), 26);
        let m = build_features(&d, &spec).unwrap();
        assert_eq!(m.data.cols(), 26);

        let spec = FeatureSpec::for_dataset(FeatureVariant::Embed12, &d).unwrap();
        assert_eq!(spec.width().unwrap(), 34); // 22 + 4 + 8
        let m = build_features(&d, &spec).unwrap();
        assert_eq!(m.data.cols(), 34);
        assert_eq!(m.data.get(1, 22), 1.0);
        assert_eq!(m.data.get(1, 26), 1.0);
    }

    #[test]
    fn missing_embedding_is_an_error() {
        let d = dataset(vec![trace("a", &[-1.0])]);
        let spec = FeatureSpec::embed1(4);
        assert!(matches!(
            build_features(&d, &spec).unwrap_err(),
            FeatureError::MissingEmbedding { .. }
        ));
    }

    #[test]
    fn padded_prob_pads_with_zeros() {
        let d = dataset(vec![trace("a", &[-0.1, -0.2])]);
        let spec = FeatureSpec::padded(false, 4);
        let m = build_features(&d, &spec).unwrap();
        assert_eq!(m.data.row(0), &[-0.1, -0.2, 0.0, 0.0]);
    }

    #[test]
    fn sorted_padded_prob_sorts_ascending_first() {
        let d = dataset(vec![trace("a", &[-0.2, -3.0, -0.1])]);
        let spec = FeatureSpec::padded(true, 5);
        let m = build_features(&d, &spec).unwrap();
        assert_eq!(m.data.row(0), &[-3.0, -0.2, -0.1, 0.0, 0.0]);
    }

    #[test]
    fn trace_longer_than_pad_length_is_an_error() {
        let d = dataset(vec![trace("a", &[-0.1, -0.2, -0.3])]);
        let spec = FeatureSpec::padded(false, 2);
        assert!(matches!(
            build_features(&d, &spec).unwrap_err(),
            FeatureError::TraceTooLong {
                len: 3,
                pad_length: 2,
                ..
            }
        ));
    }

    #[test]
    fn pad_length_defaults_to_train_split_max() {
        let mut examples = vec![
            trace("a", &[-0.1, -0.2]),
            trace("b", &[-0.1]),
            trace("c", &[-0.1, -0.2, -0.3, -0.4]),
        ];
        examples[2].split = Split::Test;
        let d = dataset(examples);
        let spec = FeatureSpec::for_dataset(FeatureVariant::PaddedProb, &d).unwrap();
        assert_eq!(spec.pad_length, Some(2));
        // The longer test trace then fails loudly instead of truncating.
        assert!(build_features(&d, &spec).is_err());
    }

    #[test]
    fn quantile_features_are_token_order_invariant_padded_are_not() {
        let d1 = dataset(vec![trace("a", &[-1.0, -2.0, -3.0])]);
        let d2 = dataset(vec![trace("a", &[-3.0, -1.0, -2.0])]);
        let q = FeatureSpec::quantile();
        assert_eq!(
            build_features(&d1, &q).unwrap().data,
            build_features(&d2, &q).unwrap().data
        );
        let p = FeatureSpec::padded(false, 3);
        assert_ne!(
            build_features(&d1, &p).unwrap().data,
            build_features(&d2, &p).unwrap().data
        );
        let sp = FeatureSpec::padded(true, 3);
        assert_eq!(
            build_features(&d1, &sp).unwrap().data,
            build_features(&d2, &sp).unwrap().data
        );
    }

    #[test]
    fn normalizer_two_point_symmetry() {
        let d = dataset(vec![trace("a", &[-1.0]), trace("b", &[-3.0])]);
        let m = build_features(&d, &FeatureSpec::quantile()).unwrap();
        let norm = fit_normalizer(&m, &[0, 1]).unwrap();
        let z = apply_normalizer(&m, &norm).unwrap();
        // column 0 = chow_sum: values (-1, -3) -> (1, -1)
        assert!((z.data.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((z.data.get(1, 0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_columns_are_centered_not_divided() {
        let d = dataset(vec![trace("a", &[-1.0]), trace("b", &[-1.0])]);
        let m = build_features(&d, &FeatureSpec::quantile()).unwrap();
        let norm = fit_normalizer(&m, &[0, 1]).unwrap();
        let z = apply_normalizer(&m, &norm).unwrap();
        for c in 0..z.data.cols() {
            assert_eq!(z.data.get(0, c), 0.0);
            assert_eq!(z.data.get(1, c), 0.0);
        }
    }

    #[test]
    fn train_fit_applied_to_validation_uses_train_statistics() {
        let mut rng = crate::rng::seeded_rng(14);
        let examples: Vec<ExampleTrace> = (0..40)
            .map(|i| {
                let len = 2 + crate::rng::index(&mut rng, 6);
                let lp: Vec<f64> = (0..len)
                    .map(|_| -crate::rng::uniform(&mut rng, 0.0, 4.0))
                    .collect();
                let mut e = trace(&format!("e{i}"), &lp);
                if i >= 30 {
                    e.split = Split::Validation;
                }
                e
            })
            .collect();
        let d = dataset(examples);
        let m = build_features(&d, &FeatureSpec::quantile()).unwrap();
        let train_rows: Vec<usize> = (0..30).collect();
        let norm = fit_normalizer(&m, &train_rows).unwrap();
        let z = apply_normalizer(&m, &norm).unwrap();

        // Independent two-pass oracle over the train rows.
        for c in 0..m.data.cols() {
            let vals: Vec<f64> = train_rows.iter().map(|&r| m.data.get(r, c)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            let std = var.sqrt();
            assert!((norm.columns[c].mean - mean).abs() < 1e-12);
            assert!((norm.columns[c].std - std).abs() < 1e-12);

            // Validation rows standardized with the train stats.
            for r in 30..40 {
                let expected = if std >= DEGENERATE_STD {
                    (m.data.get(r, c) - mean) / std
                } else {
                    m.data.get(r, c) - mean
                };
                assert!((z.data.get(r, c) - expected).abs() < 1e-12);
            }

            // Non-degenerate normalized train columns are standard.
            if std >= DEGENERATE_STD {
                let zvals: Vec<f64> = train_rows.iter().map(|&r| z.data.get(r, c)).collect();
                let zm = zvals.iter().sum::<f64>() / zvals.len() as f64;
                let zv =
                    zvals.iter().map(|v| (v - zm) * (v - zm)).sum::<f64>() / zvals.len() as f64;
                assert!(zm.abs() <= 1e-10);
                assert!((zv.sqrt() - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn empty_fit_is_an_error() {
        let d = dataset(vec![trace("a", &[-1.0])]);
        let m = build_features(&d, &FeatureSpec::quantile()).unwrap();
        assert!(matches!(
            fit_normalizer(&m, &[]).unwrap_err(),
            FeatureError::EmptyFit
        ));
    }
}
