//! Post-hoc deferral rules: target construction, minibatch training with
//! best-epoch selection, multi-seed reporting, and inference back into
//! score vectors.
//!
//! Targets follow the task: accuracy tasks get the binary defer label
//! (1 iff the large model is correct and the small one is not) with the
//! logistic loss; score-difference tasks regress the quality gain with the
//! squared loss.
//!
//! The trained network outputs a defer-benefit estimate, so the deferral
//! score is its negation: high predicted benefit means low score means
//! deferred first, matching the `defer when s(x) < t` convention.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{auc_roc, deferral_curve, EvalError};
use crate::features::{
    apply_normalizer, build_features, fit_normalizer, FeatureError, FeatureSpec, FeatureVariant,
    Normalizer,
};
use crate::nn::{
    adam_step, backward, forward, init, loss, loss_only, update_running_stats, AdamHyper,
    AdamState, LossKind, MlpConfig, Mode, NnError, OutputKind,
};
use crate::rng::{derive_seed, seeded_rng, shuffle};
use crate::scores::{ScoreLabel, ScoreVector};
use crate::trace::{Dataset, Split, TaskKind};

/// Paper-facing method name of each feature variant.
pub fn method_name(variant: FeatureVariant) -> &'static str {
    match variant {
        FeatureVariant::Quantile => "post-hoc-quantile",
        FeatureVariant::Embed1 => "post-hoc-embed-1",
        FeatureVariant::Embed12 => "post-hoc-embed-1+2",
        FeatureVariant::PaddedProb => "post-hoc-prob",
        FeatureVariant::SortedPaddedProb => "post-hoc-sorted-prob",
    }
}

/// Parse a method or variant name from the CLI.
pub fn variant_from_name(name: &str) -> Result<FeatureVariant, PostHocError> {
    match name {
        "post-hoc-quantile" => Ok(FeatureVariant::Quantile),
        "post-hoc-embed-1" => Ok(FeatureVariant::Embed1),
        "post-hoc-embed-1+2" => Ok(FeatureVariant::Embed12),
        "post-hoc-prob" => Ok(FeatureVariant::PaddedProb),
        "post-hoc-sorted-prob" => Ok(FeatureVariant::SortedPaddedProb),
        other => other
            .parse::<FeatureVariant>()
            .map_err(PostHocError::Feature),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    BinaryDefer,
    QualityGain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTargets {
    pub kind: TargetKind,
    pub values: Vec<f64>,
}

/// Training targets per task kind: binary defer labels for accuracy tasks,
/// quality gains for score-difference tasks.
pub fn build_targets(dataset: &Dataset) -> TrainTargets {
    match dataset.task_kind {
        TaskKind::Accuracy => TrainTargets {
            kind: TargetKind::BinaryDefer,
            values: dataset
                .examples
                .iter()
                .map(|e| {
                    if e.large_quality == 1.0 && e.small_quality == 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        },
        TaskKind::ScoreDiff => TrainTargets {
            kind: TargetKind::QualityGain,
            values: dataset.examples.iter().map(|e| e.quality_gain()).collect(),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Standardize features with train-split statistics before training.
    pub normalize: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-5,
            normalize: true,
        }
    }
}

/// Default architecture for a feature variant: 5 weight layers of width 32
/// for the compact quantile-style features, 2 layers of width 8 for the
/// high-dimensional embedding variants (less capacity, less overfitting).
/// Batchnorm on in both cases.
pub fn default_mlp_config(
    spec: &FeatureSpec,
    task_kind: TaskKind,
    seed: u64,
) -> Result<MlpConfig, PostHocError> {
    let input_dim = spec.width()?;
    let (num_layers, hidden_units) = match spec.variant {
        FeatureVariant::Embed1 | FeatureVariant::Embed12 => (2, 8),
        _ => (5, 32),
    };
    Ok(MlpConfig {
        input_dim,
        num_layers,
        hidden_units,
        use_batchnorm: true,
        output: output_kind_for(task_kind),
        seed,
    })
}

pub fn output_kind_for(task_kind: TaskKind) -> OutputKind {
    match task_kind {
        TaskKind::Accuracy => OutputKind::Logit,
        TaskKind::ScoreDiff => OutputKind::Scalar,
    }
}

#[derive(Debug, Error)]
pub enum PostHocError {
    #[error("train split is empty")]
    EmptyTrain,
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("network input dimension {config} does not match feature width {features}")]
    InputDimMismatch { config: usize, features: usize },
    #[error("network output {config:?} does not fit task {task:?} (expected {expected:?})")]
    OutputKindMismatch {
        config: OutputKind,
        task: TaskKind,
        expected: OutputKind,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model artifact: {0}")]
    MalformedModel(String),
    #[error("model artifact format version {found} is not supported (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A trained post-hoc deferral rule: network parameters (with running
/// statistics), the normalization fitted on the train split, and the
/// feature layout it expects. Serialized as JSON with shortest-round-trip
/// numbers, so save/load reproduces predictions exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostHocModel {
    pub format_version: u32,
    pub feature_spec: FeatureSpec,
    pub target_kind: TargetKind,
    pub normalizer: Option<Normalizer>,
    pub params: crate::nn::MlpParams,
}

impl PostHocModel {
    pub fn method_name(&self) -> &'static str {
        method_name(self.feature_spec.variant)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PostHocError> {
        let model: PostHocModel =
            serde_json::from_str(text).map_err(|e| PostHocError::MalformedModel(e.to_string()))?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(PostHocError::UnsupportedVersion {
                found: model.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        model
            .params
            .validate()
            .map_err(|e| PostHocError::MalformedModel(e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PostHocError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|source| PostHocError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PostHocError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PostHocError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// One training run's record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    /// Epoch whose parameters were kept (1-based; 0 means the untrained
    /// initialization, which only happens with epochs = 0).
    pub best_epoch: usize,
    /// Name of the early-stopping metric that was tracked.
    pub metric_name: String,
    /// Validation metric after each epoch.
    pub trajectory: Vec<f64>,
    /// Split the reported AUC-DF was computed on (test, or validation when
    /// the dataset has no test examples).
    pub eval_split: Split,
    pub test_auc_df: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SeedOutcome {
    Ok(SeedRun),
    Failed { seed: u64, error: String },
}

/// Aggregate over seeds: per-run records plus mean/std of the reported
/// AUC-DF (population std over the successful runs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedOutcome>,
    pub mean_test_auc_df: Option<f64>,
    pub std_test_auc_df: Option<f64>,
}

/// Which direction the early-stopping metric improves.
#[derive(Clone, Copy, PartialEq)]
enum MetricSense {
    HigherBetter,
    LowerBetter,
}

fn improves(sense: MetricSense, candidate: f64, best: f64) -> bool {
    match sense {
        MetricSense::HigherBetter => candidate > best,
        MetricSense::LowerBetter => candidate < best,
    }
}

/// Train a post-hoc deferral rule.
///
/// Minibatches of `options.batch_size` are drawn in a freshly shuffled
/// order each epoch; a final singleton batch is skipped when batchnorm is
/// active (those examples return in the next epoch's shuffle). After every
/// epoch the validation metric is computed in eval mode and the best-epoch
/// parameters are retained; ties keep the earlier epoch. Deterministic
/// given (dataset, spec, config, options, seed).
pub fn train(
    dataset: &Dataset,
    spec: &FeatureSpec,
    config: &MlpConfig,
    options: &TrainOptions,
    seed: u64,
) -> Result<(PostHocModel, SeedRun), PostHocError> {
    let width = spec.width()?;
    if config.input_dim != width {
        return Err(PostHocError::InputDimMismatch {
            config: config.input_dim,
            features: width,
        });
    }
    let expected_output = output_kind_for(dataset.task_kind);
    if config.output != expected_output {
        return Err(PostHocError::OutputKindMismatch {
            config: config.output,
            task: dataset.task_kind,
            expected: expected_output,
        });
    }
    let train_rows = dataset.split_indices(Split::Train);
    let val_rows = dataset.split_indices(Split::Validation);
    if train_rows.is_empty() {
        return Err(PostHocError::EmptyTrain);
    }
    if val_rows.is_empty() {
        return Err(PostHocError::EmptyValidation);
    }

    let mut warnings = Vec::new();
    let raw = build_features(dataset, spec)?;
    let (matrix, normalizer) = if options.normalize {
        let norm = fit_normalizer(&raw, &train_rows)?;
        (apply_normalizer(&raw, &norm)?, Some(norm))
    } else {
        (raw, None)
    };
    let targets = build_targets(dataset);
    let loss_kind = match targets.kind {
        TargetKind::BinaryDefer => LossKind::Logistic,
        TargetKind::QualityGain => LossKind::Squared,
    };

    let val_matrix = matrix.data.select_rows(&val_rows);
    let val_targets: Vec<f64> = val_rows.iter().map(|&i| targets.values[i]).collect();
    let val_labels: Vec<bool> = val_targets.iter().map(|&z| z == 1.0).collect();

    // Early-stopping metric: validation AUC-ROC for binary targets,
    // validation loss for regression. Degenerate validation labels fall
    // back to the loss.
    let (metric_name, sense) = match targets.kind {
        TargetKind::BinaryDefer => {
            let positives = val_labels.iter().filter(|&&z| z).count();
            if positives == 0 || positives == val_labels.len() {
                warnings.push(
                    "validation defer labels are all identical; early stopping on validation loss"
                        .to_string(),
                );
                ("validation_loss", MetricSense::LowerBetter)
            } else {
                ("validation_auc_roc", MetricSense::HigherBetter)
            }
        }
        TargetKind::QualityGain => ("validation_mse", MetricSense::LowerBetter),
    };

    let mut params = init(&MlpConfig { seed, ..*config })?;
    let mut adam = AdamState::new(
        AdamHyper {
            lr: options.lr,
            ..AdamHyper::default()
        },
        &params,
    );
    let mut shuffle_rng = seeded_rng(derive_seed(seed, 1));

    let mut best_params = params.clone();
    let mut best_metric = match sense {
        MetricSense::HigherBetter => f64::NEG_INFINITY,
        MetricSense::LowerBetter => f64::INFINITY,
    };
    let mut best_epoch = 0usize;
    let mut trajectory = Vec::with_capacity(options.epochs);

    if options.epochs == 0 {
        warnings.push("no training performed (epochs = 0)".to_string());
    }

    for epoch in 1..=options.epochs {
        let mut order = train_rows.clone();
        shuffle(&mut shuffle_rng, &mut order);
        for chunk in order.chunks(options.batch_size.max(1)) {
            if chunk.len() == 1 && params.config.use_batchnorm {
                // Batch statistics need >= 2 rows; the example rejoins the
                // pool at the next shuffle.
                continue;
            }
            let batch = matrix.data.select_rows(chunk);
            let batch_targets: Vec<f64> = chunk.iter().map(|&i| targets.values[i]).collect();
            let pass = forward(&params, &batch, Mode::Train)?;
            let (_, dout) = loss(&pass.outputs, &batch_targets, loss_kind)?;
            let grads = backward(&params, &pass, &dout)?;
            adam_step(&mut params, &grads, &mut adam)?;
            update_running_stats(&mut params, &pass);
        }

        let metric = match (targets.kind, sense) {
            (TargetKind::BinaryDefer, MetricSense::HigherBetter) => {
                let pass = forward(&params, &val_matrix, Mode::Eval)?;
                auc_roc(&val_labels, &pass.outputs)?
            }
            _ => loss_only(&params, &val_matrix, &val_targets, loss_kind, Mode::Eval)?,
        };
        trajectory.push(metric);
        if improves(sense, metric, best_metric) {
            best_metric = metric;
            best_epoch = epoch;
            best_params = params.clone();
        }
    }

    let model = PostHocModel {
        format_version: MODEL_FORMAT_VERSION,
        feature_spec: spec.clone(),
        target_kind: targets.kind,
        normalizer,
        params: best_params,
    };

    let eval_split = if dataset.split_indices(Split::Test).is_empty() {
        Split::Validation
    } else {
        Split::Test
    };
    let eval_subset = dataset.subset(eval_split);
    let predicted = predict_scores(&model, &eval_subset)?;
    let test_auc_df = deferral_curve(&eval_subset, &predicted)?.auc_df;

    Ok((
        model,
        SeedRun {
            seed,
            best_epoch,
            metric_name: metric_name.to_string(),
            trajectory,
            eval_split,
            test_auc_df,
            warnings,
        },
    ))
}

/// Train one run per seed; failures are recorded per seed without aborting
/// the rest.
pub fn train_multi_seed(
    dataset: &Dataset,
    spec: &FeatureSpec,
    config: &MlpConfig,
    options: &TrainOptions,
    seeds: &[u64],
) -> (TrainReport, Vec<(u64, PostHocModel)>) {
    let mut runs = Vec::with_capacity(seeds.len());
    let mut models = Vec::new();
    let mut aucs = Vec::new();
    for &seed in seeds {
        match train(dataset, spec, config, options, seed) {
            Ok((model, run)) => {
                aucs.push(run.test_auc_df);
                runs.push(SeedOutcome::Ok(run));
                models.push((seed, model));
            }
            Err(e) => runs.push(SeedOutcome::Failed {
                seed,
                error: e.to_string(),
            }),
        }
    }
    let (mean, std) = if aucs.is_empty() {
        (None, None)
    } else {
        let n = aucs.len() as f64;
        let mean = aucs.iter().sum::<f64>() / n;
        let var = aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        (Some(mean), Some(var.sqrt()))
    };
    (
        TrainReport {
            seeds: seeds.to_vec(),
            runs,
            mean_test_auc_df: mean,
            std_test_auc_df: std,
        },
        models,
    )
}

/// Score a dataset with a trained model: eval-mode forward over its
/// features, negated so that high predicted defer-benefit sorts first.
pub fn predict_scores(
    model: &PostHocModel,
    dataset: &Dataset,
) -> Result<ScoreVector, PostHocError> {
    let raw = build_features(dataset, &model.feature_spec)?;
    let matrix = match &model.normalizer {
        Some(norm) => apply_normalizer(&raw, norm)?,
        None => raw,
    };
    let pass = forward(&model.params, &matrix.data, Mode::Eval)?;
    Ok(ScoreVector {
        label: ScoreLabel::Named(model.method_name().to_string()),
        values: pass.outputs.iter().map(|o| -o).collect(),
    })
}
