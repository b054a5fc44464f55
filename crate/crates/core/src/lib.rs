//! Evaluation and training of deferral rules for two-model cascades over
//! recorded per-token probability traces.
//!
//! A cascade answers cheap prompts with a small model and defers hard ones
//! to a large model. Given trace files that record, per prompt, the small
//! model's per-token log-probabilities and both models' quality scores,
//! this crate computes deferral scores (sequence log-probability, its
//! length-normalized average, per-token quantiles), builds deferral curves
//! with their AUC, compares against oracle and random baselines, diagnoses
//! length bias, and trains small post-hoc deferral networks on quantile and
//! embedding features.

pub mod eval;
pub mod features;
pub mod linalg;
pub mod nn;
pub mod posthoc;
pub mod rng;
pub mod scores;
pub mod synth;
pub mod trace;

pub use eval::{
    auc_roc, cost_curve, deferral_curve, golden_label_auc_roc, golden_labels, length_bias_report,
    oracle_curve, random_baseline_auc, random_baseline_curve, select_best_quantile,
    token_position_profile, CostPoint, CurvePoint, DeferralCurve, EvalError,
};
pub use features::{
    apply_normalizer, build_features, canonical_alphas, fit_normalizer, FeatureError,
    FeatureMatrix, FeatureSpec, FeatureVariant, Normalizer,
};
pub use posthoc::{
    build_targets, predict_scores, train, train_multi_seed, PostHocError, PostHocModel, TargetKind,
    TrainOptions, TrainReport, TrainTargets,
};
pub use scores::{
    chow_average, chow_quantile, chow_sum, score_dataset, ScoreError, ScoreLabel, ScoreRule,
    ScoreVector,
};
pub use synth::{generate, LengthDistribution, SignalKind, SynthConfig, SynthError};
pub use trace::{
    load_traces, save_traces, split_dataset, summary_stats, Costs, Dataset, ExampleTrace, Split,
    SummaryStats, TaskKind, TraceError,
};
