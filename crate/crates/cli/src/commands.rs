//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use serde_json::json;

use deferkit::eval::{
    cost_curve, deferral_curve, golden_label_auc_roc, golden_labels, length_bias_report,
    oracle_curve, random_baseline_auc, random_baseline_curve, select_best_quantile,
    token_position_profile, DeferralCurve,
};
use deferkit::features::canonical_alphas;
use deferkit::posthoc::{
    default_mlp_config, method_name, predict_scores, train_multi_seed, variant_from_name,
    PostHocModel, SeedOutcome, TrainOptions,
};
use deferkit::rng::derive_seed;
use deferkit::scores::{score_dataset, ScoreRule};
use deferkit::synth::{generate, LengthDistribution, SignalKind, SynthConfig};
use deferkit::trace::{load_traces, split_dataset, write_traces, Dataset, Split, TaskKind};
use deferkit::FeatureSpec;

use crate::manifest::{atomic_write, atomic_write_with, RunManifest, WriteError};
use crate::{CliError, SplitArg};

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

fn load_input(path: &Path, max_examples: Option<usize>) -> Result<Dataset, CliError> {
    let (mut dataset, warnings) = load_traces(path)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    if let Some(max) = max_examples {
        dataset.truncate_per_split(max);
    }
    Ok(dataset)
}

fn select_split(dataset: &Dataset, split: SplitArg) -> Result<Dataset, CliError> {
    let subset = match split {
        SplitArg::All => dataset.clone(),
        SplitArg::Train => dataset.subset(Split::Train),
        SplitArg::Validation => dataset.subset(Split::Validation),
        SplitArg::Test => dataset.subset(Split::Test),
    };
    if subset.is_empty() {
        return Err(CliError::Input(format!(
            "no examples in the requested split ({split:?})"
        )));
    }
    Ok(subset)
}

fn split_name(split: SplitArg) -> &'static str {
    match split {
        SplitArg::All => "all",
        SplitArg::Train => "train",
        SplitArg::Validation => "validation",
        SplitArg::Test => "test",
    }
}

fn output_err<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Output(format!("cannot write {}: {e}", path.display()))
}

fn write_curve_file(curve: &DeferralCurve, path: &Path) -> Result<(), CliError> {
    atomic_write_with(path, |tmp| deferkit::eval::export_curve(curve, tmp)).map_err(|e| match e {
        WriteError::Writer(io) | WriteError::Rename(io) => {
            CliError::Output(format!("cannot write {}: {io}", path.display()))
        }
    })
}

/// A rule that `eval` and `curve` can score: a non-learned rule, the
/// validation-selected best quantile, the oracle or random baseline, or a
/// saved post-hoc model.
enum EvalRule {
    Score(ScoreRule),
    QuantileBest,
    Oracle,
    Random,
    PostHoc(PathBuf),
}

fn parse_eval_rule(text: &str) -> Result<EvalRule, CliError> {
    match text {
        "oracle" => Ok(EvalRule::Oracle),
        "random" => Ok(EvalRule::Random),
        "chow-quantile-best" => Ok(EvalRule::QuantileBest),
        _ => {
            if let Some(path) = text.strip_prefix("post-hoc:") {
                Ok(EvalRule::PostHoc(PathBuf::from(path)))
            } else {
                ScoreRule::from_str(text)
                    .map(EvalRule::Score)
                    .map_err(|e| CliError::UnknownRule(e.to_string()))
            }
        }
    }
}

fn default_rule_set() -> Vec<EvalRule> {
    let mut rules = vec![
        EvalRule::Score(ScoreRule::ChowSum),
        EvalRule::Score(ScoreRule::ChowAverage),
    ];
    rules.extend(
        canonical_alphas()
            .into_iter()
            .map(|alpha| EvalRule::Score(ScoreRule::ChowQuantile { alpha })),
    );
    rules
}

/// Compute the curve and display name for one eval rule. `full_dataset`
/// keeps all splits; validation-based selection reads it while the curve is
/// built on `dataset` (the requested subset).
fn rule_curve(
    full_dataset: &Dataset,
    dataset: &Dataset,
    rule: &EvalRule,
) -> Result<(String, DeferralCurve), CliError> {
    match rule {
        EvalRule::Score(rule) => {
            let scores = score_dataset(dataset, rule);
            Ok((rule.to_string(), deferral_curve(dataset, &scores)?))
        }
        EvalRule::QuantileBest => {
            let selected =
                select_best_quantile(full_dataset, &canonical_alphas()).map_err(|e| match e {
                    deferkit::EvalError::EmptyValidation => CliError::Input(
                        "chow-quantile-best needs a validation split to select on".to_string(),
                    ),
                    other => other.into(),
                })?;
            let scores = score_dataset(dataset, &selected);
            eprintln!("chow-quantile-best selected {selected} on the validation split");
            Ok((
                "chow-quantile-best".to_string(),
                deferral_curve(dataset, &scores)?,
            ))
        }
        EvalRule::Oracle => Ok(("oracle".to_string(), oracle_curve(dataset)?)),
        EvalRule::Random => Ok(("random".to_string(), random_baseline_curve(dataset)?)),
        EvalRule::PostHoc(path) => {
            let model = PostHocModel::load(path).map_err(|e| match e {
                deferkit::PostHocError::Io { .. } | deferkit::PostHocError::MalformedModel(_) => {
                    CliError::Input(e.to_string())
                }
                other => other.into(),
            })?;
            let scores = predict_scores(&model, dataset)?;
            Ok((
                model.method_name().to_string(),
                deferral_curve(dataset, &scores)?,
            ))
        }
    }
}

fn sanitize_file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_alphanumeric() || "-_.@+".contains(c) {
                c
            } else {
                '-'
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SynthArgs {
    /// Trace file to write.
    #[arg(long)]
    pub output: PathBuf,
    /// JSON file holding the full generator config; replaces the individual
    /// generator flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of examples.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub min_len: usize,
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
    /// Length skew: > 1 favors short outputs, < 1 favors long ones.
    #[arg(long, default_value_t = 1.0)]
    pub shape: f64,
    /// Fraction of examples given a degenerate repeated tail.
    #[arg(long, default_value_t = 0.0)]
    pub repetition_rate: f64,
    /// Planted signal: min_token | length | short_uncertain | none.
    #[arg(long, default_value = "none")]
    pub signal: String,
    #[arg(long, default_value_t = 0.0)]
    pub signal_strength: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Small-model cost written into the file header.
    #[arg(long, default_value_t = 1.0)]
    pub c1: f64,
    /// Large-model cost written into the file header.
    #[arg(long, default_value_t = 2.0)]
    pub c2: f64,
}

pub fn run_synth(args: &SynthArgs) -> Result<(), CliError> {
    let config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Input(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str::<SynthConfig>(&text)
                .map_err(|e| CliError::Input(format!("malformed config {}: {e}", path.display())))?
        }
        None => SynthConfig {
            n_examples: args.n,
            length_distribution: LengthDistribution {
                min: args.min_len,
                max: args.max_len,
                shape: args.shape,
            },
            repetition_rate: args.repetition_rate,
            signal: SignalKind::from_str(&args.signal)
                .map_err(|e| CliError::UnknownRule(e.to_string()))?,
            signal_strength: args.signal_strength,
            noise: args.noise,
            seed: args.seed,
        },
    };
    let mut dataset = generate(&config)?;
    if !(args.c1 > 0.0 && args.c2 > 0.0) {
        return Err(CliError::Input(
            "costs c1 and c2 must be positive".to_string(),
        ));
    }
    dataset.costs = deferkit::Costs {
        c1: args.c1,
        c2: args.c2,
    };

    let mut buf = Vec::new();
    write_traces(&dataset, &mut buf).map_err(output_err(&args.output))?;
    atomic_write(&args.output, &buf).map_err(output_err(&args.output))?;

    let mut manifest = RunManifest::new(
        "synth",
        json!({
            "config": config,
            "c1": args.c1,
            "c2": args.c2,
        }),
    );
    manifest.seeds.push(config.seed);
    manifest.record_output(&args.output);
    let manifest_path = args.output.with_extension("manifest.json");
    manifest
        .write(&manifest_path)
        .map_err(output_err(&manifest_path))?;

    println!(
        "wrote {} examples to {} (signal {:?}, seed {})",
        dataset.len(),
        args.output.display(),
        config.signal,
        config.seed
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvalArgs {
    /// Trace file to evaluate.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory for curves, the AUC table, and the manifest.
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Comma-separated rules: chow-sum, chow-average, chow-quantile@`<alpha>`,
    /// oracle, random, post-hoc:<model.json>. Oracle and random are always
    /// included. Default: chow-sum, chow-average, and the 20-alpha grid.
    #[arg(long, value_delimiter = ',')]
    pub rules: Vec<String>,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    /// Keep only the first N examples of each split.
    #[arg(long)]
    pub max_examples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let dataset = load_input(&args.input, args.max_examples)?;
    let subset = select_split(&dataset, args.split)?;

    let mut rules = if args.rules.is_empty() {
        default_rule_set()
    } else {
        args.rules
            .iter()
            .map(|s| parse_eval_rule(s))
            .collect::<Result<Vec<_>, _>>()?
    };
    if !args.rules.iter().any(|r| r == "oracle") {
        rules.push(EvalRule::Oracle);
    }
    if !args.rules.iter().any(|r| r == "random") {
        rules.push(EvalRule::Random);
    }

    fs::create_dir_all(&args.output_dir).map_err(output_err(&args.output_dir))?;
    let random_auc = random_baseline_auc(&subset)?;

    let mut manifest = RunManifest::new(
        "eval",
        json!({
            "input": args.input.display().to_string(),
            "rules": args.rules,
            "split": split_name(args.split),
            "max_examples": args.max_examples,
        }),
    );
    manifest
        .record_input(&args.input)
        .map_err(|e| CliError::Input(format!("cannot digest {}: {e}", args.input.display())))?;
    manifest.seeds.push(args.seed);

    let mut table: Vec<(String, f64)> = Vec::new();
    let mut used_names = std::collections::HashSet::new();
    for rule in &rules {
        let (mut name, curve) = rule_curve(&dataset, &subset, rule)?;
        while !used_names.insert(name.clone()) {
            name.push('+');
        }
        let path = args
            .output_dir
            .join(format!("{}.csv", sanitize_file_stem(&name)));
        write_curve_file(&curve, &path)?;
        manifest.record_output(&path);
        table.push((name, curve.auc_df));
    }

    // Highest AUC first; stable name order inside ties.
    table.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut auc_csv = String::from("rule,auc_df,pct_change_vs_random\n");
    let name_width = table.iter().map(|(n, _)| n.len()).max().unwrap_or(4);
    println!(
        "{:<width$}  {:>10}  {:>10}",
        "rule",
        "auc_df",
        "vs random",
        width = name_width
    );
    for (name, auc) in &table {
        let pct = 100.0 * (auc - random_auc) / random_auc;
        println!("{name:<name_width$}  {auc:>10.6}  {pct:>+9.2}%");
        auc_csv.push_str(&format!("{name},{auc},{pct}\n"));
    }

    let table_path = args.output_dir.join("auc_table.csv");
    atomic_write(&table_path, auc_csv.as_bytes()).map_err(output_err(&table_path))?;
    manifest.record_output(&table_path);

    // Expected-cost curve on the same rate grid.
    let mut cost_csv = String::from("deferral_rate,expected_cost\n");
    for p in cost_curve(&subset.costs, subset.len()) {
        cost_csv.push_str(&format!("{},{}\n", p.deferral_rate, p.expected_cost));
    }
    let cost_path = args.output_dir.join("cost.csv");
    atomic_write(&cost_path, cost_csv.as_bytes()).map_err(output_err(&cost_path))?;
    manifest.record_output(&cost_path);

    let manifest_path = args.output_dir.join("manifest.json");
    manifest
        .write(&manifest_path)
        .map_err(output_err(&manifest_path))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Feature variant: quantile, embed1, embed12, padded-prob,
    /// sorted-padded-prob (method names like post-hoc-quantile also work).
    #[arg(long, default_value = "quantile")]
    pub variant: String,
    /// Training seeds, one run per seed. Defaults to just --seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Base seed: drives the train/validation split and stands in for
    /// --seeds when that flag is absent.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    /// Skip feature standardization.
    #[arg(long)]
    pub no_normalize: bool,
    /// Fraction of train examples kept as train when the file has no
    /// validation split yet.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long)]
    pub max_examples: Option<usize>,
}

pub fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut dataset = load_input(&args.input, args.max_examples)?;
    let variant =
        variant_from_name(&args.variant).map_err(|e| CliError::UnknownRule(e.to_string()))?;

    let mut split_applied = false;
    if dataset.split_indices(Split::Validation).is_empty() {
        dataset = split_dataset(dataset, args.train_fraction, derive_seed(args.seed, 2))?;
        split_applied = true;
    }
    let spec = FeatureSpec::for_dataset(variant, &dataset)?;
    let config = default_mlp_config(&spec, dataset.task_kind, 0)?;
    let options = TrainOptions {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        normalize: !args.no_normalize,
    };
    let seeds = if args.seeds.is_empty() {
        vec![args.seed]
    } else {
        args.seeds.clone()
    };

    let (report, models) = train_multi_seed(&dataset, &spec, &config, &options, &seeds);

    fs::create_dir_all(&args.output_dir).map_err(output_err(&args.output_dir))?;
    let mut manifest = RunManifest::new(
        "train",
        json!({
            "input": args.input.display().to_string(),
            "variant": method_name(variant),
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "lr": args.lr,
            "normalize": !args.no_normalize,
            "train_fraction": args.train_fraction,
            "max_examples": args.max_examples,
            "mlp": config,
        }),
    );
    manifest
        .record_input(&args.input)
        .map_err(|e| CliError::Input(format!("cannot digest {}: {e}", args.input.display())))?;
    manifest.seeds = seeds.clone();

    if split_applied {
        // Persist the split assignment so later eval runs can score the
        // exact validation/test subsets this training saw.
        let data_path = args.output_dir.join("data.traces");
        let mut buf = Vec::new();
        write_traces(&dataset, &mut buf).map_err(output_err(&data_path))?;
        atomic_write(&data_path, &buf).map_err(output_err(&data_path))?;
        manifest.record_output(&data_path);
        println!(
            "applied a train/validation split (fraction {}, seed {}); wrote {}",
            args.train_fraction,
            args.seed,
            data_path.display()
        );
    }

    for (seed, model) in &models {
        let path = args.output_dir.join(format!("model-seed{seed}.json"));
        atomic_write(&path, model.to_json().as_bytes()).map_err(output_err(&path))?;
        manifest.record_output(&path);
    }
    let report_path = args.output_dir.join("report.json");
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    atomic_write(&report_path, report_json.as_bytes()).map_err(output_err(&report_path))?;
    manifest.record_output(&report_path);
    let manifest_path = args.output_dir.join("manifest.json");
    manifest
        .write(&manifest_path)
        .map_err(output_err(&manifest_path))?;

    for run in &report.runs {
        match run {
            SeedOutcome::Ok(run) => println!(
                "seed {}: best epoch {} ({} = {:.6}), {} AUC-DF {:.6}",
                run.seed,
                run.best_epoch,
                run.metric_name,
                run.trajectory
                    .get(run.best_epoch.saturating_sub(1))
                    .copied()
                    .unwrap_or(f64::NAN),
                run.eval_split,
                run.test_auc_df
            ),
            SeedOutcome::Failed { seed, error } => {
                eprintln!("seed {seed}: failed: {error}");
            }
        }
    }
    match (report.mean_test_auc_df, report.std_test_auc_df) {
        (Some(mean), Some(std)) => {
            println!(
                "AUC-DF over {} run(s): {mean:.6} +/- {std:.6}",
                models.len()
            );
        }
        _ => {
            return Err(CliError::Internal(
                "all training runs failed (see per-seed errors above)".to_string(),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// curve
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// One rule (same syntax as --rules of eval).
    #[arg(long)]
    pub rule: String,
    /// CSV file to write.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    #[arg(long)]
    pub max_examples: Option<usize>,
}

pub fn run_curve(args: &CurveArgs) -> Result<(), CliError> {
    let dataset = load_input(&args.input, args.max_examples)?;
    let subset = select_split(&dataset, args.split)?;
    let rule = parse_eval_rule(&args.rule)?;
    let (name, curve) = rule_curve(&dataset, &subset, &rule)?;
    write_curve_file(&curve, &args.output)?;

    let mut manifest = RunManifest::new(
        "curve",
        json!({
            "input": args.input.display().to_string(),
            "rule": args.rule,
            "split": split_name(args.split),
            "max_examples": args.max_examples,
        }),
    );
    manifest
        .record_input(&args.input)
        .map_err(|e| CliError::Input(format!("cannot digest {}: {e}", args.input.display())))?;
    manifest.record_output(&args.output);
    let manifest_path = args.output.with_extension("manifest.json");
    manifest
        .write(&manifest_path)
        .map_err(output_err(&manifest_path))?;

    println!(
        "{name}: auc_df {:.6} -> {}",
        curve.auc_df,
        args.output.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// JSONL report file: one object per rule, then one dataset-level
    /// object with the gain/length correlation and the token profile.
    #[arg(long)]
    pub output: PathBuf,
    /// Non-learned rules to diagnose. Default: chow-sum, chow-average,
    /// chow-quantile@0, chow-quantile@0.8.
    #[arg(long, value_delimiter = ',')]
    pub rules: Vec<String>,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    #[arg(long)]
    pub max_examples: Option<usize>,
}

pub fn run_report(args: &ReportArgs) -> Result<(), CliError> {
    let dataset = load_input(&args.input, args.max_examples)?;
    let subset = select_split(&dataset, args.split)?;

    let rules: Vec<ScoreRule> = if args.rules.is_empty() {
        vec![
            ScoreRule::ChowSum,
            ScoreRule::ChowAverage,
            ScoreRule::ChowQuantile { alpha: 0.0 },
            ScoreRule::ChowQuantile { alpha: 0.8 },
        ]
    } else {
        args.rules
            .iter()
            .map(|s| ScoreRule::from_str(s).map_err(|e| CliError::UnknownRule(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?
    };

    let bias = length_bias_report(&subset, &rules)?;
    let profile = token_position_profile(&subset);
    let golden_defined = subset.task_kind == TaskKind::Accuracy
        && golden_labels(&subset)
            .map(|z| z.iter().any(|&b| b) && z.iter().any(|&b| !b))
            .unwrap_or(false);

    let mut lines = Vec::new();
    for (rule, stats) in rules.iter().zip(&bias.per_rule) {
        let golden = if golden_defined {
            let scores = score_dataset(&subset, rule);
            Some(golden_label_auc_roc(&subset, &scores)?)
        } else {
            None
        };
        lines.push(
            json!({
                "rule": stats.rule,
                "score_length_pearson": stats.score_length_pearson,
                "decile_mean_lengths": stats.decile_mean_lengths,
                "golden_auc_roc": golden,
            })
            .to_string(),
        );
        println!(
            "{}: corr(score, length) = {}, golden AUC-ROC = {}",
            stats.rule,
            stats
                .score_length_pearson
                .map_or("undefined".to_string(), |r| format!("{r:.4}")),
            golden.map_or("n/a".to_string(), |a| format!("{a:.4}")),
        );
    }
    lines.push(
        json!({
            "gain_length_pearson": bias.gain_length_pearson,
            "token_position_profile": profile,
        })
        .to_string(),
    );

    let body = lines.join("\n") + "\n";
    atomic_write(&args.output, body.as_bytes()).map_err(output_err(&args.output))?;

    let mut manifest = RunManifest::new(
        "report",
        json!({
            "input": args.input.display().to_string(),
            "rules": rules.iter().map(|r| r.to_string()).collect::<Vec<_>>(),
            "split": split_name(args.split),
            "max_examples": args.max_examples,
        }),
    );
    manifest
        .record_input(&args.input)
        .map_err(|e| CliError::Input(format!("cannot digest {}: {e}", args.input.display())))?;
    manifest.record_output(&args.output);
    let manifest_path = args.output.with_extension("manifest.json");
    manifest
        .write(&manifest_path)
        .map_err(output_err(&manifest_path))?;
    Ok(())
}
