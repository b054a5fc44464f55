//! Synthetic trace generator with planted structure, so every evaluation
//! and training claim can be exercised at desk scale.
//!
//! # Generator model
//!
//! Each example draws a latent defer-benefit score `b` in [0, 1]:
//!
//! * `min_token`: `b` is driven by a hidden "hard token" uncertainty `u`;
//!   one token position gets probability `0.02 + (1 - u) * 0.58`, strictly
//!   below every other token, so the minimum token probability encodes `u`.
//! * `length`: `b` grows with the output length (the repetition regime:
//!   long outputs are good deferral candidates).
//! * `short_uncertain`: early tokens are drawn with lower mean probability
//!   and `b` concentrates on short outputs.
//! * `none`: `b` is independent of everything observable.
//!
//! `signal_strength` blends the planted driver with an independent uniform;
//! `noise` jitters the threshold draws below. Qualities follow `b` through
//! two thresholds: the small model is correct iff `b + jitter < 0.45`, the
//! large model additionally recovers examples with `b + jitter >= 0.55`.
//! The quality gain is therefore monotone in `b`, and with strength 1 and
//! noise 0 the planted feature reproduces the oracle ordering exactly.
//!
//! Token probabilities rise with position (later tokens are more certain);
//! a `repetition_rate` fraction of examples get a degenerate low-probability
//! tail mimicking repetition loops.
//!
//! Every example derives its own child seed, so generation is a pure
//! function of (config, example index).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, seeded_rng, u01, uniform};
use crate::trace::{Costs, Dataset, ExampleTrace, Split, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    MinToken,
    Length,
    ShortUncertain,
    None,
}

impl std::str::FromStr for SignalKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, SynthError> {
        match s {
            "min_token" | "min-token" => Ok(SignalKind::MinToken),
            "length" => Ok(SignalKind::Length),
            "short_uncertain" | "short-uncertain" => Ok(SignalKind::ShortUncertain),
            "none" => Ok(SignalKind::None),
            _ => Err(SynthError::UnknownSignal(s.to_string())),
        }
    }
}

/// Output lengths are `min + floor(u^shape * (max - min + 1))`, clamped to
/// `max`. Shape > 1 skews short, shape < 1 skews long.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub min: usize,
    pub max: usize,
    pub shape: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_examples: usize,
    pub length_distribution: LengthDistribution,
    pub repetition_rate: f64,
    pub signal: SignalKind,
    pub signal_strength: f64,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("n_examples must be >= 1")]
    NoExamples,
    #[error("infeasible length range: min {min} .. max {max}")]
    InfeasibleLengths { min: usize, max: usize },
    #[error("length shape {0} must be a positive finite number")]
    BadShape(f64),
    #[error("{name} = {value} must lie in [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("noise {0} must be a finite number >= 0")]
    BadNoise(f64),
    #[error("unknown signal kind `{0}`")]
    UnknownSignal(String),
}

// Quality thresholds: small correct below the first, gain fires above the
// second. The band between is "hopeless" (both models wrong).
const SMALL_CORRECT_BELOW: f64 = 0.45;
const GAIN_AT_OR_ABOVE: f64 = 0.55;

fn validate(config: &SynthConfig) -> Result<(), SynthError> {
    if config.n_examples == 0 {
        return Err(SynthError::NoExamples);
    }
    let lengths = config.length_distribution;
    if lengths.min < 1 || lengths.min > lengths.max {
        return Err(SynthError::InfeasibleLengths {
            min: lengths.min,
            max: lengths.max,
        });
    }
    if !(lengths.shape.is_finite() && lengths.shape > 0.0) {
        return Err(SynthError::BadShape(lengths.shape));
    }
    for (name, value) in [
        ("repetition_rate", config.repetition_rate),
        ("signal_strength", config.signal_strength),
    ] {
        if !(0.0..=1.0).contains(&value) {
            return Err(SynthError::OutOfRange { name, value });
        }
    }
    if !(config.noise.is_finite() && config.noise >= 0.0) {
        return Err(SynthError::BadNoise(config.noise));
    }
    Ok(())
}

/// Generate an accuracy-task dataset (all examples marked train) with the
/// planted structure described in the module docs. Deterministic per seed.
pub fn generate(config: &SynthConfig) -> Result<Dataset, SynthError> {
    validate(config)?;
    let lengths = config.length_distribution;
    let span = (lengths.max - lengths.min + 1) as f64;

    let mut examples = Vec::with_capacity(config.n_examples);
    for i in 0..config.n_examples {
        let mut rng = seeded_rng(derive_seed(config.seed, i as u64));

        let len = {
            let frac = u01(&mut rng).powf(lengths.shape);
            (lengths.min + (frac * span) as usize).min(lengths.max)
        };
        let rel_len = if lengths.max > lengths.min {
            (len - lengths.min) as f64 / (lengths.max - lengths.min) as f64
        } else {
            0.5
        };

        // Hidden hard-token uncertainty; only read in min_token mode but
        // always drawn to keep the stream layout fixed across modes.
        let hard = u01(&mut rng);
        let independent = u01(&mut rng);
        let driver = match config.signal {
            SignalKind::MinToken => hard,
            SignalKind::Length => rel_len,
            SignalKind::ShortUncertain => 1.0 - rel_len,
            SignalKind::None => independent,
        };
        let blend = u01(&mut rng);
        let benefit = match config.signal {
            SignalKind::None => independent,
            _ => config.signal_strength * driver + (1.0 - config.signal_strength) * blend,
        };

        // Token probabilities: rising with position, mode-specific floor.
        let (p_early, floor) = match config.signal {
            SignalKind::MinToken => (0.80, 0.65),
            SignalKind::ShortUncertain => (0.45, 0.30),
            _ => (0.70, 0.30),
        };
        let p_late = 0.95;
        let repetitive = u01(&mut rng) < config.repetition_rate;
        let mut probs = Vec::with_capacity(len);
        for j in 0..len {
            let mean = p_late - (p_late - p_early) * (-(j as f64) / 3.0).exp();
            let p = (mean + 0.04 * (2.0 * u01(&mut rng) - 1.0)).clamp(floor, 0.995);
            probs.push(p);
        }
        if repetitive {
            // Degenerate repeated tail. Kept above the planted hard-token
            // band so min_token signals stay intact.
            let tail_start = (len as f64 * 0.6) as usize;
            for p in probs.iter_mut().skip(tail_start) {
                *p = uniform(&mut rng, 0.62, 0.85);
            }
        }
        if config.signal == SignalKind::MinToken {
            let slot = crate::rng::index(&mut rng, len);
            probs[slot] = 0.02 + (1.0 - hard) * 0.58;
        }

        let jitter_small = config.noise * (2.0 * u01(&mut rng) - 1.0);
        let jitter_gain = config.noise * (2.0 * u01(&mut rng) - 1.0);
        let small_quality = if benefit + jitter_small < SMALL_CORRECT_BELOW {
            1.0
        } else {
            0.0
        };
        let gain = benefit + jitter_gain >= GAIN_AT_OR_ABOVE;
        let large_quality = if gain { 1.0 } else { small_quality };

        examples.push(ExampleTrace {
            id: format!("synth-{i:06}"),
            token_logprobs: probs.iter().map(|p| p.ln()).collect(),
            small_quality,
            large_quality,
            small_embedding: None,
            large_intermediate_embedding: None,
            split: Split::Train,
        });
    }

    Ok(Dataset {
        task_kind: TaskKind::Accuracy,
        costs: Costs { c1: 1.0, c2: 2.0 },
        examples,
    })
}
