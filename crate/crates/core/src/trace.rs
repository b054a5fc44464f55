//! Trace data model: per-prompt evidence records, line-delimited ingestion
//! with validation, deterministic splitting, and summary statistics.
//!
//! A trace file is UTF-8, one JSON object per line. The first line is a
//! header declaring dataset metadata (`task_kind`, `c1`, `c2`); every
//! following line is one example record. Loading is streaming and
//! single-threaded; a loaded [`Dataset`] is immutable by convention and safe
//! to share across threads.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{seeded_rng, shuffle};

/// Which partition an example belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "validation"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Whether quality values are 0/1 accuracies or score differences on a
/// BLEURT-like continuous scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Accuracy,
    ScoreDiff,
}

/// Per-query inference costs of the two models. Both must be positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Costs {
    pub c1: f64,
    pub c2: f64,
}

/// One prompt's recorded evidence: the small model's per-token natural-log
/// probabilities for its greedy output, quality scores for both models, and
/// optional embeddings.
///
/// Log probabilities are stored (not raw probabilities) so long outputs do
/// not underflow; `exp` is applied only where a formula needs probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleTrace {
    pub id: String,
    pub token_logprobs: Vec<f64>,
    pub small_quality: f64,
    pub large_quality: f64,
    pub small_embedding: Option<Vec<f64>>,
    pub large_intermediate_embedding: Option<Vec<f64>>,
    pub split: Split,
}

impl ExampleTrace {
    /// Output length in tokens.
    pub fn len(&self) -> usize {
        self.token_logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_logprobs.is_empty()
    }

    /// Quality improvement of the large model over the small one.
    pub fn quality_gain(&self) -> f64 {
        self.large_quality - self.small_quality
    }
}

/// An ordered collection of traces plus dataset-level metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task_kind: TaskKind,
    pub costs: Costs,
    pub examples: Vec<ExampleTrace>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn mean_small_quality(&self) -> f64 {
        mean(self.examples.iter().map(|e| e.small_quality))
    }

    pub fn mean_large_quality(&self) -> f64 {
        mean(self.examples.iter().map(|e| e.large_quality))
    }

    /// Indices of the examples in the given split, in dataset order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// New dataset containing only the examples of one split, in order.
    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            task_kind: self.task_kind,
            costs: self.costs,
            examples: self
                .examples
                .iter()
                .filter(|e| e.split == split)
                .cloned()
                .collect(),
        }
    }

    /// Keep only the first `max` examples of each split (head truncation,
    /// in file order).
    pub fn truncate_per_split(&mut self, max: usize) {
        let mut seen_train = 0usize;
        let mut seen_val = 0usize;
        let mut seen_test = 0usize;
        self.examples.retain(|e| {
            let seen = match e.split {
                Split::Train => &mut seen_train,
                Split::Validation => &mut seen_val,
                Split::Test => &mut seen_test,
            };
            *seen += 1;
            *seen <= max
        });
    }

    /// Validate every dataset invariant. `load_traces` performs the same
    /// checks while streaming; this is for programmatically built datasets.
    pub fn validate(&self) -> Result<(), TraceError> {
        let mut validator = Validator::new(self.task_kind, self.costs)?;
        for (i, example) in self.examples.iter().enumerate() {
            // Index stands in for the record's line number (header is line 1).
            validator.check(example, i + 2)?;
        }
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing header line (expected task_kind/c1/c2 object)")]
    MissingHeader,
    #[error("line {line}: malformed record: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("empty token sequence at line {line}")]
    EmptyTokens { line: usize },
    #[error("line {line}: token log-probability {value} is not a finite number <= 0")]
    BadLogProb { line: usize, value: f64 },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error(
        "inconsistent {field} embedding dimension at line {line}: expected {expected}, found {found}"
    )]
    InconsistentEmbeddingDim {
        line: usize,
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: non-finite {field} embedding entry")]
    BadEmbeddingValue { line: usize, field: &'static str },
    #[error("line {line}: quality {value} out of declared range for {task:?} task")]
    QualityOutOfRange {
        line: usize,
        value: f64,
        task: TaskKind,
    },
    #[error("non-positive cost {name} = {value}")]
    BadCost { name: &'static str, value: f64 },
    #[error("dataset is empty")]
    Empty,
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadTrainFraction(f64),
    #[error("splitting requires at least 2 train examples, found {found}")]
    TooFewTrainExamples { found: usize },
}

/// Streaming invariant checker shared by `load_traces` and
/// `Dataset::validate`.
struct Validator {
    task_kind: TaskKind,
    ids: HashSet<String>,
    small_dim: Option<usize>,
    large_dim: Option<usize>,
    warnings: Vec<String>,
}

impl Validator {
    fn new(task_kind: TaskKind, costs: Costs) -> Result<Self, TraceError> {
        if !(costs.c1.is_finite() && costs.c1 > 0.0) {
            return Err(TraceError::BadCost {
                name: "c1",
                value: costs.c1,
            });
        }
        if !(costs.c2.is_finite() && costs.c2 > 0.0) {
            return Err(TraceError::BadCost {
                name: "c2",
                value: costs.c2,
            });
        }
        Ok(Self {
            task_kind,
            ids: HashSet::new(),
            small_dim: None,
            large_dim: None,
            warnings: Vec::new(),
        })
    }

    fn check(&mut self, e: &ExampleTrace, line: usize) -> Result<(), TraceError> {
        if e.token_logprobs.is_empty() {
            return Err(TraceError::EmptyTokens { line });
        }
        for &lp in &e.token_logprobs {
            if !lp.is_finite() || lp > 0.0 {
                return Err(TraceError::BadLogProb { line, value: lp });
            }
        }
        if !self.ids.insert(e.id.clone()) {
            return Err(TraceError::DuplicateId {
                line,
                id: e.id.clone(),
            });
        }
        self.check_quality(e.small_quality, line)?;
        self.check_quality(e.large_quality, line)?;
        Self::check_embedding(&mut self.small_dim, &e.small_embedding, "small", line)?;
        Self::check_embedding(
            &mut self.large_dim,
            &e.large_intermediate_embedding,
            "large_intermediate",
            line,
        )?;
        Ok(())
    }

    fn check_quality(&mut self, q: f64, line: usize) -> Result<(), TraceError> {
        match self.task_kind {
            TaskKind::Accuracy => {
                if !(q == 0.0 || q == 1.0) {
                    return Err(TraceError::QualityOutOfRange {
                        line,
                        value: q,
                        task: TaskKind::Accuracy,
                    });
                }
            }
            TaskKind::ScoreDiff => {
                if !q.is_finite() {
                    return Err(TraceError::QualityOutOfRange {
                        line,
                        value: q,
                        task: TaskKind::ScoreDiff,
                    });
                }
                // BLEURT-like ranges vary, so this check only warns.
                if !(-1.0..=1.5).contains(&q) {
                    self.warnings.push(format!(
                        "line {line}: quality {q} outside the typical [-1, 1.5] score range"
                    ));
                }
            }
        }
        Ok(())
    }

    fn check_embedding(
        expected: &mut Option<usize>,
        emb: &Option<Vec<f64>>,
        field: &'static str,
        line: usize,
    ) -> Result<(), TraceError> {
        let Some(values) = emb else { return Ok(()) };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TraceError::BadEmbeddingValue { line, field });
        }
        match *expected {
            None => *expected = Some(values.len()),
            Some(dim) if dim != values.len() => {
                return Err(TraceError::InconsistentEmbeddingDim {
                    line,
                    field,
                    expected: dim,
                    found: values.len(),
                });
            }
            Some(_) => {}
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    task_kind: TaskKind,
    c1: f64,
    c2: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    token_logprobs: Vec<f64>,
    small_quality: f64,
    large_quality: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    small_embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    large_intermediate_embedding: Option<Vec<f64>>,
    #[serde(default)]
    split: Option<Split>,
}

/// Load and validate a line-delimited trace file.
///
/// Returns the dataset (preserving line order) and any advisory warnings.
/// Validation failures abort the load; a partially valid dataset is never
/// returned.
pub fn load_traces(path: impl AsRef<Path>) -> Result<(Dataset, Vec<String>), TraceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header_line) = lines.next().ok_or(TraceError::MissingHeader)?;
    let header_line = header_line.map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let header: HeaderLine =
        serde_json::from_str(&header_line).map_err(|e| TraceError::Malformed {
            line: 1,
            msg: e.to_string(),
        })?;

    let costs = Costs {
        c1: header.c1,
        c2: header.c2,
    };
    let mut validator = Validator::new(header.task_kind, costs)?;
    let mut examples = Vec::new();

    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|source| TraceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RecordLine =
            serde_json::from_str(&line).map_err(|e| TraceError::Malformed {
                line: line_no,
                msg: e.to_string(),
            })?;
        let example = ExampleTrace {
            id: record.id,
            token_logprobs: record.token_logprobs,
            small_quality: record.small_quality,
            large_quality: record.large_quality,
            small_embedding: record.small_embedding,
            large_intermediate_embedding: record.large_intermediate_embedding,
            split: record.split.unwrap_or(Split::Train),
        };
        validator.check(&example, line_no)?;
        examples.push(example);
    }

    Ok((
        Dataset {
            task_kind: header.task_kind,
            costs,
            examples,
        },
        validator.warnings,
    ))
}

/// Write a dataset in the trace file format. JSON numbers use the shortest
/// representation that parses back to the same f64, so a save/load cycle is
/// lossless.
pub fn save_traces(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let path = path.as_ref();
    let io_err = |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    write_traces(dataset, &mut out).map_err(io_err)?;
    out.flush().map_err(io_err)
}

pub fn write_traces(dataset: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    let header = HeaderLine {
        task_kind: dataset.task_kind,
        c1: dataset.costs.c1,
        c2: dataset.costs.c2,
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string(&header).expect("header json")
    )?;
    for e in &dataset.examples {
        let record = RecordLine {
            id: e.id.clone(),
            token_logprobs: e.token_logprobs.clone(),
            small_quality: e.small_quality,
            large_quality: e.large_quality,
            small_embedding: e.small_embedding.clone(),
            large_intermediate_embedding: e.large_intermediate_embedding.clone(),
            split: Some(e.split),
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&record).expect("record json")
        )?;
    }
    Ok(())
}

/// Reassign the current train examples into train/validation with a seeded
/// uniform shuffle and a prefix cut. Test examples are untouched.
///
/// `|train| = round(train_fraction * N)` where N counts the examples marked
/// train on entry; the remainder becomes validation. Deterministic per seed.
pub fn split_dataset(
    mut dataset: Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<Dataset, TraceError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(TraceError::BadTrainFraction(train_fraction));
    }
    let train_idx = dataset.split_indices(Split::Train);
    if train_idx.len() < 2 {
        return Err(TraceError::TooFewTrainExamples {
            found: train_idx.len(),
        });
    }
    let n = train_idx.len();
    let n_train = (train_fraction * n as f64).round() as usize;

    let mut order = train_idx;
    let mut rng = seeded_rng(seed);
    shuffle(&mut rng, &mut order);

    for (pos, &i) in order.iter().enumerate() {
        dataset.examples[i].split = if pos < n_train {
            Split::Train
        } else {
            Split::Validation
        };
    }
    Ok(dataset)
}

/// Per-split counts plus dataset-level moments.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryStats {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub length_mean: f64,
    pub length_std: f64,
    pub mean_small_quality: f64,
    pub mean_large_quality: f64,
}

/// Exact population statistics over the whole dataset.
pub fn summary_stats(dataset: &Dataset) -> Result<SummaryStats, TraceError> {
    if dataset.is_empty() {
        return Err(TraceError::Empty);
    }
    let n = dataset.len() as f64;
    let mut train = 0;
    let mut validation = 0;
    let mut test = 0;
    for e in &dataset.examples {
        match e.split {
            Split::Train => train += 1,
            Split::Validation => validation += 1,
            Split::Test => test += 1,
        }
    }
    let length_mean = mean(dataset.examples.iter().map(|e| e.len() as f64));
    let var = dataset
        .examples
        .iter()
        .map(|e| {
            let d = e.len() as f64 - length_mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(SummaryStats {
        train,
        validation,
        test,
        length_mean,
        length_std: var.sqrt(),
        mean_small_quality: dataset.mean_small_quality(),
        mean_large_quality: dataset.mean_large_quality(),
    })
}
