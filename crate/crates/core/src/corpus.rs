//! Dataset ingestion and validation.
//!
//! Datasets are JSON-Lines files, one record per line:
//!
//! ```text
//! {"article": "...", "question": "... @placeholder ...",
//!  "option_0": "suffered", ..., "option_4": "achieved", "label": 3}
//! ```
//!
//! `article` holds the passage, `question` the summary sentence with one
//! `@placeholder` marker, `option_0..option_{n-1}` the candidate answers
//! (any n >= 2, probed by consecutive keys), and `label` the optional gold
//! candidate index. Records may carry an explicit `id`; otherwise the
//! zero-based record ordinal is used. Augmented files add `option_n` for
//! the mined negative plus a `nal_meta` object describing it.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::textprep::Tokenizer;

/// The literal marker removed from the question. Case-sensitive.
pub const PLACEHOLDER: &str = "@placeholder";

/// Which task a split belongs to. The input format is identical across
/// tasks; the tag only labels reports and manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Subtask1,
    Subtask2,
    Synthetic,
}

impl std::str::FromStr for TaskTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subtask1" => Ok(TaskTag::Subtask1),
            "subtask2" => Ok(TaskTag::Subtask2),
            "synthetic" => Ok(TaskTag::Synthetic),
            other => Err(Error::InvalidParameter(format!("unknown task tag `{other}`"))),
        }
    }
}

impl std::fmt::Display for TaskTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TaskTag::Subtask1 => "subtask1",
            TaskTag::Subtask2 => "subtask2",
            TaskTag::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

/// Canonical split names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Trial,
    Dev,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "trial" => Ok(SplitName::Trial),
            "dev" => Ok(SplitName::Dev),
            "test" => Ok(SplitName::Test),
            other => Err(Error::InvalidParameter(format!("unknown split name `{other}`"))),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SplitName::Train => "train",
            SplitName::Trial => "trial",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        };
        f.write_str(s)
    }
}

/// Metadata attached to an instance whose candidate list was extended with
/// a mined negative. Serialized as the `nal_meta` record field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NalMeta {
    /// Surface form of the mined token, as appended to the candidates.
    pub token: String,
    /// Masked-LM probability of the mined token.
    pub probability: f64,
    /// 1-based rank of the mined token in the full vocabulary distribution.
    pub rank: usize,
    /// True when the raw top-1 prediction equalled the gold answer and the
    /// next-ranked token was taken instead.
    pub skipped: bool,
    /// Index of an original candidate the mined token duplicates, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<usize>,
}

/// One `<passage, question, candidates, gold>` example.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub passage: String,
    pub question: String,
    pub candidates: Vec<String>,
    pub gold_index: Option<usize>,
    /// Present iff the last candidate was appended by negative augmentation.
    pub nal_meta: Option<NalMeta>,
}

impl Instance {
    /// Number of candidates the instance had before augmentation.
    pub fn original_candidate_count(&self) -> usize {
        if self.nal_meta.is_some() {
            self.candidates.len() - 1
        } else {
            self.candidates.len()
        }
    }

    /// Gold candidate string, when labeled.
    pub fn gold_candidate(&self) -> Option<&str> {
        self.gold_index
            .and_then(|g| self.candidates.get(g))
            .map(String::as_str)
    }
}

/// A named collection of instances.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub task_tag: TaskTag,
    pub instances: Vec<Instance>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Loading and serialization
// ---------------------------------------------------------------------------

/// Load a JSON-Lines dataset file.
///
/// Schema violations (unparseable line, missing field, non-consecutive
/// `option_k` keys, duplicate id) are hard errors naming the line. Semantic
/// problems such as a missing placeholder load fine and are reported by
/// [`validate_split`]. Blank lines are skipped. File order is preserved.
pub fn load_jsonl(path: &Path, task_tag: TaskTag, name: SplitName) -> Result<DatasetSplit> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut instances = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line_no = line_no + 1;
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let instance = parse_record(&line, instances.len()).map_err(|e| match e {
            Error::MissingField { field, .. } => Error::MissingField {
                path: path.to_path_buf(),
                line: line_no,
                field,
            },
            Error::MalformedRecord { message, .. } => Error::MalformedRecord {
                path: path.to_path_buf(),
                line: line_no,
                message,
            },
            other => other,
        })?;
        if !seen_ids.insert(instance.id.clone()) {
            return Err(Error::DuplicateId { id: instance.id });
        }
        instances.push(instance);
    }

    Ok(DatasetSplit {
        name,
        task_tag,
        instances,
    })
}

fn parse_record(line: &str, ordinal: usize) -> Result<Instance> {
    let malformed = |message: String| Error::MalformedRecord {
        path: Default::default(),
        line: 0,
        message,
    };
    let missing = |field: &str| Error::MissingField {
        path: Default::default(),
        line: 0,
        field: field.to_string(),
    };

    let value: Value =
        serde_json::from_str(line).map_err(|e| malformed(format!("invalid JSON: {e}")))?;
    let map = value
        .as_object()
        .ok_or_else(|| malformed("record is not a JSON object".into()))?;

    let text_field = |field: &str| -> Result<String> {
        match map.get(field) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(other) => Err(malformed(format!(
                "field `{field}` must be a string, got {other}"
            ))),
            None => Err(missing(field)),
        }
    };

    let passage = text_field("article")?;
    let question = text_field("question")?;

    // Candidates are option_0..option_{n-1}; keys must be consecutive.
    let max_option = map
        .keys()
        .filter_map(|k| k.strip_prefix("option_"))
        .filter_map(|k| k.parse::<usize>().ok())
        .max();
    let n = match max_option {
        Some(m) => m + 1,
        None => return Err(missing("option_0")),
    };
    if n < 2 {
        return Err(missing("option_1"));
    }
    let mut candidates = Vec::with_capacity(n);
    for k in 0..n {
        let field = format!("option_{k}");
        match map.get(&field) {
            Some(Value::String(s)) => candidates.push(s.clone()),
            Some(other) => {
                return Err(malformed(format!(
                    "field `{field}` must be a string, got {other}"
                )))
            }
            None => return Err(missing(&field)),
        }
    }

    let gold_index = match map.get("label") {
        None | Some(Value::Null) => None,
        Some(Value::Number(num)) => match num.as_u64() {
            Some(v) => Some(v as usize),
            None => return Err(malformed(format!("field `label` must be a non-negative integer, got {num}"))),
        },
        Some(other) => {
            return Err(malformed(format!(
                "field `label` must be an integer, got {other}"
            )))
        }
    };

    let id = match map.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(num)) => num.to_string(),
        Some(other) => return Err(malformed(format!("field `id` must be a string, got {other}"))),
        None => ordinal.to_string(),
    };

    let nal_meta = match map.get("nal_meta") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value(v.clone())
                .map_err(|e| malformed(format!("invalid `nal_meta`: {e}")))?,
        ),
    };

    Ok(Instance {
        id,
        passage,
        question,
        candidates,
        gold_index,
        nal_meta,
    })
}

/// Canonical record form of an instance (see [`load_jsonl`] for the schema).
pub fn instance_to_record(instance: &Instance) -> Value {
    let mut map = Map::new();
    map.insert("id".into(), Value::String(instance.id.clone()));
    map.insert("article".into(), Value::String(instance.passage.clone()));
    map.insert("question".into(), Value::String(instance.question.clone()));
    for (k, candidate) in instance.candidates.iter().enumerate() {
        map.insert(format!("option_{k}"), Value::String(candidate.clone()));
    }
    if let Some(gold) = instance.gold_index {
        map.insert("label".into(), Value::Number(gold.into()));
    }
    if let Some(meta) = &instance.nal_meta {
        map.insert(
            "nal_meta".into(),
            serde_json::to_value(meta).expect("nal_meta serializes"),
        );
    }
    Value::Object(map)
}

/// Write a split back out in the canonical record schema, one record per
/// line, preserving instance order. Loading the result reproduces the same
/// instances.
pub fn write_jsonl(split: &DatasetSplit, path: &Path) -> Result<()> {
    let mut file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    for instance in &split.instances {
        let line = serde_json::to_string(&instance_to_record(instance))
            .expect("record serializes");
        writeln!(file, "{line}").map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// A violated instance invariant. Issues are data, not failures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    MissingPlaceholder,
    MultiplePlaceholders { count: usize },
    TooFewCandidates { count: usize },
    EmptyCandidate { index: usize },
    GoldOutOfRange { gold: usize, count: usize },
}

impl std::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ValidationIssue::MissingPlaceholder => write!(f, "missing placeholder"),
            ValidationIssue::MultiplePlaceholders { count } => {
                write!(f, "multiple placeholders ({count})")
            }
            ValidationIssue::TooFewCandidates { count } => {
                write!(f, "too few candidates ({count})")
            }
            ValidationIssue::EmptyCandidate { index } => write!(f, "empty candidate {index}"),
            ValidationIssue::GoldOutOfRange { gold, count } => {
                write!(f, "gold index {gold} out of range for {count} candidates")
            }
        }
    }
}

/// Check all instance invariants; empty result means the instance is valid.
pub fn validate_instance(instance: &Instance) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    let markers = instance.question.matches(PLACEHOLDER).count();
    match markers {
        1 => {}
        0 => issues.push(ValidationIssue::MissingPlaceholder),
        count => issues.push(ValidationIssue::MultiplePlaceholders { count }),
    }
    if instance.candidates.len() < 2 {
        issues.push(ValidationIssue::TooFewCandidates {
            count: instance.candidates.len(),
        });
    }
    for (index, candidate) in instance.candidates.iter().enumerate() {
        if candidate.is_empty() {
            issues.push(ValidationIssue::EmptyCandidate { index });
        }
    }
    if let Some(gold) = instance.gold_index {
        if gold >= instance.candidates.len() {
            issues.push(ValidationIssue::GoldOutOfRange {
                gold,
                count: instance.candidates.len(),
            });
        }
    }
    issues
}

/// Per-split validation summary. `accepted + rejected` always equals the
/// number of instances examined.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// `(instance id, issues)` for every instance with at least one issue.
    pub flagged: Vec<(String, Vec<ValidationIssue>)>,
}

/// Validate every instance of a split.
pub fn validate_split(split: &DatasetSplit) -> ValidationReport {
    let mut flagged = Vec::new();
    for instance in &split.instances {
        let issues = validate_instance(instance);
        if !issues.is_empty() {
            flagged.push((instance.id.clone(), issues));
        }
    }
    ValidationReport {
        total: split.len(),
        accepted: split.len() - flagged.len(),
        rejected: flagged.len(),
        flagged,
    }
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Split size and average passage length. Lengths are reported both in
/// subword tokens (under the supplied tokenizer) and whitespace words,
/// since published per-passage averages rarely state their counting unit.
#[derive(Debug, Clone, Serialize)]
pub struct SplitStats {
    pub count: usize,
    pub avg_passage_tokens: f64,
    pub avg_passage_words: f64,
}

/// Compute [`SplitStats`] for a non-empty split.
pub fn split_stats(split: &DatasetSplit, tokenizer: &dyn Tokenizer) -> Result<SplitStats> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let count = split.len();
    let token_total: usize = split
        .instances
        .iter()
        .map(|i| tokenizer.tokenize(&i.passage).len())
        .sum();
    let word_total: usize = split
        .instances
        .iter()
        .map(|i| i.passage.split_whitespace().count())
        .sum();
    Ok(SplitStats {
        count,
        avg_passage_tokens: token_total as f64 / count as f64,
        avg_passage_words: word_total as f64 / count as f64,
    })
}
