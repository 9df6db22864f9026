//! QA instances, retrieved passages, and the line-delimited dataset format.
//!
//! Each line of a dataset file is one JSON record:
//!
//! ```json
//! {"id": "nq-1", "dataset": "nq", "question": "...", "answers": ["..."],
//!  "passages": [{"rank": 1, "origin": "https://...", "text": "...", "polarity": "negative"}]}
//! ```

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: instance {id:?} is invalid: {violations}")]
    Invalid {
        line: usize,
        id: String,
        violations: ViolationList,
    },
}

/// Tag on diagnostic corpora marking whether a passage carries the answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedPassage {
    pub rank: u32,
    pub origin: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
}

impl RetrievedPassage {
    pub fn new(rank: u32, origin: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            rank,
            origin: origin.into(),
            text: text.into(),
            polarity: None,
        }
    }

    pub fn with_polarity(mut self, polarity: Polarity) -> Self {
        self.polarity = Some(polarity);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaInstance {
    pub id: String,
    pub dataset: String,
    pub question: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub passages: Vec<RetrievedPassage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<QaInstance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Violation {
    EmptyId,
    EmptyQuestion,
    MissingGoldAnswers,
    EmptyGoldAnswer { index: usize },
    RanksNotStrictlyIncreasing { position: usize },
    RanksNotStartingAtOne { first: u32 },
    EmptyPassageText { rank: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "empty id"),
            Violation::EmptyQuestion => write!(f, "empty question"),
            Violation::MissingGoldAnswers => write!(f, "missing gold answers"),
            Violation::EmptyGoldAnswer { index } => {
                write!(f, "empty gold answer (variant {index})")
            }
            Violation::RanksNotStrictlyIncreasing { position } => {
                write!(f, "ranks not strictly increasing (passage {position})")
            }
            Violation::RanksNotStartingAtOne { first } => {
                write!(f, "ranks must start at 1 (found {first})")
            }
            Violation::EmptyPassageText { rank } => write!(f, "empty passage text (rank {rank})"),
        }
    }
}

/// Display wrapper so violations can sit inside error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViolationList(pub Vec<Violation>);

impl fmt::Display for ViolationList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Violations(Vec<Violation>),
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }

    pub fn violations(&self) -> &[Violation] {
        match self {
            Verdict::Ok => &[],
            Verdict::Violations(v) => v,
        }
    }
}

/// Checks every instance-level invariant and reports all that fail.
pub fn validate_instance(inst: &QaInstance) -> Verdict {
    let mut out = Vec::new();
    if inst.id.trim().is_empty() {
        out.push(Violation::EmptyId);
    }
    if inst.question.trim().is_empty() {
        out.push(Violation::EmptyQuestion);
    }
    if inst.gold_answers.is_empty() {
        out.push(Violation::MissingGoldAnswers);
    }
    for (index, gold) in inst.gold_answers.iter().enumerate() {
        if gold.trim().is_empty() {
            out.push(Violation::EmptyGoldAnswer { index });
        }
    }
    if let Some(first) = inst.passages.first() {
        if first.rank != 1 {
            out.push(Violation::RanksNotStartingAtOne { first: first.rank });
        }
    }
    for (position, pair) in inst.passages.windows(2).enumerate() {
        if pair[1].rank <= pair[0].rank {
            out.push(Violation::RanksNotStrictlyIncreasing {
                position: position + 2,
            });
        }
    }
    for p in &inst.passages {
        if p.text.trim().is_empty() {
            out.push(Violation::EmptyPassageText { rank: p.rank });
        }
    }
    if out.is_empty() {
        Verdict::Ok
    } else {
        Verdict::Violations(out)
    }
}

/// A parsed line that may still violate instance invariants.
#[derive(Debug, Clone)]
pub struct RawRecord {
    pub line: usize,
    pub instance: QaInstance,
}

/// Parses every line without validating instance invariants.
///
/// Used by the validator, which wants to report all bad records instead
/// of stopping at the first one. Blank lines are skipped.
pub fn read_records<R: Read>(reader: R) -> Result<Vec<RawRecord>, DatasetError> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DatasetError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let instance = parse_record(&line).map_err(|message| DatasetError::Malformed {
            line: line_no,
            message,
        })?;
        out.push(RawRecord {
            line: line_no,
            instance,
        });
    }
    Ok(out)
}

fn parse_record(line: &str) -> Result<QaInstance, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value
        .as_object()
        .ok_or_else(|| "record is not a JSON object".to_string())?;
    if !obj.contains_key("answers") {
        return Err("missing gold answers".into());
    }
    serde_json::from_value(value).map_err(|e| e.to_string())
}

/// Reads and validates a dataset from any reader.
pub fn read_dataset<R: Read>(name: &str, reader: R) -> Result<Dataset, DatasetError> {
    let records = read_records(reader)?;
    let mut seen = HashSet::new();
    let mut instances = Vec::with_capacity(records.len());
    for RawRecord { line, instance } in records {
        if let Verdict::Violations(v) = validate_instance(&instance) {
            if v.contains(&Violation::MissingGoldAnswers) {
                return Err(DatasetError::Malformed {
                    line,
                    message: "missing gold answers".into(),
                });
            }
            return Err(DatasetError::Invalid {
                line,
                id: instance.id,
                violations: ViolationList(v),
            });
        }
        if !seen.insert(instance.id.clone()) {
            return Err(DatasetError::DuplicateId {
                line,
                id: instance.id,
            });
        }
        instances.push(instance);
    }
    Ok(Dataset {
        name: name.to_string(),
        instances,
    })
}

/// One problem found by [`check_records`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub line: usize,
    pub id: Option<String>,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.id {
            Some(id) => write!(f, "line {} [{}]: {}", self.line, id, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

/// Checks every line, collecting all problems instead of stopping at the
/// first. Returns the number of records seen and the issues, one per
/// violation.
pub fn check_records<R: Read>(reader: R) -> std::io::Result<(usize, Vec<Issue>)> {
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    let mut records = 0;
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records += 1;
        let inst = match parse_record(&line) {
            Ok(inst) => inst,
            Err(message) => {
                issues.push(Issue {
                    line: line_no,
                    id: None,
                    message,
                });
                continue;
            }
        };
        for v in validate_instance(&inst).violations() {
            issues.push(Issue {
                line: line_no,
                id: Some(inst.id.clone()),
                message: v.to_string(),
            });
        }
        if !seen.insert(inst.id.clone()) {
            issues.push(Issue {
                line: line_no,
                id: Some(inst.id.clone()),
                message: "duplicate id".into(),
            });
        }
    }
    Ok((records, issues))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_dataset(&name, file)
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&QaInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Writes one JSON record per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for inst in &self.instances {
            serde_json::to_writer(&mut w, inst)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("only {available} negative passages available (need {needed})")]
pub struct NotEnoughNegatives {
    pub available: usize,
    pub needed: usize,
}

/// Builds the all-negative context: the first `k` negative passages in rank
/// order, renumbered 1..=k.
pub fn build_worst_case_context(
    inst: &QaInstance,
    k: usize,
) -> Result<Vec<RetrievedPassage>, NotEnoughNegatives> {
    let negatives: Vec<&RetrievedPassage> = inst
        .passages
        .iter()
        .filter(|p| p.polarity == Some(Polarity::Negative))
        .collect();
    if negatives.len() < k {
        return Err(NotEnoughNegatives {
            available: negatives.len(),
            needed: k,
        });
    }
    Ok(negatives
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, p)| RetrievedPassage {
            rank: i as u32 + 1,
            ..p.clone()
        })
        .collect())
}
