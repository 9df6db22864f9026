//! Scoring and analysis: answer containment, retrieval precision, precision
//! buckets, conflict partitions, and run reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, QaInstance};
use crate::prompts::AnswerSpan;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no results to evaluate")]
    Empty,
    #[error("instance {0:?} has no passages")]
    NoPassages(String),
    #[error("result id {0:?} is not in the dataset")]
    UnknownId(String),
    #[error("result sets do not cover the same ids; missing: {}", .0.join(", "))]
    IdMismatch(Vec<String>),
    #[error("result sets share no ids")]
    NoOverlap,
    #[error("duplicate result id {0:?}")]
    DuplicateResult(String),
    #[error("invalid bucket edges: {0}")]
    BadEdges(String),
    #[error("results line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// Normalization and containment

/// Lowercase, collapse whitespace runs to one space, trim.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn is_trim_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{00AB}' | '\u{00BB}' | '\u{2026}' | '\u{2013}' | '\u{2014}'
        )
}

/// [`normalize_text`] plus punctuation trimmed from both ends.
pub fn normalize_gold(s: &str) -> String {
    normalize_text(s)
        .trim_matches(|c: char| is_trim_punct(c) || c.is_whitespace())
        .to_string()
}

/// Whether `text` contains any gold variant after normalization. Variants that
/// normalize to nothing never match.
pub fn contains_any_gold(text: &str, golds: &[String]) -> bool {
    let hay = normalize_text(text);
    golds.iter().any(|g| {
        let g = normalize_gold(g);
        !g.is_empty() && hay.contains(&g)
    })
}

/// Containment on the extracted answer, or on the whole response when no
/// answer was extracted.
pub fn is_correct(response: &AnswerSpan, golds: &[String]) -> bool {
    contains_any_gold(response.scoring_text(), golds)
}

// ---------------------------------------------------------------------------
// Retrieval precision

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPrecision {
    pub value: f64,
    pub hits: usize,
    pub total: usize,
}

/// Fraction of retrieved passages containing a gold variant.
pub fn retrieval_precision(inst: &QaInstance) -> Result<RetrievalPrecision, EvalError> {
    let total = inst.passages.len();
    if total == 0 {
        return Err(EvalError::NoPassages(inst.id.clone()));
    }
    let hits = inst
        .passages
        .iter()
        .filter(|p| contains_any_gold(&p.text, &inst.gold_answers))
        .count();
    Ok(RetrievalPrecision {
        value: hits as f64 / total as f64,
        hits,
        total,
    })
}

/// Bucket boundaries for retrieval precision. Zero precision always has its own
/// bucket; the remaining buckets are `(e[i-1], e[i]]` with `e[-1] = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionBuckets {
    upper_edges: Vec<f64>,
}

impl Default for PrecisionBuckets {
    fn default() -> Self {
        Self {
            upper_edges: vec![0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

impl PrecisionBuckets {
    pub fn new(upper_edges: Vec<f64>) -> Result<Self, EvalError> {
        if upper_edges.is_empty() {
            return Err(EvalError::BadEdges("need at least one edge".into()));
        }
        let mut prev = 0.0;
        for &e in &upper_edges {
            if !(e > prev && e <= 1.0) {
                return Err(EvalError::BadEdges(format!(
                    "edges must increase strictly within (0, 1], got {upper_edges:?}"
                )));
            }
            prev = e;
        }
        if prev != 1.0 {
            return Err(EvalError::BadEdges("last edge must be 1".into()));
        }
        Ok(Self { upper_edges })
    }

    pub fn len(&self) -> usize {
        self.upper_edges.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, p: &RetrievalPrecision) -> usize {
        if p.hits == 0 {
            return 0;
        }
        1 + self
            .upper_edges
            .iter()
            .position(|&e| p.value <= e)
            .unwrap_or(self.upper_edges.len() - 1)
    }

    /// `(lower, upper, label)` for bucket `i`.
    pub fn bounds(&self, i: usize) -> (f64, f64, String) {
        if i == 0 {
            return (0.0, 0.0, "0".into());
        }
        let lower = if i == 1 { 0.0 } else { self.upper_edges[i - 2] };
        let upper = self.upper_edges[i - 1];
        (lower, upper, format!("({lower},{upper}]"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub label: String,
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
    pub correct: usize,
    /// Percent, two decimals; absent for empty buckets.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub label: String,
    pub count: usize,
    pub mass: f64,
}

pub fn percent(correct: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| (10_000.0 * correct as f64 / n as f64).round() / 100.0)
}

// ---------------------------------------------------------------------------
// Results

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub id: String,
    pub method: String,
    pub extracted: Option<String>,
    pub raw: String,
    pub api_calls: usize,
}

impl ResultRecord {
    pub fn answer(&self) -> AnswerSpan {
        AnswerSpan {
            raw_response: self.raw.clone(),
            extracted: self.extracted.clone(),
        }
    }
}

pub fn read_results<R: Read>(reader: R) -> Result<Vec<ResultRecord>, EvalError> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| EvalError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
                line: idx + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>, EvalError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_results(file)
}

/// Correctness per id, checked against the dataset golds.
fn grade<'a>(
    results: &'a [ResultRecord],
    dataset: &'a Dataset,
) -> Result<BTreeMap<&'a str, (bool, &'a QaInstance)>, EvalError> {
    let index: HashMap<&str, &QaInstance> =
        dataset.instances.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut out = BTreeMap::new();
    for r in results {
        let inst = index
            .get(r.id.as_str())
            .ok_or_else(|| EvalError::UnknownId(r.id.clone()))?;
        let ok = is_correct(&r.answer(), &inst.gold_answers);
        if out.insert(r.id.as_str(), (ok, *inst)).is_some() {
            return Err(EvalError::DuplicateResult(r.id.clone()));
        }
    }
    Ok(out)
}

pub fn bucket_by_precision(
    results: &[ResultRecord],
    dataset: &Dataset,
    buckets: &PrecisionBuckets,
) -> Result<Vec<BucketStat>, EvalError> {
    let graded = grade(results, dataset)?;
    let mut counts = vec![(0usize, 0usize); buckets.len()];
    for (ok, inst) in graded.values() {
        let b = buckets.index_of(&retrieval_precision(inst)?);
        counts[b].0 += 1;
        counts[b].1 += usize::from(*ok);
    }
    Ok(bucket_stats(buckets, &counts))
}

fn bucket_stats(buckets: &PrecisionBuckets, counts: &[(usize, usize)]) -> Vec<BucketStat> {
    counts
        .iter()
        .enumerate()
        .map(|(i, &(n, correct))| {
            let (lower, upper, label) = buckets.bounds(i);
            BucketStat {
                label,
                lower,
                upper,
                n,
                correct,
                accuracy: percent(correct, n),
            }
        })
        .collect()
}

/// Share of instances per precision bucket.
pub fn precision_histogram<'a>(
    instances: impl IntoIterator<Item = &'a QaInstance>,
    buckets: &PrecisionBuckets,
) -> Result<Vec<HistogramBin>, EvalError> {
    let mut counts = vec![0usize; buckets.len()];
    for inst in instances {
        counts[buckets.index_of(&retrieval_precision(inst)?)] += 1;
    }
    let total: usize = counts.iter().sum();
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            label: buckets.bounds(i).2,
            count,
            mass: if total == 0 {
                0.0
            } else {
                count as f64 / total as f64
            },
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Conflict partition

/// Splits ids by which of two result sets answered correctly. With a
/// no-retrieval run as `internal` and a retrieval run as `external`, the two
/// conflict sets are the knowledge-conflict instances.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictPartition {
    pub both_correct: BTreeSet<String>,
    pub both_wrong: BTreeSet<String>,
    pub conflict_internal_correct: BTreeSet<String>,
    pub conflict_external_correct: BTreeSet<String>,
}

impl ConflictPartition {
    pub fn total(&self) -> usize {
        self.both_correct.len()
            + self.both_wrong.len()
            + self.conflict_internal_correct.len()
            + self.conflict_external_correct.len()
    }

    pub fn conflicts(&self) -> usize {
        self.conflict_internal_correct.len() + self.conflict_external_correct.len()
    }

    pub fn conflict_rate(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.conflicts() as f64 / n as f64)
    }

    /// Among conflicts, the share where the internal side was right.
    pub fn internal_share(&self) -> Option<f64> {
        let c = self.conflicts();
        (c > 0).then(|| self.conflict_internal_correct.len() as f64 / c as f64)
    }

    pub fn subsets(&self) -> [(&'static str, &BTreeSet<String>); 4] {
        [
            ("both_correct", &self.both_correct),
            ("both_wrong", &self.both_wrong),
            ("conflict_internal_correct", &self.conflict_internal_correct),
            ("conflict_external_correct", &self.conflict_external_correct),
        ]
    }

    pub fn summary(&self) -> PartitionSummary {
        PartitionSummary {
            total: self.total(),
            both_correct: self.both_correct.len(),
            both_wrong: self.both_wrong.len(),
            conflict_internal_correct: self.conflict_internal_correct.len(),
            conflict_external_correct: self.conflict_external_correct.len(),
            conflict_rate: self.conflict_rate(),
            internal_share: self.internal_share(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub total: usize,
    pub both_correct: usize,
    pub both_wrong: usize,
    pub conflict_internal_correct: usize,
    pub conflict_external_correct: usize,
    pub conflict_rate: Option<f64>,
    pub internal_share: Option<f64>,
}

pub fn partition_conflicts(
    internal: &[ResultRecord],
    external: &[ResultRecord],
    dataset: &Dataset,
) -> Result<ConflictPartition, EvalError> {
    let a = grade(internal, dataset)?;
    let b = grade(external, dataset)?;
    if !a.keys().any(|k| b.contains_key(k)) {
        return Err(EvalError::NoOverlap);
    }
    let missing: Vec<String> = a
        .keys()
        .filter(|k| !b.contains_key(*k))
        .chain(b.keys().filter(|k| !a.contains_key(*k)))
        .map(|k| k.to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::IdMismatch(missing));
    }
    let mut part = ConflictPartition::default();
    for (id, (a_ok, _)) in &a {
        let (b_ok, _) = b[id];
        let set = match (*a_ok, b_ok) {
            (true, true) => &mut part.both_correct,
            (false, false) => &mut part.both_wrong,
            (true, false) => &mut part.conflict_internal_correct,
            (false, true) => &mut part.conflict_external_correct,
        };
        set.insert(id.to_string());
    }
    Ok(part)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub subset: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

/// Accuracy of a third result set on each partition subset, plus the union of
/// the two conflict subsets.
pub fn subset_accuracy(
    partition: &ConflictPartition,
    results: &[ResultRecord],
    dataset: &Dataset,
) -> Result<Vec<SubsetAccuracy>, EvalError> {
    let graded = grade(results, dataset)?;
    let missing: Vec<String> = partition
        .subsets()
        .iter()
        .flat_map(|(_, s)| s.iter())
        .filter(|id| !graded.contains_key(id.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::IdMismatch(missing));
    }
    let score = |name: &str, ids: &mut dyn Iterator<Item = &String>| {
        let (mut n, mut correct) = (0, 0);
        for id in ids {
            n += 1;
            correct += usize::from(graded[id.as_str()].0);
        }
        SubsetAccuracy {
            subset: name.to_string(),
            n,
            correct,
            accuracy: percent(correct, n),
        }
    };
    let mut out: Vec<SubsetAccuracy> = partition
        .subsets()
        .iter()
        .map(|(name, ids)| score(name, &mut ids.iter()))
        .collect();
    out.push(score(
        "conflicting",
        &mut partition
            .conflict_internal_correct
            .iter()
            .chain(&partition.conflict_external_correct),
    ));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetAccuracy {
    pub dataset: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub n: usize,
    pub correct: usize,
    /// Percent, two decimals.
    pub overall_accuracy: f64,
    pub extraction_rate: f64,
    pub total_api_calls: usize,
    pub per_dataset: Vec<DatasetAccuracy>,
    pub buckets: Vec<BucketStat>,
    pub precision_histogram: Vec<HistogramBin>,
    /// Evaluated instances without passages; they sit outside the buckets.
    pub unprofiled: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}

/// Builds a report over `results`, a subset of the dataset's ids. Aggregation
/// order is by id, so the report does not depend on result order.
pub fn evaluate_run(
    results: &[ResultRecord],
    dataset: &Dataset,
    buckets: &PrecisionBuckets,
) -> Result<EvalReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let graded = grade(results, dataset)?;

    let mut per_dataset: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut bucket_counts = vec![(0usize, 0usize); buckets.len()];
    let mut profiled = Vec::new();
    let mut unprofiled = 0;
    for (ok, inst) in graded.values() {
        let e = per_dataset.entry(inst.dataset.as_str()).or_default();
        e.0 += 1;
        e.1 += usize::from(*ok);
        if inst.passages.is_empty() {
            unprofiled += 1;
            continue;
        }
        let b = buckets.index_of(&retrieval_precision(inst)?);
        bucket_counts[b].0 += 1;
        bucket_counts[b].1 += usize::from(*ok);
        profiled.push(*inst);
    }

    let n = graded.len();
    let correct = graded.values().filter(|(ok, _)| *ok).count();
    let mut methods: Vec<&str> = results.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    let extracted = results.iter().filter(|r| r.extracted.is_some()).count();

    Ok(EvalReport {
        method: methods.join("+"),
        model: None,
        config: None,
        n,
        correct,
        overall_accuracy: percent(correct, n).expect("n > 0"),
        extraction_rate: extracted as f64 / n as f64,
        total_api_calls: results.iter().map(|r| r.api_calls).sum(),
        per_dataset: per_dataset
            .into_iter()
            .map(|(name, (n, c))| DatasetAccuracy {
                dataset: name.to_string(),
                n,
                correct: c,
                accuracy: percent(c, n).expect("n > 0"),
            })
            .collect(),
        buckets: bucket_stats(buckets, &bucket_counts),
        precision_histogram: precision_histogram(profiled, buckets)?,
        unprofiled,
    })
}

// ---------------------------------------------------------------------------
// CSV tables

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

pub fn write_dataset_csv<W: Write>(w: W, report: &EvalReport) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["dataset", "n", "correct", "accuracy"])?;
    for d in &report.per_dataset {
        out.write_record([
            d.dataset.clone(),
            d.n.to_string(),
            d.correct.to_string(),
            format!("{:.2}", d.accuracy),
        ])?;
    }
    out.write_record([
        "overall".to_string(),
        report.n.to_string(),
        report.correct.to_string(),
        format!("{:.2}", report.overall_accuracy),
    ])?;
    out.flush().map_err(|source| EvalError::Io {
        path: "csv".into(),
        source,
    })
}

pub fn write_buckets_csv<W: Write>(w: W, report: &EvalReport) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bucket", "lower", "upper", "n", "correct", "accuracy"])?;
    for b in &report.buckets {
        out.write_record([
            b.label.clone(),
            b.lower.to_string(),
            b.upper.to_string(),
            b.n.to_string(),
            b.correct.to_string(),
            opt(b.accuracy),
        ])?;
    }
    out.flush().map_err(|source| EvalError::Io {
        path: "csv".into(),
        source,
    })
}

pub fn write_histogram_csv<W: Write>(w: W, report: &EvalReport) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bucket", "count", "mass"])?;
    for b in &report.precision_histogram {
        out.write_record([b.label.clone(), b.count.to_string(), format!("{:.4}", b.mass)])?;
    }
    out.flush().map_err(|source| EvalError::Io {
        path: "csv".into(),
        source,
    })
}

/// One row per dataset label (plus overall), one accuracy column per report.
pub fn write_comparison_csv<W: Write>(w: W, reports: &[EvalReport]) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["dataset".to_string()];
    header.extend(reports.iter().map(|r| r.method.clone()));
    out.write_record(&header)?;
    let labels: BTreeSet<&str> = reports
        .iter()
        .flat_map(|r| r.per_dataset.iter().map(|d| d.dataset.as_str()))
        .collect();
    for label in labels {
        let mut row = vec![label.to_string()];
        for r in reports {
            row.push(opt(r
                .per_dataset
                .iter()
                .find(|d| d.dataset == label)
                .map(|d| d.accuracy)));
        }
        out.write_record(&row)?;
    }
    let mut overall = vec!["overall".to_string()];
    overall.extend(reports.iter().map(|r| format!("{:.2}", r.overall_accuracy)));
    out.write_record(&overall)?;
    let mut calls = vec!["api_calls_per_query".to_string()];
    calls.extend(
        reports
            .iter()
            .map(|r| format!("{:.2}", r.total_api_calls as f64 / r.n as f64)),
    );
    out.write_record(&calls)?;
    out.flush().map_err(|source| EvalError::Io {
        path: "csv".into(),
        source,
    })
}

pub fn write_partition_csv<W: Write>(
    w: W,
    partition: &ConflictPartition,
    subsets: Option<&[SubsetAccuracy]>,
) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["subset", "n", "share", "correct", "accuracy"])?;
    let total = partition.total();
    for (name, ids) in partition.subsets() {
        let acc = subsets.and_then(|s| s.iter().find(|a| a.subset == name));
        out.write_record([
            name.to_string(),
            ids.len().to_string(),
            format!("{:.4}", ids.len() as f64 / total.max(1) as f64),
            acc.map(|a| a.correct.to_string()).unwrap_or_default(),
            opt(acc.and_then(|a| a.accuracy)),
        ])?;
    }
    if let Some(union) = subsets.and_then(|s| s.iter().find(|a| a.subset == "conflicting")) {
        out.write_record([
            union.subset.clone(),
            union.n.to_string(),
            format!("{:.4}", union.n as f64 / total.max(1) as f64),
            union.correct.to_string(),
            opt(union.accuracy),
        ])?;
    }
    out.flush().map_err(|source| EvalError::Io {
        path: "csv".into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::RetrievedPassage;
    use proptest::prelude::*;

    fn golds(g: &[&str]) -> Vec<String> {
        g.iter().map(|s| s.to_string()).collect()
    }

    fn span(extracted: Option<&str>, raw: &str) -> AnswerSpan {
        AnswerSpan {
            raw_response: raw.into(),
            extracted: extracted.map(str::to_string),
        }
    }

    #[test]
    fn containment_examples() {
        assert!(is_correct(&span(Some("the City of Paris"), ""), &golds(&["Paris"])));
        assert!(!is_correct(
            &span(Some("London"), "Paris is nice"),
            &golds(&["Paris", "City of Light"])
        ));
        assert!(is_correct(
            &span(None, "…final answer is 1867."),
            &golds(&["1867"])
        ));
    }

    #[test]
    fn gold_punctuation_trimmed() {
        assert!(is_correct(&span(Some("It was Washington"), ""), &golds(&["\"Washington.\""])));
        assert!(is_correct(&span(Some("new   york"), ""), &golds(&["New York"])));
        assert!(!is_correct(&span(Some("anything"), ""), &golds(&["..."])));
    }

    #[test]
    fn precision_formula() {
        let inst = |texts: &[&str]| QaInstance {
            id: "x".into(),
            dataset: "d".into(),
            question: "q".into(),
            gold_answers: golds(&["Paris", "City of Light"]),
            passages: texts
                .iter()
                .enumerate()
                .map(|(i, t)| RetrievedPassage::new(i as u32 + 1, "o", *t))
                .collect(),
        };
        let mut texts = vec!["nothing"; 10];
        texts[0] = "Paris is big";
        texts[4] = "the city of light";
        texts[9] = "PARIS";
        let p = retrieval_precision(&inst(&texts)).unwrap();
        assert_eq!((p.hits, p.total, p.value), (3, 10, 0.3));
        let p = retrieval_precision(&inst(&["none"; 10])).unwrap();
        assert_eq!(p.value, 0.0);
        let p = retrieval_precision(&inst(&["Paris"; 5])).unwrap();
        assert_eq!(p.value, 1.0);
        assert!(matches!(retrieval_precision(&inst(&[])), Err(EvalError::NoPassages(_))));
    }

    #[test]
    fn bucket_edges_validated() {
        assert!(PrecisionBuckets::new(vec![0.5, 1.0]).is_ok());
        assert!(PrecisionBuckets::new(vec![0.5, 0.4, 1.0]).is_err());
        assert!(PrecisionBuckets::new(vec![0.5]).is_err());
        assert!(PrecisionBuckets::new(vec![]).is_err());
        assert!(PrecisionBuckets::new(vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn bucket_boundaries_are_right_closed() {
        let b = PrecisionBuckets::default();
        let p = |hits: usize, total: usize| RetrievalPrecision {
            value: hits as f64 / total as f64,
            hits,
            total,
        };
        assert_eq!(b.index_of(&p(0, 10)), 0);
        assert_eq!(b.index_of(&p(1, 10)), 1);
        assert_eq!(b.index_of(&p(2, 10)), 1);
        assert_eq!(b.index_of(&p(3, 10)), 2);
        assert_eq!(b.index_of(&p(6, 10)), 3);
        assert_eq!(b.index_of(&p(10, 10)), 5);
        assert_eq!(b.bounds(1).2, "(0,0.2]");
    }

    fn record(id: &str, answer: &str) -> ResultRecord {
        ResultRecord {
            id: id.into(),
            method: "m".into(),
            extracted: Some(answer.into()),
            raw: String::new(),
            api_calls: 1,
        }
    }

    fn dataset_of(n: usize) -> Dataset {
        Dataset {
            name: "t".into(),
            instances: (0..n)
                .map(|i| QaInstance {
                    id: format!("q{i:02}"),
                    dataset: if i % 2 == 0 { "even" } else { "odd" }.into(),
                    question: "q".into(),
                    gold_answers: golds(&["yes"]),
                    passages: vec![RetrievedPassage::new(1, "o", "yes")],
                })
                .collect(),
        }
    }

    #[test]
    fn overall_accuracy() {
        let ds = dataset_of(4);
        let results = vec![
            record("q00", "yes"),
            record("q01", "yes"),
            record("q02", "yes"),
            record("q03", "no"),
        ];
        let r = evaluate_run(&results, &ds, &PrecisionBuckets::default()).unwrap();
        assert_eq!(r.overall_accuracy, 75.0);
        assert_eq!(r.per_dataset[0].accuracy, 100.0);
        assert_eq!(r.per_dataset[1].accuracy, 50.0);
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn report_errors() {
        let ds = dataset_of(2);
        assert!(matches!(
            evaluate_run(&[], &ds, &PrecisionBuckets::default()),
            Err(EvalError::Empty)
        ));
        assert!(matches!(
            evaluate_run(&[record("zz", "yes")], &ds, &PrecisionBuckets::default()),
            Err(EvalError::UnknownId(id)) if id == "zz"
        ));
        assert!(matches!(
            evaluate_run(&[record("q00", "a"), record("q00", "b")], &ds, &PrecisionBuckets::default()),
            Err(EvalError::DuplicateResult(_))
        ));
    }

    #[test]
    fn partition_mismatch_lists_ids() {
        let ds = dataset_of(3);
        let a = vec![record("q00", "yes"), record("q01", "yes")];
        let b = vec![record("q00", "yes"), record("q02", "yes")];
        match partition_conflicts(&a, &b, &ds) {
            Err(EvalError::IdMismatch(ids)) => assert_eq!(ids, ["q01", "q02"]),
            other => panic!("{other:?}"),
        }
        let c = vec![record("q02", "yes")];
        assert!(matches!(
            partition_conflicts(&a, &c, &ds),
            Err(EvalError::NoOverlap)
        ));
    }

    #[test]
    fn partition_definitions() {
        let ds = dataset_of(4);
        let a = vec![record("q00", "yes"), record("q01", "no"), record("q02", "yes"), record("q03", "no")];
        let b = vec![record("q00", "yes"), record("q01", "no"), record("q02", "no"), record("q03", "yes")];
        let p = partition_conflicts(&a, &b, &ds).unwrap();
        assert!(p.both_correct.contains("q00"));
        assert!(p.both_wrong.contains("q01"));
        assert!(p.conflict_internal_correct.contains("q02"));
        assert!(p.conflict_external_correct.contains("q03"));
        assert_eq!(p.conflict_rate(), Some(0.5));
        assert_eq!(p.internal_share(), Some(0.5));

        let third = vec![record("q00", "yes"), record("q01", "yes"), record("q02", "yes"), record("q03", "no")];
        let acc = subset_accuracy(&p, &third, &ds).unwrap();
        let conflicting = acc.iter().find(|a| a.subset == "conflicting").unwrap();
        assert_eq!((conflicting.n, conflicting.correct), (2, 1));
        assert_eq!(conflicting.accuracy, Some(50.0));
    }

    #[test]
    fn csv_tables() {
        let ds = dataset_of(2);
        let r = evaluate_run(&[record("q00", "yes"), record("q01", "no")], &ds, &PrecisionBuckets::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("overall,2,1,50.00"));
        let mut buf = Vec::new();
        write_buckets_csv(&mut buf, &r).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("\"(0.8,1]\",0.8,1,2,1,50.00"));
        let mut buf = Vec::new();
        write_comparison_csv(&mut buf, &[r.clone(), r]).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("dataset,m,m\n"));
    }

    proptest! {
        #[test]
        fn adding_gold_never_flips_to_false(
            text in "[a-zA-Z ,.]{0,40}",
            gs in prop::collection::vec("[a-zA-Z .]{1,8}", 1..4),
            extra in "[a-zA-Z .]{1,8}",
        ) {
            let s = span(Some(&text), "");
            let before = is_correct(&s, &gs);
            let mut more = gs.clone();
            more.push(extra);
            prop_assert!(!before || is_correct(&s, &more));
        }

        #[test]
        fn bucket_counts_ignore_order(
            answers in prop::collection::vec(any::<bool>(), 1..20),
            seed in any::<u64>(),
        ) {
            let ds = dataset_of(answers.len());
            let mut results: Vec<_> = answers
                .iter()
                .enumerate()
                .map(|(i, ok)| record(&format!("q{i:02}"), if *ok { "yes" } else { "no" }))
                .collect();
            let a = bucket_by_precision(&results, &ds, &PrecisionBuckets::default()).unwrap();
            let n = results.len();
            results.rotate_left((seed as usize) % n);
            results.reverse();
            let b = bucket_by_precision(&results, &ds, &PrecisionBuckets::default()).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.iter().map(|s| s.n).sum::<usize>(), n);
        }
    }
}
