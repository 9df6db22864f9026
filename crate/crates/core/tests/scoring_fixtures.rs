mod common;

use std::fs;

use astute_rag::eval::{self, PrecisionBuckets};
use astute_rag::prompts;
use common::{fixture, load};
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    response: String,
    golds: Vec<String>,
    correct: bool,
    note: String,
}

#[test]
fn hand_labelled_correctness_cases() {
    let text = fs::read_to_string(fixture("correctness_30.jsonl")).unwrap();
    let cases: Vec<Case> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(cases.len(), 30);
    let wrong: Vec<&str> = cases
        .iter()
        .filter(|c| eval::is_correct(&prompts::extract_answer(&c.response), &c.golds) != c.correct)
        .map(|c| c.note.as_str())
        .collect();
    assert!(wrong.is_empty(), "misgraded: {wrong:?}");
}

/// Bucket by scanning the edge list directly.
fn oracle_bucket(hits: usize, total: usize, edges: &[f64]) -> usize {
    if hits == 0 {
        return 0;
    }
    let p = hits as f64 / total as f64;
    1 + edges.iter().position(|&e| p <= e).unwrap()
}

#[test]
fn buckets_match_brute_force_on_fixture() {
    let ds = load("nq_50.jsonl");
    let edges = [0.2, 0.4, 0.6, 0.8, 1.0];
    let buckets = PrecisionBuckets::default();
    let mut counts = vec![0usize; 6];
    for inst in &ds.instances {
        let hits = inst
            .passages
            .iter()
            .filter(|p| {
                let t = p.text.to_lowercase();
                inst.gold_answers.iter().any(|g| t.contains(&g.to_lowercase()))
            })
            .count();
        let p = eval::retrieval_precision(inst).unwrap();
        assert_eq!(p.hits, hits, "{}", inst.id);
        let b = oracle_bucket(hits, 10, &edges);
        assert_eq!(buckets.index_of(&p), b, "{}", inst.id);
        counts[b] += 1;
    }
    let hist = eval::precision_histogram(&ds.instances, &buckets).unwrap();
    let got: Vec<usize> = hist.iter().map(|b| b.count).collect();
    assert_eq!(got, counts);
    assert_eq!(hist[0].label, "0");
    assert_eq!(hist[1].label, "(0,0.2]");
}

#[test]
fn subset_accuracy_on_conflict_fixture() {
    let ds = load("conflict_20.jsonl");
    let a = eval::load_results(fixture("conflict_20_no_rag.jsonl")).unwrap();
    let b = eval::load_results(fixture("conflict_20_rag.jsonl")).unwrap();
    let c = eval::load_results(fixture("conflict_20_astute.jsonl")).unwrap();
    let part = eval::partition_conflicts(&a, &b, &ds).unwrap();
    let rows = eval::subset_accuracy(&part, &c, &ds).unwrap();
    let get = |name: &str| rows.iter().find(|r| r.subset == name).unwrap();
    assert_eq!((get("both_correct").n, get("both_correct").correct), (12, 12));
    assert_eq!((get("both_wrong").n, get("both_wrong").correct), (4, 0));
    assert_eq!(get("conflict_internal_correct").correct, 2);
    assert_eq!(get("conflict_external_correct").correct, 1);
    let conflicting = get("conflicting");
    assert_eq!((conflicting.n, conflicting.correct), (4, 3));
    assert_eq!(conflicting.accuracy, Some(75.0));
}

#[test]
fn evaluation_report_on_fixture() {
    let ds = load("conflict_20.jsonl");
    let c = eval::load_results(fixture("conflict_20_astute.jsonl")).unwrap();
    let report = eval::evaluate_run(&c, &ds, &PrecisionBuckets::default()).unwrap();
    assert_eq!(report.method, "astute_t1");
    assert_eq!((report.n, report.correct), (20, 15));
    assert_eq!(report.overall_accuracy, 75.0);
    assert_eq!(report.total_api_calls, 40);
    // Every fixture instance has one of two passages mentioning the answer.
    assert_eq!(report.precision_histogram[3].count, 20);
}
