mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use astute_rag::baselines::BaselineKind;
use astute_rag::dataset::Dataset;
use astute_rag::eval::{self, PrecisionBuckets};
use astute_rag::runner::{self, Method, RunConfig, RunError, RunTrace, TraceOutcome};
use common::{fixture, flaky_model, load, oracle_model};
use tempfile::TempDir;

fn first_ten(dir: &Path) -> (PathBuf, Dataset) {
    let ds = load("nq_50.jsonl");
    let ten = Dataset {
        name: "ten".into(),
        instances: ds.instances.into_iter().take(10).collect(),
    };
    let path = dir.join("ten.jsonl");
    fs::write(&path, ten.to_jsonl()).unwrap();
    (path, ten)
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn astute_t1_over_ten_instances_makes_twenty_calls() {
    let dir = TempDir::new().unwrap();
    let (path, ds) = first_ten(dir.path());
    let out = dir.path().join("out");
    let gw = oracle_model(&ds);
    let summary = runner::run(&RunConfig::new(&path, Method::Astute, &out), &gw).unwrap();
    assert_eq!((summary.completed, summary.failed, summary.api_calls), (10, 0, 20));
    let results = lines(&out.join(runner::RESULTS_FILE));
    assert_eq!(results.len(), 10);
    assert!(results[0].contains("\"method\":\"astute_t1\""));
    assert!(lines(&out.join(runner::FAILURES_FILE)).is_empty());
    assert!(summary.to_string().contains("total API calls: 20"));

    let again = oracle_model(&ds);
    let mut cfg = RunConfig::new(&path, Method::Astute, &out);
    cfg.resume = true;
    let resumed = runner::run(&cfg, &again).unwrap();
    assert_eq!((resumed.skipped, resumed.api_calls), (10, 0));
    assert_eq!(again.ledger_count(None), 0);
}

#[test]
fn no_rag_over_ten_instances_makes_ten_calls() {
    let dir = TempDir::new().unwrap();
    let (path, ds) = first_ten(dir.path());
    let gw = oracle_model(&ds);
    let cfg = RunConfig::new(&path, Method::Baseline(BaselineKind::NoRag), dir.path().join("o"));
    let summary = runner::run(&cfg, &gw).unwrap();
    assert_eq!((summary.completed, summary.api_calls), (10, 10));
}

#[test]
fn existing_results_need_resume() {
    let dir = TempDir::new().unwrap();
    let (path, ds) = first_ten(dir.path());
    let out = dir.path().join("out");
    runner::run(&RunConfig::new(&path, Method::Astute, &out), &oracle_model(&ds)).unwrap();
    let err = runner::run(&RunConfig::new(&path, Method::Astute, &out), &oracle_model(&ds))
        .unwrap_err();
    assert!(matches!(err, RunError::ResultsExist(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn resume_after_interrupted_write() {
    let dir = TempDir::new().unwrap();
    let (path, ds) = first_ten(dir.path());
    let out = dir.path().join("out");
    runner::run(&RunConfig::new(&path, Method::Astute, &out), &oracle_model(&ds)).unwrap();
    let full = fs::read_to_string(out.join(runner::RESULTS_FILE)).unwrap();

    // Keep three complete lines and half of the fourth.
    let kept: Vec<&str> = full.lines().collect();
    let partial = format!("{}\n{}", kept[..3].join("\n"), &kept[3][..20]);
    fs::write(out.join(runner::RESULTS_FILE), partial).unwrap();

    let gw = oracle_model(&ds);
    let mut cfg = RunConfig::new(&path, Method::Astute, &out);
    cfg.resume = true;
    let summary = runner::run(&cfg, &gw).unwrap();
    assert_eq!((summary.skipped, summary.completed, summary.api_calls), (3, 7, 14));
    assert_eq!(fs::read_to_string(out.join(runner::RESULTS_FILE)).unwrap(), full);
}

#[test]
fn failures_are_recorded_and_budgeted() {
    let dir = TempDir::new().unwrap();
    let (path, ds) = first_ten(dir.path());

    let out = dir.path().join("one");
    let gw = flaky_model(&ds, &["nq-03"]);
    let summary = runner::run(&RunConfig::new(&path, Method::Astute, &out), &gw).unwrap();
    assert_eq!((summary.completed, summary.failed), (9, 1));
    assert!(!summary.budget_exceeded());
    let failures = lines(&out.join(runner::FAILURES_FILE));
    assert_eq!(failures.len(), 1);
    assert!(failures[0].contains("\"id\":\"nq-03\"") && failures[0].contains("generation"));
    let trace: RunTrace = serde_json::from_str(
        &fs::read_to_string(out.join(runner::TRACES_DIR).join("nq-03.json")).unwrap(),
    )
    .unwrap();
    assert!(matches!(trace.outcome, TraceOutcome::Failed { .. }));

    // A failed instance is retried on resume.
    let mut cfg = RunConfig::new(&path, Method::Astute, &out);
    cfg.resume = true;
    let retried = runner::run(&cfg, &oracle_model(&ds)).unwrap();
    assert_eq!((retried.skipped, retried.completed), (9, 1));
    assert_eq!(lines(&out.join(runner::RESULTS_FILE)).len(), 10);

    let gw = flaky_model(&ds, &["nq-03", "nq-07"]);
    let summary =
        runner::run(&RunConfig::new(&path, Method::Astute, dir.path().join("two")), &gw).unwrap();
    assert_eq!(summary.failed, 2);
    assert!(summary.budget_exceeded());
}

#[test]
fn traces_hash_every_prompt_sent() {
    let dir = TempDir::new().unwrap();
    let (path, ds) = first_ten(dir.path());
    let out = dir.path().join("out");
    let gw = oracle_model(&ds);
    let mut cfg = RunConfig::new(&path, Method::Astute, &out);
    cfg.pipeline.iterations = 3;
    cfg.concurrency = 3;
    runner::run(&cfg, &gw).unwrap();

    let ledger: BTreeSet<String> = gw
        .ledger()
        .entries()
        .into_iter()
        .map(|e| e.prompt_sha256)
        .collect();
    let mut traced = BTreeSet::new();
    for inst in &ds.instances {
        let body = fs::read_to_string(
            out.join(runner::TRACES_DIR)
                .join(runner::trace_file_name(&inst.id)),
        )
        .unwrap();
        let trace: RunTrace = serde_json::from_str(&body).unwrap();
        assert_eq!(trace.api_calls, 4);
        assert_eq!(trace.prompt_sha256.len(), 4);
        assert_eq!(trace.config["iterations"], 3);
        let TraceOutcome::Astute(res) = &trace.outcome else {
            panic!("unexpected outcome")
        };
        assert_eq!(res.context_states.len(), 3);
        traced.extend(trace.prompt_sha256);
    }
    assert_eq!(traced, ledger);
}

#[test]
fn worst_case_run_uses_negatives_only() {
    let dir = TempDir::new().unwrap();
    let ds = load("rgb_8.jsonl");
    let mut cfg = RunConfig::new(
        fixture("rgb_8.jsonl"),
        Method::Baseline(BaselineKind::VanillaRag),
        dir.path(),
    );
    cfg.worst_case = Some(5);
    let gw = oracle_model(&ds);
    let summary = runner::run(&cfg, &gw).unwrap();
    assert_eq!((summary.completed, summary.failed, summary.api_calls), (6, 2, 6));
    for f in lines(&dir.path().join(runner::FAILURES_FILE)) {
        assert!(f.contains("\"step\":\"context\""), "{f}");
    }
    for inst in ds.instances.iter().take(6) {
        let body = fs::read_to_string(
            dir.path()
                .join(runner::TRACES_DIR)
                .join(runner::trace_file_name(&inst.id)),
        )
        .unwrap();
        assert!(body.contains("\"worst_case\": 5"));
        let trace: RunTrace = serde_json::from_str(&body).unwrap();
        let TraceOutcome::Baseline(res) = &trace.outcome else {
            panic!("unexpected outcome")
        };
        let prompt = &res.transcript[0].prompt;
        assert_eq!(prompt.matches("\nDocument ").count() + 1, 5);
        assert!(!prompt.contains(&inst.gold_answers[0]));
        assert_eq!(trace.retrieved_passages, 5);
    }
}

#[test]
fn evaluate_writes_reports_and_regenerates_identically() {
    let dir = TempDir::new().unwrap();
    let (path, ds) = first_ten(dir.path());
    let astute = dir.path().join("astute");
    let rag = dir.path().join("rag");
    runner::run(&RunConfig::new(&path, Method::Astute, &astute), &oracle_model(&ds)).unwrap();
    runner::run(
        &RunConfig::new(&path, Method::Baseline(BaselineKind::VanillaRag), &rag),
        &oracle_model(&ds),
    )
    .unwrap();

    let single = dir.path().join("single");
    let reports = runner::evaluate(
        &[astute.join(runner::RESULTS_FILE)],
        &path,
        &single,
        &PrecisionBuckets::default(),
    )
    .unwrap();
    assert_eq!(reports[0].overall_accuracy, 100.0);
    assert_eq!(reports[0].model.as_deref(), Some("oracle"));
    for f in ["report.json", "per_dataset.csv", "buckets.csv", "precision_histogram.csv"] {
        assert!(single.join(f).is_file(), "{f} missing");
    }
    let json = fs::read_to_string(single.join("report.json")).unwrap();
    assert!(json.contains("\"overall_accuracy\""));

    let again = dir.path().join("again");
    runner::evaluate(
        &[astute.join(runner::RESULTS_FILE)],
        &path,
        &again,
        &PrecisionBuckets::default(),
    )
    .unwrap();
    for f in ["report.json", "per_dataset.csv", "buckets.csv", "precision_histogram.csv"] {
        assert_eq!(fs::read(single.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }

    let both = dir.path().join("both");
    runner::evaluate(
        &[astute.join(runner::RESULTS_FILE), rag.join(runner::RESULTS_FILE)],
        &path,
        &both,
        &PrecisionBuckets::default(),
    )
    .unwrap();
    assert!(both.join("astute_t1_report.json").is_file());
    assert!(both.join("vanilla_rag_report.json").is_file());
    let cmp = fs::read_to_string(both.join("comparison.csv")).unwrap();
    let header = cmp.lines().next().unwrap();
    assert!(header.contains("astute_t1") && header.contains("vanilla_rag"), "{header}");
}

#[test]
fn evaluate_reports_missing_ids() {
    let dir = TempDir::new().unwrap();
    let results = dir.path().join("r.jsonl");
    fs::write(
        &results,
        "{\"id\":\"ghost\",\"method\":\"m\",\"extracted\":\"x\",\"raw\":\"x\",\"api_calls\":1}\n",
    )
    .unwrap();
    let err = runner::evaluate(
        &[results],
        &fixture("conflict_20.jsonl"),
        dir.path(),
        &PrecisionBuckets::default(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("ghost"), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn conflict_analysis_files() {
    let dir = TempDir::new().unwrap();
    let report = runner::analyze_conflicts(
        &fixture("conflict_20_no_rag.jsonl"),
        &fixture("conflict_20_rag.jsonl"),
        &fixture("conflict_20.jsonl"),
        Some(&fixture("conflict_20_astute.jsonl")),
        dir.path(),
    )
    .unwrap();
    let s = &report.summary;
    assert_eq!(
        s.both_correct + s.both_wrong + s.conflict_internal_correct + s.conflict_external_correct,
        20
    );
    assert_eq!(report.method_under_test.as_deref(), Some("astute_t1"));
    assert!(dir.path().join("conflicts.json").is_file());
    let csv = fs::read_to_string(dir.path().join("conflicts.csv")).unwrap();
    assert!(csv.contains("conflicting"), "{csv}");
}

#[test]
fn conflict_analysis_needs_overlap() {
    let dir = TempDir::new().unwrap();
    let other = dir.path().join("other.jsonl");
    fs::write(
        &other,
        "{\"id\":\"zz\",\"method\":\"m\",\"extracted\":\"x\",\"raw\":\"x\",\"api_calls\":1}\n",
    )
    .unwrap();
    let mut ds = load("conflict_20.jsonl");
    ds.instances[0].id = "zz".into();
    let ds_path = dir.path().join("ds.jsonl");
    fs::write(&ds_path, ds.to_jsonl()).unwrap();
    let only_c01 = dir.path().join("c.jsonl");
    fs::write(
        &only_c01,
        "{\"id\":\"c-02\",\"method\":\"m\",\"extracted\":\"x\",\"raw\":\"x\",\"api_calls\":1}\n",
    )
    .unwrap();
    let err = runner::analyze_conflicts(&other, &only_c01, &ds_path, None, dir.path()).unwrap_err();
    assert!(matches!(err, RunError::Eval(eval::EvalError::NoOverlap)), "{err}");
}

#[test]
fn validate_counts_and_lists_problems() {
    let (n, issues) = runner::validate(&fixture("nq_50.jsonl")).unwrap();
    assert_eq!((n, issues.len()), (50, 0));

    let dir = TempDir::new().unwrap();
    let mut text = fs::read_to_string(fixture("conflict_20.jsonl")).unwrap();
    text.push_str("{\"id\":\"bad\",\"dataset\":\"nq\",\"question\":\"q?\",\"answers\":[]}\n");
    let path = dir.path().join("bad.jsonl");
    fs::write(&path, text).unwrap();
    let (n, issues) = runner::validate(&path).unwrap();
    assert_eq!((n, issues.len()), (21, 1));
    assert!(issues[0].to_string().contains("bad"), "{}", issues[0]);

    let err = runner::validate(&dir.path().join("missing.jsonl")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn scripted_backend_needs_a_script() {
    let err = runner::make_gateway("scripted", None, None, false).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let err = runner::make_gateway("claude", None, None, false).unwrap_err();
    assert!(err.to_string().contains("--providers"));
}
