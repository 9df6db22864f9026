use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use astute_rag::dataset::{self, Dataset};
use astute_rag::gateway::{self, CompletionRequest, FnBackend, Gateway, RecordingBackend};
use astute_rag::runner::{self, Method, RunConfig};
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn astute(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_astute"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Ten fixture instances written to `dir`.
fn ten(dir: &Path) -> PathBuf {
    let ds = dataset::load_dataset(fixture("nq_50.jsonl")).unwrap();
    let ten = Dataset {
        name: "ten".into(),
        instances: ds.instances.into_iter().take(10).collect(),
    };
    let path = dir.join("ten.jsonl");
    fs::write(&path, ten.to_jsonl()).unwrap();
    path
}

/// Records what a fixed-answer fake model says during a run, as a script.
fn record_script(dataset: &Path, method: Method, t: usize, dir: &Path) -> PathBuf {
    let rec = RecordingBackend::new(FnBackend::new("fake", |req: &CompletionRequest| {
        Ok(if req.prompt.starts_with("Generate") {
            "Kesthaven is a harbour town.".to_string()
        } else if req.prompt.starts_with("Task: Consolidate") {
            "Document 1 (merged from documents 1 and 2): Kesthaven.".to_string()
        } else {
            "<ANSWER> Kesthaven </ANSWER>".to_string()
        })
    }));
    let recording = rec.recording();
    let gw = Gateway::new(rec);
    let mut cfg = RunConfig::new(dataset, method, dir.join("recording"));
    cfg.pipeline.iterations = t;
    runner::run(&cfg, &gw).unwrap();
    fs::remove_dir_all(dir.join("recording")).unwrap();
    let path = dir.join(format!("{method}_t{t}.script.jsonl"));
    gateway::write_script(fs::File::create(&path).unwrap(), &recording.lines()).unwrap();
    path
}

#[test]
fn validate_clean_bad_and_missing() {
    let o = astute(&["validate", p(&fixture("nq_50.jsonl"))]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "50 instances OK");

    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.jsonl");
    let mut text = fs::read_to_string(fixture("conflict_20.jsonl")).unwrap();
    text.push_str("{\"id\":\"broken\",\"dataset\":\"nq\",\"question\":\"\",\"answers\":[\"x\"]}\n");
    fs::write(&bad, text).unwrap();
    let o = astute(&["validate", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1, "{out}");
    assert!(out.contains("broken") && out.contains("empty question"), "{out}");

    let o = astute(&["validate", p(&dir.path().join("nope.jsonl"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn scripted_run_then_resume() {
    let dir = TempDir::new().unwrap();
    let data = ten(dir.path());
    let script = record_script(&data, Method::Astute, 1, dir.path());
    let out = dir.path().join("out");
    let args = [
        "run", "--dataset", p(&data), "--method", "astute", "--t", "1", "--backend", "scripted",
        "--script", p(&script), "--out", p(&out), "--concurrency", "4",
    ];
    let o = astute(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("total API calls: 20"), "{}", stdout(&o));
    let results = fs::read_to_string(out.join("results.jsonl")).unwrap();
    assert_eq!(results.lines().count(), 10);
    assert!(out.join("traces").join("nq-01.json").is_file());

    let o = astute(&args);
    assert_eq!(o.status.code(), Some(2), "rerun without --resume must refuse");

    let mut resumed = args.to_vec();
    resumed.push("--resume");
    let o = astute(&resumed);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("skipped: 10"), "{}", stdout(&o));
    assert!(stdout(&o).contains("total API calls: 0"), "{}", stdout(&o));
    assert_eq!(fs::read_to_string(out.join("results.jsonl")).unwrap(), results);
}

#[test]
fn no_rag_baseline_makes_one_call_each() {
    let dir = TempDir::new().unwrap();
    let data = ten(dir.path());
    let script = record_script(&data, Method::Baseline("no_rag".parse().unwrap()), 1, dir.path());
    let out = dir.path().join("out");
    let o = astute(&[
        "run", "--dataset", p(&data), "--method", "no_rag", "--script", p(&script), "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("total API calls: 10"), "{}", stdout(&o));
}

#[test]
fn failure_budget_sets_exit_code() {
    let dir = TempDir::new().unwrap();
    let data = ten(dir.path());
    let script = record_script(&data, Method::Astute, 1, dir.path());
    // Drop the recorded exchanges of two questions.
    let ds = dataset::load_dataset(&data).unwrap();
    let dropped = [&ds.instances[2].question, &ds.instances[5].question];
    let kept: String = fs::read_to_string(&script)
        .unwrap()
        .lines()
        .filter(|l| !dropped.iter().any(|q| l.contains(q.as_str())))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&script, kept).unwrap();

    let out = dir.path().join("out");
    let o = astute(&["run", "--dataset", p(&data), "--script", p(&script), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stdout(&o));
    assert!(stdout(&o).contains("failed: 2"));
    let failures = fs::read_to_string(out.join("failures.jsonl")).unwrap();
    assert_eq!(failures.lines().count(), 2);
}

#[test]
fn invalid_run_config_is_rejected() {
    let dir = TempDir::new().unwrap();
    let data = ten(dir.path());
    let script = record_script(&data, Method::Astute, 1, dir.path());
    let base = ["run", "--dataset", p(&data), "--script", p(&script), "--out", p(dir.path())];
    let mut t0 = base.to_vec();
    t0.extend(["--t", "0"]);
    assert_eq!(astute(&t0).status.code(), Some(1));
    let mut unknown = base.to_vec();
    unknown.extend(["--method", "robust"]);
    assert_eq!(astute(&unknown).status.code(), Some(1));
    let o = astute(&["run", "--dataset", p(&data), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1), "scripted backend without a script");
}

#[test]
fn evaluate_single_and_compared() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("report");
    let o = astute(&[
        "evaluate", "--results", p(&fixture("conflict_20_astute.jsonl")), "--dataset",
        p(&fixture("conflict_20.jsonl")), "--out", p(&report),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("astute_t1: accuracy 75.00%"), "{}", stdout(&o));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["overall_accuracy"], 75.0);

    let both = dir.path().join("both");
    let o = astute(&[
        "evaluate", "--results", p(&fixture("conflict_20_astute.jsonl")),
        p(&fixture("conflict_20_rag.jsonl")), "--dataset", p(&fixture("conflict_20.jsonl")),
        "--out", p(&both),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(both.join("comparison.csv").is_file());
}

#[test]
fn evaluate_id_mismatch_exits_one() {
    let dir = TempDir::new().unwrap();
    let o = astute(&[
        "evaluate", "--results", p(&fixture("conflict_20_astute.jsonl")), "--dataset",
        p(&fixture("nq_50.jsonl")), "--out", p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("c-01"));
}

#[test]
fn analyze_conflicts_with_method_under_test() {
    let dir = TempDir::new().unwrap();
    let o = astute(&[
        "analyze-conflicts", "--internal", p(&fixture("conflict_20_no_rag.jsonl")),
        "--external", p(&fixture("conflict_20_rag.jsonl")), "--dataset",
        p(&fixture("conflict_20.jsonl")), "--method", p(&fixture("conflict_20_astute.jsonl")),
        "--out", p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("both correct 12, both wrong 4, internal correct 3, external correct 1"), "{out}");
    assert!(out.contains("conflict rate 0.2000, internal share 0.7500"), "{out}");
    assert!(out.contains("conflicting: 75.00% of 4"), "{out}");
}

#[test]
fn profile_prints_histogram() {
    let o = astute(&["profile", p(&fixture("nq_50.jsonl"))]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "0,10,0.200"), "{out}");
    assert_eq!(out.lines().count(), 7);
}
