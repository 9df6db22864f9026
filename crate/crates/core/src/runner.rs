//! Batch commands over dataset files: run a method, evaluate results,
//! partition conflicts, profile retrieval precision, validate corpora.
//!
//! Output directory layout written by [`run`]:
//!
//! ```text
//! <out>/results.jsonl    one ResultRecord per completed instance, dataset order
//! <out>/failures.jsonl   one FailureRecord per failed attempt
//! <out>/traces/<id>.json one RunTrace per instance
//! <out>/run.json         method, config and backend of the latest run
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineKind, BaselineParams, BaselineResult, UnknownBaseline};
use crate::dataset::{self, Dataset, DatasetError, Issue, QaInstance};
use crate::eval::{self, EvalError, EvalReport, PartitionSummary, PrecisionBuckets, ResultRecord};
use crate::gateway::{
    self, Backend, Gateway, MatchMode, ProviderConfigError, ScriptError, ScriptedBackend,
};
use crate::pipeline::{AstuteRag, PipelineConfig, PipelineResult};
use crate::prompts::TEMPLATE_VERSION;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const TRACES_DIR: &str = "traces";
pub const RUN_META_FILE: &str = "run.json";

/// Share of attempted instances allowed to fail before a run reports failure.
pub const FAILURE_BUDGET: f64 = 0.10;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Provider(#[from] ProviderConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} already has results; pass --resume to continue it")]
    ResultsExist(String),
}

impl RunError {
    /// 1 for invalid input or evaluation failures, 2 for I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Io { .. } | RunError::ResultsExist(_) => 2,
            RunError::Dataset(DatasetError::Io { .. }) => 2,
            RunError::Eval(EvalError::Io { .. }) => 2,
            RunError::Script(ScriptError::Io { .. }) => 2,
            RunError::Provider(ProviderConfigError::Io { .. }) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Astute,
    Baseline(BaselineKind),
}

impl FromStr for Method {
    type Err = UnknownBaseline;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("astute") {
            Ok(Method::Astute)
        } else {
            s.parse().map(Method::Baseline)
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Astute => f.write_str("astute"),
            Method::Baseline(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub method: Method,
    pub pipeline: PipelineConfig,
    pub baseline: BaselineParams,
    pub concurrency: usize,
    pub out_dir: PathBuf,
    pub resume: bool,
    /// Replace each instance's passages with its first `k` negatives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worst_case: Option<usize>,
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, method: Method, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            method,
            pipeline: PipelineConfig::default(),
            baseline: BaselineParams::default(),
            concurrency: 1,
            out_dir: out_dir.into(),
            resume: false,
            worst_case: None,
        }
    }

    /// Label written into results, e.g. `astute_t2` or `usc`.
    pub fn method_label(&self) -> String {
        match self.method {
            Method::Astute => format!("astute_t{}", self.pipeline.iterations),
            Method::Baseline(k) => k.to_string(),
        }
    }

    fn validate(&self) -> Result<(), RunError> {
        if self.concurrency == 0 {
            return Err(RunError::Config("concurrency must be >= 1".into()));
        }
        self.pipeline
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        if self.worst_case == Some(0) {
            return Err(RunError::Config("worst-case passage count must be >= 1".into()));
        }
        Ok(())
    }

    fn method_config(&self) -> serde_json::Value {
        let mut v = match self.method {
            Method::Astute => serde_json::to_value(&self.pipeline),
            Method::Baseline(_) => serde_json::to_value(&self.baseline),
        }
        .expect("config serializes");
        if let Some(k) = self.worst_case {
            v["worst_case"] = k.into();
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub id: String,
    pub method: String,
    pub step: String,
    pub error: String,
    pub api_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum TraceOutcome {
    Astute(PipelineResult),
    Baseline(BaselineResult),
    Failed {
        step: String,
        error: String,
        transcript: serde_json::Value,
    },
}

/// Everything exchanged with the model for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub id: String,
    pub method: String,
    pub question: String,
    pub template_version: u32,
    pub config: serde_json::Value,
    pub retrieved_passages: usize,
    pub api_calls: usize,
    /// Hash of each prompt sent, in order; these match the call ledger's
    /// `prompt_sha256` entries.
    pub prompt_sha256: Vec<String>,
    pub outcome: TraceOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub instances: usize,
    pub skipped: usize,
    pub attempted: usize,
    pub completed: usize,
    pub failed: usize,
    /// Gateway ledger growth during this run.
    pub api_calls: usize,
}

impl RunSummary {
    pub fn failure_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.failed as f64 / self.attempted as f64
        }
    }

    pub fn budget_exceeded(&self) -> bool {
        self.failure_rate() > FAILURE_BUDGET
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "instances: {}, skipped: {}, completed: {}, failed: {}, total API calls: {}",
            self.instances, self.skipped, self.completed, self.failed, self.api_calls
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunMeta {
    method: String,
    backend: String,
    dataset: String,
    config: serde_json::Value,
}

enum Outcome {
    Done(ResultRecord, RunTrace),
    Failed(FailureRecord, RunTrace),
}

fn run_instance(gateway: &Gateway, cfg: &RunConfig, label: &str, inst: &QaInstance) -> Outcome {
    let config = cfg.method_config();
    let trace = |api_calls, prompts: Vec<String>, outcome: TraceOutcome| RunTrace {
        id: inst.id.clone(),
        method: label.to_string(),
        question: inst.question.clone(),
        template_version: TEMPLATE_VERSION,
        config: config.clone(),
        retrieved_passages: match (&outcome, cfg.worst_case) {
            (TraceOutcome::Failed { step, .. }, Some(_)) if step == "context" => 0,
            (_, Some(k)) => k,
            (_, None) => inst.passages.len(),
        },
        api_calls,
        prompt_sha256: prompts.iter().map(|p| gateway::prompt_sha256(p)).collect(),
        outcome,
    };
    let failure = |step: String, error: String, transcript: serde_json::Value, prompts: Vec<String>| {
        let calls = prompts.len();
        Outcome::Failed(
            FailureRecord {
                id: inst.id.clone(),
                method: label.to_string(),
                step: step.clone(),
                error: error.clone(),
                api_calls: calls,
            },
            trace(
                calls,
                prompts,
                TraceOutcome::Failed {
                    step,
                    error,
                    transcript,
                },
            ),
        )
    };

    let retrieved = match cfg.worst_case {
        Some(k) => match dataset::build_worst_case_context(inst, k) {
            Ok(p) => p,
            Err(e) => {
                return failure("context".into(), e.to_string(), serde_json::Value::Array(vec![]), vec![])
            }
        },
        None => inst.passages.clone(),
    };

    let record = |extracted: Option<String>, raw: String, api_calls| ResultRecord {
        id: inst.id.clone(),
        method: label.to_string(),
        extracted,
        raw,
        api_calls,
    };

    match cfg.method {
        Method::Astute => {
            let astute = AstuteRag::new(gateway, cfg.pipeline.clone()).expect("config validated");
            match astute.run(&inst.question, &retrieved) {
                Ok(res) => {
                    let prompts = res.transcript.iter().map(|t| t.prompt.clone()).collect();
                    let r = record(
                        res.final_answer.extracted.clone(),
                        res.final_answer.raw_response.clone(),
                        res.api_calls,
                    );
                    Outcome::Done(r, trace(res.api_calls, prompts, TraceOutcome::Astute(res)))
                }
                Err(e) => {
                    let prompts = e.transcript.iter().map(|t| t.prompt.clone()).collect();
                    let transcript = serde_json::to_value(&e.transcript).expect("serializable");
                    failure(e.step.to_string(), e.failure.to_string(), transcript, prompts)
                }
            }
        }
        Method::Baseline(kind) => {
            match baselines::run_baseline(gateway, kind, &inst.question, &retrieved, &cfg.baseline) {
                Ok(res) => {
                    let prompts = res.transcript.iter().map(|t| t.prompt.clone()).collect();
                    let r = record(
                        res.final_answer.extracted.clone(),
                        res.final_answer.raw_response.clone(),
                        res.api_calls,
                    );
                    Outcome::Done(r, trace(res.api_calls, prompts, TraceOutcome::Baseline(res)))
                }
                Err(e) => {
                    let prompts = e.transcript.iter().map(|t| t.prompt.clone()).collect();
                    let transcript = serde_json::to_value(&e.transcript).expect("serializable");
                    failure(e.step.clone(), e.failure.to_string(), transcript, prompts)
                }
            }
        }
    }
}

/// File name for an instance trace; ids that are not filename-safe get a
/// hash suffix so distinct ids never collide.
pub fn trace_file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(80)
        .collect();
    if safe == id {
        format!("{safe}.json")
    } else {
        format!("{safe}-{}.json", &gateway::prompt_sha256(id)[..12])
    }
}

/// Ids already present in a results file. A trailing partial line left by an
/// interrupted write is cut off.
fn completed_ids(path: &Path) -> Result<HashSet<String>, RunError> {
    let mut text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashSet::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    if !text.is_empty() && !text.ends_with('\n') {
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        log::warn!("{}: dropping partial final line", path.display());
        text.truncate(keep);
        fs::write(path, &text).map_err(io_err(path))?;
    }
    Ok(eval::read_results(text.as_bytes())?
        .into_iter()
        .map(|r| r.id)
        .collect())
}

fn append_line<T: Serialize>(w: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    w.flush()
}

/// Runs the configured method over every instance not yet in the results
/// file. Instances run on a pool of `concurrency` workers; results are
/// appended in dataset order, so identical inputs give identical files.
pub fn run(cfg: &RunConfig, gateway: &Gateway) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let dataset = dataset::load_dataset(&cfg.dataset)?;
    let out = &cfg.out_dir;
    let traces = out.join(TRACES_DIR);
    fs::create_dir_all(&traces).map_err(io_err(&traces))?;

    let results_path = out.join(RESULTS_FILE);
    let done = completed_ids(&results_path)?;
    if !done.is_empty() && !cfg.resume {
        return Err(RunError::ResultsExist(results_path.display().to_string()));
    }

    let label = cfg.method_label();
    let meta = RunMeta {
        method: label.clone(),
        backend: gateway.backend_label().to_string(),
        dataset: cfg.dataset.display().to_string(),
        config: cfg.method_config(),
    };
    let meta_path = out.join(RUN_META_FILE);
    fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("serializable"),
    )
    .map_err(io_err(&meta_path))?;

    let pending: Vec<&QaInstance> = dataset
        .instances
        .iter()
        .filter(|i| !done.contains(&i.id))
        .collect();
    let mut summary = RunSummary {
        instances: dataset.len(),
        skipped: dataset.len() - pending.len(),
        attempted: pending.len(),
        ..RunSummary::default()
    };

    let open_append = |p: &Path| {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map(BufWriter::new)
            .map_err(io_err(p))
    };
    let mut results = open_append(&results_path)?;
    let failures_path = out.join(FAILURES_FILE);
    let mut failures = open_append(&failures_path)?;

    let marker = gateway.marker();
    let next = AtomicUsize::new(0);
    let workers = cfg.concurrency.min(pending.len()).max(1);
    let (tx, rx) = mpsc::channel::<(usize, Outcome)>();

    let write_result: Result<(), RunError> = std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending, label) = (&next, &pending, &label);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(inst) = pending.get(i) else { break };
                if tx.send((i, run_instance(gateway, cfg, label, inst))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut buffered: BTreeMap<usize, Outcome> = BTreeMap::new();
        let mut expected = 0;
        for (i, outcome) in rx {
            buffered.insert(i, outcome);
            while let Some(outcome) = buffered.remove(&expected) {
                expected += 1;
                let trace = match outcome {
                    Outcome::Done(record, trace) => {
                        append_line(&mut results, &record).map_err(io_err(&results_path))?;
                        summary.completed += 1;
                        trace
                    }
                    Outcome::Failed(record, trace) => {
                        log::warn!("{} failed at {}: {}", record.id, record.step, record.error);
                        append_line(&mut failures, &record).map_err(io_err(&failures_path))?;
                        summary.failed += 1;
                        trace
                    }
                };
                let path = traces.join(trace_file_name(&trace.id));
                let body = serde_json::to_string_pretty(&trace).expect("serializable");
                fs::write(&path, body).map_err(io_err(&path))?;
            }
        }
        Ok(())
    });
    write_result?;

    summary.api_calls = gateway.ledger_count(Some(marker));
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Backends

/// Builds a gateway from CLI-style selections: `scripted` plays back a script
/// file, any other name is looked up in the provider config.
pub fn make_gateway(
    backend: &str,
    script: Option<&Path>,
    providers: Option<&Path>,
    exact_match: bool,
) -> Result<Gateway, RunError> {
    if backend == "scripted" {
        let path = script.ok_or_else(|| {
            RunError::Config("the scripted backend needs --script <file>".into())
        })?;
        let mode = if exact_match {
            MatchMode::Exact
        } else {
            MatchMode::Normalized
        };
        let b = ScriptedBackend::from_file(path, mode)?;
        return Ok(Gateway::new(b));
    }
    let providers = providers.ok_or_else(|| {
        RunError::Config(format!("backend {backend:?} needs --providers <config.toml>"))
    })?;
    let cfg = gateway::load_provider_config(providers, backend)?;
    http_backend(cfg).map(Gateway::from_boxed)
}

#[cfg(feature = "http")]
fn http_backend(cfg: gateway::ProviderConfig) -> Result<Box<dyn Backend>, RunError> {
    gateway::HttpBackend::new(cfg)
        .map(|b| Box::new(b) as Box<dyn Backend>)
        .map_err(|e| RunError::Config(e.to_string()))
}

#[cfg(not(feature = "http"))]
fn http_backend(cfg: gateway::ProviderConfig) -> Result<Box<dyn Backend>, RunError> {
    Err(RunError::Config(format!(
        "backend {:?} needs the `http` feature",
        cfg.name
    )))
}

// ---------------------------------------------------------------------------
// Validate / profile / evaluate / conflicts

pub fn validate(path: &Path) -> Result<(usize, Vec<Issue>), RunError> {
    let file = File::open(path).map_err(io_err(path))?;
    dataset::check_records(file).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionProfile {
    pub instances: usize,
    pub without_passages: usize,
    pub histogram: Vec<eval::HistogramBin>,
}

/// Retrieval-precision histogram of a whole dataset.
pub fn profile(dataset: &Dataset, buckets: &PrecisionBuckets) -> Result<PrecisionProfile, RunError> {
    let with: Vec<&QaInstance> = dataset
        .instances
        .iter()
        .filter(|i| !i.passages.is_empty())
        .collect();
    Ok(PrecisionProfile {
        instances: dataset.len(),
        without_passages: dataset.len() - with.len(),
        histogram: eval::precision_histogram(with, buckets)?,
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<(), RunError>) -> Result<(), RunError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf).map_err(io_err(path))
}

fn read_meta(results: &Path) -> Option<RunMeta> {
    let meta = results.parent()?.join(RUN_META_FILE);
    serde_json::from_str(&fs::read_to_string(meta).ok()?).ok()
}

/// Evaluates one or more results files against a dataset and writes the
/// report JSON and CSV tables into `out_dir`. With several results files each
/// report is prefixed by its method and a `comparison.csv` is added.
pub fn evaluate(
    results: &[PathBuf],
    dataset_path: &Path,
    out_dir: &Path,
    buckets: &PrecisionBuckets,
) -> Result<Vec<EvalReport>, RunError> {
    if results.is_empty() {
        return Err(RunError::Config("at least one results file is required".into()));
    }
    let dataset = dataset::load_dataset(dataset_path)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut reports = Vec::new();
    let mut used = HashSet::new();
    for path in results {
        let records = eval::load_results(path)?;
        let mut report = eval::evaluate_run(&records, &dataset, buckets)?;
        if let Some(meta) = read_meta(path) {
            if meta.method == report.method {
                report.model = Some(meta.backend);
                report.config = Some(meta.config);
            }
        }
        let prefix = if results.len() == 1 {
            String::new()
        } else {
            let mut p = report.method.clone();
            let mut n = 2;
            while !used.insert(p.clone()) {
                p = format!("{}_{n}", report.method);
                n += 1;
            }
            format!("{p}_")
        };
        let report_path = out_dir.join(format!("{prefix}report.json"));
        fs::write(&report_path, report.to_json() + "\n").map_err(io_err(&report_path))?;
        write_file(&out_dir.join(format!("{prefix}per_dataset.csv")), |b| {
            Ok(eval::write_dataset_csv(b, &report)?)
        })?;
        write_file(&out_dir.join(format!("{prefix}buckets.csv")), |b| {
            Ok(eval::write_buckets_csv(b, &report)?)
        })?;
        write_file(&out_dir.join(format!("{prefix}precision_histogram.csv")), |b| {
            Ok(eval::write_histogram_csv(b, &report)?)
        })?;
        reports.push(report);
    }
    if reports.len() > 1 {
        write_file(&out_dir.join("comparison.csv"), |b| {
            Ok(eval::write_comparison_csv(b, &reports)?)
        })?;
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub internal_method: String,
    pub external_method: String,
    pub summary: PartitionSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method_under_test: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_accuracy: Option<Vec<eval::SubsetAccuracy>>,
    pub partition: eval::ConflictPartition,
}

fn method_of(records: &[ResultRecord]) -> String {
    let mut m: Vec<&str> = records.iter().map(|r| r.method.as_str()).collect();
    m.sort_unstable();
    m.dedup();
    m.join("+")
}

/// Partitions ids by which of two runs answered correctly (`a` is the
/// internal-knowledge side, `b` the retrieval side), optionally scoring a
/// third run on each subset. Writes `conflicts.json` and `conflicts.csv`.
pub fn analyze_conflicts(
    a: &Path,
    b: &Path,
    dataset_path: &Path,
    under_test: Option<&Path>,
    out_dir: &Path,
) -> Result<ConflictReport, RunError> {
    let dataset = dataset::load_dataset(dataset_path)?;
    let ra = eval::load_results(a)?;
    let rb = eval::load_results(b)?;
    let partition = eval::partition_conflicts(&ra, &rb, &dataset)?;
    let (method_under_test, subset_accuracy) = match under_test {
        Some(p) => {
            let rc = eval::load_results(p)?;
            let acc = eval::subset_accuracy(&partition, &rc, &dataset)?;
            (Some(method_of(&rc)), Some(acc))
        }
        None => (None, None),
    };
    let report = ConflictReport {
        internal_method: method_of(&ra),
        external_method: method_of(&rb),
        summary: partition.summary(),
        method_under_test,
        subset_accuracy,
        partition,
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let json_path = out_dir.join("conflicts.json");
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&report).expect("serializable") + "\n",
    )
    .map_err(io_err(&json_path))?;
    write_file(&out_dir.join("conflicts.csv"), |buf| {
        Ok(eval::write_partition_csv(
            buf,
            &report.partition,
            report.subset_accuracy.as_deref(),
        )?)
    })?;
    Ok(report)
}
