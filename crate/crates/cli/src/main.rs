use std::path::{Path, PathBuf};
use std::process::ExitCode;

use astute_rag::dataset;
use astute_rag::eval::PrecisionBuckets;
use astute_rag::prompts::PassageOrder;
use astute_rag::runner::{self, Method, RunConfig, RunError};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Astute RAG runs and evaluation over QA datasets.
#[derive(Parser)]
#[command(name = "astute", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every record of a dataset file.
    Validate { dataset: PathBuf },
    /// Run a method over a dataset and write results and traces.
    Run(RunArgs),
    /// Score one or more results files against a dataset.
    Evaluate {
        #[arg(long, required = true, num_args = 1..)]
        results: Vec<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Upper bucket edges for retrieval precision, e.g. 0.2,0.4,0.6,0.8,1.0
        #[arg(long, value_delimiter = ',')]
        buckets: Option<Vec<f64>>,
    },
    /// Split instances by agreement between a closed-book and a retrieval run.
    AnalyzeConflicts {
        /// Results answered from internal knowledge only (e.g. no_rag).
        #[arg(long)]
        internal: PathBuf,
        /// Results answered with retrieved passages (e.g. vanilla_rag).
        #[arg(long)]
        external: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Results of a method to score on each subset.
        #[arg(long)]
        method: Option<PathBuf>,
        #[arg(long, default_value = "conflicts")]
        out: PathBuf,
    },
    /// Print the retrieval-precision histogram of a dataset.
    Profile {
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',')]
        buckets: Option<Vec<f64>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    Reversed,
    AsGiven,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// astute, no_rag, vanilla_rag, genread, usc or self_route
    #[arg(long, default_value = "astute")]
    method: String,
    /// Iterations of knowledge consolidation and answering.
    #[arg(long, default_value_t = 1)]
    t: usize,
    /// Most passages generated from the model's own knowledge.
    #[arg(long, default_value_t = 1)]
    max_internal: usize,
    #[arg(long, value_enum, default_value = "reversed")]
    order: Order,
    /// `scripted` or a provider name from --providers.
    #[arg(long, default_value = "scripted")]
    backend: String,
    /// Scripted responses (JSONL) for the scripted backend.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Match scripted prompts byte-exactly instead of ignoring trailing whitespace.
    #[arg(long)]
    exact_match: bool,
    /// Provider definitions (TOML).
    #[arg(long)]
    providers: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    concurrency: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    usc_samples: usize,
    /// Replace retrieved passages with this many negative passages.
    #[arg(long)]
    worst_case: Option<usize>,
}

fn buckets(edges: Option<Vec<f64>>) -> Result<PrecisionBuckets, RunError> {
    match edges {
        Some(e) => Ok(PrecisionBuckets::new(e)?),
        None => Ok(PrecisionBuckets::default()),
    }
}

fn ratio(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn cmd_validate(path: &Path) -> Result<ExitCode, RunError> {
    let (n, issues) = runner::validate(path)?;
    if issues.is_empty() {
        println!("{n} instances OK");
        return Ok(ExitCode::SUCCESS);
    }
    for issue in &issues {
        println!("{issue}");
    }
    eprintln!("{} problem(s) in {n} record(s)", issues.len());
    Ok(ExitCode::from(1))
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, RunError> {
    let method: Method = args
        .method
        .parse()
        .map_err(|e: astute_rag::baselines::UnknownBaseline| RunError::Config(e.to_string()))?;
    let order = match args.order {
        Order::Reversed => PassageOrder::Reversed,
        Order::AsGiven => PassageOrder::AsGiven,
    };
    let mut cfg = RunConfig::new(&args.dataset, method, &args.out);
    cfg.pipeline.iterations = args.t;
    cfg.pipeline.max_internal_passages = args.max_internal;
    cfg.pipeline.passage_order = order;
    cfg.baseline.passage_order = order;
    cfg.baseline.seed = args.seed;
    cfg.baseline.usc_samples = args.usc_samples;
    cfg.concurrency = args.concurrency;
    cfg.resume = args.resume;
    cfg.worst_case = args.worst_case;

    let gateway = runner::make_gateway(
        &args.backend,
        args.script.as_deref(),
        args.providers.as_deref(),
        args.exact_match,
    )?;
    let summary = runner::run(&cfg, &gateway)?;
    println!("{summary}");
    if summary.budget_exceeded() {
        eprintln!(
            "{:.1}% of instances failed; see {}",
            summary.failure_rate() * 100.0,
            args.out.join(runner::FAILURES_FILE).display()
        );
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn execute(cli: Cli) -> Result<ExitCode, RunError> {
    match cli.command {
        Command::Validate { dataset } => cmd_validate(&dataset),
        Command::Run(args) => cmd_run(args),
        Command::Evaluate {
            results,
            dataset,
            out,
            buckets: edges,
        } => {
            let reports = runner::evaluate(&results, &dataset, &out, &buckets(edges)?)?;
            for r in &reports {
                println!(
                    "{}: accuracy {:.2}% over {} instances ({} API calls)",
                    r.method, r.overall_accuracy, r.n, r.total_api_calls
                );
            }
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::AnalyzeConflicts {
            internal,
            external,
            dataset,
            method,
            out,
        } => {
            let report =
                runner::analyze_conflicts(&internal, &external, &dataset, method.as_deref(), &out)?;
            let s = &report.summary;
            println!(
                "both correct {}, both wrong {}, internal correct {}, external correct {} (n={}, conflict rate {}, internal share {})",
                s.both_correct,
                s.both_wrong,
                s.conflict_internal_correct,
                s.conflict_external_correct,
                s.total,
                ratio(s.conflict_rate),
                ratio(s.internal_share)
            );
            if let Some(rows) = &report.subset_accuracy {
                for row in rows {
                    match row.accuracy {
                        Some(a) => println!("  {}: {a:.2}% of {}", row.subset, row.n),
                        None => println!("  {}: empty", row.subset),
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Profile { dataset: path, buckets: edges } => {
            let ds = dataset::load_dataset(&path)?;
            let profile = runner::profile(&ds, &buckets(edges)?)?;
            println!("bin,count,mass");
            for bin in &profile.histogram {
                println!("{},{},{:.3}", bin.label, bin.count, bin.mass);
            }
            if profile.without_passages > 0 {
                eprintln!("{} instance(s) without passages not profiled", profile.without_passages);
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
