use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use roirl::answerkit::{parse_answer, AnswerEquivalence, CanonicalExpr, MathEquivalence};
use roirl::config::{CliConfig, OUTPUT_ROOT_VAR};
use roirl::engine::{self, Backend, VoteMode};
use roirl::eval::{emit_metrics, parse_metrics_csv, Evaluator, RoundReport, Summary};
use roirl::policy::AnyPolicy;
use roirl::reward::TransformKind;
use roirl::tasks::{make_corpus, read_labels_jsonl, read_tasks_jsonl};
use roirl::verify::{run_suite, summary_line, Outcome, Suite};

/// Entropy below this (nats) counts as collapsed.
const COLLAPSE_ENTROPY: f64 = 0.01;

#[derive(Parser)]
#[command(name = "roirl", version, about = "Offline iterative self-improvement from majority-vote rewards")]
struct Cli {
    /// Worker threads for per-prompt parallelism (default: all processors).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) a corpus and run the offline loop on it.
    Run(Box<RunArgs>),
    /// Run a randomized oracle suite.
    Verify {
        /// closedform | proposition1 | gradients | votes | answers
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        count: usize,
        /// Print every instance as a JSON line.
        #[arg(long)]
        json: bool,
    },
    /// Summarize a finished run directory.
    Report { run_dir: PathBuf },
    /// Answer utilities.
    Answer {
        #[command(subcommand)]
        command: AnswerCommand,
    },
}

#[derive(Subcommand)]
enum AnswerCommand {
    /// Exit 0 if the two answers are equivalent, 1 if not.
    Check { a: String, b: String },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = parse_transform)]
    transform: Option<TransformKind>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_backend)]
    backend: Option<Backend>,
    #[arg(long)]
    warm_start: Option<bool>,
    #[arg(long, value_parser = parse_vote)]
    vote: Option<VoteMode>,
    #[arg(long)]
    transductive: Option<bool>,
    #[arg(long)]
    eval_k: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    stop_tolerance: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    surface_forms: Option<usize>,
    #[arg(long)]
    corpus_seed: Option<u64>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_transform(s: &str) -> Result<TransformKind, String> {
    parse_enum(s)
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    parse_enum(s)
}

fn parse_vote(s: &str) -> Result<VoteMode, String> {
    parse_enum(s)
}

/// A bad invocation or configuration; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

macro_rules! apply {
    ($cfg:ident, $args:ident, $($field:ident),*) => {
        $(if let Some(v) = $args.$field { $cfg.$field = v; })*
    };
}

fn effective_config(args: &RunArgs) -> Result<CliConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            CliConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => CliConfig::default(),
    };
    apply!(cfg, args, k, rounds, patience, epochs, transform, beta, seed, backend, warm_start, vote, transductive,
        eval_k, eval_samples, learning_rate, n_train, n_test, surface_forms, corpus_seed);
    if let Some(v) = args.stop_tolerance {
        cfg.stop_tolerance = Some(v);
    }
    if let Some(v) = &args.output_dir {
        cfg.output_dir = v.clone();
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let cfg = effective_config(args)?;
    let root = std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from);
    let out = cfg.resolved_output(root.as_deref());
    for sub in ["corpus", "checkpoints", "datasets"] {
        fs::create_dir_all(out.join(sub)).with_context(|| format!("creating {}", out.join(sub).display()))?;
    }
    write(&out.join("config.toml"), cfg.to_toml())?;

    // The training path reads only the tasks file; labels go to evaluation.
    let (tasks_text, labels_text) = match (&cfg.tasks_file, &cfg.labels_file) {
        (Some(t), Some(l)) => (
            fs::read_to_string(t).with_context(|| format!("reading {}", t.display()))?,
            fs::read_to_string(l).with_context(|| format!("reading {}", l.display()))?,
        ),
        _ => {
            let corpus = make_corpus(&cfg.corpus_spec())?;
            log::info!(
                "corpus: {} train / {} test, majority ceiling train {:.4} test {:.4}",
                corpus.train.len(),
                corpus.test.len(),
                corpus.train_ceiling(),
                corpus.test_ceiling()
            );
            (corpus.tasks_jsonl(), corpus.labels_jsonl())
        }
    };
    write(&out.join("corpus/tasks.jsonl"), &tasks_text)?;
    write(&out.join("corpus/labels.jsonl"), &labels_text)?;
    let tasks = read_tasks_jsonl(&tasks_text)?;
    let labels = read_labels_jsonl(&labels_text)?;

    let run_cfg = cfg.run_config();
    let evaluator = Evaluator::new(tasks.splits(&labels)?, run_cfg.eval_k, run_cfg.eval_samples, run_cfg.seed);
    let active: Vec<usize> =
        if run_cfg.transductive { (0..tasks.space.len()).collect() } else { tasks.train.clone() };
    let equiv = MathEquivalence::default();
    let report = engine::run(&run_cfg, &AnyPolicy::Tabular(tasks.base.clone()), &active, Some(&evaluator), &equiv)?;

    for (m, policy) in report.checkpoints.iter().enumerate() {
        write(&out.join(format!("checkpoints/round-{m:02}.policy")), policy.encode())?;
    }
    for ds in &report.datasets {
        write(&out.join(format!("datasets/dataset-{:02}.jsonl", ds.round)), ds.to_jsonl())?;
    }
    let summary = emit_metrics(&report.reports, &out)?;
    let run_json = serde_json::json!({
        "best_round": report.best_round,
        "best_checkpoint": format!("checkpoints/round-{:02}.policy", report.best_round),
        "rounds_run": report.rounds_run,
        "stopped_early": report.stopped_early,
        "converged": report.converged,
        "aborted": report.aborted,
        "labels_used_for": report.labels_used_for,
    });
    write(&out.join("run.json"), serde_json::to_string_pretty(&run_json)? + "\n")?;

    println!("run directory: {}", out.display());
    println!("rounds run: {}, best round: {}", report.rounds_run, summary.best_round);
    for (split, m) in &summary.metrics {
        println!("  {split}: maj@1 {:.4}  maj@{} {:.4}  entropy {:.5}", m.maj1_acc, run_cfg.eval_k, m.majk_acc, m.mean_entropy);
    }
    if let Some(reason) = report.aborted {
        eprintln!("error: run aborted: {reason} (checkpoints up to round {} kept)", report.rounds_run);
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(suite: &str, seed: u64, count: usize, json: bool) -> Result<ExitCode> {
    let suite: Suite = suite.parse().map_err(usage)?;
    let report = run_suite(suite, seed, count);
    for r in &report.instances {
        if json || suite == Suite::Proposition1 {
            println!("{}", serde_json::to_string(r)?);
        } else {
            let tag = match r.outcome {
                Outcome::Pass => "PASS",
                Outcome::Fail => "FAIL",
                Outcome::Unconverged => "UNCONVERGED",
            };
            println!("instance {:>4}: {tag}  deviation {:e}  {}", r.index, r.deviation, r.detail);
        }
    }
    println!("{}", summary_line(&report));
    Ok(if report.ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_report(dir: &Path) -> Result<ExitCode> {
    let csv_path = dir.join("metrics.csv");
    let text = fs::read_to_string(&csv_path).map_err(|e| usage(format!("cannot read {}: {e}", csv_path.display())))?;
    let reports = parse_metrics_csv(&text).map_err(|e| usage(format!("{}: {e}", csv_path.display())))?;
    if reports.is_empty() {
        return Err(usage(format!("{} has no rounds", csv_path.display())));
    }
    let best = match fs::read_to_string(dir.join("summary.json")) {
        Ok(s) => serde_json::from_str::<Summary>(&s).context("parsing summary.json")?.best_round,
        Err(_) => roirl::eval::best_round(&reports),
    };
    print_table(&reports, best);
    Ok(ExitCode::SUCCESS)
}

fn print_table(reports: &[RoundReport], best: usize) {
    let splits: Vec<String> = reports[0].splits.keys().cloned().collect();
    let mut header = format!("{:>6}", "round");
    for s in &splits {
        header.push_str(&format!(" | {s:>5} maj@1  maj@k  entropy"));
    }
    println!("{header}");
    for r in reports {
        let mut line = format!("{:>5}{}", r.round, if r.round == best { "*" } else { " " });
        for s in &splits {
            match r.splits.get(s) {
                Some(m) => line.push_str(&format!(" | {:>11.4} {:>6.4} {:>8.5}", m.maj1_acc, m.majk_acc, m.mean_entropy)),
                None => line.push_str(&format!(" | {:>27}", "-")),
            }
        }
        println!("{line}");
    }
    println!("best round: {best} (marked *)");
    let base = &reports[0];
    let last = reports.last().expect("nonempty");
    let at_best = reports.iter().find(|r| r.round == best).unwrap_or(last);
    if let (Some(b), Some(t)) = (base.splits.get("train"), at_best.splits.get("train")) {
        let beyond = t.maj1_acc > b.majk_acc;
        println!(
            "beyond distillation: {} (trained maj@1 {:.4} vs base maj@k {:.4})",
            if beyond { "yes" } else { "no" },
            t.maj1_acc,
            b.majk_acc
        );
    }
    if let Some(t) = last.splits.get("train") {
        let collapsed = t.mean_entropy < COLLAPSE_ENTROPY;
        println!(
            "entropy collapse: {} (final train entropy {:.5} nats, threshold {COLLAPSE_ENTROPY})",
            if collapsed { "yes" } else { "no" },
            t.mean_entropy
        );
    }
}

fn cmd_answer_check(a: &str, b: &str) -> Result<ExitCode> {
    let show = |s: &str| match parse_answer(s) {
        CanonicalExpr::Numeric { value, .. } => format!("{value}"),
        CanonicalExpr::Opaque(raw) => format!("opaque {raw:?}"),
    };
    let eq = MathEquivalence::default().equivalent(a, b);
    println!("{} ~ {}: {}", show(a), show(b), if eq { "equivalent" } else { "not equivalent" });
    Ok(if eq { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(usage("--workers must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker pool")?;
    }
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Verify { suite, seed, count, json } => cmd_verify(suite, *seed, *count, *json),
        Command::Report { run_dir } => cmd_report(run_dir),
        Command::Answer { command: AnswerCommand::Check { a, b } } => cmd_answer_check(a, b),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
