use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use roirl::answerkit::equivalent;
use roirl::engine::OfflineDataset;
use roirl::policy::{AnyPolicy, Policy};
use roirl::tasks::read_tasks_jsonl;

const SMALL: [&str; 4] = ["--n-train", "40", "--n-test", "10"];

fn roirl(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roirl")).args(args).env("ROIRL_OUTPUT_ROOT", root).output().unwrap()
}

fn run_small(root: &Path, dir: &str, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--output-dir", dir];
    args.extend(SMALL);
    args.extend(extra);
    let out = roirl(&args, root);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn run_writes_every_artifact() {
    let root = tempfile::tempdir().unwrap();
    run_small(root.path(), "a", &["--rounds", "2", "--patience", "5"]);
    let d = root.path().join("a");
    for f in [
        "config.toml",
        "corpus/tasks.jsonl",
        "corpus/labels.jsonl",
        "checkpoints/round-00.policy",
        "checkpoints/round-02.policy",
        "datasets/dataset-00.jsonl",
        "datasets/dataset-01.jsonl",
        "metrics.csv",
        "summary.json",
        "run.json",
    ] {
        assert!(d.join(f).is_file(), "missing {f}");
    }
    let tasks = fs::read_to_string(d.join("corpus/tasks.jsonl")).unwrap();
    assert!(!tasks.contains("\"truth\""));
}

#[test]
fn one_round_checkpoint_is_the_filtered_base() {
    let root = tempfile::tempdir().unwrap();
    run_small(root.path(), "one", &["--rounds", "1"]);
    let d = root.path().join("one");
    let tasks = read_tasks_jsonl(&fs::read_to_string(d.join("corpus/tasks.jsonl")).unwrap()).unwrap();
    let load = |f: &str| {
        AnyPolicy::decode(&fs::read_to_string(d.join("checkpoints").join(f)).unwrap(), tasks.space.clone())
            .unwrap()
            .to_tabular()
    };
    let (base, trained) = (load("round-00.policy"), load("round-01.policy"));
    assert_eq!(base.probs(), tasks.base.probs());
    let ds = OfflineDataset::from_jsonl(&fs::read_to_string(d.join("datasets/dataset-00.jsonl")).unwrap()).unwrap();
    for (p, rec) in ds.prompts.iter().enumerate() {
        let keep: Vec<f64> = tasks
            .space
            .prompt(p)
            .chains
            .iter()
            .zip(base.prompt_probs(p))
            .map(|(c, &w)| if equivalent(&c.answer, &rec.majority) { w } else { 0.0 })
            .collect();
        let total: f64 = keep.iter().sum();
        for (got, w) in trained.distribution(p).iter().zip(&keep) {
            assert!((got - w / total).abs() < 1e-12);
        }
    }
}

#[test]
fn echoed_config_reproduces_the_run() {
    let root = tempfile::tempdir().unwrap();
    run_small(root.path(), "first", &["--k", "16", "--rounds", "3", "--transform", "exponential", "--seed", "4"]);
    let echoed = root.path().join("first/config.toml");
    let out = roirl(&["run", "--config", echoed.to_str().unwrap(), "--output-dir", "second"], root.path());
    assert!(out.status.success());
    for f in ["metrics.csv", "summary.json", "checkpoints/round-03.policy", "datasets/dataset-02.jsonl"] {
        assert_eq!(fs::read(root.path().join("first").join(f)).unwrap(), fs::read(root.path().join("second").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let root = tempfile::tempdir().unwrap();
    run_small(root.path(), "default", &["--rounds", "2"]);
    let mut args = vec!["--workers", "1", "run", "--output-dir", "single", "--rounds", "2"];
    args.extend(SMALL);
    assert!(roirl(&args, root.path()).status.success());
    for f in ["metrics.csv", "datasets/dataset-01.jsonl", "checkpoints/round-02.policy"] {
        assert_eq!(fs::read(root.path().join("default").join(f)).unwrap(), fs::read(root.path().join("single").join(f)).unwrap());
    }
}

#[test]
fn report_prints_table_and_flags() {
    let root = tempfile::tempdir().unwrap();
    run_small(root.path(), "r", &["--k", "64", "--rounds", "4"]);
    let out = roirl(&["report", root.path().join("r").to_str().unwrap()], root.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("best round:"));
    assert!(text.contains("beyond distillation:"));
    assert!(text.contains("entropy collapse: yes"));
    assert!(text.lines().any(|l| l.contains('*')));
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| roirl(args, root.path()).status.code().unwrap();
    assert_eq!(code(&["answer", "check", "0.5", "\\frac{1}{2}"]), 0);
    assert_eq!(code(&["answer", "check", "0.5", "2"]), 1);
    assert_eq!(code(&["verify", "votes", "--count", "3"]), 0);
    assert_eq!(code(&["verify", "nonsense"]), 2);
    assert_eq!(code(&["run", "--k", "0"]), 2);
    assert_eq!(code(&["--workers", "0", "answer", "check", "1", "1"]), 2);
    assert_eq!(code(&["report", root.path().join("missing").to_str().unwrap()]), 2);
    fs::create_dir(root.path().join("empty")).unwrap();
    assert_eq!(code(&["report", root.path().join("empty").to_str().unwrap()]), 2);
    let bad = root.path().join("bad.toml");
    fs::write(&bad, "unknown_key = 1\n").unwrap();
    assert_eq!(code(&["run", "--config", bad.to_str().unwrap()]), 2);
}

#[test]
fn absolute_output_dir_ignores_the_root() {
    let root = tempfile::tempdir().unwrap();
    let elsewhere = tempfile::tempdir().unwrap();
    let target = elsewhere.path().join("abs");
    run_small(root.path(), target.to_str().unwrap(), &["--rounds", "1"]);
    assert!(target.join("metrics.csv").is_file());
    assert!(!root.path().join("abs").exists());
}
