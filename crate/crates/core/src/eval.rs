//! Held-out metrics: maj@1, maj@k and mean entropy per split, plus the
//! `metrics.csv` / `summary.json` artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answerkit::AnswerEquivalence;
use crate::engine::RoundExtras;
use crate::policy::{draw_index, Policy};
use crate::reward::{majority_vote, TieBreak};
use crate::rng::SeedStream;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("metrics csv: {0}")]
    Csv(String),
    #[error("summary json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub maj1_acc: f64,
    pub majk_acc: f64,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub splits: BTreeMap<String, SplitMetrics>,
    pub objective: f64,
    pub degenerate_prompts: usize,
    pub max_policy_change: f64,
}

/// Prompts of one split with their ground-truth answers.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: String,
    pub prompts: Vec<usize>,
    pub truth: Vec<String>,
}

impl Split {
    pub fn new(name: impl Into<String>, prompts: Vec<usize>, truth: Vec<String>) -> Self {
        assert_eq!(prompts.len(), truth.len(), "one label per prompt");
        Self { name: name.into(), prompts, truth }
    }
}

/// Fraction of `prompts` whose k-sample majority is equivalent to the
/// truth, averaged over `samples` independent draws per prompt.
#[allow(clippy::too_many_arguments)]
pub fn maj_at_k<P: Policy, E: AnswerEquivalence + ?Sized>(
    policy: &P,
    prompts: &[usize],
    truth: &[String],
    k: usize,
    samples: usize,
    seeds: SeedStream,
    round: usize,
    equiv: &E,
) -> f64 {
    if prompts.is_empty() {
        return 0.0;
    }
    let space = policy.space();
    let hits: usize = prompts
        .par_iter()
        .zip(truth)
        .map(|(&i, gold)| {
            let prompt = space.prompt(i);
            let dist = policy.distribution(i);
            (0..samples)
                .filter(|&rep| {
                    let idx = [round as u64, i as u64, k as u64, rep as u64];
                    let mut rng = seeds.rng("eval-draw", &idx);
                    let answers: Vec<&str> =
                        (0..k).map(|_| prompt.chains[draw_index(&dist, &mut rng)].answer.as_str()).collect();
                    let tie_seeds = SeedStream::new(seeds.derive("eval-tie", &idx));
                    let tie = TieBreak::new(tie_seeds, round as u64, &prompt.id);
                    let maj = majority_vote(&answers, &tie, equiv).expect("k >= 1");
                    maj.matches(gold, equiv)
                })
                .count()
        })
        .sum();
    hits as f64 / (prompts.len() * samples) as f64
}

/// Scores checkpoints on labeled splits. Its stream is separate from the
/// training stream, so evaluation never perturbs generation.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub splits: Vec<Split>,
    pub k: usize,
    pub samples: usize,
    pub seeds: SeedStream,
}

impl Evaluator {
    pub fn new(splits: Vec<Split>, k: usize, samples: usize, seed: u64) -> Self {
        Self { splits, k, samples, seeds: SeedStream::new(seed).child("eval") }
    }

    pub fn evaluate<P: Policy, E: AnswerEquivalence + ?Sized>(
        &self,
        policy: &P,
        round: usize,
        equiv: &E,
        extras: RoundExtras,
    ) -> RoundReport {
        let splits = self
            .splits
            .iter()
            .map(|s| {
                let m = SplitMetrics {
                    maj1_acc: maj_at_k(policy, &s.prompts, &s.truth, 1, self.samples, self.seeds, round, equiv),
                    majk_acc: maj_at_k(policy, &s.prompts, &s.truth, self.k, self.samples, self.seeds, round, equiv),
                    mean_entropy: policy.mean_entropy(&s.prompts),
                };
                (s.name.clone(), m)
            })
            .collect();
        RoundReport {
            round,
            splits,
            objective: extras.objective,
            degenerate_prompts: extras.degenerate_prompts,
            max_policy_change: extras.max_policy_change,
        }
    }
}

/// Earliest round with the highest train maj@k; the last round when there
/// is no train split.
pub fn best_round(reports: &[RoundReport]) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for r in reports {
        if let Some(s) = r.splits.get("train") {
            if best.is_none_or(|(_, b)| s.majk_acc > b) {
                best = Some((r.round, s.majk_acc));
            }
        }
    }
    best.map(|b| b.0).unwrap_or_else(|| reports.last().map_or(0, |r| r.round))
}

const RUN_SPLIT: &str = "run";

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.display().to_string(), source }
}

/// `round,split,metric,value` rows. Values use the shortest representation
/// that parses back to the same `f64`.
pub fn metrics_csv(reports: &[RoundReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "split", "metric", "value"]).expect("in-memory write");
    for r in reports {
        let round = r.round.to_string();
        for (name, m) in &r.splits {
            for (metric, v) in [("maj1_acc", m.maj1_acc), ("majk_acc", m.majk_acc), ("mean_entropy", m.mean_entropy)] {
                w.write_record([round.as_str(), name, metric, &format!("{v:?}")]).expect("in-memory write");
            }
        }
        for (metric, v) in [
            ("objective", format!("{:?}", r.objective)),
            ("degenerate_prompts", r.degenerate_prompts.to_string()),
            ("max_policy_change", format!("{:?}", r.max_policy_change)),
        ] {
            w.write_record([round.as_str(), RUN_SPLIT, metric, &v]).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<RoundReport>, EvalError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| EvalError::Csv(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["round", "split", "metric", "value"] {
        return Err(EvalError::Csv(format!("unexpected header {headers:?}")));
    }
    let mut out: Vec<RoundReport> = Vec::new();
    let mut partial: BTreeMap<(usize, String), [Option<f64>; 3]> = BTreeMap::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| EvalError::Csv(e.to_string()))?;
        let bad = |what: &str| EvalError::Csv(format!("row {}: {what}", n + 2));
        if rec.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let round: usize = rec[0].parse().map_err(|_| bad("bad round"))?;
        let value: f64 = rec[3].parse().map_err(|_| bad("bad value"))?;
        let report = match out.last_mut() {
            Some(last) if last.round == round => last,
            Some(last) if last.round > round => return Err(bad("rounds out of order")),
            _ => {
                out.push(RoundReport {
                    round,
                    splits: BTreeMap::new(),
                    objective: f64::NAN,
                    degenerate_prompts: 0,
                    max_policy_change: f64::NAN,
                });
                out.last_mut().expect("just pushed")
            }
        };
        let split = &rec[1];
        if split == RUN_SPLIT {
            match &rec[2] {
                "objective" => report.objective = value,
                "max_policy_change" => report.max_policy_change = value,
                "degenerate_prompts" => {
                    report.degenerate_prompts = rec[3].parse().map_err(|_| bad("bad count"))?;
                }
                _ => return Err(bad("unknown metric")),
            }
            continue;
        }
        let slot = match &rec[2] {
            "maj1_acc" => 0,
            "majk_acc" => 1,
            "mean_entropy" => 2,
            _ => return Err(bad("unknown metric")),
        };
        let entry = partial.entry((round, split.to_string())).or_default();
        if entry[slot].replace(value).is_some() {
            return Err(bad("duplicate metric"));
        }
        if let [Some(a), Some(b), Some(c)] = *entry {
            report.splits.insert(split.to_string(), SplitMetrics { maj1_acc: a, majk_acc: b, mean_entropy: c });
        }
    }
    for ((round, split), v) in &partial {
        if v.iter().any(Option::is_none) {
            return Err(EvalError::Csv(format!("round {round} split {split}: incomplete metrics")));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub best_round: usize,
    /// Split metrics of the best round.
    pub metrics: BTreeMap<String, SplitMetrics>,
    pub base: BTreeMap<String, SplitMetrics>,
    pub rounds_recorded: usize,
}

pub fn summarize(reports: &[RoundReport]) -> Summary {
    let best = best_round(reports);
    let at = |round: usize| reports.iter().find(|r| r.round == round).map(|r| r.splits.clone()).unwrap_or_default();
    Summary { best_round: best, metrics: at(best), base: at(0), rounds_recorded: reports.len() }
}

/// Writes `metrics.csv` and `summary.json` into `dir`.
pub fn emit_metrics(reports: &[RoundReport], dir: &Path) -> Result<Summary, EvalError> {
    fs::create_dir_all(dir).map_err(write_err(dir))?;
    let csv_path = dir.join("metrics.csv");
    fs::write(&csv_path, metrics_csv(reports)).map_err(write_err(&csv_path))?;
    let summary = summarize(reports);
    let json_path = dir.join("summary.json");
    fs::write(&json_path, serde_json::to_string_pretty(&summary)? + "\n").map_err(write_err(&json_path))?;
    Ok(summary)
}
