//! Randomized oracle suites behind `roirl verify`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use serde_json::json;

use crate::answerkit::{
    extract_boxed, render_decimal, render_frac, render_plain, AnswerEquivalence, MathEquivalence,
};
use crate::engine::{run_tabular, RunConfig};
use crate::optimizer::{objective_gradient, product_form_oracle, weighted_mle_objective, WeightedSample};
use crate::policy::{Chain, Policy, Prompt, PromptSpace, SoftmaxPolicy, TabularPolicy};
use crate::reference::{check_proposition1, fixed_point_residual, kl_fixed_point, FixedPointConfig, RewardMode};
use crate::reward::{majority_vote, RewardTransform, TieBreak, TransformKind};
use crate::rng::{SeedStream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Closedform,
    Proposition1,
    Gradients,
    Votes,
    Answers,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Closedform, Suite::Proposition1, Suite::Gradients, Suite::Votes, Suite::Answers];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Closedform => "closedform",
            Suite::Proposition1 => "proposition1",
            Suite::Gradients => "gradients",
            Suite::Votes => "votes",
            Suite::Answers => "answers",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite `{s}` (expected one of closedform, proposition1, gradients, votes, answers)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    /// Not a failure by itself; counted against the suite's allowance.
    Unconverged,
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceResult {
    pub index: usize,
    pub outcome: Outcome,
    pub deviation: f64,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub instances: Vec<InstanceResult>,
    pub passed: usize,
    pub failed: usize,
    pub unconverged: usize,
    pub max_deviation: f64,
    pub ok: bool,
}

/// Share of non-converged proposition instances tolerated.
pub const MAX_UNCONVERGED_FRACTION: f64 = 0.10;

pub fn run_suite(suite: Suite, seed: u64, count: usize) -> SuiteReport {
    let seeds = SeedStream::new(seed).child(suite.name());
    let instances: Vec<InstanceResult> = match suite {
        Suite::Answers => answer_instances(seeds, count),
        _ => (0..count)
            .map(|i| {
                let mut rng = seeds.rng("instance", &[i as u64]);
                let inst_seed = seeds.derive("instance-seed", &[i as u64]);
                let (outcome, deviation, detail) = match suite {
                    Suite::Closedform => closedform_instance(&mut rng, inst_seed),
                    Suite::Proposition1 => proposition1_instance(&mut rng, inst_seed),
                    Suite::Gradients => gradient_instance(&mut rng),
                    Suite::Votes => vote_instance(&mut rng, inst_seed),
                    Suite::Answers => unreachable!(),
                };
                InstanceResult { index: i, outcome, deviation, detail }
            })
            .collect(),
    };
    let count_of = |o: Outcome| instances.iter().filter(|r| r.outcome == o).count();
    let (passed, failed, unconverged) = (count_of(Outcome::Pass), count_of(Outcome::Fail), count_of(Outcome::Unconverged));
    let max_deviation = instances.iter().map(|r| r.deviation).filter(|d| d.is_finite()).fold(0.0, f64::max);
    let allowance = (MAX_UNCONVERGED_FRACTION * instances.len() as f64).floor() as usize;
    SuiteReport {
        suite: suite.name().to_string(),
        seed,
        passed,
        failed,
        unconverged,
        max_deviation,
        ok: failed == 0 && unconverged <= allowance,
        instances,
    }
}

const ALPHABET: [&str; 6] = ["1", "2", "0.5", "\\frac{1}{2}", "3/4", "x"];

/// Random prompts whose chain answers come from a small alphabet, and a
/// policy on them. `zeros` allows zero-probability chains.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    max_prompts: usize,
    max_chains: usize,
    alphabet: usize,
    zeros: bool,
) -> TabularPolicy {
    let n = rng.random_range(1..=max_prompts);
    let mut prompts = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.random_range(1..=max_chains);
        let chains = (0..c).map(|j| Chain::new(format!("c{j}"), ALPHABET[rng.random_range(0..alphabet)])).collect();
        prompts.push(Prompt::new(format!("p{i}"), chains));
        let mut w: Vec<f64> =
            (0..c).map(|_| if zeros && rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.01..1.0) }).collect();
        if w.iter().all(|&x| x == 0.0) {
            w[0] = 1.0;
        }
        weights.push(w);
    }
    let space = Arc::new(PromptSpace::new(prompts).expect("generated ids are unique"));
    TabularPolicy::from_weights(space, weights).expect("positive mass on every prompt")
}

fn closedform_instance(rng: &mut StreamRng, seed: u64) -> (Outcome, f64, serde_json::Value) {
    let pi0 = random_instance(rng, 8, 8, 4, true);
    let rounds = rng.random_range(1..=5);
    let (kind, beta) = match rng.random_range(0..4) {
        0 => (TransformKind::Identity, 0.1),
        1 => (TransformKind::Exponential, 0.05),
        2 => (TransformKind::Exponential, 0.1),
        _ => (TransformKind::Exponential, 1.0),
    };
    let k = rng.random_range(1..=12);
    let cfg = RunConfig { k, rounds, transform: kind, beta, seed, patience: usize::MAX, ..RunConfig::default() };
    let eq = MathEquivalence::default();
    let transform = RewardTransform::new(kind, beta).expect("valid beta");
    let run = match run_tabular(&cfg, &pi0, &eq) {
        Ok(r) => r,
        Err(e) => return (Outcome::Fail, f64::INFINITY, json!({ "error": e.to_string() })),
    };
    let space = pi0.space();
    let mut history = Vec::new();
    let mut max_dev: f64 = 0.0;
    for (m, ds) in run.datasets.iter().enumerate() {
        let lw: Vec<Vec<f64>> = (0..space.len())
            .map(|i| {
                let maj = &ds.prompts[i].majority;
                space
                    .prompt(i)
                    .chains
                    .iter()
                    .map(|c| {
                        let r = u8::from(c.answer == *maj || eq.equivalent(&c.answer, maj));
                        transform.log_weight(r, None, m + 1).expect("no baseline needed")
                    })
                    .collect()
            })
            .collect();
        history.push(lw);
        let oracle = match product_form_oracle(&pi0, &history) {
            Ok(p) => p,
            Err(e) => return (Outcome::Fail, f64::INFINITY, json!({ "round": m + 1, "error": e.to_string() })),
        };
        let got = run.checkpoints[m + 1].to_tabular();
        for (a, b) in got.probs().iter().flatten().zip(oracle.probs().iter().flatten()) {
            max_dev = max_dev.max((a - b).abs());
        }
    }
    let outcome = if max_dev <= 1e-9 { Outcome::Pass } else { Outcome::Fail };
    let detail = json!({ "prompts": space.len(), "rounds": rounds, "k": k, "transform": kind.to_string(), "beta": beta });
    (outcome, max_dev, detail)
}

/// Fixed-point and engine tolerances used by the proposition suite.
pub const PROPOSITION_TV: f64 = 1e-6;
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

fn proposition1_instance(rng: &mut StreamRng, seed: u64) -> (Outcome, f64, serde_json::Value) {
    let pi0 = random_instance(rng, 6, 6, 4, false);
    let beta = [0.05, 0.1, 0.5, 1.0][rng.random_range(0..4)];
    let cfg = FixedPointConfig::default();
    let eq = MathEquivalence::default();
    let report = match check_proposition1(&pi0, beta, &cfg, seed, &eq) {
        Ok(r) => r,
        Err(e) => return (Outcome::Fail, f64::INFINITY, json!({ "seed": seed, "error": e.to_string() })),
    };
    let seeds = SeedStream::new(seed);
    let residual = match kl_fixed_point(&pi0, beta, &cfg, RewardMode::Population, seeds, &eq) {
        Ok((sol, trace)) if trace.converged => {
            fixed_point_residual(&pi0, &sol.policy, beta, seeds, trace.iterations as u64, &eq)
        }
        _ => f64::NAN,
    };
    let outcome = if !report.both_converged() {
        Outcome::Unconverged
    } else if report.distance <= PROPOSITION_TV && residual <= RESIDUAL_TOLERANCE && report.labels_match {
        Outcome::Pass
    } else {
        Outcome::Fail
    };
    let mut detail = serde_json::to_value(&report).expect("plain data serializes");
    detail["seed"] = json!(seed);
    detail["recomputed_residual"] = json!(residual);
    (outcome, report.distance, detail)
}

/// `|a - f| / max(|a|, |f|, 1)`.
pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1.0)
}

pub const FD_STEP: f64 = 1e-5;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;

/// Central differences of the weighted objective in every logit.
pub fn finite_difference_gradient(policy: &SoftmaxPolicy, samples: &[WeightedSample], h: f64) -> Vec<Vec<f64>> {
    let base = policy.logits().to_vec();
    let mut out = base.iter().map(|row| vec![0.0; row.len()]).collect::<Vec<_>>();
    for i in 0..base.len() {
        for c in 0..base[i].len() {
            let eval = |delta: f64| {
                let mut z = base.clone();
                z[i][c] += delta;
                weighted_mle_objective(&policy.with_logits(z).expect("finite logits"), samples)
            };
            out[i][c] = (eval(h) - eval(-h)) / (2.0 * h);
        }
    }
    out
}

/// A random softmax policy and weighted samples drawn on it.
pub fn random_softmax_instance<R: Rng>(rng: &mut R) -> (SoftmaxPolicy, Vec<WeightedSample>) {
    let t = random_instance(rng, 5, 6, 6, false);
    let space = t.space().clone();
    let temperature = [0.5, 1.0, 2.0][rng.random_range(0..3)];
    let logits = (0..space.len()).map(|i| (0..space.num_chains(i)).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let policy = SoftmaxPolicy::new(space.clone(), logits, temperature).expect("finite logits");
    let n = rng.random_range(1..=20);
    let samples = (0..n)
        .map(|_| {
            let prompt = rng.random_range(0..space.len());
            WeightedSample {
                prompt,
                chain: rng.random_range(0..space.num_chains(prompt)),
                log_weight: if rng.random_bool(0.2) { f64::NEG_INFINITY } else { rng.random_range(-3.0..3.0) },
            }
        })
        .collect();
    (policy, samples)
}

fn gradient_instance(rng: &mut StreamRng) -> (Outcome, f64, serde_json::Value) {
    let (policy, samples) = random_softmax_instance(rng);
    let analytic = objective_gradient(&policy, &samples);
    let numeric = finite_difference_gradient(&policy, &samples, FD_STEP);
    let err = analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &f)| relative_error(a, f))
        .fold(0.0, f64::max);
    let outcome = if err < GRADIENT_TOLERANCE { Outcome::Pass } else { Outcome::Fail };
    (outcome, err, json!({ "prompts": policy.space().len(), "samples": samples.len(), "temperature": policy.temperature() }))
}

/// Counting oracle: class sizes by pairwise equivalence, no union-find.
pub fn brute_force_majority<E: AnswerEquivalence + ?Sized>(answers: &[&str], equiv: &E) -> (usize, Vec<Vec<String>>) {
    let same = |a: &str, b: &str| a == b || equiv.equivalent(a, b);
    let mut classes: Vec<Vec<&str>> = Vec::new();
    for &a in answers {
        // equivalence is transitive on this alphabet, so one member suffices
        match classes.iter_mut().find(|c| same(c[0], a)) {
            Some(c) => c.push(a),
            None => classes.push(vec![a]),
        }
    }
    let best = classes.iter().map(Vec::len).max().unwrap_or(0);
    let mut winners: Vec<Vec<String>> = classes
        .iter()
        .filter(|c| c.len() == best)
        .map(|c| {
            let mut m: Vec<String> = c.iter().map(|s| s.to_string()).collect();
            m.sort();
            m.dedup();
            m
        })
        .collect();
    winners.sort();
    (best, winners)
}

fn vote_instance(rng: &mut StreamRng, seed: u64) -> (Outcome, f64, serde_json::Value) {
    let eq = MathEquivalence::default();
    let len = rng.random_range(1..=12);
    let alphabet: Vec<&str> = {
        let mut a = ALPHABET.to_vec();
        a.shuffle(rng);
        a.truncate(rng.random_range(1..=4));
        a
    };
    let answers: Vec<&str> = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
    let tie = TieBreak::new(SeedStream::new(seed), 0, "p");
    let got = majority_vote(&answers, &tie, &eq).expect("nonempty");
    let (best, winners) = brute_force_majority(&answers, &eq);
    let mut shuffled = answers.clone();
    shuffled.shuffle(rng);
    let again = majority_vote(&shuffled, &tie, &eq).expect("nonempty");
    let ok = got.count == best
        && winners.contains(&got.members)
        && got.tied.len() == winners.len()
        && again == got
        && majority_vote(&answers, &tie, &eq).expect("nonempty") == got;
    let outcome = if ok { Outcome::Pass } else { Outcome::Fail };
    (outcome, 0.0, json!({ "answers": answers, "majority": got.answer, "count": got.count, "tied": got.tied }))
}

/// `(a, b, equivalent)` pairs every build must agree with.
pub const BUILTIN_PAIRS: &[(&str, &str, bool)] = &[
    ("0.5", "\\frac{1}{2}", true),
    ("1/2", "\\frac{1}{2}", true),
    ("\\dfrac{3}{4}", "0.75", true),
    ("\\tfrac{3}{4}", "3/4", true),
    ("2", "2.0", true),
    ("-0.25", "-\\frac{1}{4}", true),
    ("\\frac{-1}{4}", "-0.25", true),
    ("1.5", "\\frac{3}{2}", true),
    ("$\\frac{1}{2}$", "0.5", true),
    ("\\left(\\frac{1}{2}\\right)", "0.5", true),
    ("2^{3}", "8", true),
    ("2^{-1}", "0.5", true),
    ("10", "1e1", false),
    ("3 \\cdot 4", "12", true),
    ("3\\times4", "12", true),
    ("\\frac{6}{8}", "\\frac{3}{4}", true),
    ("0.333", "\\frac{1}{3}", false),
    ("1/2", "2/1", false),
    ("x", "x", true),
    ("x", "y", false),
    ("\\pi", "3.14159", false),
    ("1,000", "1000", false),
    ("", "0", false),
    ("1/0", "1/0", true),
    ("1/0", "2/0", false),
];

/// Brace-nesting extraction cases `(text, expected)`.
pub const BOXED_CASES: &[(&str, Option<&str>)] = &[
    ("so \\boxed{\\frac{1}{2}} done", Some("\\frac{1}{2}")),
    ("\\boxed{a} then \\boxed{b}", Some("a")),
    ("\\boxed{{x}{y}}", Some("{x}{y}")),
    ("\\boxed{\\frac{\\sqrt{2}}{2}}", Some("\\frac{\\sqrt{2}}{2}")),
    ("\\boxed{\\{1,2\\}}", Some("\\{1,2\\}")),
    ("no box here", None),
    ("\\boxed{unclosed {", None),
];

fn answer_instances(seeds: SeedStream, count: usize) -> Vec<InstanceResult> {
    let eq = MathEquivalence::default();
    let mut out = Vec::new();
    for &(a, b, want) in BUILTIN_PAIRS {
        let got = eq.equivalent(a, b);
        let outcome = if got == want { Outcome::Pass } else { Outcome::Fail };
        out.push(InstanceResult { index: out.len(), outcome, deviation: 0.0, detail: json!({ "a": a, "b": b, "expected": want }) });
    }
    for &(text, want) in BOXED_CASES {
        let e = extract_boxed(text);
        let got = e.found.then_some(e.raw.as_str());
        let outcome = if got == want { Outcome::Pass } else { Outcome::Fail };
        out.push(InstanceResult { index: out.len(), outcome, deviation: 0.0, detail: json!({ "text": text, "extracted": got }) });
    }
    for i in 0..count {
        let mut rng = seeds.rng("triple", &[i as u64]);
        let (v, w) = (random_rational(&mut rng), random_rational(&mut rng));
        let forms = rational_forms(&v);
        let mut ok = true;
        for x in &forms {
            for y in &forms {
                ok &= eq.equivalent(x, y);
            }
        }
        if v != w {
            ok &= !eq.equivalent(&forms[0], &render_frac(&w));
        }
        let outcome = if ok { Outcome::Pass } else { Outcome::Fail };
        out.push(InstanceResult { index: out.len(), outcome, deviation: 0.0, detail: json!({ "forms": forms }) });
    }
    out
}

/// A signed rational with a terminating decimal expansion.
pub fn random_rational<R: Rng>(rng: &mut R) -> BigRational {
    let twos = rng.random_range(0..6u32);
    let fives = rng.random_range(0..4u32);
    let den = BigInt::from(2u32.pow(twos) * 5u32.pow(fives));
    let num = BigInt::from(rng.random_range(-100_000i64..=100_000));
    BigRational::new(num, den)
}

/// `a/b`, `\frac{a}{b}` and the decimal expansion of `v`.
pub fn rational_forms(v: &BigRational) -> [String; 3] {
    [render_plain(v), render_frac(v), render_decimal(v).expect("terminating by construction")]
}

/// Per-suite aggregate line, e.g. `closedform: 50/50 pass, max deviation 1.1e-16`.
pub fn summary_line(r: &SuiteReport) -> String {
    let total = r.instances.len();
    let mut s = format!("{}: {}/{} pass, {} fail", r.suite, r.passed, total, r.failed);
    if r.unconverged > 0 || r.suite == Suite::Proposition1.name() {
        s.push_str(&format!(", {} unconverged or cycling", r.unconverged));
    }
    s.push_str(&format!(", max deviation {:e}", r.max_deviation));
    s.push_str(if r.ok { " => OK" } else { " => FAILED" });
    s
}
