//! The offline loop: generate and score candidates with the current policy,
//! then solve the weighted log-likelihood update on that fixed dataset.
//!
//! ```text
//! pi_0 ──generate──▶ D_0 ──update──▶ pi_1 ──generate──▶ D_1 ──update──▶ ...
//! ```
//!
//! Generation fans out across prompts on independent substreams; the update
//! is a barrier; rounds are sequential. Ground-truth labels are touched only
//! by the [`Evaluator`](crate::eval::Evaluator) that drives early stopping
//! and best-round selection.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answerkit::AnswerEquivalence;
use crate::eval::{Evaluator, RoundReport};
use crate::optimizer::{
    closed_form_update_or_freeze, solve_gradient, weighted_mle_objective, OptimizerError, SolveConfig, SolveReport,
    WeightedSample,
};
use crate::policy::{AnyPolicy, Policy, PolicyError, SoftmaxPolicy, TabularPolicy};
use crate::reference::{max_abs_diff, policy_rewards, ChainClasses, RewardMode};
use crate::reward::{score_candidates, RewardError, RewardTransform, TieBreak, TransformKind};
use crate::rng::SeedStream;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("dataset line {line}: {reason}")]
    Dataset { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Tabular,
    Softmax,
}

/// Where majority labels come from during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    /// Majority of the k sampled candidates.
    Sampled,
    /// Argmax class of the policy's answer marginal (k → ∞). Tabular only.
    Population,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub k: usize,
    pub rounds: usize,
    pub patience: usize,
    pub epochs: usize,
    pub transform: TransformKind,
    pub beta: f64,
    pub seed: u64,
    pub backend: Backend,
    pub warm_start: bool,
    pub vote: VoteMode,
    /// Unlabeled test prompts join the training pool.
    pub transductive: bool,
    /// Candidates per vote for the maj@k metric that drives early stopping.
    pub eval_k: usize,
    pub eval_samples: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub grad_tolerance: f64,
    pub batch_size: Option<usize>,
    /// Stop once the policy moves less than this and labels are stable.
    pub stop_tolerance: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 10,
            rounds: 15,
            patience: 5,
            epochs: 3,
            transform: TransformKind::Identity,
            beta: 0.1,
            seed: 0,
            backend: Backend::Tabular,
            warm_start: true,
            vote: VoteMode::Sampled,
            transductive: true,
            eval_k: 10,
            eval_samples: 1,
            temperature: 1.0,
            learning_rate: 0.1,
            max_iters: 10_000,
            grad_tolerance: 1e-8,
            batch_size: None,
            stop_tolerance: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<RewardTransform, EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if self.rounds == 0 {
            return bad("rounds must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.eval_k == 0 || self.eval_samples == 0 {
            return bad("eval_k and eval_samples must be >= 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.grad_tolerance.is_nan() || self.grad_tolerance < 0.0 {
            return bad("learning_rate must be positive and grad_tolerance nonnegative");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be >= 1");
        }
        if self.backend == Backend::Softmax && self.vote == VoteMode::Population {
            return bad("population voting needs the tabular backend");
        }
        Ok(RewardTransform::new(self.transform, self.beta)?)
    }

    fn solve_config(&self) -> SolveConfig {
        SolveConfig {
            learning_rate: self.learning_rate,
            max_iters: self.max_iters,
            grad_tolerance: self.grad_tolerance,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: usize,
    pub chain: String,
    pub answer: String,
    pub reward: u8,
    /// `None` encodes a zero weight (log-weight `-inf`).
    pub log_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecords {
    pub prompt: String,
    pub majority: String,
    pub candidates: Vec<CandidateRecord>,
}

/// One round's generation output `D_{m-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    /// Index `m - 1` of the policy that generated it.
    pub round: usize,
    pub prompts: Vec<PromptRecords>,
}

/// JSON-lines record of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetLine {
    round: usize,
    prompt: String,
    candidate: usize,
    chain: String,
    answer: String,
    reward: u8,
    log_weight: Option<f64>,
    majority: String,
}

impl OfflineDataset {
    /// One JSON object per candidate, in prompt then candidate order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.prompts {
            for c in &p.candidates {
                let line = DatasetLine {
                    round: self.round,
                    prompt: p.prompt.clone(),
                    candidate: c.index,
                    chain: c.chain.clone(),
                    answer: c.answer.clone(),
                    reward: c.reward,
                    log_weight: c.log_weight,
                    majority: p.majority.clone(),
                };
                out.push_str(&serde_json::to_string(&line).expect("plain data serializes"));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, EngineError> {
        let err = |line: usize, reason: String| EngineError::Dataset { line, reason };
        let mut round = None;
        let mut prompts: Vec<PromptRecords> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let rec: DatasetLine = serde_json::from_str(raw).map_err(|e| err(line_no, e.to_string()))?;
            if *round.get_or_insert(rec.round) != rec.round {
                return Err(err(line_no, "mixed rounds".into()));
            }
            if rec.reward > 1 {
                return Err(err(line_no, "reward must be 0 or 1".into()));
            }
            if rec.log_weight.is_some_and(|w| !w.is_finite()) {
                return Err(err(line_no, "log_weight must be finite or null".into()));
            }
            let cand = CandidateRecord {
                index: rec.candidate,
                chain: rec.chain,
                answer: rec.answer,
                reward: rec.reward,
                log_weight: rec.log_weight,
            };
            match prompts.last_mut() {
                Some(p) if p.prompt == rec.prompt => {
                    if p.majority != rec.majority {
                        return Err(err(line_no, "majority differs within a prompt".into()));
                    }
                    if cand.index != p.candidates.len() {
                        return Err(err(line_no, "candidate indices must be contiguous".into()));
                    }
                    p.candidates.push(cand);
                }
                _ => {
                    if prompts.iter().any(|p| p.prompt == rec.prompt) {
                        return Err(err(line_no, format!("prompt `{}` appears twice", rec.prompt)));
                    }
                    if cand.index != 0 {
                        return Err(err(line_no, "candidate indices must start at 0".into()));
                    }
                    prompts.push(PromptRecords { prompt: rec.prompt, majority: rec.majority, candidates: vec![cand] });
                }
            }
        }
        let round = round.ok_or_else(|| err(0, "empty dataset".into()))?;
        let k = prompts[0].candidates.len();
        if prompts.iter().any(|p| p.candidates.len() != k) {
            return Err(err(0, "every prompt must have the same number of candidates".into()));
        }
        Ok(Self { round, prompts })
    }

    /// Weighted samples for the empirical objective, resolved against
    /// `space` (prompt order of the dataset need not match).
    pub fn samples(&self, space: &crate::policy::PromptSpace) -> Result<Vec<WeightedSample>, EngineError> {
        let mut out = Vec::new();
        for p in &self.prompts {
            let pi = space.prompt_index(&p.prompt)?;
            for c in &p.candidates {
                out.push(WeightedSample {
                    prompt: pi,
                    chain: space.chain_index(pi, &c.chain)?,
                    log_weight: c.log_weight.unwrap_or(f64::NEG_INFINITY),
                });
            }
        }
        Ok(out)
    }
}

fn to_record_weight(lw: f64) -> Option<f64> {
    (lw > f64::NEG_INFINITY).then_some(lw)
}

/// Round `m` generation: `k` draws per active prompt from `policy`, scored
/// against their majority. `prev_rewards[p][c]` is chain `c`'s reward in
/// the previous round (required by the baseline-shifted transform from
/// round 2 on). Returns the dataset and each active prompt's chain rewards.
#[allow(clippy::too_many_arguments)]
pub fn generate_round<P: Policy, E: AnswerEquivalence + ?Sized>(
    policy: &P,
    active: &[usize],
    round: usize,
    k: usize,
    seeds: SeedStream,
    transform: &RewardTransform,
    prev_rewards: Option<&[Vec<u8>]>,
    equiv: &E,
) -> Result<(OfflineDataset, Vec<Vec<u8>>), EngineError> {
    if k == 0 {
        return Err(EngineError::Config("k must be >= 1".into()));
    }
    let space = policy.space();
    let gen = seeds.child("generate");
    let votes = seeds.child("vote");
    let per_prompt: Result<Vec<(PromptRecords, Vec<u8>)>, EngineError> = active
        .par_iter()
        .map(|&i| {
            let prompt = space.prompt(i);
            let dist = policy.distribution(i);
            let mut rng = gen.rng("candidates", &[round as u64, i as u64]);
            let draws: Vec<usize> = (0..k).map(|_| crate::policy::draw_index(&dist, &mut rng)).collect();
            let cands: Vec<(String, String)> =
                draws.iter().map(|&c| (prompt.chains[c].id.clone(), prompt.chains[c].answer.clone())).collect();
            let tie = TieBreak::new(votes, round as u64, &prompt.id);
            let set = score_candidates(&prompt.id, &cands, &tie, equiv)?;
            let chain_rewards: Vec<u8> = prompt.chains.iter().map(|c| set.majority.reward(&c.answer, equiv)).collect();
            let prev = prev_rewards.map(|p| &p[i]);
            let candidates = draws
                .iter()
                .zip(&set.rewards)
                .enumerate()
                .map(|(idx, (&c, &r))| {
                    let lw = transform.log_weight(r, prev.map(|p| p[c]), round)?;
                    Ok(CandidateRecord {
                        index: idx,
                        chain: prompt.chains[c].id.clone(),
                        answer: prompt.chains[c].answer.clone(),
                        reward: r,
                        log_weight: to_record_weight(lw),
                    })
                })
                .collect::<Result<Vec<_>, RewardError>>()?;
            Ok((PromptRecords { prompt: prompt.id.clone(), majority: set.majority.answer, candidates }, chain_rewards))
        })
        .collect();
    let (prompts, rewards): (Vec<_>, Vec<_>) = per_prompt?.into_iter().unzip();
    Ok((OfflineDataset { round: round - 1, prompts }, rewards))
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: RunConfig,
    /// Per-round metrics, starting with the base policy at round 0. Empty
    /// without an evaluator.
    pub reports: Vec<RoundReport>,
    /// `checkpoints[m]` is `pi_m`.
    pub checkpoints: Vec<AnyPolicy>,
    pub datasets: Vec<OfflineDataset>,
    pub solve_reports: Vec<SolveReport>,
    /// Round with the highest train maj@k (earliest on ties).
    pub best_round: usize,
    pub final_policy: AnyPolicy,
    /// Labels used by the last update, per active prompt.
    pub final_labels: Vec<String>,
    pub rounds_run: usize,
    pub converged: bool,
    pub stopped_early: bool,
    /// Set when a solver failure ended the run; checkpoints up to the last
    /// good round are retained.
    pub aborted: Option<String>,
    /// Ground-truth labels never reach training; they drive only early
    /// stopping and best-round selection through the evaluator.
    pub labels_used_for: &'static str,
}

impl RunReport {
    pub fn best_policy(&self) -> &AnyPolicy {
        &self.checkpoints[self.best_round]
    }
}

/// Runs the loop on all prompts of `pi0` without evaluation.
pub fn run_tabular<E: AnswerEquivalence + ?Sized>(
    config: &RunConfig,
    pi0: &TabularPolicy,
    equiv: &E,
) -> Result<RunReport, EngineError> {
    let active: Vec<usize> = (0..pi0.space().len()).collect();
    run(config, &AnyPolicy::Tabular(pi0.clone()), &active, None, equiv)
}

/// Executes up to `config.rounds` rounds over the `active` prompts.
pub fn run<E: AnswerEquivalence + ?Sized>(
    config: &RunConfig,
    pi0: &AnyPolicy,
    active: &[usize],
    evaluator: Option<&Evaluator>,
    equiv: &E,
) -> Result<RunReport, EngineError> {
    let transform = config.validate()?;
    let space = pi0.space().clone();
    if active.iter().any(|&i| i >= space.len()) {
        return Err(EngineError::Config("active prompt out of range".into()));
    }
    let seeds = SeedStream::new(config.seed);
    let train_seeds = seeds.child("train");
    let classes = (config.vote == VoteMode::Population).then(|| ChainClasses::build(&space, equiv));

    let initial = match (config.backend, pi0) {
        (Backend::Tabular, p) => AnyPolicy::Tabular(p.to_tabular()),
        (Backend::Softmax, AnyPolicy::Softmax(s)) => AnyPolicy::Softmax(s.clone()),
        (Backend::Softmax, AnyPolicy::Tabular(t)) => AnyPolicy::Softmax(SoftmaxPolicy::from_tabular(t, config.temperature)?),
    };
    let mut policy = initial.clone();
    let mut checkpoints = vec![policy.clone()];
    let mut reports = Vec::new();
    let mut datasets = Vec::new();
    let mut solve_reports = Vec::new();

    let train_acc = |r: &RoundReport| r.splits.get("train").map(|s| s.majk_acc);
    let mut best_round = 0;
    let mut best_acc = None;
    if let Some(ev) = evaluator {
        let r = ev.evaluate(&policy, 0, equiv, RoundExtras::default());
        best_acc = train_acc(&r);
        reports.push(r);
    }

    let mut stale = 0usize;
    let mut prev_rewards: Option<Vec<Vec<u8>>> = None;
    let mut prev_labels: Option<Vec<String>> = None;
    let mut final_labels = Vec::new();
    let mut converged = false;
    let mut stopped_early = false;
    let mut aborted = None;
    let mut rounds_run = 0;

    for m in 1..=config.rounds {
        // Chain rewards of all prompts (inactive ones stay empty).
        let mut chain_rewards: Vec<Vec<u8>> = vec![Vec::new(); space.len()];
        let labels: Vec<String>;
        let mut samples = Vec::new();
        let baseline = prev_rewards.as_deref();
        match config.vote {
            VoteMode::Sampled => {
                let (ds, rewards) =
                    generate_round(&policy, active, m, config.k, train_seeds, &transform, baseline, equiv)?;
                for (&i, r) in active.iter().zip(rewards) {
                    chain_rewards[i] = r;
                }
                labels = ds.prompts.iter().map(|p| p.majority.clone()).collect();
                samples = ds.samples(&space)?;
                datasets.push(ds);
            }
            VoteMode::Population => {
                let classes = classes.as_ref().expect("built for population mode");
                let all = policy_rewards(&policy, classes, RewardMode::Population, seeds, (m - 1) as u64, equiv);
                let mut l = Vec::with_capacity(active.len());
                for &i in active {
                    chain_rewards[i] = all[i].rewards.clone();
                    l.push(all[i].label.clone());
                }
                labels = l;
            }
        }

        // Per-chain log-weights for the exact update.
        let mut log_weights: Vec<Vec<f64>> = (0..space.len()).map(|i| vec![0.0; space.num_chains(i)]).collect();
        for &i in active {
            for c in 0..space.num_chains(i) {
                let prev = baseline.map(|b| b[i][c]);
                log_weights[i][c] = transform.log_weight(chain_rewards[i][c], prev, m)?;
            }
        }

        let (next, degenerate, objective) = match &policy {
            AnyPolicy::Tabular(t) => {
                let out = closed_form_update_or_freeze(t, &log_weights)?;
                let objective = if samples.is_empty() {
                    expected_objective(t, &out.policy, &log_weights, active)
                } else {
                    weighted_mle_objective(&out.policy, &samples)
                };
                (AnyPolicy::Tabular(out.policy), out.frozen.len(), objective)
            }
            AnyPolicy::Softmax(s) => {
                let start = if config.warm_start {
                    s.clone()
                } else {
                    match &initial {
                        AnyPolicy::Softmax(s0) => s0.clone(),
                        AnyPolicy::Tabular(_) => unreachable!("softmax backend starts from logits"),
                    }
                };
                match solve_gradient(&start, &samples, &config.solve_config()) {
                    Ok((fitted, rep)) => {
                        let objective = rep.objective_value;
                        let degenerate = active
                            .iter()
                            .filter(|&&i| samples.iter().all(|s| s.prompt != i || s.log_weight == f64::NEG_INFINITY))
                            .count();
                        solve_reports.push(rep);
                        (AnyPolicy::Softmax(fitted), degenerate, objective)
                    }
                    Err(e) => {
                        log::error!("round {m}: solver failed: {e}");
                        aborted = Some(format!("round {m}: {e}"));
                        break;
                    }
                }
            }
        };

        let change = max_abs_diff(&policy.to_tabular(), &next.to_tabular());
        let labels_stable = prev_labels.as_ref() == Some(&labels);
        policy = next;
        checkpoints.push(policy.clone());
        rounds_run = m;
        prev_rewards = Some(chain_rewards);
        prev_labels = Some(labels.clone());
        final_labels = labels;

        if let Some(ev) = evaluator {
            let extras = RoundExtras { objective, degenerate_prompts: degenerate, max_policy_change: change };
            let r = ev.evaluate(&policy, m, equiv, extras);
            let acc = train_acc(&r);
            reports.push(r);
            if let Some(acc) = acc {
                if best_acc.is_none_or(|b| acc > b) {
                    best_acc = Some(acc);
                    best_round = m;
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
        }
        if let Some(tol) = config.stop_tolerance {
            if change <= tol && labels_stable {
                converged = true;
                break;
            }
        }
        if stale > config.patience {
            stopped_early = true;
            break;
        }
    }
    if evaluator.is_none() {
        best_round = rounds_run;
    }

    Ok(RunReport {
        config: config.clone(),
        reports,
        final_policy: policy,
        checkpoints,
        datasets,
        solve_reports,
        best_round,
        final_labels,
        rounds_run,
        converged,
        stopped_early,
        aborted,
        labels_used_for: "evaluation only (early stopping and best-round selection)",
    })
}

/// Engine-side fields of a round's metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RoundExtras {
    pub objective: f64,
    pub degenerate_prompts: usize,
    pub max_policy_change: f64,
}

/// `sum_p sum_c prev(c) g(c) ln new(c)` over active prompts.
fn expected_objective(prev: &TabularPolicy, new: &TabularPolicy, lw: &[Vec<f64>], active: &[usize]) -> f64 {
    let mut total = 0.0;
    for &i in active {
        for (c, &p) in prev.prompt_probs(i).iter().enumerate() {
            if p > 0.0 && lw[i][c] > f64::NEG_INFINITY {
                let q = new.prompt_probs(i)[c];
                if q <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                total += p * lw[i][c].exp() * q.ln();
            }
        }
    }
    total
}

/// Counts of each majority label, for diagnostics.
pub fn label_histogram(ds: &OfflineDataset) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for p in &ds.prompts {
        *h.entry(p.majority.clone()).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answerkit::MathEquivalence;
    use crate::optimizer::closed_form_update;
    use crate::policy::{Chain, Prompt, PromptSpace};
    use std::sync::Arc;

    fn space(answers: &[&[&str]]) -> Arc<PromptSpace> {
        let prompts = answers
            .iter()
            .enumerate()
            .map(|(i, a)| Prompt::new(format!("p{i}"), a.iter().enumerate().map(|(j, s)| Chain::new(format!("c{j}"), *s)).collect()))
            .collect();
        Arc::new(PromptSpace::new(prompts).unwrap())
    }

    fn eq() -> MathEquivalence {
        MathEquivalence::default()
    }

    #[test]
    fn deterministic_policy_generates_unanimous_votes() {
        let s = space(&[&["4", "5"], &["1", "2", "3"]]);
        let t = TabularPolicy::new(s, vec![vec![1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let (ds, rewards) =
            generate_round(&t, &[0, 1], 1, 10, SeedStream::new(1), &RewardTransform::Identity, None, &eq()).unwrap();
        assert_eq!(ds.round, 0);
        assert_eq!(ds.prompts[0].majority, "4");
        assert_eq!(ds.prompts[1].majority, "3");
        for p in &ds.prompts {
            assert_eq!(p.candidates.len(), 10);
            assert!(p.candidates.iter().all(|c| c.reward == 1 && c.log_weight == Some(0.0)));
        }
        assert_eq!(rewards, vec![vec![1, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn single_candidate_is_its_own_majority() {
        let s = space(&[&["a", "b", "c"]]);
        let t = TabularPolicy::uniform(s);
        for seed in 0..20 {
            let (ds, _) =
                generate_round(&t, &[0], 1, 1, SeedStream::new(seed), &RewardTransform::Identity, None, &eq()).unwrap();
            assert_eq!(ds.prompts[0].candidates[0].reward, 1);
            assert_eq!(ds.prompts[0].candidates[0].answer, ds.prompts[0].majority);
        }
    }

    #[test]
    fn large_k_recovers_the_majority_answer() {
        // P(#"5" >= 500 of 1000 | p = 1/3) < 1e-25 by the exact binomial
        // tail, so the vote must return "4".
        let s = space(&[&["4", "4", "5"]]);
        let t = TabularPolicy::uniform(s);
        let (ds, _) =
            generate_round(&t, &[0], 1, 1000, SeedStream::new(7), &RewardTransform::Identity, None, &eq()).unwrap();
        assert_eq!(ds.prompts[0].majority, "4");
    }

    #[test]
    fn generation_is_deterministic_and_worker_independent() {
        let s = space(&[&["1", "2", "3"], &["1", "1", "2"], &["9", "8"]]);
        let t = TabularPolicy::uniform(s);
        let tf = RewardTransform::Exponential { beta: 0.1 };
        let a = generate_round(&t, &[0, 1, 2], 3, 9, SeedStream::new(5), &tf, None, &eq()).unwrap().0;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| generate_round(&t, &[0, 1, 2], 3, 9, SeedStream::new(5), &tf, None, &eq()).unwrap().0);
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_transform_requires_previous_rewards() {
        let s = space(&[&["1", "2"]]);
        let t = TabularPolicy::uniform(s);
        let tf = RewardTransform::BaselineShifted { beta: 0.1 };
        assert!(generate_round(&t, &[0], 2, 3, SeedStream::new(0), &tf, None, &eq()).is_err());
        assert!(generate_round(&t, &[0], 2, 3, SeedStream::new(0), &tf, Some(&[vec![1, 0]]), &eq()).is_ok());
    }

    #[test]
    fn one_round_matches_closed_form_of_its_dataset() {
        let s = space(&[&["1", "2", "1", "3"], &["5", "6"]]);
        let pi0 = TabularPolicy::new(s.clone(), vec![vec![0.3, 0.3, 0.2, 0.2], vec![0.5, 0.5]]).unwrap();
        let cfg = RunConfig { rounds: 1, ..RunConfig::default() };
        let run = run_tabular(&cfg, &pi0, &eq()).unwrap();
        let ds = &run.datasets[0];
        let lw: Vec<Vec<f64>> = ds
            .prompts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                s.prompt(i).chains.iter().map(|c| if eq().equivalent(&c.answer, &p.majority) { 0.0 } else { f64::NEG_INFINITY }).collect()
            })
            .collect();
        assert_eq!(run.final_policy, AnyPolicy::Tabular(closed_form_update(&pi0, &lw).unwrap()));
    }

    #[test]
    fn dataset_jsonl_round_trips_and_rejects_garbage() {
        let s = space(&[&["0.5", "\\frac{1}{2}", "3"], &["x", "y"]]);
        let t = TabularPolicy::uniform(s);
        let tf = RewardTransform::Identity;
        let (ds, _) = generate_round(&t, &[0, 1], 2, 5, SeedStream::new(3), &tf, Some(&[vec![1, 1, 0], vec![0, 1]]), &eq()).unwrap();
        let text = ds.to_jsonl();
        assert_eq!(text.lines().count(), 10);
        assert_eq!(OfflineDataset::from_jsonl(&text).unwrap(), ds);
        for bad in [
            "",
            "{}",
            "not json",
            r#"{"round":0,"prompt":"p","candidate":1,"chain":"c","answer":"a","reward":1,"log_weight":0.0,"majority":"a"}"#,
            r#"{"round":0,"prompt":"p","candidate":0,"chain":"c","answer":"a","reward":2,"log_weight":0.0,"majority":"a"}"#,
            r#"{"round":0,"prompt":"p","candidate":0,"chain":"c","answer":"a","reward":1,"log_weight":0.0,"majority":"a","extra":1}"#,
        ] {
            assert!(OfflineDataset::from_jsonl(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn config_validation() {
        for cfg in [
            RunConfig { k: 0, ..RunConfig::default() },
            RunConfig { rounds: 0, ..RunConfig::default() },
            RunConfig { patience: 0, ..RunConfig::default() },
            RunConfig { transform: TransformKind::Exponential, beta: 0.0, ..RunConfig::default() },
            RunConfig { backend: Backend::Softmax, vote: VoteMode::Population, ..RunConfig::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!(RunConfig::default().validate().is_ok());
    }
}
