//! The KL-regularized side: self-consistent solutions of
//! `pi* ∝ exp(r(pi*) / beta) · pi_0`, where the reward `r` is the majority
//! indicator recomputed from `pi*` itself.
//!
//! [`kl_fixed_point`] iterates `pi_m ∝ exp(r(pi_{m-1}) / beta) · pi_0` until
//! the policy satisfies its own equation and the majority labels stop
//! moving. [`check_proposition1`] runs the offline engine with the
//! baseline-shifted transform on the same instance and compares the two.

use rand::SeedableRng;
use serde::Serialize;
use thiserror::Error;

use crate::answerkit::AnswerEquivalence;
use crate::engine::{self, EngineError, RunConfig, VoteMode};
use crate::policy::{normalize_log, Policy, PolicyError, PromptSpace, TabularPolicy};
use crate::reward::{majority_vote, AnswerClasses, RewardError, RewardTransform, TieBreak, TransformKind};
use crate::rng::{SeedStream, StreamRng};

/// Marginals closer than this to the maximum count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("beta must be positive and finite, got {0}")]
    BadBeta(f64),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("sampled mode needs k >= 1")]
    BadK,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Equivalence classes of each prompt's chain answers.
#[derive(Debug, Clone)]
pub struct ChainClasses {
    chain_class: Vec<Vec<usize>>,
    representatives: Vec<Vec<String>>,
}

impl ChainClasses {
    pub fn build<E: AnswerEquivalence + ?Sized>(space: &PromptSpace, equiv: &E) -> Self {
        let mut chain_class = Vec::with_capacity(space.len());
        let mut representatives = Vec::with_capacity(space.len());
        for p in space.prompts() {
            let answers: Vec<&str> = p.chains.iter().map(|c| c.answer.as_str()).collect();
            let classes = AnswerClasses::build(&answers, equiv);
            chain_class.push(answers.iter().map(|a| classes.class_of(a).expect("own answer")).collect());
            representatives.push((0..classes.num_classes()).map(|c| classes.representative(c).to_string()).collect());
        }
        Self { chain_class, representatives }
    }

    pub fn class_of(&self, prompt: usize, chain: usize) -> usize {
        self.chain_class[prompt][chain]
    }

    pub fn representative(&self, prompt: usize, class: usize) -> &str {
        &self.representatives[prompt][class]
    }

    /// Probability of each answer class under `dist`.
    pub fn marginal(&self, prompt: usize, dist: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; self.representatives[prompt].len()];
        for (c, p) in dist.iter().enumerate() {
            m[self.chain_class[prompt][c]] += p;
        }
        m
    }
}

/// A majority label and the induced per-chain rewards of one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptReward {
    pub label: String,
    pub rewards: Vec<u8>,
}

/// How rewards are computed from a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RewardMode {
    /// k → ∞: the majority is the argmax class of the answer marginal.
    Population,
    /// The majority of `k` fresh draws.
    Sampled { k: usize },
}

/// Population reward: 1 for chains in the argmax answer class. Near-ties
/// (within [`TIE_TOLERANCE`]) are broken by a draw keyed on
/// `(seeds, iteration, prompt)`.
pub fn population_reward(
    dist: &[f64],
    prompt: usize,
    classes: &ChainClasses,
    seeds: SeedStream,
    iteration: u64,
) -> PromptReward {
    let m = classes.marginal(prompt, dist);
    let best = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..m.len()).filter(|&c| m[c] >= best - TIE_TOLERANCE).collect();
    let winner = if tied.len() == 1 {
        tied[0]
    } else {
        use rand::Rng;
        let mut rng = StreamRng::seed_from_u64(seeds.derive("population-tie", &[iteration, prompt as u64]));
        tied[rng.random_range(0..tied.len())]
    };
    let rewards = (0..dist.len()).map(|c| u8::from(classes.class_of(prompt, c) == winner)).collect();
    PromptReward { label: classes.representative(prompt, winner).to_string(), rewards }
}

/// Rewards of every prompt under `policy` for the given mode.
pub fn policy_rewards<P: Policy, E: AnswerEquivalence + ?Sized>(
    policy: &P,
    classes: &ChainClasses,
    mode: RewardMode,
    seeds: SeedStream,
    iteration: u64,
    equiv: &E,
) -> Vec<PromptReward> {
    let space = policy.space();
    (0..space.len())
        .map(|i| {
            let dist = policy.distribution(i);
            match mode {
                RewardMode::Population => population_reward(&dist, i, classes, seeds, iteration),
                RewardMode::Sampled { k } => {
                    let mut rng = seeds.rng("fixed-point-sample", &[iteration, i as u64]);
                    let prompt = space.prompt(i);
                    let answers: Vec<&str> = (0..k)
                        .map(|_| prompt.chains[crate::policy::draw_index(&dist, &mut rng)].answer.as_str())
                        .collect();
                    let tie = TieBreak::new(seeds.child("fixed-point-tie"), iteration, &prompt.id);
                    let maj = majority_vote(&answers, &tie, equiv).expect("k >= 1");
                    let rewards = prompt.chains.iter().map(|c| maj.reward(&c.answer, equiv)).collect();
                    PromptReward { label: maj.answer, rewards }
                }
            }
        })
        .collect()
}

/// `normalize(exp(r / beta) · pi_0)` for every prompt.
pub fn tilt_reference(pi0: &TabularPolicy, rewards: &[PromptReward], beta: f64) -> TabularPolicy {
    let probs = pi0
        .probs()
        .iter()
        .zip(rewards)
        .map(|(p, r)| {
            let logs: Vec<f64> = p
                .iter()
                .zip(&r.rewards)
                .map(|(pc, rc)| if *pc > 0.0 { pc.ln() + f64::from(*rc) / beta } else { f64::NEG_INFINITY })
                .collect();
            normalize_log(&logs).expect("pi_0 has mass on every prompt")
        })
        .collect();
    TabularPolicy::from_parts_unchecked(pi0.space().clone(), probs)
}

pub fn max_abs_diff(a: &TabularPolicy, b: &TabularPolicy) -> f64 {
    a.probs().iter().flatten().zip(b.probs().iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest per-prompt total-variation distance.
pub fn max_tv(a: &TabularPolicy, b: &TabularPolicy) -> f64 {
    a.probs()
        .iter()
        .zip(b.probs())
        .map(|(p, q)| 0.5 * p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedPointConfig {
    pub tolerance: f64,
    pub max_rounds: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_rounds: 50 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlSolution {
    pub policy: TabularPolicy,
    /// `max |pi - normalize(exp(r(pi)/beta) pi_0)|` with `r` recomputed
    /// from `pi`.
    pub residual: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointStep {
    pub policy: TabularPolicy,
    pub labels: Vec<String>,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointTrace {
    pub steps: Vec<FixedPointStep>,
    pub converged: bool,
    /// Number of updates applied.
    pub iterations: usize,
}

impl FixedPointTrace {
    /// True when the last labels repeat an earlier, different label set,
    /// i.e. the iteration is oscillating rather than drifting.
    pub fn is_cycling(&self) -> bool {
        if self.converged || self.steps.len() < 3 {
            return false;
        }
        let last = &self.steps[self.steps.len() - 1].labels;
        let prev = &self.steps[self.steps.len() - 2].labels;
        last != prev && self.steps[..self.steps.len() - 2].iter().any(|s| &s.labels == last)
    }
}

/// Iterates `pi_m ∝ exp(r(pi_{m-1}) / beta) · pi_0`. Converged when the
/// current policy satisfies its own fixed-point equation within
/// `tolerance` and the labels equal those of the previous iterate.
pub fn kl_fixed_point<E: AnswerEquivalence + ?Sized>(
    pi0: &TabularPolicy,
    beta: f64,
    config: &FixedPointConfig,
    mode: RewardMode,
    seeds: SeedStream,
    equiv: &E,
) -> Result<(KlSolution, FixedPointTrace), ReferenceError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(ReferenceError::BadBeta(beta));
    }
    if config.tolerance.is_nan() || config.tolerance <= 0.0 {
        return Err(ReferenceError::BadTolerance(config.tolerance));
    }
    if mode == (RewardMode::Sampled { k: 0 }) {
        return Err(ReferenceError::BadK);
    }
    let classes = ChainClasses::build(pi0.space(), equiv);
    let mut pi = pi0.clone();
    let mut steps: Vec<FixedPointStep> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..=config.max_rounds {
        let rewards = policy_rewards(&pi, &classes, mode, seeds, it as u64, equiv);
        let target = tilt_reference(pi0, &rewards, beta);
        let residual = max_abs_diff(&pi, &target);
        let labels: Vec<String> = rewards.into_iter().map(|r| r.label).collect();
        let stable = steps.last().is_some_and(|s| s.labels == labels);
        steps.push(FixedPointStep { policy: pi.clone(), labels, residual });
        if residual <= config.tolerance && stable {
            converged = true;
            break;
        }
        if it == config.max_rounds {
            break;
        }
        pi = target;
        iterations += 1;
    }
    let residual = steps.last().map_or(f64::INFINITY, |s| s.residual);
    Ok((KlSolution { policy: pi, residual, beta }, FixedPointTrace { steps, converged, iterations }))
}

/// Recomputes the fixed-point residual of `policy` from scratch.
pub fn fixed_point_residual<E: AnswerEquivalence + ?Sized>(
    pi0: &TabularPolicy,
    policy: &TabularPolicy,
    beta: f64,
    seeds: SeedStream,
    iteration: u64,
    equiv: &E,
) -> f64 {
    let classes = ChainClasses::build(pi0.space(), equiv);
    let rewards = policy_rewards(policy, &classes, RewardMode::Population, seeds, iteration, equiv);
    max_abs_diff(policy, &tilt_reference(pi0, &rewards, beta))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Proposition1Report {
    pub beta: f64,
    /// Max per-prompt total variation between the two final policies.
    pub distance: f64,
    pub labels_match: bool,
    pub fixed_point_converged: bool,
    pub fixed_point_iterations: usize,
    pub fixed_point_residual: f64,
    pub engine_converged: bool,
    pub engine_rounds: usize,
    pub cycling: bool,
}

impl Proposition1Report {
    pub fn both_converged(&self) -> bool {
        self.fixed_point_converged && self.engine_converged
    }
}

/// Runs the fixed-point solver and the offline engine with the
/// baseline-shifted transform on the same instance, population mode.
pub fn check_proposition1<E: AnswerEquivalence + ?Sized>(
    pi0: &TabularPolicy,
    beta: f64,
    config: &FixedPointConfig,
    seed: u64,
    equiv: &E,
) -> Result<Proposition1Report, ReferenceError> {
    let seeds = SeedStream::new(seed);
    let (sol, trace) = kl_fixed_point(pi0, beta, config, RewardMode::Population, seeds, equiv)?;
    RewardTransform::new(TransformKind::BaselineShifted, beta)?;
    let run_cfg = RunConfig {
        transform: TransformKind::BaselineShifted,
        beta,
        seed,
        vote: VoteMode::Population,
        rounds: config.max_rounds + 1,
        patience: usize::MAX,
        stop_tolerance: Some(config.tolerance),
        ..RunConfig::default()
    };
    let run = engine::run_tabular(&run_cfg, pi0, equiv)?;
    let final_policy = run.final_policy.to_tabular();
    let fp_labels = trace.steps.last().map(|s| s.labels.clone()).unwrap_or_default();
    Ok(Proposition1Report {
        beta,
        distance: max_tv(&sol.policy, &final_policy),
        labels_match: fp_labels == run.final_labels,
        fixed_point_converged: trace.converged,
        fixed_point_iterations: trace.iterations,
        fixed_point_residual: sol.residual,
        engine_converged: run.converged,
        engine_rounds: run.rounds_run,
        cycling: trace.is_cycling(),
    })
}
