//! Weighted log-likelihood updates.
//!
//! For a tabular policy the per-prompt maximizer of
//! `E_{c ~ prev}[w(c) log pi(c)]` over the simplex is `pi ∝ w · prev`
//! ([`closed_form_update`]); iterating it gives the product form
//! `pi_m ∝ (prod_j w_j) · pi_0` ([`product_form_oracle`]). Softmax policies
//! are fitted to an empirical weighted sample by gradient ascent
//! ([`solve_gradient`]).
//!
//! All weights are carried as log-weights; `-inf` is an exact zero weight.

use serde::Serialize;
use thiserror::Error;

use crate::policy::{normalize_log, Policy, PolicyError, SoftmaxPolicy, TabularPolicy};

/// Per-prompt, per-chain log-weights.
pub type LogWeights = Vec<Vec<f64>>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("prompt `{prompt}` has no positive weight on any chain with positive probability")]
    DegeneratePrompt { prompt: String },
    #[error("weights do not match the prompt space: {0}")]
    Shape(String),
    #[error("weight history is empty")]
    EmptyHistory,
    #[error("invalid solver configuration: {0}")]
    BadConfig(String),
    #[error("non-finite gradient after {} iterations", report.iterations)]
    NonFinite { report: SolveReport },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

fn check_shape(policy: &TabularPolicy, lw: &[Vec<f64>]) -> Result<(), OptimizerError> {
    let space = policy.space();
    if lw.len() != space.len() {
        return Err(OptimizerError::Shape(format!("{} prompts vs {}", lw.len(), space.len())));
    }
    for (i, row) in lw.iter().enumerate() {
        if row.len() != space.num_chains(i) {
            return Err(OptimizerError::Shape(format!("prompt `{}`: {} weights", space.prompt(i).id, row.len())));
        }
        if row.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(OptimizerError::Shape(format!("prompt `{}`: invalid log-weight", space.prompt(i).id)));
        }
    }
    Ok(())
}

/// `prev ∝ exp(lw) · prev` for one prompt; `None` when no mass survives.
fn tilt(prev: &[f64], lw: &[f64]) -> Option<Vec<f64>> {
    let support: Vec<f64> = prev.iter().zip(lw).filter(|(p, _)| **p > 0.0).map(|(_, w)| *w).collect();
    if let Some(first) = support.first() {
        if first.is_finite() && support.iter().all(|w| w == first) {
            return Some(prev.to_vec());
        }
    }
    let logs: Vec<f64> = prev.iter().zip(lw).map(|(p, w)| if *p > 0.0 { p.ln() + w } else { f64::NEG_INFINITY }).collect();
    normalize_log(&logs)
}

/// Exact maximizer of the weighted objective: `new ∝ exp(lw) · prev` per
/// prompt. Fails on the first prompt with zero effective mass.
pub fn closed_form_update(prev: &TabularPolicy, log_weights: &[Vec<f64>]) -> Result<TabularPolicy, OptimizerError> {
    let out = closed_form_update_or_freeze(prev, log_weights)?;
    match out.frozen.first() {
        Some(&i) => Err(OptimizerError::DegeneratePrompt { prompt: prev.space().prompt(i).id.clone() }),
        None => Ok(out.policy),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub policy: TabularPolicy,
    /// Prompts whose distribution was carried over unchanged.
    pub frozen: Vec<usize>,
}

/// Like [`closed_form_update`], but degenerate prompts keep their previous
/// distribution and are listed in `frozen`.
pub fn closed_form_update_or_freeze(
    prev: &TabularPolicy,
    log_weights: &[Vec<f64>],
) -> Result<UpdateOutcome, OptimizerError> {
    check_shape(prev, log_weights)?;
    let mut frozen = Vec::new();
    let probs = prev
        .probs()
        .iter()
        .zip(log_weights)
        .enumerate()
        .map(|(i, (p, lw))| {
            tilt(p, lw).unwrap_or_else(|| {
                log::warn!("prompt `{}` has zero effective mass; frozen", prev.space().prompt(i).id);
                frozen.push(i);
                p.clone()
            })
        })
        .collect();
    Ok(UpdateOutcome { policy: TabularPolicy::from_parts_unchecked(prev.space().clone(), probs), frozen })
}

/// `pi_m ∝ (prod_j g_j) · pi_0`, computed directly from the weight history
/// without iterating.
pub fn product_form_oracle(pi0: &TabularPolicy, history: &[LogWeights]) -> Result<TabularPolicy, OptimizerError> {
    if history.is_empty() {
        return Err(OptimizerError::EmptyHistory);
    }
    for lw in history {
        check_shape(pi0, lw)?;
    }
    let space = pi0.space();
    let mut probs = Vec::with_capacity(space.len());
    for i in 0..space.len() {
        let logs: Vec<f64> = (0..space.num_chains(i))
            .map(|c| {
                let p = pi0.prompt_probs(i)[c];
                if p <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                history.iter().map(|lw| lw[i][c]).sum::<f64>() + p.ln()
            })
            .collect();
        probs.push(
            normalize_log(&logs).ok_or_else(|| OptimizerError::DegeneratePrompt { prompt: space.prompt(i).id.clone() })?,
        );
    }
    Ok(TabularPolicy::from_parts_unchecked(space.clone(), probs))
}

/// One weighted training example `(prompt, chain, ln g)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightedSample {
    pub prompt: usize,
    pub chain: usize,
    pub log_weight: f64,
}

/// `sum_s g_s · ln pi(c_s | x_s)`. Zero-weight samples contribute exactly 0;
/// a positive weight on a zero-probability chain yields `-inf`.
pub fn weighted_mle_objective<P: Policy>(policy: &P, samples: &[WeightedSample]) -> f64 {
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; policy.space().len()];
    let mut total = 0.0;
    for s in samples {
        if s.log_weight == f64::NEG_INFINITY {
            continue;
        }
        let dist = cache[s.prompt].get_or_insert_with(|| policy.distribution(s.prompt));
        let p = dist[s.chain];
        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        total += s.log_weight.exp() * p.ln();
    }
    total
}

/// Analytic gradient of [`weighted_mle_objective`] with respect to the
/// logits: per prompt, `sum_s g_s (onehot(c_s) - softmax) / T`.
pub fn objective_gradient(policy: &SoftmaxPolicy, samples: &[WeightedSample]) -> Vec<Vec<f64>> {
    let space = policy.space();
    let mut grad: Vec<Vec<f64>> = (0..space.len()).map(|i| vec![0.0; space.num_chains(i)]).collect();
    let mut total = vec![0.0; space.len()];
    for s in samples {
        if s.log_weight == f64::NEG_INFINITY {
            continue;
        }
        let w = s.log_weight.exp();
        grad[s.prompt][s.chain] += w;
        total[s.prompt] += w;
    }
    let t = policy.temperature();
    for (i, g) in grad.iter_mut().enumerate() {
        if total[i] == 0.0 {
            continue;
        }
        let p = policy.distribution(i);
        for (gc, pc) in g.iter_mut().zip(p) {
            *gc = (*gc - total[i] * pc) / t;
        }
    }
    grad
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub grad_tolerance: f64,
    /// Passes over the sample list; used only in mini-batch mode.
    pub epochs: usize,
    /// `None` for full-batch ascent.
    pub batch_size: Option<usize>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, max_iters: 10_000, grad_tolerance: 1e-8, epochs: 3, batch_size: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub objective_value: f64,
    /// Norm of the per-prompt normalized gradient at the final iterate.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective before each step and after the last one.
    pub objective_history: Vec<f64>,
}

/// Per-prompt normalized targets `q` and the log of each prompt's total
/// weight, for a batch of samples.
struct Targets {
    q: Vec<Option<Vec<f64>>>,
    log_total: Vec<f64>,
}

fn targets(policy: &SoftmaxPolicy, samples: &[WeightedSample]) -> Targets {
    let space = policy.space();
    let mut shift = vec![f64::NEG_INFINITY; space.len()];
    for s in samples {
        shift[s.prompt] = shift[s.prompt].max(s.log_weight);
    }
    let mut acc: Vec<Vec<f64>> = (0..space.len()).map(|i| vec![0.0; space.num_chains(i)]).collect();
    for s in samples {
        if s.log_weight > f64::NEG_INFINITY {
            acc[s.prompt][s.chain] += (s.log_weight - shift[s.prompt]).exp();
        }
    }
    let mut q = Vec::with_capacity(space.len());
    let mut log_total = Vec::with_capacity(space.len());
    for (i, a) in acc.into_iter().enumerate() {
        let total: f64 = a.iter().sum();
        if total > 0.0 && shift[i].is_finite() {
            q.push(Some(a.iter().map(|x| x / total).collect()));
            log_total.push(shift[i] + total.ln());
        } else {
            q.push(None);
            log_total.push(f64::NEG_INFINITY);
        }
    }
    Targets { q, log_total }
}

/// Objective from the normalized targets: `sum_p W_p sum_c q_c ln pi_c`.
fn objective_from(t: &Targets, dists: &[Vec<f64>]) -> f64 {
    t.q.iter()
        .zip(&t.log_total)
        .zip(dists)
        .filter_map(|((q, lt), d)| q.as_ref().map(|q| (q, lt, d)))
        .map(|(q, lt, d)| {
            let cross: f64 = q
                .iter()
                .zip(d)
                .filter(|(qc, _)| **qc > 0.0)
                .map(|(qc, pc)| if *pc > 0.0 { qc * pc.ln() } else { f64::NEG_INFINITY })
                .sum();
            lt.exp() * cross
        })
        .sum()
}

/// One normalized ascent step; returns the normalized gradient norm before
/// stepping (the step itself is skipped when `apply` is false).
fn step(policy: &SoftmaxPolicy, t: &Targets, lr: f64, apply: bool) -> Result<(SoftmaxPolicy, f64, Vec<Vec<f64>>), ()> {
    let temp = policy.temperature();
    let mut logits = policy.logits().to_vec();
    let mut dists = Vec::with_capacity(logits.len());
    let mut sq = 0.0;
    for (i, row) in logits.iter_mut().enumerate() {
        let p = policy.distribution(i);
        if let Some(q) = &t.q[i] {
            for ((z, qc), pc) in row.iter_mut().zip(q).zip(&p) {
                let g = (qc - pc) / temp;
                sq += g * g;
                if apply {
                    *z += lr * g;
                }
            }
        }
        dists.push(p);
    }
    if !sq.is_finite() || logits.iter().flatten().any(|z| !z.is_finite()) {
        return Err(());
    }
    let next = if apply { policy.with_logits(logits).map_err(|_| ())? } else { policy.clone() };
    Ok((next, sq.sqrt(), dists))
}

/// Gradient ascent on the weighted objective. Each prompt's step is scaled
/// by the inverse of its total weight, which leaves the maximizer unchanged
/// and keeps `learning_rate` meaningful when weights are as large as
/// `exp(1/beta)`.
pub fn solve_gradient(
    policy: &SoftmaxPolicy,
    samples: &[WeightedSample],
    config: &SolveConfig,
) -> Result<(SoftmaxPolicy, SolveReport), OptimizerError> {
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(OptimizerError::BadConfig(format!("learning_rate = {}", config.learning_rate)));
    }
    if config.batch_size == Some(0) {
        return Err(OptimizerError::BadConfig("batch_size = 0".into()));
    }
    let space = policy.space();
    for s in samples {
        if s.prompt >= space.len() || s.chain >= space.num_chains(s.prompt) || s.log_weight.is_nan() {
            return Err(OptimizerError::Shape(format!("sample {s:?} out of range")));
        }
    }
    let full = targets(policy, samples);
    let mut current = policy.clone();
    let mut history = Vec::new();
    let mut iterations = 0;
    let fail = |current: &SoftmaxPolicy, history: Vec<f64>, iterations| OptimizerError::NonFinite {
        report: SolveReport {
            objective_value: weighted_mle_objective(current, samples),
            grad_norm: f64::NAN,
            iterations,
            converged: false,
            objective_history: history,
        },
    };

    match config.batch_size {
        None => {
            for _ in 0..config.max_iters {
                let Ok((_, norm, dists)) = step(&current, &full, config.learning_rate, false) else {
                    return Err(fail(&current, history, iterations));
                };
                history.push(objective_from(&full, &dists));
                if norm <= config.grad_tolerance {
                    break;
                }
                let Ok((next, _, _)) = step(&current, &full, config.learning_rate, true) else {
                    return Err(fail(&current, history, iterations));
                };
                current = next;
                iterations += 1;
            }
        }
        Some(b) => {
            'outer: for _ in 0..config.epochs {
                for chunk in samples.chunks(b) {
                    if iterations >= config.max_iters {
                        break 'outer;
                    }
                    let t = targets(&current, chunk);
                    let dists: Vec<Vec<f64>> = (0..space.len()).map(|i| current.distribution(i)).collect();
                    history.push(objective_from(&full, &dists));
                    let Ok((next, _, _)) = step(&current, &t, config.learning_rate, true) else {
                        return Err(fail(&current, history, iterations));
                    };
                    current = next;
                    iterations += 1;
                }
            }
        }
    }

    let Ok((_, grad_norm, dists)) = step(&current, &full, config.learning_rate, false) else {
        return Err(fail(&current, history, iterations));
    };
    let final_obj = objective_from(&full, &dists);
    if history.last() != Some(&final_obj) {
        history.push(final_obj);
    }
    let report = SolveReport {
        objective_value: weighted_mle_objective(&current, samples),
        grad_norm,
        iterations,
        converged: grad_norm <= config.grad_tolerance,
        objective_history: history,
    };
    Ok((current, report))
}
