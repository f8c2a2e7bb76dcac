//! Policies over finite prompt/chain/answer alphabets.
//!
//! A policy is a conditional distribution over chains given a prompt. Each
//! chain deterministically carries one answer string, so the joint
//! `(chain, answer)` pair of a generated solution is represented by the chain
//! alone. Two backends exist: [`TabularPolicy`] (an explicit probability
//! table, updated in closed form) and [`SoftmaxPolicy`] (a logit table,
//! updated by gradient ascent).
//!
//! Policies are immutable once built; updates construct a new policy.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities below this are treated as exactly zero after normalization.
pub const PROB_FLOOR: f64 = 1e-300;

const TABULAR_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("unknown prompt `{0}`")]
    UnknownPrompt(String),
    #[error("unknown chain `{chain}` for prompt `{prompt}`")]
    UnknownChain { prompt: String, chain: String },
    #[error("prompt space is empty")]
    EmptySpace,
    #[error("prompt `{0}` has no chains")]
    NoChains(String),
    #[error("duplicate identifier `{0}`")]
    Duplicate(String),
    #[error("identifier `{0:?}` contains a tab, newline or is empty")]
    BadIdentifier(String),
    #[error("prompt `{prompt}`: {reason}")]
    InvalidDistribution { prompt: String, reason: String },
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("policy text line {line}: {reason}")]
    Format { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub id: String,
    pub answer: String,
}

impl Chain {
    pub fn new(id: impl Into<String>, answer: impl Into<String>) -> Self {
        Self { id: id.into(), answer: answer.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub chains: Vec<Chain>,
}

impl Prompt {
    pub fn new(id: impl Into<String>, chains: Vec<Chain>) -> Self {
        Self { id: id.into(), chains }
    }
}

/// The ordered prompts `x_1..x_n`, each with its chain alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpace {
    prompts: Vec<Prompt>,
    index: HashMap<String, usize>,
    chain_index: Vec<HashMap<String, usize>>,
}

fn check_identifier(id: &str) -> Result<(), PolicyError> {
    if id.is_empty() || id.contains(['\t', '\n', '\r']) {
        return Err(PolicyError::BadIdentifier(id.to_string()));
    }
    Ok(())
}

impl PromptSpace {
    pub fn new(prompts: Vec<Prompt>) -> Result<Self, PolicyError> {
        if prompts.is_empty() {
            return Err(PolicyError::EmptySpace);
        }
        let mut index = HashMap::with_capacity(prompts.len());
        let mut chain_index = Vec::with_capacity(prompts.len());
        for (i, p) in prompts.iter().enumerate() {
            check_identifier(&p.id)?;
            if p.chains.is_empty() {
                return Err(PolicyError::NoChains(p.id.clone()));
            }
            if index.insert(p.id.clone(), i).is_some() {
                return Err(PolicyError::Duplicate(p.id.clone()));
            }
            let mut ci = HashMap::with_capacity(p.chains.len());
            for (j, c) in p.chains.iter().enumerate() {
                check_identifier(&c.id)?;
                if c.answer.contains(['\n', '\r']) {
                    return Err(PolicyError::BadIdentifier(c.answer.clone()));
                }
                if ci.insert(c.id.clone(), j).is_some() {
                    return Err(PolicyError::Duplicate(format!("{}/{}", p.id, c.id)));
                }
            }
            chain_index.push(ci);
        }
        Ok(Self { prompts, index, chain_index })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn prompt(&self, i: usize) -> &Prompt {
        &self.prompts[i]
    }

    pub fn num_chains(&self, i: usize) -> usize {
        self.prompts[i].chains.len()
    }

    pub fn answer(&self, prompt: usize, chain: usize) -> &str {
        &self.prompts[prompt].chains[chain].answer
    }

    pub fn prompt_index(&self, id: &str) -> Result<usize, PolicyError> {
        self.index.get(id).copied().ok_or_else(|| PolicyError::UnknownPrompt(id.to_string()))
    }

    pub fn chain_index(&self, prompt: usize, id: &str) -> Result<usize, PolicyError> {
        self.chain_index[prompt].get(id).copied().ok_or_else(|| PolicyError::UnknownChain {
            prompt: self.prompts[prompt].id.clone(),
            chain: id.to_string(),
        })
    }
}

/// Normalizes log-weights into a probability vector with the log-sum-exp
/// shift. Entries under [`PROB_FLOOR`] are zeroed and the rest renormalized.
/// Returns `None` when every entry is `-inf` (no mass).
pub fn normalize_log(log_w: &[f64]) -> Option<Vec<f64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut p: Vec<f64> = log_w.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = p.iter().sum();
    for x in p.iter_mut() {
        *x /= z;
        if *x < PROB_FLOOR {
            *x = 0.0;
        }
    }
    let z: f64 = p.iter().sum();
    for x in p.iter_mut() {
        *x /= z;
    }
    Some(p)
}

/// Shannon entropy in nats.
pub fn entropy_of(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    h.max(0.0)
}

/// Inverse-CDF draw of one index from `p`.
pub fn draw_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > 0.0 {
            acc += x;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Common read interface of both backends.
pub trait Policy: Send + Sync {
    fn space(&self) -> &Arc<PromptSpace>;

    /// The full distribution over the chains of prompt `prompt`.
    fn distribution(&self, prompt: usize) -> Vec<f64>;

    fn prob(&self, prompt_id: &str, chain_id: &str) -> Result<f64, PolicyError> {
        let p = self.space().prompt_index(prompt_id)?;
        let c = self.space().chain_index(p, chain_id)?;
        Ok(self.distribution(p)[c])
    }

    /// `count` independent chain draws for `prompt`.
    fn sample<R: Rng + ?Sized>(&self, prompt: usize, count: usize, rng: &mut R) -> Vec<usize>
    where
        Self: Sized,
    {
        let p = self.distribution(prompt);
        (0..count).map(|_| draw_index(&p, rng)).collect()
    }

    fn entropy(&self, prompt: usize) -> f64 {
        entropy_of(&self.distribution(prompt))
    }

    /// Probability of each distinct answer string (exact string grouping).
    fn answer_marginal(&self, prompt: usize) -> BTreeMap<String, f64> {
        let p = self.distribution(prompt);
        let mut out = BTreeMap::new();
        for (c, chain) in self.space().prompt(prompt).chains.iter().enumerate() {
            *out.entry(chain.answer.clone()).or_insert(0.0) += p[c];
        }
        out
    }

    fn mean_entropy(&self, prompts: &[usize]) -> f64 {
        if prompts.is_empty() {
            return 0.0;
        }
        prompts.iter().map(|&i| self.entropy(i)).sum::<f64>() / prompts.len() as f64
    }
}

/// Explicit per-prompt probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    space: Arc<PromptSpace>,
    probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    /// Builds from probability vectors that already sum to one (within 1e-9);
    /// they are renormalized exactly.
    pub fn new(space: Arc<PromptSpace>, probs: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        if probs.len() != space.len() {
            return Err(PolicyError::InvalidDistribution {
                prompt: "*".into(),
                reason: format!("expected {} prompts, got {}", space.len(), probs.len()),
            });
        }
        let mut out = Vec::with_capacity(probs.len());
        for (i, p) in probs.into_iter().enumerate() {
            let id = &space.prompt(i).id;
            let bad = |reason: String| PolicyError::InvalidDistribution { prompt: id.clone(), reason };
            if p.len() != space.num_chains(i) {
                return Err(bad(format!("expected {} chains, got {}", space.num_chains(i), p.len())));
            }
            if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(bad("entries must be finite and nonnegative".into()));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > TABULAR_SUM_TOL {
                return Err(bad(format!("sums to {s}")));
            }
            let mut p: Vec<f64> = p.into_iter().map(|x| if x < PROB_FLOOR { 0.0 } else { x }).collect();
            let s: f64 = p.iter().sum();
            if s == 0.0 {
                return Err(bad("no mass".into()));
            }
            // Values already normalized to 1e-12 are kept bit-exact.
            if (s - 1.0).abs() > 1e-12 {
                p.iter_mut().for_each(|x| *x /= s);
            }
            out.push(p);
        }
        Ok(Self { space, probs: out })
    }

    /// Builds from unnormalized nonnegative weights.
    pub fn from_weights(space: Arc<PromptSpace>, weights: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        let logs = weights.into_iter().map(|w| w.into_iter().map(f64::ln).collect()).collect();
        Self::from_log_weights(space, logs)
    }

    /// Builds from per-chain log-weights (`-inf` means zero mass).
    pub fn from_log_weights(space: Arc<PromptSpace>, log_w: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        if log_w.len() != space.len() {
            return Err(PolicyError::InvalidDistribution {
                prompt: "*".into(),
                reason: format!("expected {} prompts, got {}", space.len(), log_w.len()),
            });
        }
        let mut probs = Vec::with_capacity(log_w.len());
        for (i, l) in log_w.iter().enumerate() {
            let id = &space.prompt(i).id;
            if l.len() != space.num_chains(i) || l.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
                return Err(PolicyError::InvalidDistribution {
                    prompt: id.clone(),
                    reason: "malformed weights".into(),
                });
            }
            probs.push(normalize_log(l).ok_or_else(|| PolicyError::InvalidDistribution {
                prompt: id.clone(),
                reason: "no mass".into(),
            })?);
        }
        Ok(Self { space, probs })
    }

    pub fn uniform(space: Arc<PromptSpace>) -> Self {
        let probs = (0..space.len())
            .map(|i| {
                let n = space.num_chains(i);
                vec![1.0 / n as f64; n]
            })
            .collect();
        Self { space, probs }
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn prompt_probs(&self, prompt: usize) -> &[f64] {
        &self.probs[prompt]
    }

    pub(crate) fn from_parts_unchecked(space: Arc<PromptSpace>, probs: Vec<Vec<f64>>) -> Self {
        Self { space, probs }
    }
}

impl Policy for TabularPolicy {
    fn space(&self) -> &Arc<PromptSpace> {
        &self.space
    }

    fn distribution(&self, prompt: usize) -> Vec<f64> {
        self.probs[prompt].clone()
    }
}

/// Logit table with a sampling temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    space: Arc<PromptSpace>,
    logits: Vec<Vec<f64>>,
    temperature: f64,
}

impl SoftmaxPolicy {
    pub fn new(space: Arc<PromptSpace>, logits: Vec<Vec<f64>>, temperature: f64) -> Result<Self, PolicyError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(PolicyError::BadTemperature(temperature));
        }
        if logits.len() != space.len() {
            return Err(PolicyError::InvalidDistribution {
                prompt: "*".into(),
                reason: format!("expected {} prompts, got {}", space.len(), logits.len()),
            });
        }
        for (i, l) in logits.iter().enumerate() {
            if l.len() != space.num_chains(i) || l.iter().any(|x| !x.is_finite()) {
                return Err(PolicyError::InvalidDistribution {
                    prompt: space.prompt(i).id.clone(),
                    reason: "logits must be finite, one per chain".into(),
                });
            }
        }
        Ok(Self { space, logits, temperature })
    }

    /// Logits `ln p` of a tabular policy; zero-probability chains get a large
    /// negative logit so the induced distribution stays within the floor.
    pub fn from_tabular(t: &TabularPolicy, temperature: f64) -> Result<Self, PolicyError> {
        let logits = t
            .probs()
            .iter()
            .map(|p| p.iter().map(|&x| if x > 0.0 { x.ln() * temperature } else { -745.0 * temperature }).collect())
            .collect();
        Self::new(t.space().clone(), logits, temperature)
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_logits(&self, logits: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        Self::new(self.space.clone(), logits, self.temperature)
    }

    /// Snapshot of the induced distribution as a tabular policy.
    pub fn to_tabular(&self) -> TabularPolicy {
        let probs = (0..self.space.len()).map(|i| self.distribution(i)).collect();
        TabularPolicy::from_parts_unchecked(self.space.clone(), probs)
    }
}

impl Policy for SoftmaxPolicy {
    fn space(&self) -> &Arc<PromptSpace> {
        &self.space
    }

    fn distribution(&self, prompt: usize) -> Vec<f64> {
        let scaled: Vec<f64> = self.logits[prompt].iter().map(|z| z / self.temperature).collect();
        normalize_log(&scaled).expect("finite logits always normalize")
    }
}

/// Either backend; the engine's checkpoint type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyPolicy {
    Tabular(TabularPolicy),
    Softmax(SoftmaxPolicy),
}

impl AnyPolicy {
    pub fn to_tabular(&self) -> TabularPolicy {
        match self {
            AnyPolicy::Tabular(t) => t.clone(),
            AnyPolicy::Softmax(s) => s.to_tabular(),
        }
    }

    /// Encodes in the flat checkpoint format:
    ///
    /// ```text
    /// roirl-policy v1 tabular
    /// <prompt-id>\t<chain-id>\t<probability>
    /// ```
    ///
    /// or `roirl-policy v1 softmax <temperature>` followed by logit records.
    /// Floats use the shortest representation that parses back bit-exactly.
    pub fn encode(&self) -> String {
        let mut s = String::new();
        let (space, table) = match self {
            AnyPolicy::Tabular(t) => {
                s.push_str("roirl-policy v1 tabular\n");
                (t.space(), t.probs())
            }
            AnyPolicy::Softmax(p) => {
                let _ = writeln!(s, "roirl-policy v1 softmax {:?}", p.temperature());
                (p.space(), p.logits())
            }
        };
        for (i, prompt) in space.prompts().iter().enumerate() {
            for (j, chain) in prompt.chains.iter().enumerate() {
                let _ = writeln!(s, "{}\t{}\t{:?}", prompt.id, chain.id, table[i][j]);
            }
        }
        s
    }

    /// Parses the checkpoint format against a known prompt space. Every
    /// `(prompt, chain)` pair must appear exactly once, in any order.
    pub fn decode(text: &str, space: Arc<PromptSpace>) -> Result<Self, PolicyError> {
        let fmt = |line: usize, reason: &str| PolicyError::Format { line, reason: reason.to_string() };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| fmt(1, "missing header"))?;
        let parts: Vec<&str> = header.split(' ').collect();
        let softmax_temp = match parts.as_slice() {
            ["roirl-policy", "v1", "tabular"] => None,
            ["roirl-policy", "v1", "softmax", t] => {
                let t: f64 = t.parse().map_err(|_| fmt(1, "bad temperature"))?;
                Some(t)
            }
            _ => return Err(fmt(1, "unrecognized header")),
        };
        let mut table: Vec<Vec<Option<f64>>> = (0..space.len()).map(|i| vec![None; space.num_chains(i)]).collect();
        for (n, line) in lines {
            let line_no = n + 1;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(pid), Some(cid), Some(val), None) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
                return Err(fmt(line_no, "expected three tab-separated fields"));
            };
            let p = space.prompt_index(pid).map_err(|e| fmt(line_no, &e.to_string()))?;
            let c = space.chain_index(p, cid).map_err(|e| fmt(line_no, &e.to_string()))?;
            let v: f64 = val.parse().map_err(|_| fmt(line_no, "bad number"))?;
            if table[p][c].replace(v).is_some() {
                return Err(fmt(line_no, "duplicate record"));
            }
        }
        let mut values = Vec::with_capacity(table.len());
        for (i, row) in table.into_iter().enumerate() {
            let row: Option<Vec<f64>> = row.into_iter().collect();
            values.push(row.ok_or_else(|| PolicyError::Format {
                line: 0,
                reason: format!("missing records for prompt `{}`", space.prompt(i).id),
            })?);
        }
        match softmax_temp {
            None => TabularPolicy::new(space, values).map(AnyPolicy::Tabular),
            Some(t) => SoftmaxPolicy::new(space, values, t).map(AnyPolicy::Softmax),
        }
    }
}

impl Policy for AnyPolicy {
    fn space(&self) -> &Arc<PromptSpace> {
        match self {
            AnyPolicy::Tabular(t) => t.space(),
            AnyPolicy::Softmax(s) => s.space(),
        }
    }

    fn distribution(&self, prompt: usize) -> Vec<f64> {
        match self {
            AnyPolicy::Tabular(t) => t.distribution(prompt),
            AnyPolicy::Softmax(s) => s.distribution(prompt),
        }
    }
}
