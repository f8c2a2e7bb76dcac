//! Synthetic tasks with hidden ground truth and a base policy whose
//! correct-answer mass is controlled.
//!
//! Each task is a prompt whose chains carry rational answers. The true
//! class gets mass `p`, the remaining `1 - p` is split at random across
//! 1 to 3 distractor classes. Answers are rendered as `a/b`, `\frac{a}{b}`
//! or a decimal, so voting has to go through [`crate::answerkit`].

use std::collections::BTreeMap;
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answerkit::{parse_answer, render_decimal, render_frac, render_plain, AnswerEquivalence, MathEquivalence};
use crate::eval::Split;
use crate::policy::{Chain, Policy, PolicyError, Prompt, PromptSpace, TabularPolicy};
use crate::reference::{ChainClasses, TIE_TOLERANCE};
use crate::rng::SeedStream;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub min_distractors: usize,
    pub max_distractors: usize,
    /// Equivalent renderings of the true answer, each its own chain (1 to 3).
    pub surface_forms: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_train: 400,
            n_test: 100,
            p_min: 0.35,
            p_max: 0.95,
            min_distractors: 1,
            max_distractors: 3,
            surface_forms: 1,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: String| Err(TaskError::Spec(m));
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be >= 1".into());
        }
        if !(self.p_min > 0.0 && self.p_min <= self.p_max && self.p_max < 1.0) {
            return bad(format!("need 0 < p_min <= p_max < 1, got [{}, {}]", self.p_min, self.p_max));
        }
        if self.min_distractors == 0 || self.min_distractors > self.max_distractors || self.max_distractors > 16 {
            return bad("need 1 <= min_distractors <= max_distractors <= 16".into());
        }
        if !(1..=3).contains(&self.surface_forms) {
            return bad("surface_forms must be 1, 2 or 3".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub prompt: String,
    pub split: SplitKind,
    pub truth: String,
    pub correct_mass: f64,
    pub distractor_masses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub space: Arc<PromptSpace>,
    pub base: TabularPolicy,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Ground truth by prompt index.
    pub truth: Vec<String>,
    pub tasks: Vec<SyntheticTask>,
}

const DENOMINATORS: [i64; 7] = [2, 4, 5, 8, 10, 20, 25];

fn random_value<R: Rng>(rng: &mut R) -> BigRational {
    loop {
        let d = DENOMINATORS[rng.random_range(0..DENOMINATORS.len())];
        let n = rng.random_range(1..=40 * d);
        if n % d != 0 {
            return BigRational::new(BigInt::from(n), BigInt::from(d));
        }
    }
}

/// Form 0 is `a/b`, 1 is `\frac{a}{b}`, 2 is the terminating decimal.
fn render(value: &BigRational, form: usize) -> String {
    match form % 3 {
        0 => render_plain(value),
        1 => render_frac(value),
        _ => render_decimal(value).expect("denominators divide a power of ten"),
    }
}

pub fn make_corpus(spec: &CorpusSpec) -> Result<Corpus, TaskError> {
    spec.validate()?;
    let seeds = SeedStream::new(spec.seed).child("corpus");
    let n = spec.n_train + spec.n_test;
    let mut prompts = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    let mut tasks = Vec::with_capacity(n);
    for t in 0..n {
        let (split, name) = if t < spec.n_train {
            (SplitKind::Train, format!("train-{t:04}"))
        } else {
            (SplitKind::Test, format!("test-{:04}", t - spec.n_train))
        };
        let mut rng = seeds.rng("task", &[t as u64]);
        let p = if spec.p_min == spec.p_max { spec.p_min } else { rng.random_range(spec.p_min..spec.p_max) };
        let nd = rng.random_range(spec.min_distractors..=spec.max_distractors);
        let truth = random_value(&mut rng);
        let mut wrong: Vec<BigRational> = Vec::with_capacity(nd);
        while wrong.len() < nd {
            let v = random_value(&mut rng);
            if v != truth && !wrong.contains(&v) {
                wrong.push(v);
            }
        }
        let raw: Vec<f64> = (0..nd).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let masses: Vec<f64> = raw.iter().map(|u| (1.0 - p) * u / total).collect();

        let first_form = rng.random_range(0..3usize);
        let mut chains: Vec<(String, f64)> = (0..spec.surface_forms)
            .map(|f| (render(&truth, first_form + f), p / spec.surface_forms as f64))
            .collect();
        for (v, &m) in wrong.iter().zip(&masses) {
            chains.push((render(v, rng.random_range(0..3usize)), m));
        }
        chains.shuffle(&mut rng);
        prompts.push(Prompt::new(
            name.clone(),
            chains.iter().enumerate().map(|(j, (a, _))| Chain::new(format!("c{j}"), a.clone())).collect(),
        ));
        probs.push(chains.iter().map(|(_, m)| *m).collect::<Vec<f64>>());
        tasks.push(SyntheticTask {
            prompt: name,
            split,
            truth: render_plain(&truth),
            correct_mass: p,
            distractor_masses: masses,
        });
    }
    let space = Arc::new(PromptSpace::new(prompts)?);
    let base = TabularPolicy::from_weights(space.clone(), probs)?;
    Ok(Corpus {
        spec: spec.clone(),
        truth: tasks.iter().map(|t| t.truth.clone()).collect(),
        train: (0..spec.n_train).collect(),
        test: (spec.n_train..n).collect(),
        space,
        base,
        tasks,
    })
}

/// Expected fraction of `prompts` whose population majority under `policy`
/// is equivalent to the truth (exact ties count as a fair draw).
pub fn majority_ceiling<E: AnswerEquivalence + ?Sized>(
    policy: &TabularPolicy,
    prompts: &[usize],
    truth: &[String],
    equiv: &E,
) -> f64 {
    if prompts.is_empty() {
        return 0.0;
    }
    let classes = ChainClasses::build(policy.space(), equiv);
    let total: f64 = prompts
        .iter()
        .map(|&i| {
            let m = classes.marginal(i, policy.prompt_probs(i));
            let best = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let tied: Vec<usize> = (0..m.len()).filter(|&c| m[c] >= best - TIE_TOLERANCE).collect();
            let hits = tied.iter().filter(|&&c| equiv.equivalent(classes.representative(i, c), &truth[i])).count();
            hits as f64 / tied.len() as f64
        })
        .sum();
    total / prompts.len() as f64
}

impl Corpus {
    pub fn train_ceiling(&self) -> f64 {
        majority_ceiling(&self.base, &self.train, &self.truth, &MathEquivalence::default())
    }

    pub fn test_ceiling(&self) -> f64 {
        majority_ceiling(&self.base, &self.test, &self.truth, &MathEquivalence::default())
    }

    /// Fraction of train tasks whose majority is wrong (the failure mode).
    pub fn wrong_majority_fraction(&self) -> f64 {
        1.0 - self.train_ceiling()
    }

    pub fn splits(&self) -> Vec<Split> {
        let pick = |idx: &[usize]| idx.iter().map(|&i| self.truth[i].clone()).collect();
        vec![
            Split::new("train", self.train.clone(), pick(&self.train)),
            Split::new("test", self.test.clone(), pick(&self.test)),
        ]
    }

    pub fn tasks_jsonl(&self) -> String {
        let mut out = String::new();
        for (i, task) in self.tasks.iter().enumerate() {
            let prompt = self.space.prompt(i);
            let line = TaskLine {
                prompt: prompt.id.clone(),
                split: task.split,
                chains: prompt
                    .chains
                    .iter()
                    .zip(self.base.prompt_probs(i))
                    .map(|(c, &p)| ChainLine { id: c.id.clone(), answer: c.answer.clone(), base_prob: p })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&line).expect("plain data serializes"));
            out.push('\n');
        }
        out
    }

    pub fn labels_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.tasks {
            let line = LabelLine { prompt: t.prompt.clone(), truth: t.truth.clone() };
            out.push_str(&serde_json::to_string(&line).expect("plain data serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainLine {
    id: String,
    answer: String,
    base_prob: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskLine {
    prompt: String,
    split: SplitKind,
    chains: Vec<ChainLine>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelLine {
    prompt: String,
    truth: String,
}

/// What the training path sees: prompts, chains and base probabilities.
#[derive(Debug, Clone)]
pub struct TaskFile {
    pub space: Arc<PromptSpace>,
    pub base: TabularPolicy,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn read_tasks_jsonl(text: &str) -> Result<TaskFile, TaskError> {
    let mut prompts = Vec::new();
    let mut probs = Vec::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: TaskLine =
            serde_json::from_str(raw).map_err(|e| TaskError::Format { line: n + 1, reason: e.to_string() })?;
        match line.split {
            SplitKind::Train => train.push(prompts.len()),
            SplitKind::Test => test.push(prompts.len()),
        }
        probs.push(line.chains.iter().map(|c| c.base_prob).collect::<Vec<_>>());
        prompts.push(Prompt::new(line.prompt, line.chains.into_iter().map(|c| Chain::new(c.id, c.answer)).collect()));
    }
    let space = Arc::new(PromptSpace::new(prompts)?);
    let base = TabularPolicy::new(space.clone(), probs)?;
    Ok(TaskFile { space, base, train, test })
}

pub fn read_labels_jsonl(text: &str) -> Result<BTreeMap<String, String>, TaskError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let err = |reason: String| TaskError::Format { line: n + 1, reason };
        let line: LabelLine = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        if out.insert(line.prompt.clone(), line.truth).is_some() {
            return Err(err(format!("duplicate label for `{}`", line.prompt)));
        }
    }
    Ok(out)
}

impl TaskFile {
    /// Evaluation splits from a labels map; every prompt must be labeled.
    pub fn splits(&self, labels: &BTreeMap<String, String>) -> Result<Vec<Split>, TaskError> {
        let pick = |idx: &[usize]| -> Result<Vec<String>, TaskError> {
            idx.iter()
                .map(|&i| {
                    let id = &self.space.prompt(i).id;
                    labels.get(id).cloned().ok_or_else(|| TaskError::Format { line: 0, reason: format!("no label for `{id}`") })
                })
                .collect()
        };
        Ok(vec![Split::new("train", self.train.clone(), pick(&self.train)?), Split::new("test", self.test.clone(), pick(&self.test)?)])
    }
}

/// True iff `answer` parses to an exact rational.
pub fn is_numeric(answer: &str) -> bool {
    parse_answer(answer).value().is_some()
}
