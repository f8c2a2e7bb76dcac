//! Flat declarative run configuration (TOML).
//!
//! Every key is optional; missing keys take the defaults below. Unknown
//! keys are rejected. The effective configuration is echoed into the run
//! directory as `config.toml`, and re-running from that file reproduces
//! the run.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `k` | 10 | candidates per prompt per round |
//! | `rounds` | 15 | maximum rounds |
//! | `patience` | 5 | rounds without train maj@k improvement before stopping |
//! | `epochs` | 3 | mini-batch passes (softmax backend with `batch_size`) |
//! | `transform` | `identity` | `identity`, `exponential` or `baseline_shifted` |
//! | `beta` | 0.1 | temperature of the exponential transforms |
//! | `seed` | 0 | training and evaluation seed |
//! | `backend` | `tabular` | `tabular` or `softmax` |
//! | `warm_start` | true | softmax: start each round from the previous logits |
//! | `vote` | `sampled` | `sampled` or `population` |
//! | `transductive` | true | unlabeled test prompts join training |
//! | `eval_k` | 10 | k of the maj@k metric |
//! | `eval_samples` | 1 | k-draws per prompt per evaluation |
//! | `temperature` | 1.0 | softmax temperature |
//! | `learning_rate`, `max_iters`, `grad_tolerance`, `batch_size` | 0.1, 10000, 1e-8, none | softmax solver |
//! | `stop_tolerance` | none | stop when the policy moves less than this with stable labels |
//! | `n_train`, `n_test` | 400, 100 | corpus split sizes |
//! | `p_min`, `p_max` | 0.35, 0.95 | range of the correct-answer mass |
//! | `min_distractors`, `max_distractors` | 1, 3 | wrong answer classes per task |
//! | `surface_forms` | 1 | renderings of the true answer |
//! | `corpus_seed` | 0 | corpus generation seed |
//! | `tasks_file`, `labels_file` | none | use an existing corpus instead of generating one |
//! | `output_dir` | `runs/default` | relative paths resolve against `ROIRL_OUTPUT_ROOT` if set |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Backend, RunConfig, VoteMode};
use crate::reward::TransformKind;
use crate::tasks::CorpusSpec;

pub const OUTPUT_ROOT_VAR: &str = "ROIRL_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config error: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
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
    pub transductive: bool,
    pub eval_k: usize,
    pub eval_samples: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub grad_tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_tolerance: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub surface_forms: usize,
    pub corpus_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels_file: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self::from_parts(&RunConfig::default(), &CorpusSpec::default(), PathBuf::from("runs/default"))
    }
}

impl CliConfig {
    pub fn from_parts(run: &RunConfig, corpus: &CorpusSpec, output_dir: PathBuf) -> Self {
        Self {
            k: run.k,
            rounds: run.rounds,
            patience: run.patience,
            epochs: run.epochs,
            transform: run.transform,
            beta: run.beta,
            seed: run.seed,
            backend: run.backend,
            warm_start: run.warm_start,
            vote: run.vote,
            transductive: run.transductive,
            eval_k: run.eval_k,
            eval_samples: run.eval_samples,
            temperature: run.temperature,
            learning_rate: run.learning_rate,
            max_iters: run.max_iters,
            grad_tolerance: run.grad_tolerance,
            batch_size: run.batch_size,
            stop_tolerance: run.stop_tolerance,
            n_train: corpus.n_train,
            n_test: corpus.n_test,
            p_min: corpus.p_min,
            p_max: corpus.p_max,
            min_distractors: corpus.min_distractors,
            max_distractors: corpus.max_distractors,
            surface_forms: corpus.surface_forms,
            corpus_seed: corpus.seed,
            tasks_file: None,
            labels_file: None,
            output_dir,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.run_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.tasks_file.is_some() != self.labels_file.is_some() {
            return Err(ConfigError::Invalid("tasks_file and labels_file go together".into()));
        }
        if self.tasks_file.is_none() {
            self.corpus_spec().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            k: self.k,
            rounds: self.rounds,
            patience: self.patience,
            epochs: self.epochs,
            transform: self.transform,
            beta: self.beta,
            seed: self.seed,
            backend: self.backend,
            warm_start: self.warm_start,
            vote: self.vote,
            transductive: self.transductive,
            eval_k: self.eval_k,
            eval_samples: self.eval_samples,
            temperature: self.temperature,
            learning_rate: self.learning_rate,
            max_iters: self.max_iters,
            grad_tolerance: self.grad_tolerance,
            batch_size: self.batch_size,
            stop_tolerance: self.stop_tolerance,
        }
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            n_train: self.n_train,
            n_test: self.n_test,
            p_min: self.p_min,
            p_max: self.p_max,
            min_distractors: self.min_distractors,
            max_distractors: self.max_distractors,
            surface_forms: self.surface_forms,
            seed: self.corpus_seed,
        }
    }

    /// `output_dir`, resolved against `root` when relative.
    pub fn resolved_output(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.output_dir.is_relative() => r.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}
