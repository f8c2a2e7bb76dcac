//! Majority-vote pseudo-labels, indicator rewards and reward transforms.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answerkit::AnswerEquivalence;
use crate::rng::{SeedStream, StreamRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("cannot take a majority vote over zero answers")]
    EmptyVote,
    #[error("reward must be 0 or 1, got {0}")]
    BadReward(u8),
    #[error("beta must be positive and finite, got {0}")]
    BadBeta(f64),
    #[error("baseline-shifted transform at round {round} needs the previous round's reward")]
    MissingBaseline { round: usize },
    #[error("rounds are numbered from 1")]
    BadRound,
}

/// Equivalence classes over a set of distinct answer strings, built by
/// pairwise comparison and union-find. Distinct strings are kept sorted so
/// the result does not depend on input order; each class is represented by
/// its lexicographically smallest member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerClasses {
    strings: Vec<String>,
    class_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl AnswerClasses {
    pub fn build<S: AsRef<str>, E: AnswerEquivalence + ?Sized>(answers: &[S], equiv: &E) -> Self {
        let strings: Vec<String> =
            answers.iter().map(|a| a.as_ref().to_string()).collect::<BTreeSet<_>>().into_iter().collect();
        let n = strings.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj && equiv.equivalent(&strings[i], &strings[j]) {
                    // keep the smaller index as root so roots are class minima
                    let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                    parent[hi] = lo;
                }
            }
        }
        let mut root_to_class = vec![usize::MAX; n];
        let mut class_of = vec![0; n];
        let mut members: Vec<Vec<usize>> = Vec::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            if root_to_class[r] == usize::MAX {
                root_to_class[r] = members.len();
                members.push(Vec::new());
            }
            class_of[i] = root_to_class[r];
            members[class_of[i]].push(i);
        }
        Self { strings, class_of, members }
    }

    pub fn num_classes(&self) -> usize {
        self.members.len()
    }

    /// Class index of `answer`, if it is one of the strings the classes were
    /// built from.
    pub fn class_of(&self, answer: &str) -> Option<usize> {
        self.strings.binary_search_by(|s| s.as_str().cmp(answer)).ok().map(|i| self.class_of[i])
    }

    pub fn representative(&self, class: usize) -> &str {
        &self.strings[self.members[class][0]]
    }

    pub fn members(&self, class: usize) -> impl Iterator<Item = &str> {
        self.members[class].iter().map(|&i| self.strings[i].as_str())
    }
}

/// Seeds the tie-break of one vote. The draw depends on the round, the
/// prompt and the sorted multiset of answers, never on candidate order.
#[derive(Debug, Clone, Copy)]
pub struct TieBreak<'a> {
    pub seeds: SeedStream,
    pub round: u64,
    pub prompt: &'a str,
}

impl<'a> TieBreak<'a> {
    pub fn new(seeds: SeedStream, round: u64, prompt: &'a str) -> Self {
        Self { seeds, round, prompt }
    }

    fn rng<S: AsRef<str>>(&self, answers: &[S]) -> StreamRng {
        let mut sorted: Vec<&str> = answers.iter().map(|a| a.as_ref()).collect();
        sorted.sort_unstable();
        let mut extra: Vec<&[u8]> = Vec::with_capacity(sorted.len() + 1);
        extra.push(self.prompt.as_bytes());
        extra.extend(sorted.iter().map(|s| s.as_bytes()));
        StreamRng::seed_from_u64(self.seeds.derive_with("tie-break", &[self.round], &extra))
    }
}

/// Outcome of a vote: the winning class and how it was reached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Majority {
    /// Smallest surface string of the winning class.
    pub answer: String,
    /// Distinct surface strings of the winning class, sorted.
    pub members: Vec<String>,
    pub count: usize,
    /// Representatives of every class that attained `count`.
    pub tied: Vec<String>,
}

impl Majority {
    /// Whether `answer` belongs to the winning class: it is one of the
    /// voted surface strings of the class or equivalent to one of them.
    pub fn matches<E: AnswerEquivalence + ?Sized>(&self, answer: &str, equiv: &E) -> bool {
        self.members.iter().any(|m| m == answer) || self.members.iter().any(|m| equiv.equivalent(answer, m))
    }

    pub fn reward<E: AnswerEquivalence + ?Sized>(&self, answer: &str, equiv: &E) -> u8 {
        u8::from(self.matches(answer, equiv))
    }
}

/// Picks one of `tied` (sorted representatives) with the seeded draw.
pub(crate) fn break_tie<S: AsRef<str>>(tied_len: usize, tie: &TieBreak<'_>, answers: &[S]) -> usize {
    if tied_len <= 1 {
        0
    } else {
        tie.rng(answers).random_range(0..tied_len)
    }
}

/// Most frequent equivalence class among `answers`; ties are broken by a
/// uniform seeded draw over the tied classes.
pub fn majority_vote<S: AsRef<str>, E: AnswerEquivalence + ?Sized>(
    answers: &[S],
    tie: &TieBreak<'_>,
    equiv: &E,
) -> Result<Majority, RewardError> {
    if answers.is_empty() {
        return Err(RewardError::EmptyVote);
    }
    let classes = AnswerClasses::build(answers, equiv);
    let mut counts = vec![0usize; classes.num_classes()];
    for a in answers {
        counts[classes.class_of(a.as_ref()).expect("built from these answers")] += 1;
    }
    let best = *counts.iter().max().expect("nonempty");
    // class indices follow sorted representative order
    let tied: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == best).collect();
    let winner = tied[break_tie(tied.len(), tie, answers)];
    Ok(Majority {
        answer: classes.representative(winner).to_string(),
        members: classes.members(winner).map(str::to_string).collect(),
        count: best,
        tied: tied.iter().map(|&c| classes.representative(c).to_string()).collect(),
    })
}

/// k rewarded candidates for one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub prompt: String,
    /// `(chain-id, answer)` pairs in draw order.
    pub candidates: Vec<(String, String)>,
    pub majority: Majority,
    pub rewards: Vec<u8>,
}

pub fn score_candidates<E: AnswerEquivalence + ?Sized>(
    prompt: &str,
    candidates: &[(String, String)],
    tie: &TieBreak<'_>,
    equiv: &E,
) -> Result<CandidateSet, RewardError> {
    let answers: Vec<&str> = candidates.iter().map(|(_, a)| a.as_str()).collect();
    let majority = majority_vote(&answers, tie, equiv)?;
    let rewards = answers.iter().map(|a| majority.reward(a, equiv)).collect();
    Ok(CandidateSet { prompt: prompt.to_string(), candidates: candidates.to_vec(), majority, rewards })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    Exponential,
    BaselineShifted,
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransformKind::Identity => "identity",
            TransformKind::Exponential => "exponential",
            TransformKind::BaselineShifted => "baseline_shifted",
        })
    }
}

/// Increasing map applied to rewards before the weighted-likelihood step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewardTransform {
    /// `g(r) = r`
    Identity,
    /// `g(r) = exp(r / beta)`
    Exponential { beta: f64 },
    /// `g(r) = exp((r - b) / beta)` where `b` is the same chain's reward
    /// under the previous round's majority (0 in round 1).
    BaselineShifted { beta: f64 },
}

impl RewardTransform {
    pub fn new(kind: TransformKind, beta: f64) -> Result<Self, RewardError> {
        let check = || if beta > 0.0 && beta.is_finite() { Ok(beta) } else { Err(RewardError::BadBeta(beta)) };
        Ok(match kind {
            TransformKind::Identity => RewardTransform::Identity,
            TransformKind::Exponential => RewardTransform::Exponential { beta: check()? },
            TransformKind::BaselineShifted => RewardTransform::BaselineShifted { beta: check()? },
        })
    }

    pub fn kind(&self) -> TransformKind {
        match self {
            RewardTransform::Identity => TransformKind::Identity,
            RewardTransform::Exponential { .. } => TransformKind::Exponential,
            RewardTransform::BaselineShifted { .. } => TransformKind::BaselineShifted,
        }
    }

    pub fn needs_baseline(&self) -> bool {
        matches!(self, RewardTransform::BaselineShifted { .. })
    }

    /// `ln g(r)`; the identity transform maps reward 0 to `-inf`.
    pub fn log_weight(&self, reward: u8, prev_reward: Option<u8>, round: usize) -> Result<f64, RewardError> {
        if reward > 1 {
            return Err(RewardError::BadReward(reward));
        }
        if round == 0 {
            return Err(RewardError::BadRound);
        }
        let r = f64::from(reward);
        Ok(match *self {
            RewardTransform::Identity => {
                if reward == 1 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            RewardTransform::Exponential { beta } => r / beta,
            RewardTransform::BaselineShifted { beta } => {
                let baseline = if round == 1 {
                    0.0
                } else {
                    match prev_reward {
                        Some(b) if b <= 1 => f64::from(b),
                        Some(b) => return Err(RewardError::BadReward(b)),
                        None => return Err(RewardError::MissingBaseline { round }),
                    }
                };
                (r - baseline) / beta
            }
        })
    }

    /// `g(r)` itself.
    pub fn apply(&self, reward: u8, prev_reward: Option<u8>, round: usize) -> Result<f64, RewardError> {
        self.log_weight(reward, prev_reward, round).map(f64::exp)
    }
}
