//! Acceptance suite. Each test prints one `criterion N [PASS|FAIL]` line.
//!
//! Reference values are recomputed here from first principles: the
//! product-form policy, the tilted fixed point, central differences,
//! majority counts and binomial/multinomial vote probabilities are all
//! evaluated with code that does not go through the routine under test.

use std::collections::BTreeMap;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use roirl::answerkit::{equivalent, extract_boxed, parse_answer, AnswerEquivalence, MathEquivalence};
use roirl::engine::{run, run_tabular, RunConfig};
use roirl::eval::{Evaluator, RoundReport};
use roirl::optimizer::{objective_gradient, solve_gradient, SolveConfig, WeightedSample};
use roirl::policy::{AnyPolicy, Chain, Policy, Prompt, PromptSpace, SoftmaxPolicy, TabularPolicy};
use roirl::reference::{check_proposition1, kl_fixed_point, FixedPointConfig, RewardMode};
use roirl::reward::{majority_vote, TieBreak, TransformKind};
use roirl::rng::{SeedStream, StreamRng};
use roirl::tasks::{make_corpus, Corpus, CorpusSpec};

fn report(n: u32, name: &str, ok: bool, detail: String) {
    println!("criterion {n} [{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

const ANSWERS: [&str; 6] = ["1", "2", "0.5", "\\frac{1}{2}", "3/4", "x"];

fn instance(rng: &mut StreamRng, max_prompts: usize, max_chains: usize, zeros: bool) -> TabularPolicy {
    let n = rng.random_range(1..=max_prompts);
    let mut prompts = Vec::new();
    let mut probs = Vec::new();
    for i in 0..n {
        let c = rng.random_range(1..=max_chains);
        let alphabet = rng.random_range(1..=4);
        prompts.push(Prompt::new(
            format!("q{i}"),
            (0..c).map(|j| Chain::new(format!("k{j}"), ANSWERS[rng.random_range(0..alphabet)])).collect(),
        ));
        let mut w: Vec<f64> =
            (0..c).map(|_| if zeros && rng.random_bool(0.25) { 0.0 } else { rng.random_range(0.02..1.0) }).collect();
        if w.iter().all(|&x| x == 0.0) {
            w[c - 1] = 0.5;
        }
        let total: f64 = w.iter().sum();
        probs.push(w.into_iter().map(|x| x / total).collect());
    }
    TabularPolicy::new(Arc::new(PromptSpace::new(prompts).unwrap()), probs).unwrap()
}

/// `normalize(pi0 * exp(log_g))`, computed directly.
fn tilt(pi0: &[f64], log_g: &[f64]) -> Vec<f64> {
    let top = pi0
        .iter()
        .zip(log_g)
        .filter(|(p, _)| **p > 0.0)
        .map(|(_, g)| *g)
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = pi0.iter().zip(log_g).map(|(p, g)| if *p > 0.0 { p * (g - top).exp() } else { 0.0 }).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn criterion_01_iterated_update_matches_product_form() {
    let start = Instant::now();
    let eq = MathEquivalence::default();
    let seeds = SeedStream::new(2024);
    let mut worst: f64 = 0.0;
    let mut kinds = BTreeMap::new();
    for i in 0..50u64 {
        let mut rng = seeds.rng("closed-form", &[i]);
        let pi0 = instance(&mut rng, 8, 8, true);
        let rounds = rng.random_range(1..=5);
        let (transform, beta) = match i % 4 {
            0 => (TransformKind::Identity, 0.1),
            1 => (TransformKind::Exponential, 0.05),
            2 => (TransformKind::Exponential, 0.1),
            _ => (TransformKind::Exponential, 1.0),
        };
        *kinds.entry(format!("{transform}/{beta}")).or_insert(0) += 1;
        let cfg = RunConfig {
            k: rng.random_range(1..=12),
            rounds,
            transform,
            beta,
            seed: i,
            patience: usize::MAX,
            ..RunConfig::default()
        };
        let out = run_tabular(&cfg, &pi0, &eq).unwrap();
        assert_eq!(out.rounds_run, rounds);
        let space = pi0.space();
        let mut log_g: Vec<Vec<f64>> = (0..space.len()).map(|p| vec![0.0; space.num_chains(p)]).collect();
        for (m, ds) in out.datasets.iter().enumerate() {
            for p in 0..space.len() {
                let label = &ds.prompts[p].majority;
                for (c, chain) in space.prompt(p).chains.iter().enumerate() {
                    let r = equivalent(&chain.answer, label);
                    log_g[p][c] += match transform {
                        TransformKind::Identity if r => 0.0,
                        TransformKind::Identity => f64::NEG_INFINITY,
                        _ => f64::from(u8::from(r)) / beta,
                    };
                }
                let expected = tilt(pi0.prompt_probs(p), &log_g[p]);
                let got = out.checkpoints[m + 1].distribution(p);
                for (a, b) in got.iter().zip(&expected) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = worst <= 1e-9 && elapsed < Duration::from_secs(10);
    report(1, "closed-form iterates vs product form", ok, format!("50 instances {kinds:?}, max |diff| {worst:e}, {elapsed:.2?}"));
    assert!(ok);
}

struct FixedPointCheck {
    residual: f64,
    labels: Vec<String>,
}

/// Recomputes the population majority of `pi` and the residual of
/// `pi = normalize(exp(r/beta) pi0)`. Near-ties in the marginal are
/// reported as an infinite residual rather than resolved.
fn fixed_point_check(pi0: &TabularPolicy, pi: &TabularPolicy, beta: f64) -> FixedPointCheck {
    let space = pi0.space();
    let mut residual: f64 = 0.0;
    let mut labels = Vec::new();
    for p in 0..space.len() {
        let chains = &space.prompt(p).chains;
        let probs = pi.prompt_probs(p);
        let mut classes: Vec<(String, f64)> = Vec::new();
        for (c, chain) in chains.iter().enumerate() {
            match classes.iter_mut().find(|(a, _)| equivalent(a, &chain.answer)) {
                Some(entry) => {
                    entry.1 += probs[c];
                    if chain.answer < entry.0 {
                        entry.0 = chain.answer.clone();
                    }
                }
                None => classes.push((chain.answer.clone(), probs[c])),
            }
        }
        classes.sort_by(|a, b| b.1.total_cmp(&a.1));
        if classes.len() > 1 && classes[0].1 - classes[1].1 < 1e-9 {
            residual = f64::INFINITY;
        }
        let label = classes[0].0.clone();
        let log_g: Vec<f64> =
            chains.iter().map(|c| if equivalent(&c.answer, &label) { 1.0 / beta } else { 0.0 }).collect();
        let target = tilt(pi0.prompt_probs(p), &log_g);
        for (a, b) in probs.iter().zip(&target) {
            residual = residual.max((a - b).abs());
        }
        labels.push(label);
    }
    FixedPointCheck { residual, labels }
}

fn proposition_instances() -> Vec<(TabularPolicy, f64, u64)> {
    let seeds = SeedStream::new(77);
    (0..50u64)
        .map(|i| {
            let mut rng = seeds.rng("fixed-point", &[i]);
            let pi0 = instance(&mut rng, 6, 6, false);
            let beta = [0.05, 0.1, 0.5, 1.0][(i % 4) as usize];
            (pi0, beta, 1000 + i)
        })
        .collect()
}

fn criterion_02_kl_fixed_point_agrees_with_baseline_shifted_engine() {
    let start = Instant::now();
    let eq = MathEquivalence::default();
    let cfg = FixedPointConfig::default();
    let mut agree = 0;
    let mut unconverged = Vec::new();
    let mut worst: f64 = 0.0;
    let mut disagreements = Vec::new();
    for (i, (pi0, beta, seed)) in proposition_instances().into_iter().enumerate() {
        let r = check_proposition1(&pi0, beta, &cfg, seed, &eq).unwrap();
        if !r.both_converged() {
            unconverged.push((i, r.cycling));
            continue;
        }
        // the engine's own final policy must satisfy the fixed-point equation
        let (sol, _) = kl_fixed_point(&pi0, beta, &cfg, RewardMode::Population, SeedStream::new(seed), &eq).unwrap();
        let independent = fixed_point_check(&pi0, &sol.policy, beta);
        worst = worst.max(r.distance);
        if r.distance <= 1e-6 && r.labels_match && independent.residual <= 1e-8 {
            agree += 1;
        } else {
            disagreements.push((i, r.distance, independent.residual));
        }
    }
    let elapsed = start.elapsed();
    let converged = 50 - unconverged.len();
    let ok = disagreements.is_empty() && unconverged.len() <= 5 && elapsed < Duration::from_secs(30);
    report(
        2,
        "KL fixed point vs baseline-shifted engine (population mode)",
        ok,
        format!(
            "{agree}/{converged} converged instances agree (max TV {worst:e}); unconverged or cycling: {unconverged:?}; disagreements: {disagreements:?}; {elapsed:.2?}"
        ),
    );
    assert!(ok);
}

fn criterion_03_converged_solutions_satisfy_their_equation() {
    let eq = MathEquivalence::default();
    let cfg = FixedPointConfig::default();
    let mut worst: f64 = 0.0;
    let mut converged = 0;
    let mut label_mismatch = 0;
    for (pi0, beta, seed) in proposition_instances() {
        for mode in [RewardMode::Population, RewardMode::Sampled { k: 4001 }] {
            let (sol, trace) = kl_fixed_point(&pi0, beta, &cfg, mode, SeedStream::new(seed), &eq).unwrap();
            if !trace.converged || mode != RewardMode::Population {
                continue;
            }
            converged += 1;
            let check = fixed_point_check(&pi0, &sol.policy, beta);
            worst = worst.max(check.residual);
            if trace.steps.last().unwrap().labels != check.labels {
                label_mismatch += 1;
            }
        }
    }
    let ok = converged > 0 && worst <= 1e-8 && label_mismatch == 0;
    report(3, "fixed-point residual", ok, format!("{converged} converged solutions, max recomputed residual {worst:e}"));
    assert!(ok);
}

/// `sum_s exp(lw_s) ln softmax(z / T)[c_s]`, written out directly.
fn objective_by_hand(logits: &[Vec<f64>], temp: f64, samples: &[WeightedSample]) -> f64 {
    samples
        .iter()
        .filter(|s| s.log_weight > f64::NEG_INFINITY)
        .map(|s| {
            let z: Vec<f64> = logits[s.prompt].iter().map(|x| x / temp).collect();
            let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + z.iter().map(|x| (x - top).exp()).sum::<f64>().ln();
            s.log_weight.exp() * (z[s.chain] - lse)
        })
        .sum()
}

fn criterion_04_analytic_gradient_matches_central_differences() {
    let seeds = SeedStream::new(4);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let mut rng = seeds.rng("gradient", &[i]);
        let base = instance(&mut rng, 4, 6, false);
        let space = base.space().clone();
        let temp = [0.5, 1.0, 2.0][rng.random_range(0..3)];
        let logits: Vec<Vec<f64>> =
            (0..space.len()).map(|p| (0..space.num_chains(p)).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let samples: Vec<WeightedSample> = (0..rng.random_range(1..=16))
            .map(|_| {
                let prompt = rng.random_range(0..space.len());
                WeightedSample {
                    prompt,
                    chain: rng.random_range(0..space.num_chains(prompt)),
                    log_weight: if rng.random_bool(0.2) { f64::NEG_INFINITY } else { rng.random_range(-3.0..3.0) },
                }
            })
            .collect();
        let policy = SoftmaxPolicy::new(space.clone(), logits.clone(), temp).unwrap();
        let analytic = objective_gradient(&policy, &samples);
        for p in 0..logits.len() {
            for c in 0..logits[p].len() {
                let shifted = |d: f64| {
                    let mut z = logits.clone();
                    z[p][c] += d;
                    objective_by_hand(&z, temp, &samples)
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                let a = analytic[p][c];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1.0));
            }
        }
    }
    let ok = worst < 1e-5;
    report(4, "gradient vs central differences (h = 1e-5)", ok, format!("50 instances, max relative error {worst:e}"));
    assert!(ok);
}

fn criterion_05_solver_reaches_normalized_weights() {
    let seeds = SeedStream::new(5);
    let mut worst_tv: f64 = 0.0;
    let mut monotone = true;
    for i in 0..50u64 {
        let mut rng = seeds.rng("solver", &[i]);
        let n = rng.random_range(2..=6);
        let space = Arc::new(
            PromptSpace::new(vec![Prompt::new("only", (0..n).map(|c| Chain::new(format!("k{c}"), c.to_string())).collect())])
                .unwrap(),
        );
        let mut samples = Vec::new();
        let mut mass = vec![0.0; n];
        for c in 0..n {
            for _ in 0..rng.random_range(1..=3) {
                let lw: f64 = rng.random_range(-2.0..2.0) + if i % 2 == 0 { 10.0 } else { 0.0 };
                mass[c] += lw.exp();
                samples.push(WeightedSample { prompt: 0, chain: c, log_weight: lw });
            }
        }
        let total: f64 = mass.iter().sum();
        let target: Vec<f64> = mass.iter().map(|m| m / total).collect();
        let temp = [0.5, 1.0, 2.0][(i % 3) as usize];
        let start: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let policy = SoftmaxPolicy::new(space, vec![start], temp).unwrap();
        let cfg = SolveConfig { learning_rate: 0.5, max_iters: 200_000, ..SolveConfig::default() };
        let (fitted, rep) = solve_gradient(&policy, &samples, &cfg).unwrap();
        let tv = 0.5 * fitted.distribution(0).iter().zip(&target).map(|(a, b)| (a - b).abs()).sum::<f64>();
        worst_tv = worst_tv.max(tv);
        // steps below the rounding of the objective itself are not descents
        monotone &= rep.objective_history.windows(2).all(|w| w[1] >= w[0] - 1e-13 * w[0].abs().max(1.0));
    }
    let ok = worst_tv <= 1e-6 && monotone;
    report(5, "solver optimum and monotone objective", ok, format!("50 single-prompt instances, max TV {worst_tv:e}, nondecreasing: {monotone}"));
    assert!(ok);
}

/// Equivalence by lookup in a table computed once from the real checker.
struct Table {
    symbols: [&'static str; 4],
    same: [[bool; 4]; 4],
}

impl Table {
    fn new(symbols: [&'static str; 4]) -> Self {
        let mut same = [[false; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                same[i][j] = i == j || equivalent(symbols[i], symbols[j]);
            }
        }
        Self { symbols, same }
    }

    fn index(&self, s: &str) -> usize {
        self.symbols.iter().position(|x| *x == s).unwrap()
    }
}

impl AnswerEquivalence for Table {
    fn equivalent(&self, a: &str, b: &str) -> bool {
        self.same[self.index(a)][self.index(b)]
    }
}

/// Checks every list over `table.symbols` with length in `1..=max_len`.
fn exhaustive_votes(table: &Table, max_len: u32) -> (u64, u64) {
    let class: Vec<usize> = (0..4).map(|i| (0..4).find(|&j| table.same[i][j]).unwrap()).collect();
    let mut checked = 0u64;
    let mut failures = 0u64;
    for len in 1..=max_len {
        let total = 4u64.pow(len);
        let (c, f) = (0..total)
            .into_par_iter()
            .map(|code| {
                let mut list = Vec::with_capacity(len as usize);
                let mut x = code;
                let mut counts = [0usize; 4];
                for _ in 0..len {
                    let s = (x % 4) as usize;
                    x /= 4;
                    list.push(table.symbols[s]);
                    counts[class[s]] += 1;
                }
                let best = *counts.iter().max().unwrap();
                let mut winners: Vec<Vec<&str>> = Vec::new();
                for k in 0..4 {
                    if counts[k] == best && best > 0 {
                        let mut members: Vec<&str> =
                            (0..4).filter(|&s| class[s] == k && list.contains(&table.symbols[s])).map(|s| table.symbols[s]).collect();
                        members.sort();
                        winners.push(members);
                    }
                }
                let tie = TieBreak::new(SeedStream::new(code), len as u64, "p");
                let got = majority_vote(&list, &tie, table).unwrap();
                let mut reps: Vec<&str> = winners.iter().map(|w| w[0]).collect();
                reps.sort();
                let mut ok = got.count == best
                    && winners.iter().any(|w| *w == got.members)
                    && got.answer == got.members[0]
                    && got.tied == reps;
                if winners.len() > 1 {
                    let mut reversed = list.clone();
                    reversed.reverse();
                    ok &= majority_vote(&reversed, &tie, table).unwrap() == got;
                    ok &= majority_vote(&list, &tie, table).unwrap() == got;
                }
                (1u64, u64::from(!ok))
            })
            .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        checked += c;
        failures += f;
    }
    (checked, failures)
}

fn criterion_06_majority_vote_matches_counting_oracle() {
    let start = Instant::now();
    // equivalence structures of a 4-symbol alphabet: {2,1,1}, {1,1,1,1},
    // {2,2}, {3,1}, {4}
    let alphabets: [([&str; 4], u32); 5] = [
        (["0.5", "\\frac{1}{2}", "3", "x"], 12),
        (["1", "2", "3", "x"], 10),
        (["0.5", "1/2", "2", "2.0"], 10),
        (["0.5", "1/2", "\\frac{1}{2}", "x"], 10),
        (["0.5", "1/2", "\\frac{1}{2}", "0.50"], 10),
    ];
    let mut checked = 0;
    let mut failures = 0;
    for (symbols, len) in alphabets {
        let (c, f) = exhaustive_votes(&Table::new(symbols), len);
        checked += c;
        failures += f;
    }
    // smaller alphabets are sub-alphabets of the ones above; the real
    // checker agrees with the table on a sample
    let real = MathEquivalence::default();
    let mut rng = SeedStream::new(6).rng("sample", &[]);
    for _ in 0..2000 {
        let list: Vec<&str> = (0..rng.random_range(1..=12)).map(|_| ANSWERS[rng.random_range(0..4)]).collect();
        let tie = TieBreak::new(SeedStream::new(1), 0, "p");
        let table = Table::new(["1", "2", "0.5", "\\frac{1}{2}"]);
        if majority_vote(&list, &tie, &real).unwrap() != majority_vote(&list, &tie, &table).unwrap() {
            failures += 1;
        }
    }
    let ok = failures == 0;
    report(6, "majority vote vs counting oracle", ok, format!("{checked} lists exhaustively (+2000 with the live checker), {failures} mismatches, {:.2?}", start.elapsed()));
    assert!(ok);
}

fn pow10(n: u32) -> i128 {
    10i128.pow(n)
}

/// Decimal expansion of `num / (2^a 5^b)`, built digit by digit.
fn decimal_by_hand(num: i64, a: u32, b: u32) -> String {
    let places = a.max(b);
    let den = 2i128.pow(a) * 5i128.pow(b);
    let scaled = num as i128 * pow10(places) / den;
    let neg = scaled < 0;
    let digits = scaled.abs().to_string();
    let digits = if digits.len() <= places as usize { "0".repeat(places as usize + 1 - digits.len()) + &digits } else { digits };
    let (int, frac) = digits.split_at(digits.len() - places as usize);
    let body = if frac.is_empty() { int.to_string() } else { format!("{int}.{frac}") };
    if neg { format!("-{body}") } else { body }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 { a.abs() } else { gcd(b, a % b) }
}

fn criterion_07_answer_kit() {
    let eq = MathEquivalence::default();
    let builtin = roirl::verify::run_suite(roirl::verify::Suite::Answers, 7, 0);
    let half_pair = eq.equivalent("0.5", "\\frac{1}{2}");

    let mut rng = SeedStream::new(7).rng("triples", &[]);
    let mut triple_failures = 0;
    for _ in 0..10_000 {
        let (a, b) = (rng.random_range(0..6u32), rng.random_range(0..4u32));
        let den = 2i64.pow(a) * 5i64.pow(b);
        let num = rng.random_range(-99_999i64..=99_999);
        let g = gcd(num, den).max(1);
        let (n, d) = (num / g, den / g);
        let plain = if d == 1 { n.to_string() } else { format!("{n}/{d}") };
        let frac = if n < 0 { format!("-\\frac{{{}}}{{{d}}}", -n) } else { format!("\\frac{{{n}}}{{{d}}}") };
        let dec = decimal_by_hand(num, a, b);
        let forms = [plain.as_str(), frac.as_str(), dec.as_str()];
        for x in forms {
            for y in forms {
                if !eq.equivalent(x, y) {
                    triple_failures += 1;
                }
            }
        }
        let other = format!("{}/{}", n + 1, d);
        if eq.equivalent(&plain, &other) {
            triple_failures += 1;
        }
    }

    let nested = [
        ("x \\boxed{\\frac{a}{b}} y", "\\frac{a}{b}"),
        ("\\boxed{{1}{2}} \\boxed{3}", "{1}{2}"),
        ("\\boxed{\\frac{\\frac{1}{2}}{3}}", "\\frac{\\frac{1}{2}}{3}"),
        ("pre \\boxed{\\{x\\}} post", "\\{x\\}"),
        ("\\boxed{a{b{c{d}}}e}", "a{b{c{d}}}e"),
    ];
    let nested_ok = nested.iter().all(|(t, want)| {
        let e = extract_boxed(t);
        e.found && e.raw == *want
    });

    // random strings over a LaTeX-heavy alphabet; any panic is a crash
    let pieces = [
        "\\boxed{", "\\frac{", "}", "{", "\\left(", "\\right)", "(", ")", "^", "^{", "-", "+", "*", "/", "\\cdot",
        "\\times", ".", "0", "1", "9", "$", " ", "\\", "\\dfrac", "e", "x", "99999999999", "^{99}", "\\sqrt{",
    ];
    let mut rng = SeedStream::new(8).rng("fuzz", &[]);
    let inputs: Vec<String> = (0..100_000)
        .map(|_| {
            let n = rng.random_range(0..24);
            (0..n)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        char::from_u32(rng.random_range(0..0x3000)).unwrap_or('?').to_string()
                    } else {
                        pieces[rng.random_range(0..pieces.len())].to_string()
                    }
                })
                .collect()
        })
        .collect();
    let crashes: usize = inputs
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let other = &inputs[(i * 7919) % inputs.len()];
            let r = std::panic::catch_unwind(|| {
                let _ = extract_boxed(s);
                let _ = parse_answer(s);
                let _ = eq.equivalent(s, other);
            });
            usize::from(r.is_err())
        })
        .sum();

    let ok = builtin.ok && half_pair && triple_failures == 0 && nested_ok && crashes == 0;
    report(
        7,
        "answer kit",
        ok,
        format!(
            "built-in corpus {}/{}; (\"0.5\", \\frac{{1}}{{2}}) equivalent: {half_pair}; 10^4 triples, {triple_failures} failures; nested boxed ok: {nested_ok}; 10^5 random strings, {crashes} crashes",
            builtin.passed,
            builtin.instances.len()
        ),
    );
    assert!(ok);
}

/// Probability that a k-draw majority over `classes` (masses) hits class 0,
/// with uniform tie-breaking, by enumerating all count vectors.
fn exact_majority_hit(classes: &[f64], k: u32) -> f64 {
    fn rec(classes: &[f64], left: u32, counts: &mut Vec<u32>, k: u32, acc: &mut f64) {
        if counts.len() == classes.len() - 1 {
            counts.push(left);
            let best = *counts.iter().max().unwrap();
            let tied = counts.iter().filter(|&&c| c == best).count();
            if counts[0] == best {
                let mut log_p = ln_factorial(k);
                for (c, &n) in counts.iter().enumerate() {
                    log_p -= ln_factorial(n);
                    if n > 0 {
                        log_p += n as f64 * classes[c].ln();
                    }
                }
                *acc += log_p.exp() / tied as f64;
            }
            counts.pop();
            return;
        }
        for n in 0..=left {
            counts.push(n);
            rec(classes, left - n, counts, k, acc);
            counts.pop();
        }
    }
    let mut acc = 0.0;
    rec(classes, k, &mut Vec::new(), k, &mut acc);
    acc
}

fn ln_factorial(n: u32) -> f64 {
    (1..=n).map(|i| (i as f64).ln()).sum()
}

struct SelfImprovement {
    corpus: Corpus,
    identity: Vec<RoundReport>,
    exponential: Vec<RoundReport>,
    identity_best: usize,
    elapsed: Duration,
    k10_best_train_maj1: f64,
}

fn self_improvement_runs() -> SelfImprovement {
    let start = Instant::now();
    let corpus = make_corpus(&CorpusSpec::default()).unwrap();
    let eq = MathEquivalence::default();
    let all: Vec<usize> = (0..corpus.space.len()).collect();
    let go = |k: usize, transform: TransformKind| {
        let cfg = RunConfig { k, transform, ..RunConfig::default() };
        let ev = Evaluator::new(corpus.splits(), cfg.eval_k, cfg.eval_samples, cfg.seed);
        run(&cfg, &AnyPolicy::Tabular(corpus.base.clone()), &all, Some(&ev), &eq).unwrap()
    };
    let identity = go(128, TransformKind::Identity);
    let exponential = go(128, TransformKind::Exponential);
    let k10 = go(10, TransformKind::Identity);
    SelfImprovement {
        identity_best: identity.best_round,
        k10_best_train_maj1: k10.reports[k10.best_round].splits["train"].maj1_acc,
        identity: identity.reports,
        exponential: exponential.reports,
        elapsed: start.elapsed(),
        corpus,
    }
}

fn criterion_08_self_improvement_on_default_corpus() {
    let s = self_improvement_runs();
    let c = &s.corpus;
    // a task's population majority is right iff its true mass beats every
    // distractor (one chain per class in the default corpus)
    let ceiling = c.train.iter().filter(|&&i| c.tasks[i].distractor_masses.iter().all(|&d| c.tasks[i].correct_mass > d)).count()
        as f64
        / c.train.len() as f64;
    assert_eq!(ceiling, c.train_ceiling());
    let base_train_maj11 = c
        .train
        .iter()
        .map(|&i| {
            let mut classes = vec![c.tasks[i].correct_mass];
            classes.extend(&c.tasks[i].distractor_masses);
            exact_majority_hit(&classes, 11)
        })
        .sum::<f64>()
        / c.train.len() as f64;
    let base_test_maj1 = c.test.iter().map(|&i| c.tasks[i].correct_mass).sum::<f64>() / c.test.len() as f64;

    let base = &s.identity[0];
    let best = &s.identity[s.identity_best];
    let train1 = best.splits["train"].maj1_acc;
    let test1 = best.splits["test"].maj1_acc;
    let reported_base_test1 = base.splits["test"].maj1_acc;
    let near_ceiling = (ceiling - train1).abs() <= 0.02 || train1 > ceiling;
    let test_gain = test1 - reported_base_test1 >= 0.10;
    let beyond = train1 >= base_train_maj11;
    let fast = s.elapsed < Duration::from_secs(120);
    let ok = near_ceiling && test_gain && beyond && fast;
    report(
        8,
        "self-improvement on the default corpus",
        ok,
        format!(
            "train maj@1 {:.4} -> {train1:.4} (ceiling {ceiling:.4}); test maj@1 {reported_base_test1:.4} -> {test1:.4} (exact base {base_test_maj1:.4}); base train maj@11 {base_train_maj11:.4}; best round {}; training k = 128 (k = 10 reaches {:.4}); {:.2?}",
            base.splits["train"].maj1_acc, s.identity_best, s.k10_best_train_maj1, s.elapsed
        ),
    );
    assert!(ok);
}

fn criterion_09_entropy_collapse() {
    let s = self_improvement_runs();
    let h: Vec<f64> = s.identity.iter().map(|r| r.splits["train"].mean_entropy).collect();
    let monotone = h.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let final_identity = *h.last().unwrap();
    let final_exp = s.exponential.last().unwrap().splits["train"].mean_entropy;
    let ok = monotone && final_identity < 0.01 && final_exp >= final_identity;
    report(
        9,
        "entropy collapse",
        ok,
        format!(
            "identity train entropy {:.5} -> {final_identity:.2e} over {} rounds (non-increasing: {monotone}); exponential final {final_exp:.2e}",
            h[0],
            h.len() - 1
        ),
    );
    assert!(ok);
}

fn criterion_10_repeated_runs_write_identical_metrics() {
    let bin = env!("CARGO_BIN_EXE_roirl");
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut csvs = Vec::new();
    for root in &roots {
        let status = Command::new(bin)
            .args(["run", "--output-dir", "det"])
            .env("ROIRL_OUTPUT_ROOT", root.path())
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
        csvs.push(std::fs::read(root.path().join("det/metrics.csv")).unwrap());
    }
    let ok = csvs[0] == csvs[1] && !csvs[0].is_empty();
    report(10, "determinism of repeated runs", ok, format!("metrics.csv {} bytes, identical: {}", csvs[0].len(), csvs[0] == csvs[1]));
    assert!(ok);
}

fn main() {
    let criteria: [(u32, fn()); 10] = [
        (1, criterion_01_iterated_update_matches_product_form),
        (2, criterion_02_kl_fixed_point_agrees_with_baseline_shifted_engine),
        (3, criterion_03_converged_solutions_satisfy_their_equation),
        (4, criterion_04_analytic_gradient_matches_central_differences),
        (5, criterion_05_solver_reaches_normalized_weights),
        (6, criterion_06_majority_vote_matches_counting_oracle),
        (7, criterion_07_answer_kit),
        (8, criterion_08_self_improvement_on_default_corpus),
        (9, criterion_09_entropy_collapse),
        (10, criterion_10_repeated_runs_write_identical_metrics),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (n, check) in criteria {
        if let Err(e) = std::panic::catch_unwind(check) {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            if let Some(msg) = msg.filter(|m| !m.starts_with("assertion failed: ok")) {
                println!("criterion {n} [FAIL] {msg}");
            }
            failed.push(n);
        }
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
