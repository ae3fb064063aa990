//! Seeded empirical checks of the finite-sample guarantees behind PEVI.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mdp::{exact_policy_value, optimal_rule, state_occupancy, MdpOutcome, TinyMdp};
use crate::error::{Error, Result};
use crate::rl::{bonus_beta_from_radius, train_pevi, FeatureMap, Sample};
use crate::rng::{derive_indexed, rng_from_seed, Rng};

/// Random tabular MDP with uniform rewards in `[0, 1]` on `(s, a)` and
/// Dirichlet(1) transition rows listing every next state.
pub fn random_tabular_mdp(n_states: usize, n_actions: usize, horizon: usize, rng: &mut Rng) -> TinyMdp {
    let transitions = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| {
                    let r: f64 = rng.random();
                    let w: Vec<f64> = (0..n_states).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
                    let total: f64 = w.iter().sum();
                    let mut row: Vec<MdpOutcome> =
                        w.iter().enumerate().map(|(next, x)| MdpOutcome { next, prob: x / total, reward: r }).collect();
                    // put the rounding slack on the last entry so rows sum to one
                    let head: f64 = row[..n_states - 1].iter().map(|o| o.prob).sum();
                    row[n_states - 1].prob = (1.0 - head).max(0.0);
                    row
                })
                .collect()
        })
        .collect();
    TinyMdp {
        states: (0..n_states).map(|s| format!("s{s}")).collect(),
        actions: vec![(0..n_actions).map(|a| format!("a{a}")).collect(); n_states],
        transitions,
        horizon,
        initial: 0,
    }
}

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn sample_next(mdp: &TinyMdp, s: usize, a: usize, rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let row = &mdp.transitions[s][a];
    for o in row {
        acc += o.prob;
        if u < acc {
            return o.next;
        }
    }
    row.last().expect("validated rows are nonempty").next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationLemmaOptions {
    pub trials: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub eps_r: f64,
    pub eps_p: f64,
}

impl Default for SimulationLemmaOptions {
    fn default() -> Self {
        Self { trials: 500, n_states: 4, n_actions: 3, horizon: 5, eps_r: 0.05, eps_p: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationLemmaReport {
    pub trials: usize,
    pub violations: usize,
    /// Largest `|ΔV| / (H ε_r + H(H−1)/2 ε_P)` seen.
    pub worst_ratio: f64,
}

/// Two MDPs whose rewards differ by at most `ε_r` and whose transition rows
/// are within `ε_P` in total variation: the value of a random Markov policy
/// must move by at most `H ε_r + H(H−1)/2 ε_P`.
pub fn simulation_lemma_check(opts: &SimulationLemmaOptions, seed: u64) -> Result<SimulationLemmaReport> {
    if opts.trials == 0 || opts.n_states < 2 || opts.n_actions == 0 || opts.horizon == 0 {
        return Err(Error::invalid("simulation check needs trials, two states, an action and a horizon"));
    }
    let h = opts.horizon as f64;
    let bound = h * opts.eps_r + h * (h - 1.0) / 2.0 * opts.eps_p;
    let ratios = (0..opts.trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = rng_from_seed(derive_indexed(seed, "simulation-lemma", trial));
            let base = random_tabular_mdp(opts.n_states, opts.n_actions, opts.horizon, &mut rng);
            let other = random_tabular_mdp(opts.n_states, opts.n_actions, opts.horizon, &mut rng);
            let mut perturbed = base.clone();
            for s in 0..opts.n_states {
                for a in 0..opts.n_actions {
                    let shift = rng.random_range(-opts.eps_r..=opts.eps_r);
                    let r = (base.transitions[s][a][0].reward + shift).clamp(0.0, 1.0);
                    for (o, q) in perturbed.transitions[s][a].iter_mut().zip(&other.transitions[s][a]) {
                        // mixing with weight ε keeps the TV distance at most ε
                        o.prob = (1.0 - opts.eps_p) * o.prob + opts.eps_p * q.prob;
                        o.reward = r;
                    }
                    let head: f64 = perturbed.transitions[s][a][..opts.n_states - 1].iter().map(|o| o.prob).sum();
                    perturbed.transitions[s][a][opts.n_states - 1].prob = (1.0 - head).max(0.0);
                }
            }
            let table: Vec<Vec<usize>> = (0..opts.horizon)
                .map(|_| (0..opts.n_states).map(|_| rng.random_range(0..opts.n_actions)).collect())
                .collect();
            let rule = |h: usize, s: usize| table[h - 1][s];
            let gap = (exact_policy_value(&base, &rule)? - exact_policy_value(&perturbed, &rule)?).abs();
            Ok(if bound > 0.0 { gap / bound } else if gap == 0.0 { 0.0 } else { f64::INFINITY })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(SimulationLemmaReport {
        trials: opts.trials,
        violations: ratios.iter().filter(|&&r| r > 1.0 + 1e-12).count(),
        worst_ratio: ratios.iter().copied().fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageOptions {
    pub trials: usize,
    pub horizon: usize,
    pub d: usize,
    pub n_per_stage: usize,
    pub lambda: f64,
    pub delta: f64,
    /// Multiplier of the radius.
    pub c: f64,
}

impl Default for CoverageOptions {
    fn default() -> Self {
        Self { trials: 1000, horizon: 3, d: 6, n_per_stage: 200, lambda: 1.0, delta: 0.05, c: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub trials: usize,
    pub covered: usize,
    pub radius: f64,
    /// Largest `max_h ‖S_h‖_{Λ_h⁻¹} / radius` seen.
    pub worst_ratio: f64,
}

impl CoverageReport {
    pub fn fraction(&self) -> f64 {
        self.covered as f64 / self.trials as f64
    }
}

/// Features inside the unit ball that lean on the previous noise draw
/// (predictable but adaptive), Gaussian noise with standard deviation `H`.
/// A trial is covered when every stage's self-normalized sum stays within
/// `c H √(d log(H(1 + n/λ)/δ))`.
pub fn self_normalized_coverage(opts: &CoverageOptions, seed: u64) -> Result<CoverageReport> {
    if opts.trials == 0 || opts.n_per_stage == 0 {
        return Err(Error::invalid("coverage check needs trials and samples"));
    }
    let radius =
        bonus_beta_from_radius(opts.horizon, opts.d, opts.n_per_stage, opts.lambda, opts.delta, 0.0, opts.c)?;
    let h = opts.horizon as f64;
    let noise = Normal::new(0.0, h).map_err(|e| Error::invalid(e.to_string()))?;
    let ratios: Vec<f64> = (0..opts.trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = rng_from_seed(derive_indexed(seed, "self-normalized", trial));
            let mut worst: f64 = 0.0;
            for _ in 0..opts.horizon {
                let mut lam = DMatrix::<f64>::identity(opts.d, opts.d) * opts.lambda;
                let mut sum = DVector::<f64>::zeros(opts.d);
                let mut prev = 0.0;
                for _ in 0..opts.n_per_stage {
                    let mut x = DVector::from_fn(opts.d, |_, _| rng.sample::<f64, _>(StandardNormal));
                    x[0] += prev / h;
                    let scale = rng.random_range(0.5..=1.0) / x.norm().max(f64::MIN_POSITIVE);
                    x *= scale;
                    let xi = noise.sample(&mut rng);
                    lam.ger(1.0, &x, &x, 1.0);
                    sum.axpy(xi, &x, 1.0);
                    prev = xi;
                }
                let chol = lam.cholesky().ok_or_else(|| Error::NonFinite("design matrix".into()))?;
                worst = worst.max(sum.dot(&chol.solve(&sum)).max(0.0).sqrt());
            }
            Ok(worst / radius)
        })
        .collect::<Result<_>>()?;
    Ok(CoverageReport {
        trials: opts.trials,
        covered: ratios.iter().filter(|&&r| r <= 1.0).count(),
        radius,
        worst_ratio: ratios.iter().copied().fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuboptimalityOptions {
    pub trials: usize,
    pub horizon: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_per_stage: usize,
    pub lambda: f64,
    pub delta: f64,
    pub c: f64,
    pub tolerance: f64,
}

impl Default for SuboptimalityOptions {
    fn default() -> Self {
        Self {
            trials: 200,
            horizon: 3,
            n_states: 2,
            n_actions: 3,
            n_per_stage: 200,
            lambda: 1.0,
            delta: 0.05,
            c: 1.0,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuboptimalityReport {
    pub trials: usize,
    pub satisfied: usize,
    pub bonus_beta: f64,
    /// Largest `gap − 2β𝔘(π*)`; negative when every trial holds.
    pub max_excess: f64,
    pub mean_gap: f64,
    pub mean_uncertainty: f64,
}

impl SuboptimalityReport {
    pub fn fraction(&self) -> f64 {
        self.satisfied as f64 / self.trials as f64
    }
}

/// PEVI on random tabular MDPs with one-hot features, so the linear model is
/// exact. Each stage gets its own uniform `(s, a)` samples. Compares the exact
/// gap `V*(s₁) − V^π̂(s₁)` with `2β Σ_h E_{π*}[√(φᵀΛ_h⁻¹φ)]`, the
/// expectation taken over the exact state distribution of `π*`.
pub fn pevi_suboptimality_check(opts: &SuboptimalityOptions, seed: u64) -> Result<SuboptimalityReport> {
    if opts.trials == 0 || opts.n_states < 2 || opts.n_actions == 0 || opts.horizon == 0 {
        return Err(Error::invalid("suboptimality check needs trials, two states, an action and a horizon"));
    }
    let features = FeatureMap::OneHot { n_states: opts.n_states, n_actions: opts.n_actions };
    let d = features.dim();
    let h = opts.horizon as f64;
    // one-hot weights are stage values bounded by H
    let w_bound = h * (d as f64).sqrt();
    let beta = bonus_beta_from_radius(opts.horizon, d, opts.n_per_stage, opts.lambda, opts.delta, w_bound, opts.c)?;
    let outcomes = (0..opts.trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = rng_from_seed(derive_indexed(seed, "pevi-suboptimality", trial));
            let mdp = random_tabular_mdp(opts.n_states, opts.n_actions, opts.horizon, &mut rng);
            let stages: Vec<Vec<Sample>> = (0..opts.horizon)
                .map(|_| {
                    (0..opts.n_per_stage)
                        .map(|_| {
                            let s = rng.random_range(0..opts.n_states);
                            let a = rng.random_range(0..opts.n_actions);
                            let next = sample_next(&mdp, s, a, &mut rng);
                            Sample {
                                s: one_hot(s, opts.n_states),
                                b: a,
                                r: mdp.expected_reward(s, a),
                                s_next: one_hot(next, opts.n_states),
                            }
                        })
                        .collect()
                })
                .collect();
            let policy = train_pevi(&stages, features, opts.lambda, beta, opts.horizon)?;
            let learned: Vec<Vec<usize>> = (1..=opts.horizon)
                .map(|h| (0..opts.n_states).map(|s| policy.greedy(h, &one_hot(s, opts.n_states))).collect())
                .collect::<Result<_>>()?;
            let best = optimal_rule(&mdp)?;
            let v_hat = exact_policy_value(&mdp, &|h, s| learned[h - 1][s])?;
            let occupancy = state_occupancy(&mdp, &|h, s| best.act(h, s))?;
            let mut uncertainty = 0.0;
            for (stage, dist) in occupancy.iter().enumerate() {
                for (s, &p) in dist.iter().enumerate() {
                    if p > 0.0 {
                        uncertainty += p * policy.width(stage + 1, &one_hot(s, opts.n_states), best.act(stage + 1, s))?;
                    }
                }
            }
            Ok((best.value - v_hat, uncertainty))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let excess: Vec<f64> = outcomes.iter().map(|(gap, u)| gap - 2.0 * beta * u).collect();
    let n = opts.trials as f64;
    Ok(SuboptimalityReport {
        trials: opts.trials,
        satisfied: excess.iter().filter(|&&e| e <= opts.tolerance).count(),
        bonus_beta: beta,
        max_excess: excess.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_gap: outcomes.iter().map(|o| o.0).sum::<f64>() / n,
        mean_uncertainty: outcomes.iter().map(|o| o.1).sum::<f64>() / n,
    })
}
