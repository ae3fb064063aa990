//! Self-contained verification suite: exact oracles, theory checks and
//! invariant sweeps. Shared by the `verify` command and the test suites.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::theory::{
    pevi_suboptimality_check, self_normalized_coverage, simulation_lemma_check, CoverageOptions,
    SimulationLemmaOptions, SuboptimalityOptions,
};
use crate::eval::{exact_policy_value, greedy_counterexample, greedy_rule, sis_monte_carlo, synchronous_stationary};
use crate::graph::{edge_betweenness_map, gen_sbm, modularity, BinPartition, Graph};
use crate::ising::{
    fit_emvs, one_step_auc, simulate_panel, EmvsOptions, IsingDesign, IsingParams, LogPosterior,
    PriorSpec, QIsingState, Target,
};
use crate::rl::{cql_loss, train_cql, train_pevi, CqlHyper, FeatureMap, QFunction, Sample, Transition};
use crate::rng::{derive_indexed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Outcome of a check body: pass flag and a one-line summary.
pub type Outcome = (bool, String);

pub type CheckFn = fn() -> Result<Outcome>;

/// Every check in the order the suite runs them.
pub fn registry() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("greedy_counterexample", greedy_counterexample_check as CheckFn),
        ("stationary_constants", stationary_check),
        ("inclusion_probability", inclusion_check),
        ("ising_recovery", ising_recovery_check),
        ("em_monotone", em_monotone_check),
        ("ising_gradient", ising_gradient_check),
        ("qnet_gradient", qnet_gradient_check),
        ("cql_conservatism", cql_conservatism_check),
        ("self_normalized_coverage", coverage_check),
        ("pevi_suboptimality", suboptimality_check),
        ("simulation_lemma", simulation_check),
        ("betweenness_brute_force", betweenness_check),
        ("modularity_range", modularity_check),
        ("feature_norms", feature_norm_check),
        ("pevi_clipping", clipping_check),
    ]
}

pub fn run_check(name: &str, body: CheckFn) -> Check {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(outcome) => outcome,
        Err(e) => (false, format!("error: {e}")),
    };
    Check { name: name.to_string(), passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// Runs the checks whose names appear in `only`, or all of them.
pub fn run_all(only: Option<&[String]>) -> VerifyReport {
    let checks = registry()
        .into_iter()
        .filter(|(name, _)| only.is_none_or(|list| list.iter().any(|n| n == name)))
        .map(|(name, body)| {
            let check = run_check(name, body);
            log::info!("{} {} ({:.2}s): {}", if check.passed { "PASS" } else { "FAIL" }, name, check.seconds, check.detail);
            check
        })
        .collect();
    VerifyReport { checks }
}

/// Exact values `3 + ρ` and `2 + 2ρ` and a 10⁵-run simulation of each rule.
pub fn greedy_counterexample_check() -> Result<Outcome> {
    let mut ok = true;
    let mut worst_exact: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    for rho in [0.0, 0.25, 0.5, 0.9] {
        let (config, mdp) = greedy_counterexample(rho)?;
        let optimal = exact_policy_value(&mdp, &|h, _| if h == 1 { 2 } else { 0 })?;
        let greedy = greedy_rule(&mdp);
        let myopic = exact_policy_value(&mdp, &|_, s| greedy[s])?;
        worst_exact = worst_exact.max((optimal - (3.0 + rho)).abs()).max((myopic - (2.0 + 2.0 * rho)).abs());
        let optimal_mc = sis_monte_carlo(&config, 2, 100_000, 1, &|h, _| if h == 1 { 2 } else { 0 })?;
        let greedy_mc = sis_monte_carlo(&config, 2, 100_000, 2, &|_, y| greedy[encode(y)])?;
        for (mc, exact) in [(optimal_mc, optimal), (greedy_mc, myopic)] {
            // a zero standard error only happens when every run is identical
            let z = if mc.std_error > 0.0 {
                (mc.mean - exact).abs() / mc.std_error
            } else if (mc.mean - exact).abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            worst_z = worst_z.max(z);
        }
    }
    ok &= worst_exact < 1e-12 && worst_z <= 3.0;
    Ok((ok, format!("max exact error {worst_exact:.1e}, max Monte Carlo |z| {worst_z:.2}")))
}

fn encode(y: &[u8]) -> usize {
    y.iter().enumerate().map(|(v, &b)| (b as usize) << v).sum()
}

pub fn stationary_check() -> Result<Outcome> {
    let st = synchronous_stationary(4, 1.0, 0.0)?;
    let target = [1.860, 2.247, 2.549, 2.765];
    let diffs = [0.387, 0.302, 0.216];
    let round3 = |x: f64| (x * 1000.0).round() / 1000.0;
    let delta_ok = st.delta.iter().zip(target).all(|(d, t)| round3(*d) == t);
    let got_diffs: Vec<f64> = st.delta.windows(2).map(|w| w[1] - w[0]).collect();
    let diff_ok = got_diffs.iter().zip(diffs).all(|(d, t)| round3(*d) == t);
    let ok = delta_ok && diff_ok && st.residual < 1e-10 && st.row_error <= 1e-12;
    Ok((ok, format!("delta {:.5?}, differences {got_diffs:.5?}, residual {:.1e}", st.delta, st.residual)))
}

/// Inclusion probability of a zero coupling against the closed form
/// `w/√v1 / (w/√v1 + (1−w)/√v0)`.
pub fn inclusion_check() -> Result<Outcome> {
    let prior = PriorSpec { v0: 0.01, v1: 10.0, c: 1.0, tau2: 10.0 };
    let w = prior.inclusion_weight(50);
    let p = prior.inclusion_probability(0.0, w);
    let slab = 0.02 / 10f64.sqrt();
    let oracle = slab / (slab + 0.98 / 0.01f64.sqrt());
    let sig3 = |x: f64| format!("{x:.2e}");
    let ok = sig3(p) == sig3(oracle) && sig3(p) == "6.45e-4";
    Ok((ok, format!("inclusion {p:.6e}, oracle {oracle:.6e}")))
}

/// Known bin-level dynamics for recovery checks: three bins of twenty nodes.
pub fn recovery_truth() -> IsingParams {
    IsingParams {
        beta0: vec![-2.0, -1.5, -2.5],
        beta1: vec![3.0, 2.5, 3.0],
        beta2: vec![2.0, 1.5, 2.5],
        beta3: vec![0.8, 0.6, 1.0],
        gamma: vec![vec![0.8, 0.0, 0.6], vec![0.0, 0.7, 0.0], vec![-0.6, 0.0, 0.9]],
    }
}

pub fn ising_recovery_check() -> Result<Outcome> {
    let (g, p) = gen_sbm(&[20, 20, 20], 0.2, 0.05, 3)?;
    let truth = recovery_truth();
    let panel = simulate_panel(&truth, &g, &p, 2500, 11)?;
    let fit = fit_emvs(&panel.window(1, 2000)?, &g, &p, &PriorSpec::default(), &EmvsOptions::default())?;
    let auc = one_step_auc(&fit.params, &panel.window(2001, 2500)?, &g, &p)?;
    let wrong = truth
        .to_flat()
        .iter()
        .zip(fit.params.to_flat())
        .filter(|(t, e)| t.abs() >= 0.5 && t.signum() != e.signum())
        .count();
    Ok((wrong == 0 && auc >= 0.8, format!("{wrong} sign errors, held-out AUC {auc:.4}")))
}

pub fn em_monotone_check() -> Result<Outcome> {
    let mut worst_drop: f64 = 0.0;
    for seed in 0..3 {
        let (g, p) = gen_sbm(&[20, 20, 20], 0.2, 0.05, 5 + seed)?;
        let panel = simulate_panel(&recovery_truth(), &g, &p, 300, seed)?;
        let fit = fit_emvs(&panel, &g, &p, &PriorSpec::default(), &EmvsOptions::default())?;
        for w in fit.objective_trace.windows(2) {
            worst_drop = worst_drop.max((w[0] - w[1]) / w[0].abs().max(1.0));
        }
    }
    Ok((worst_drop <= 1e-8, format!("largest relative decrease {worst_drop:.2e}")))
}

pub fn ising_gradient_check() -> Result<Outcome> {
    let (g, p) = gen_sbm(&[20, 20, 20], 0.2, 0.05, 7)?;
    let panel = simulate_panel(&recovery_truth(), &g, &p, 60, 4)?;
    let design = IsingDesign::from_panel(&panel, &g, &p)?;
    let target = LogPosterior::new(&design, PriorSpec::default())?;
    let mut rng = rng_from_seed(99);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let q: Vec<f64> = (0..target.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, grad) = target.value_and_gradient(&q);
        for i in 0..q.len() {
            let h = 1e-5;
            let (mut up, mut down) = (q.clone(), q.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (target.value_and_gradient(&up).0 - target.value_and_gradient(&down).0) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(1.0));
        }
    }
    Ok((worst < 1e-5, format!("max scaled error {worst:.2e}")))
}

fn random_transition(k: usize, rng: &mut crate::rng::Rng) -> Transition {
    let mut state = || {
        let v: Vec<f64> = (0..2 * k).map(|_| rng.random::<f64>()).collect();
        QIsingState::from_slice(&v).expect("even length")
    };
    let s = state();
    let s_next = state();
    Transition { t: 1, s, b: rng.random_range(0..k), r: rng.random(), s_next }
}

/// Analytic CQL gradient against central differences of the loss.
pub fn qnet_gradient_check() -> Result<Outcome> {
    let mut rng = rng_from_seed(17);
    let mut worst: f64 = 0.0;
    for trial in 0..5u64 {
        let k = 2 + trial as usize % 3;
        let mut q = QFunction::new(2 * k, &[7, 5], k, trial)?;
        if trial % 2 == 1 {
            q = q.with_batch_norm();
        }
        let target = QFunction::new(2 * k, &[7, 5], k, trial + 100)?;
        let batch: Vec<Transition> = (0..6).map(|_| random_transition(k, &mut rng)).collect();
        let (alpha, psi) = (0.7, 0.8);
        let (_, grad) = q.loss_gradient(&batch, &target, alpha, psi)?;
        let theta = q.parameters();
        let mut probe = q.clone();
        for i in 0..theta.len() {
            let h = 1e-6;
            let mut shifted = theta.clone();
            shifted[i] = theta[i] + h;
            probe.set_parameters(&shifted)?;
            let up = cql_loss(&probe, &batch, &target, alpha, psi)?;
            shifted[i] = theta[i] - h;
            probe.set_parameters(&shifted)?;
            let down = cql_loss(&probe, &batch, &target, alpha, psi)?;
            let fd = (up - down) / (2.0 * h);
            // relative error with a floor so tiny components are not amplified
            worst = worst.max((fd - grad[i]).abs() / (fd.abs() + grad[i].abs()).max(1e-3));
        }
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

/// Three bins, action 2 never logged; action 0 logged three times as often
/// as action 1 and paying more.
pub fn conservatism_dataset() -> Vec<Transition> {
    let mut rng = rng_from_seed(4);
    (0..80)
        .map(|i| {
            let mut tr = random_transition(3, &mut rng);
            tr.b = if i % 4 == 3 { 1 } else { 0 };
            tr.r = if tr.b == 0 { 0.6 } else { 0.2 };
            tr
        })
        .collect()
}

/// Q-values at the first dataset state after training with `alpha`.
pub fn conservatism_q_values(alpha: f64) -> Result<Vec<f64>> {
    let data = conservatism_dataset();
    let hyper = CqlHyper {
        hidden: vec![32, 32],
        batch_size: 32,
        dropout: 0.0,
        alpha,
        learning_rate: 3e-3,
        max_steps: 3000,
        steps_per_epoch: 250,
        ..CqlHyper::default()
    };
    let q = train_cql(&data, &hyper, 5)?;
    q.q_values(&data[0].s.to_vec())
}

pub fn cql_conservatism_check() -> Result<Outcome> {
    let plain = conservatism_q_values(0.0)?;
    let conservative = conservatism_q_values(100.0)?;
    let logged_argmax = |q: &[f64]| if q[0] >= q[1] { 0 } else { 1 };
    let ok = conservative[2] < plain[2] && logged_argmax(&plain) == logged_argmax(&conservative);
    Ok((ok, format!("alpha 0: {plain:.3?}; alpha 100: {conservative:.3?}")))
}

pub fn coverage_check() -> Result<Outcome> {
    let report = self_normalized_coverage(&CoverageOptions::default(), 2024)?;
    Ok((
        report.fraction() >= 0.95,
        format!(
            "covered {}/{} at radius {:.2}, worst ratio {:.3}",
            report.covered, report.trials, report.radius, report.worst_ratio
        ),
    ))
}

pub fn suboptimality_check() -> Result<Outcome> {
    let report = pevi_suboptimality_check(&SuboptimalityOptions::default(), 2024)?;
    Ok((
        report.fraction() >= 0.95,
        format!(
            "bound held in {}/{} (beta {:.2}, mean gap {:.4}, mean U {:.4}, max excess {:.3})",
            report.satisfied,
            report.trials,
            report.bonus_beta,
            report.mean_gap,
            report.mean_uncertainty,
            report.max_excess
        ),
    ))
}

pub fn simulation_check() -> Result<Outcome> {
    let report = simulation_lemma_check(&SimulationLemmaOptions::default(), 2024)?;
    Ok((
        report.violations == 0,
        format!("{} violations in {} trials, worst ratio {:.3}", report.violations, report.trials, report.worst_ratio),
    ))
}

/// Edge betweenness by listing every shortest path of every unordered pair.
pub fn brute_force_betweenness(g: &Graph) -> BTreeMap<(usize, usize), f64> {
    let n = g.n();
    let mut out: BTreeMap<(usize, usize), f64> = g.edges().iter().map(|&e| (e, 0.0)).collect();
    for s in 0..n {
        let mut dist = vec![usize::MAX; n];
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            for &w in g.neighbors(v) {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        for t in (s + 1)..n {
            if dist[t] == usize::MAX {
                continue;
            }
            let mut paths: Vec<Vec<usize>> = Vec::new();
            let mut stack = vec![vec![s]];
            while let Some(p) = stack.pop() {
                let last = *p.last().expect("paths start at s");
                if last == t {
                    paths.push(p);
                    continue;
                }
                for &w in g.neighbors(last) {
                    if dist[w] == dist[last] + 1 && dist[w] <= dist[t] {
                        let mut next = p.clone();
                        next.push(w);
                        stack.push(next);
                    }
                }
            }
            let total = paths.len() as f64;
            for p in &paths {
                for pair in p.windows(2) {
                    let key = (pair[0].min(pair[1]), pair[0].max(pair[1]));
                    *out.get_mut(&key).expect("path edges exist") += 1.0 / total;
                }
            }
        }
    }
    out
}

fn random_graph(n: usize, p: f64, rng: &mut crate::rng::Rng) -> Result<Graph> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::new(n, edges)
}

pub fn betweenness_check() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for seed in 0..200u64 {
        let mut rng = rng_from_seed(derive_indexed(31, "betweenness", seed));
        let n = rng.random_range(2..=8);
        let p = rng.random_range(0.2..0.8);
        let g = random_graph(n, p, &mut rng)?;
        let slow = brute_force_betweenness(&g);
        for (e, v) in edge_betweenness_map(&g) {
            worst = worst.max((v - slow[&e]).abs());
        }
    }
    Ok((worst < 1e-9, format!("max deviation {worst:.1e} over 200 graphs")))
}

pub fn modularity_check() -> Result<Outcome> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut trivial: f64 = 0.0;
    for seed in 0..200u64 {
        let mut rng = rng_from_seed(derive_indexed(37, "modularity", seed));
        let n = rng.random_range(3..=12);
        let g = random_graph(n, 0.4, &mut rng)?;
        if g.edge_count() == 0 {
            continue;
        }
        let k = rng.random_range(1..=n);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        labels[..k].copy_from_slice(&(0..k).collect::<Vec<_>>());
        let q = modularity(&g, &BinPartition::new(labels)?)?;
        lo = lo.min(q);
        hi = hi.max(q);
        trivial = trivial.max(modularity(&g, &BinPartition::single(n)?)?.abs());
    }
    let ok = lo >= -0.5 - 1e-12 && hi <= 1.0 + 1e-12 && trivial < 1e-12;
    Ok((ok, format!("range [{lo:.3}, {hi:.3}], one-community |Q| {trivial:.1e}")))
}

pub fn feature_norm_check() -> Result<Outcome> {
    let mut rng = rng_from_seed(41);
    let mut worst: f64 = 0.0;
    for k in 1..=8 {
        let map = FeatureMap::Bin { k };
        for _ in 0..200 {
            let mut s: Vec<f64> = (0..2 * k).map(|_| rng.random::<f64>()).collect();
            // include the corners of the cube
            if rng.random::<f64>() < 0.2 {
                s.iter_mut().for_each(|v| *v = v.round());
            }
            let b = rng.random_range(0..k);
            worst = worst.max(map.features(&s, b)?.norm());
        }
    }
    Ok((worst <= 1.0 + 1e-12, format!("largest feature norm {worst:.6}")))
}

pub fn clipping_check() -> Result<Outcome> {
    let mut rng = rng_from_seed(43);
    let mut violations = 0usize;
    let mut checked = 0usize;
    for trial in 0..20 {
        let k = 1 + trial % 4;
        let horizon = 1 + trial % 5;
        let map = FeatureMap::Bin { k };
        let stages: Vec<Vec<Sample>> = (0..horizon)
            .map(|_| (0..30).map(|_| Sample::from(&random_transition(k, &mut rng))).collect())
            .collect();
        let bonus = [0.0, 0.5, 5.0][trial % 3];
        let policy = train_pevi(&stages, map, 1.0, bonus, horizon)?;
        for h in 1..=horizon {
            for _ in 0..20 {
                let s: Vec<f64> = (0..2 * k).map(|_| rng.random::<f64>()).collect();
                for q in policy.q_values(h, &s)? {
                    checked += 1;
                    if !(0.0..=(horizon - h + 1) as f64).contains(&q) {
                        violations += 1;
                    }
                }
            }
        }
    }
    Ok((violations == 0, format!("{violations} of {checked} values outside [0, H−h+1]")))
}
