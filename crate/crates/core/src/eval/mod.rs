//! Rollout harness, welfare statistics and exact oracles.

mod mdp;
mod stationary;
pub mod theory;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use mdp::{
    exact_policy_value, greedy_counterexample, greedy_rule, optimal_rule, sis_mdp, sis_monte_carlo, state_occupancy,
    MdpOutcome, MonteCarloValue, OptimalRule, TinyMdp,
};
pub use stationary::{synchronous_stationary, Stationary};

use crate::diffusion::{step, SisConfig, SisState};
use crate::error::{Error, Result};
use crate::policies::{Observation, Policy};
use crate::rng::{derive_indexed, Lane, PeriodRng};

/// Per-period reward statistics of one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyReport {
    pub policy: String,
    /// Mean adoption rate at periods `1..=H`.
    pub mean: Vec<f64>,
    /// Across-run sample standard deviation at each period.
    pub std: Vec<f64>,
    /// Mean and standard deviation of `W_H = Σ_h r_h` across runs.
    pub welfare_mean: f64,
    pub welfare_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub horizon: usize,
    pub n_runs: usize,
    pub seed: u64,
    pub policies: Vec<PolicyReport>,
}

impl EvalReport {
    pub fn policy(&self, name: &str) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.policy == name)
    }

    pub fn write_json<W: Write>(&self, mut writer: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut writer, self)?;
        writeln!(writer)?;
        Ok(())
    }

    /// Tidy `policy,period,mean,std` rows, periods counted from 1.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "policy,period,mean,std")?;
        for p in &self.policies {
            for (h, (m, s)) in p.mean.iter().zip(&p.std).enumerate() {
                writeln!(writer, "{},{},{},{}", p.policy, h + 1, m, s)?;
            }
        }
        Ok(())
    }
}

/// Sample mean and standard deviation (`n − 1` denominator, 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Rewards of one trajectory of `horizon` periods from the all-susceptible
/// state.
pub fn run_trajectory(config: &SisConfig, policy: &Policy, horizon: usize, seed: u64) -> Result<Vec<f64>> {
    let graph = config.graph();
    let partition = config.partition();
    let mut state = SisState::susceptible(graph.n());
    let mut rewards = Vec::with_capacity(horizon);
    for t in 1..=horizon as u64 {
        let period = PeriodRng::new(seed, t);
        let obs = Observation { y_prev: &state.adopted, t, state: None };
        let decision = policy.act(&obs, graph, partition, &mut period.lane(Lane::Policy))?;
        let outcome = step(&state, config, decision.treatment(), &period)?;
        rewards.push(outcome.reward);
        state = outcome.state;
    }
    Ok(rewards)
}

fn summarize(name: &str, runs: &[Vec<f64>], horizon: usize) -> PolicyReport {
    let mut mean = Vec::with_capacity(horizon);
    let mut std = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let column: Vec<f64> = runs.iter().map(|r| r[h]).collect();
        let (m, s) = mean_std(&column);
        mean.push(m);
        std.push(s);
    }
    let welfare: Vec<f64> = runs.iter().map(|r| r.iter().sum()).collect();
    let (welfare_mean, welfare_std) = mean_std(&welfare);
    PolicyReport { policy: name.to_string(), mean, std, welfare_mean, welfare_std }
}

/// Evaluates every named policy over the same `n_runs` derived run seeds.
/// Learned policies rebuild their state each period from their own fitted
/// parameters.
pub fn rollout_all(
    config: &SisConfig,
    policies: &[(String, Policy)],
    horizon: usize,
    n_runs: usize,
    seed: u64,
) -> Result<EvalReport> {
    if horizon == 0 || n_runs == 0 {
        return Err(Error::invalid("horizon and n_runs must be positive"));
    }
    let run_seeds: Vec<u64> = (0..n_runs as u64).map(|r| derive_indexed(seed, "run", r)).collect();
    let reports = policies
        .par_iter()
        .map(|(name, policy)| {
            let runs = run_seeds
                .par_iter()
                .map(|&s| run_trajectory(config, policy, horizon, s))
                .collect::<Result<Vec<_>>>()?;
            Ok(summarize(name, &runs, horizon))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { horizon, n_runs, seed, policies: reports })
}

/// Single-policy rollout, reported under the policy's kind.
pub fn rollout(config: &SisConfig, policy: &Policy, horizon: usize, n_runs: usize, seed: u64) -> Result<EvalReport> {
    rollout_all(config, &[(policy.kind().to_string(), policy.clone())], horizon, n_runs, seed)
}

/// Percentage welfare gain of `a` over `b`.
pub fn improvement_vs_baseline(a: &PolicyReport, b: &PolicyReport) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::invalid(format!("horizons differ: {} vs {}", a.mean.len(), b.mean.len())));
    }
    if b.welfare_mean == 0.0 {
        return Err(Error::Undefined("baseline welfare is zero".into()));
    }
    Ok(100.0 * (a.welfare_mean - b.welfare_mean) / b.welfare_mean)
}

/// Report-level wrapper that also checks the run counts agree.
pub fn report_improvement(a: &EvalReport, a_policy: &str, b: &EvalReport, b_policy: &str) -> Result<f64> {
    if a.horizon != b.horizon || a.n_runs != b.n_runs {
        return Err(Error::invalid("reports differ in horizon or run count"));
    }
    let find = |r: &EvalReport, name: &str| {
        r.policy(name).cloned().ok_or_else(|| Error::invalid(format!("report has no policy {name}")))
    };
    improvement_vs_baseline(&find(a, a_policy)?, &find(b, b_policy)?)
}

/// Pearson correlation across networks.
pub fn modularity_correlation(improvements: &[f64], modularities: &[f64]) -> Result<f64> {
    let n = improvements.len();
    if n != modularities.len() || n < 3 {
        return Err(Error::invalid("need two sequences of equal length at least 3"));
    }
    if improvements.iter().chain(modularities).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    let mx = improvements.iter().sum::<f64>() / n as f64;
    let my = modularities.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in improvements.iter().zip(modularities) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation with zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
