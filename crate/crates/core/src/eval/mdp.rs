//! Small finite-horizon MDPs solved exactly by backward induction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{step, SisConfig, SisState, Treatment};
use crate::error::{Error, Result};
use crate::graph::{BinPartition, Graph};
use crate::rng::{derive_indexed, PeriodRng};

const ROW_TOL: f64 = 1e-12;
const MAX_SIS_NODES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdpOutcome {
    pub next: usize,
    pub prob: f64,
    pub reward: f64,
}

/// Explicit time-homogeneous MDP started from `initial`. Rewards sit on the
/// outcomes so they may depend on the realized next state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyMdp {
    pub states: Vec<String>,
    pub actions: Vec<Vec<String>>,
    /// `transitions[s][a]`, probabilities summing to one.
    pub transitions: Vec<Vec<Vec<MdpOutcome>>>,
    pub horizon: usize,
    pub initial: usize,
}

impl TinyMdp {
    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 || self.horizon == 0 || self.initial >= n {
            return Err(Error::invalid("mdp needs states, a positive horizon and a valid initial state"));
        }
        if self.actions.len() != n || self.transitions.len() != n {
            return Err(Error::invalid("per-state action and transition lists must cover every state"));
        }
        for (s, (acts, rows)) in self.actions.iter().zip(&self.transitions).enumerate() {
            if acts.is_empty() || acts.len() != rows.len() {
                return Err(Error::invalid(format!("state {s}: {} actions, {} transition rows", acts.len(), rows.len())));
            }
            for (a, row) in rows.iter().enumerate() {
                let mut total = 0.0;
                for o in row {
                    if o.next >= n || !(0.0..=1.0).contains(&o.prob) || !o.reward.is_finite() {
                        return Err(Error::invalid(format!("state {s} action {a}: malformed outcome {o:?}")));
                    }
                    total += o.prob;
                }
                if (total - 1.0).abs() > ROW_TOL {
                    return Err(Error::invalid(format!("state {s} action {a}: probabilities sum to {total}")));
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        self.transitions[s][a].iter().map(|o| o.prob * o.reward).sum()
    }

    fn backup(&self, s: usize, a: usize, next_value: &[f64]) -> f64 {
        self.transitions[s][a].iter().map(|o| o.prob * (o.reward + next_value[o.next])).sum()
    }

    fn checked_action(&self, h: usize, s: usize, a: usize) -> Result<usize> {
        if a >= self.actions[s].len() {
            return Err(Error::invalid(format!("rule chose action {a} in state {s} at stage {h}")));
        }
        Ok(a)
    }
}

/// Expected cumulative reward from the initial state when `rule(h, s)` picks
/// the action at stage `h = 1..=H`.
pub fn exact_policy_value(mdp: &TinyMdp, rule: &dyn Fn(usize, usize) -> usize) -> Result<f64> {
    mdp.validate()?;
    let mut value = vec![0.0; mdp.n_states()];
    for h in (1..=mdp.horizon).rev() {
        value = (0..mdp.n_states())
            .map(|s| Ok(mdp.backup(s, mdp.checked_action(h, s, rule(h, s))?, &value)))
            .collect::<Result<_>>()?;
    }
    Ok(value[mdp.initial])
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalRule {
    pub value: f64,
    /// `actions[h-1][s]`, lowest index among ties.
    pub actions: Vec<Vec<usize>>,
}

impl OptimalRule {
    pub fn act(&self, h: usize, s: usize) -> usize {
        self.actions[h - 1][s]
    }
}

pub fn optimal_rule(mdp: &TinyMdp) -> Result<OptimalRule> {
    mdp.validate()?;
    let mut value = vec![0.0; mdp.n_states()];
    let mut actions = vec![Vec::new(); mdp.horizon];
    for h in (1..=mdp.horizon).rev() {
        let mut next = vec![0.0; mdp.n_states()];
        let mut choice = vec![0; mdp.n_states()];
        for s in 0..mdp.n_states() {
            let q: Vec<f64> = (0..mdp.actions[s].len()).map(|a| mdp.backup(s, a, &value)).collect();
            choice[s] = crate::rl::argmax(&q);
            next[s] = q[choice[s]];
        }
        value = next;
        actions[h - 1] = choice;
    }
    Ok(OptimalRule { value: value[mdp.initial], actions })
}

/// Myopic rule: highest expected immediate reward, lowest index among ties.
pub fn greedy_rule(mdp: &TinyMdp) -> Vec<usize> {
    (0..mdp.n_states())
        .map(|s| {
            let r: Vec<f64> = (0..mdp.actions[s].len()).map(|a| mdp.expected_reward(s, a)).collect();
            crate::rl::argmax(&r)
        })
        .collect()
}

/// State distribution at each stage `h = 1..=H` under `rule`.
pub fn state_occupancy(mdp: &TinyMdp, rule: &dyn Fn(usize, usize) -> usize) -> Result<Vec<Vec<f64>>> {
    mdp.validate()?;
    let mut dist = vec![0.0; mdp.n_states()];
    dist[mdp.initial] = 1.0;
    let mut out = Vec::with_capacity(mdp.horizon);
    for h in 1..=mdp.horizon {
        let mut next = vec![0.0; mdp.n_states()];
        for (s, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let a = mdp.checked_action(h, s, rule(h, s))?;
            for o in &mdp.transitions[s][a] {
                next[o.next] += p * o.prob;
            }
        }
        out.push(std::mem::replace(&mut dist, next));
    }
    Ok(out)
}

/// Adoption vector encoded in state index `s`: bit `v` is node `v`.
fn decode(s: usize, n: usize) -> Vec<u8> {
    (0..n).map(|v| ((s >> v) & 1) as u8).collect()
}

fn encode(y: &[u8]) -> usize {
    y.iter().enumerate().map(|(v, &b)| (b as usize) << v).sum()
}

/// Every `(mask, probability)` of independent events with the given
/// probabilities; certain events are folded in without branching.
fn bernoulli_outcomes(probs: &[f64]) -> Vec<(Vec<bool>, f64)> {
    let mut out = vec![(Vec::with_capacity(probs.len()), 1.0)];
    for &p in probs {
        if p <= 0.0 || p >= 1.0 {
            let fired = p >= 1.0;
            out.iter_mut().for_each(|(m, _)| m.push(fired));
            continue;
        }
        out = out
            .into_iter()
            .flat_map(|(m, q)| {
                let mut yes = m.clone();
                yes.push(true);
                let mut no = m;
                no.push(false);
                [(yes, q * p), (no, q * (1.0 - p))]
            })
            .collect();
    }
    out
}

/// Exact SIS dynamics as an MDP over all `2^N` adoption vectors with one
/// action per node (seed that node). The reward is the number of adopters
/// after the period.
pub fn sis_mdp(config: &SisConfig, horizon: usize, node_labels: &[&str]) -> Result<TinyMdp> {
    let n = config.graph().n();
    if n > MAX_SIS_NODES {
        return Err(Error::OracleTooLarge(format!("{n} nodes, at most {MAX_SIS_NODES} supported")));
    }
    if node_labels.len() != n {
        return Err(Error::invalid("one label per node required"));
    }
    let states: Vec<String> = (0..1usize << n)
        .map(|s| decode(s, n).iter().map(|b| char::from(b'0' + b)).collect())
        .collect();
    let mut transitions = Vec::with_capacity(states.len());
    for s in 0..states.len() {
        let y = decode(s, n);
        let churn: Vec<f64> = (0..n).map(|v| if y[v] == 1 { config.node_churn(v) } else { 0.0 }).collect();
        let mut rows = Vec::with_capacity(n);
        for seed in 0..n {
            let mut dist = vec![0.0; states.len()];
            for (reverted, p_churn) in bernoulli_outcomes(&churn) {
                let mut after: Vec<u8> = (0..n).map(|v| y[v] & u8::from(!reverted[v])).collect();
                after[seed] = 1;
                let adopt: Vec<f64> = (0..n)
                    .map(|j| {
                        if after[j] == 1 {
                            return 0.0;
                        }
                        let stay: f64 = config
                            .graph()
                            .neighbors(j)
                            .iter()
                            .filter(|&&i| after[i] == 1)
                            .map(|&i| 1.0 - config.node_spread(i))
                            .product();
                        1.0 - stay
                    })
                    .collect();
                for (adopted, p_spread) in bernoulli_outcomes(&adopt) {
                    let next: Vec<u8> = (0..n).map(|v| after[v] | u8::from(adopted[v])).collect();
                    dist[encode(&next)] += p_churn * p_spread;
                }
            }
            let row = dist
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(next, &prob)| MdpOutcome { next, prob, reward: next.count_ones() as f64 })
                .collect();
            rows.push(row);
        }
        transitions.push(rows);
    }
    let mdp = TinyMdp {
        states,
        actions: vec![node_labels.iter().map(|l| l.to_string()).collect(); 1 << n],
        transitions,
        horizon,
        initial: 0,
    };
    mdp.validate()?;
    Ok(mdp)
}

/// Nodes `A`, `B` joined by an edge with spread `rho` and churn 1, and an
/// isolated node `C` that never churns, over two periods.
pub fn greedy_counterexample(rho: f64) -> Result<(SisConfig, TinyMdp)> {
    let graph = Graph::new(3, [(0, 1)])?;
    let partition = BinPartition::new(vec![0, 1, 2])?;
    let config = SisConfig::new(graph, partition, vec![rho, rho, 0.0], vec![1.0, 1.0, 0.0])?;
    let mdp = sis_mdp(&config, 2, &["A", "B", "C"])?;
    Ok((config, mdp))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloValue {
    pub mean: f64,
    pub std_error: f64,
    pub runs: usize,
}

/// Simulated total adopter count over `horizon` periods with the real
/// dynamics; `rule(h, y_prev)` names the node to seed.
pub fn sis_monte_carlo(
    config: &SisConfig,
    horizon: usize,
    runs: usize,
    seed: u64,
    rule: &(dyn Fn(usize, &[u8]) -> usize + Sync),
) -> Result<MonteCarloValue> {
    if runs < 2 || horizon == 0 {
        return Err(Error::invalid("need at least two runs and a positive horizon"));
    }
    let n = config.graph().n() as f64;
    let totals = (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let run_seed = derive_indexed(seed, "mc", r);
            let mut state = SisState::susceptible(config.graph().n());
            let mut total = 0.0;
            for h in 1..=horizon {
                let node = rule(h, &state.adopted);
                let out = step(&state, config, Treatment::Node(node), &PeriodRng::new(run_seed, h as u64))?;
                total += out.reward * n;
                state = out.state;
            }
            Ok(total)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, std) = super::mean_std(&totals);
    Ok(MonteCarloValue { mean, std_error: std / (runs as f64).sqrt(), runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counterexample_values() {
        for rho in [0.0, 0.25, 0.5, 0.9] {
            let (_, mdp) = greedy_counterexample(rho).unwrap();
            let treat_c_then_a = exact_policy_value(&mdp, &|h, _| if h == 1 { 2 } else { 0 }).unwrap();
            assert!((treat_c_then_a - (3.0 + rho)).abs() < 1e-12);
            let greedy = greedy_rule(&mdp);
            let g = exact_policy_value(&mdp, &|_, s| greedy[s]).unwrap();
            assert!((g - (2.0 + 2.0 * rho)).abs() < 1e-12, "rho {rho}: greedy {g}");
            let best = optimal_rule(&mdp).unwrap();
            assert!((best.value - (3.0 + rho)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_reward_mdp_has_zero_value() {
        let mdp = TinyMdp {
            states: vec!["x".into(), "y".into()],
            actions: vec![vec!["a".into()], vec!["a".into(), "b".into()]],
            transitions: vec![
                vec![vec![MdpOutcome { next: 1, prob: 1.0, reward: 0.0 }]],
                vec![
                    vec![MdpOutcome { next: 0, prob: 0.5, reward: 0.0 }, MdpOutcome { next: 1, prob: 0.5, reward: 0.0 }],
                    vec![MdpOutcome { next: 1, prob: 1.0, reward: 0.0 }],
                ],
            ],
            horizon: 4,
            initial: 0,
        };
        assert_eq!(exact_policy_value(&mdp, &|_, _| 0).unwrap(), 0.0);
        let occ = state_occupancy(&mdp, &|_, _| 0).unwrap();
        assert_eq!(occ[0], vec![1.0, 0.0]);
        assert_eq!(occ[1], vec![0.0, 1.0]);
        assert_eq!(occ[2], vec![0.5, 0.5]);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let (_, mut mdp) = greedy_counterexample(0.5).unwrap();
        mdp.transitions[0][0][0].prob += 1e-9;
        assert!(exact_policy_value(&mdp, &|_, _| 0).is_err());
        let (_, mdp) = greedy_counterexample(0.5).unwrap();
        assert!(exact_policy_value(&mdp, &|_, _| 3).is_err());
    }

    #[test]
    fn enumeration_matches_one_step_expectation() {
        let g = Graph::new(4, [(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        let p = BinPartition::new(vec![0, 0, 1, 1]).unwrap();
        let cfg = SisConfig::new(g, p, vec![0.3, 0.6], vec![0.4, 0.2]).unwrap();
        let mdp = sis_mdp(&cfg, 1, &["0", "1", "2", "3"]).unwrap();
        let y = [1u8, 0, 1, 0];
        let s = encode(&y);
        for v in 0..4 {
            let exact = crate::diffusion::expected_reward(&cfg, &y, Treatment::Node(v)).unwrap() * 4.0;
            assert!((mdp.expected_reward(s, v) - exact).abs() < 1e-12);
        }
    }
}
