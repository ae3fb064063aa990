//! Susceptible–infected–susceptible adoption dynamics with one treatment per
//! period.
//!
//! Each period runs three ordered sub-steps: churn (adopted nodes revert with
//! their bin's churn rate), seeding (one susceptible node of the chosen bin is
//! forced to adopt), and spreading (each susceptible node adopts with
//! probability `1 − Π (1 − spread_i)` over its adopted neighbors, seed
//! included). Every sub-step draws from its own random lane.

use std::io::{BufRead, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BinPartition, Graph};
use crate::policies::{Observation, Policy};
use crate::rng::{Lane, PeriodRng};

/// Per-bin SIS rates on a fixed network.
#[derive(Debug, Clone, PartialEq)]
pub struct SisConfig {
    graph: Graph,
    partition: BinPartition,
    spread: Vec<f64>,
    churn: Vec<f64>,
}

impl SisConfig {
    /// Rates must lie in `[0, 1]`; the closed endpoints are only meaningful
    /// for oracle constructions.
    pub fn new(graph: Graph, partition: BinPartition, spread: Vec<f64>, churn: Vec<f64>) -> Result<Self> {
        if partition.n() != graph.n() {
            return Err(Error::invalid(format!(
                "partition has {} nodes, graph has {}",
                partition.n(),
                graph.n()
            )));
        }
        let k = partition.k();
        if spread.len() != k || churn.len() != k {
            return Err(Error::invalid(format!(
                "need {k} spread and churn rates, got {} and {}",
                spread.len(),
                churn.len()
            )));
        }
        if let Some(bad) = spread.iter().chain(&churn).find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("rate {bad} outside [0,1]")));
        }
        Ok(Self { graph, partition, spread, churn })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn partition(&self) -> &BinPartition {
        &self.partition
    }

    pub fn spread(&self) -> &[f64] {
        &self.spread
    }

    pub fn churn(&self) -> &[f64] {
        &self.churn
    }

    pub fn node_spread(&self, v: usize) -> f64 {
        self.spread[self.partition.bin_of(v)]
    }

    pub fn node_churn(&self, v: usize) -> f64 {
        self.churn[self.partition.bin_of(v)]
    }
}

/// Adoption vector at period `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SisState {
    pub adopted: Vec<u8>,
    pub t: u64,
}

impl SisState {
    pub fn susceptible(n: usize) -> Self {
        Self { adopted: vec![0; n], t: 0 }
    }
}

/// What the planner does in one period.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Treatment {
    None,
    /// Seed a uniformly drawn susceptible node of the bin.
    Bin(usize),
    /// Seed this node (node-level baselines).
    Node(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: SisState,
    pub reward: f64,
    pub seeded: Option<usize>,
}

/// Network-wide adoption rate.
pub fn reward(y: &[u8]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::invalid("reward of an empty adoption vector"));
    }
    Ok(y.iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64)
}

/// Advances one period. `rng` must be the stream of the period being
/// produced, i.e. `PeriodRng::new(seed, state.t + 1)`.
pub fn step(state: &SisState, config: &SisConfig, treatment: Treatment, rng: &PeriodRng) -> Result<StepOutcome> {
    let n = config.graph.n();
    if state.adopted.len() != n {
        return Err(Error::invalid(format!("state has {} nodes, graph has {n}", state.adopted.len())));
    }
    match treatment {
        Treatment::Bin(b) if b >= config.partition.k() => {
            return Err(Error::invalid(format!("bin {b} out of range for K={}", config.partition.k())));
        }
        Treatment::Node(v) if v >= n => {
            return Err(Error::invalid(format!("node {v} out of range for n={n}")));
        }
        _ => {}
    }

    // one uniform per node in every lane keeps streams aligned across states
    let mut y = state.adopted.clone();
    let mut churn_rng = rng.lane(Lane::Churn);
    for (v, yv) in y.iter_mut().enumerate() {
        let u: f64 = churn_rng.random();
        if *yv == 1 && u < config.node_churn(v) {
            *yv = 0;
        }
    }

    let mut seed_rng = rng.lane(Lane::Seed);
    let seeded = match treatment {
        Treatment::None => None,
        Treatment::Node(v) => (y[v] == 0).then_some(v),
        Treatment::Bin(b) => {
            let open: Vec<usize> = config.partition.members(b).iter().copied().filter(|&v| y[v] == 0).collect();
            if open.is_empty() {
                None
            } else {
                Some(open[seed_rng.random_range(0..open.len())])
            }
        }
    };
    if let Some(v) = seeded {
        y[v] = 1;
    }

    let mut spread_rng = rng.lane(Lane::Spread);
    let mut next = y.clone();
    for j in 0..n {
        let u: f64 = spread_rng.random();
        if y[j] == 1 {
            continue;
        }
        let stay: f64 = config
            .graph
            .neighbors(j)
            .iter()
            .filter(|&&i| y[i] == 1)
            .map(|&i| 1.0 - config.node_spread(i))
            .product();
        if u < 1.0 - stay {
            next[j] = 1;
        }
    }

    let reward = reward(&next)?;
    Ok(StepOutcome { state: SisState { adopted: next, t: state.t + 1 }, reward, seeded })
}

/// Exact expected adoption rate after one period from `y_prev`, averaging
/// over churn outcomes, the seeded node and spreading. Enumerates every
/// churn outcome of adopted nodes whose churn rate lies strictly inside
/// `(0, 1)`, so at most 20 such nodes are accepted.
pub fn expected_reward(config: &SisConfig, y_prev: &[u8], treatment: Treatment) -> Result<f64> {
    const MAX_UNCERTAIN: usize = 20;
    let n = config.graph.n();
    if y_prev.len() != n {
        return Err(Error::invalid(format!("state has {} nodes, graph has {n}", y_prev.len())));
    }
    let mut base = y_prev.to_vec();
    let mut uncertain = Vec::new();
    for v in 0..n {
        if base[v] == 1 {
            let c = config.node_churn(v);
            if c >= 1.0 {
                base[v] = 0;
            } else if c > 0.0 {
                uncertain.push(v);
            }
        }
    }
    if uncertain.len() > MAX_UNCERTAIN {
        return Err(Error::OracleTooLarge(format!(
            "{} adopted nodes with uncertain churn (limit {MAX_UNCERTAIN})",
            uncertain.len()
        )));
    }
    let spread_mean = |y: &[u8]| -> f64 {
        let mut total = 0.0;
        for j in 0..n {
            if y[j] == 1 {
                total += 1.0;
                continue;
            }
            let stay: f64 = config
                .graph
                .neighbors(j)
                .iter()
                .filter(|&&i| y[i] == 1)
                .map(|&i| 1.0 - config.node_spread(i))
                .product();
            total += 1.0 - stay;
        }
        total / n as f64
    };
    let mut expected = 0.0;
    for mask in 0u32..(1u32 << uncertain.len()) {
        let mut y = base.clone();
        let mut prob = 1.0;
        for (bit, &v) in uncertain.iter().enumerate() {
            let c = config.node_churn(v);
            if mask >> bit & 1 == 1 {
                y[v] = 0;
                prob *= c;
            } else {
                prob *= 1.0 - c;
            }
        }
        let candidates: Vec<usize> = match treatment {
            Treatment::None => Vec::new(),
            Treatment::Node(v) if v >= n => return Err(Error::invalid(format!("node {v} out of range for n={n}"))),
            Treatment::Node(v) => vec![v].into_iter().filter(|&v| y[v] == 0).collect(),
            Treatment::Bin(b) if b >= config.partition.k() => {
                return Err(Error::invalid(format!("bin {b} out of range for K={}", config.partition.k())));
            }
            Treatment::Bin(b) => config.partition.members(b).iter().copied().filter(|&v| y[v] == 0).collect(),
        };
        if candidates.is_empty() {
            expected += prob * spread_mean(&y);
        } else {
            let share = prob / candidates.len() as f64;
            for v in candidates {
                y[v] = 1;
                expected += share * spread_mean(&y);
                y[v] = 0;
            }
        }
    }
    Ok(expected)
}

/// One logged trajectory: `y_0` followed by `(a_t, y_t)` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Panel {
    pub y0: Vec<u8>,
    pub records: Vec<PanelRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanelRecord {
    /// Realized treated node, `None` when no seed happened.
    pub action: Option<usize>,
    pub y: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    t: u64,
    y0: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    t: u64,
    a: Option<usize>,
    y: Vec<u8>,
}

impl Panel {
    /// Number of periods `T`.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n(&self) -> usize {
        self.y0.len()
    }

    /// Adoption vector at `t ∈ 0..=T`.
    pub fn y(&self, t: usize) -> &[u8] {
        if t == 0 {
            &self.y0
        } else {
            &self.records[t - 1].y
        }
    }

    /// Logged action of period `t ∈ 1..=T`.
    pub fn action(&self, t: usize) -> Option<usize> {
        self.records[t - 1].action
    }

    /// Sub-panel of periods `from..=to` (re-indexed so that `y(from-1)` becomes `y0`).
    pub fn window(&self, from: usize, to: usize) -> Result<Panel> {
        if from == 0 || from > to || to > self.len() {
            return Err(Error::invalid(format!("bad window {from}..={to} of {} periods", self.len())));
        }
        Ok(Panel { y0: self.y(from - 1).to_vec(), records: self.records[from - 1..to].to_vec() })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::invalid("panel with zero nodes"));
        }
        for (i, rec) in self.records.iter().enumerate() {
            if rec.y.len() != n {
                return Err(Error::invalid(format!("period {} has {} nodes, expected {n}", i + 1, rec.y.len())));
            }
            if let Some(a) = rec.action {
                if a >= n {
                    return Err(Error::invalid(format!("period {} treats node {a} >= {n}", i + 1)));
                }
            }
        }
        if let Some(bad) = self.records.iter().flat_map(|r| &r.y).chain(&self.y0).find(|&&v| v > 1) {
            return Err(Error::invalid(format!("non-binary adoption value {bad}")));
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        serde_json::to_writer(&mut writer, &HeaderLine { t: 0, y0: self.y0.clone() })?;
        writeln!(writer)?;
        for (i, rec) in self.records.iter().enumerate() {
            let line = RecordLine { t: i as u64 + 1, a: rec.action, y: rec.y.clone() };
            serde_json::to_writer(&mut writer, &line)?;
            writeln!(writer)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Panel> {
        let mut lines = reader.lines().enumerate().filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
        let (_, first) = lines.next().ok_or_else(|| Error::Parse { line: 1, message: "empty panel file".into() })?;
        let header: HeaderLine =
            serde_json::from_str(&first?).map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
        if header.t != 0 {
            return Err(Error::Parse { line: 1, message: "header must have t=0".into() });
        }
        let mut records = Vec::new();
        for (idx, line) in lines {
            let rec: RecordLine =
                serde_json::from_str(&line?).map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
            if rec.t as usize != records.len() + 1 {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected t={}, found t={}", records.len() + 1, rec.t),
                });
            }
            records.push(PanelRecord { action: rec.a, y: rec.y });
        }
        let panel = Panel { y0: header.y0, records };
        panel.validate()?;
        Ok(panel)
    }
}

/// Simulates `periods` steps under `logging_policy`, recording the realized
/// seeded node of every period.
pub fn generate_panel(
    config: &SisConfig,
    logging_policy: &Policy,
    periods: usize,
    seed: u64,
    y0: Option<Vec<u8>>,
) -> Result<Panel> {
    if periods == 0 {
        return Err(Error::invalid("panel needs at least one period"));
    }
    let n = config.graph.n();
    let y0 = y0.unwrap_or_else(|| vec![0; n]);
    if y0.len() != n {
        return Err(Error::invalid(format!("y0 has {} nodes, graph has {n}", y0.len())));
    }
    let mut state = SisState { adopted: y0.clone(), t: 0 };
    let mut records = Vec::with_capacity(periods);
    for t in 1..=periods as u64 {
        let period = PeriodRng::new(seed, t);
        let obs = Observation { y_prev: &state.adopted, t, state: None };
        let decision = logging_policy.act(&obs, &config.graph, &config.partition, &mut period.lane(Lane::Policy))?;
        let outcome = step(&state, config, decision.treatment(), &period)?;
        records.push(PanelRecord { action: outcome.seeded, y: outcome.state.adopted.clone() });
        state = outcome.state;
    }
    Ok(Panel { y0, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gen_sbm;

    fn path_config(spread: f64, churn: f64) -> SisConfig {
        let g = Graph::new(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let p = BinPartition::new(vec![0, 0, 1, 1]).unwrap();
        SisConfig::new(g, p, vec![spread; 2], vec![churn; 2]).unwrap()
    }

    #[test]
    fn expected_reward_matches_monte_carlo() {
        let g = Graph::new(4, [(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        let p = BinPartition::new(vec![0, 0, 1, 1]).unwrap();
        let cfg = SisConfig::new(g, p, vec![0.3, 0.6], vec![0.4, 0.2]).unwrap();
        let y = vec![1, 0, 1, 0];
        let exact = expected_reward(&cfg, &y, Treatment::Bin(1)).unwrap();
        let s = SisState { adopted: y, t: 0 };
        let runs = 40_000;
        let mc: f64 = (0..runs)
            .map(|seed| step(&s, &cfg, Treatment::Bin(1), &PeriodRng::new(seed, 1)).unwrap().reward)
            .sum::<f64>()
            / runs as f64;
        assert!((mc - exact).abs() < 0.01, "{mc} vs {exact}");
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward(&[1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(reward(&[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(reward(&[0, 0]).unwrap(), 0.0);
        assert!(reward(&[]).is_err());
    }

    #[test]
    fn no_action_on_empty_state_is_inert() {
        let cfg = path_config(0.9, 0.3);
        let s = SisState::susceptible(4);
        let out = step(&s, &cfg, Treatment::None, &PeriodRng::new(1, 1)).unwrap();
        assert_eq!(out.state.adopted, vec![0; 4]);
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.seeded, None);
    }

    #[test]
    fn certain_churn_clears_everything() {
        let cfg = path_config(0.0, 1.0);
        let s = SisState { adopted: vec![1; 4], t: 3 };
        let out = step(&s, &cfg, Treatment::None, &PeriodRng::new(1, 4)).unwrap();
        assert_eq!(out.state.adopted, vec![0; 4]);
        assert_eq!(out.state.t, 4);
    }

    #[test]
    fn two_adopted_neighbors_at_half_give_three_quarters() {
        // node 1 between adopted 0 and 2, which never churn
        let g = Graph::new(3, [(0, 1), (1, 2)]).unwrap();
        let p = BinPartition::new(vec![0, 1, 0]).unwrap();
        let cfg = SisConfig::new(g, p, vec![0.5, 0.5], vec![0.0, 0.0]).unwrap();
        let s = SisState { adopted: vec![1, 0, 1], t: 0 };
        let trials = 40_000;
        let hits = (0..trials)
            .filter(|&seed| step(&s, &cfg, Treatment::None, &PeriodRng::new(seed, 1)).unwrap().state.adopted[1] == 1)
            .count();
        let freq = hits as f64 / trials as f64;
        assert!((freq - 0.75).abs() < 4.0 * (0.75f64 * 0.25 / trials as f64).sqrt(), "{freq}");
    }

    #[test]
    fn seed_spreads_in_same_period() {
        let g = Graph::new(2, [(0, 1)]).unwrap();
        let p = BinPartition::new(vec![0, 1]).unwrap();
        let cfg = SisConfig::new(g, p, vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
        let out = step(&SisState::susceptible(2), &cfg, Treatment::Bin(0), &PeriodRng::new(0, 1)).unwrap();
        assert_eq!(out.seeded, Some(0));
        assert_eq!(out.state.adopted, vec![1, 1]);
    }

    #[test]
    fn saturated_bin_seeds_nothing() {
        let cfg = path_config(0.0, 0.0);
        let s = SisState { adopted: vec![1, 1, 0, 0], t: 0 };
        let out = step(&s, &cfg, Treatment::Bin(0), &PeriodRng::new(0, 1)).unwrap();
        assert_eq!(out.seeded, None);
        assert_eq!(out.state.adopted, vec![1, 1, 0, 0]);
        assert!(step(&s, &cfg, Treatment::Bin(2), &PeriodRng::new(0, 1)).is_err());
    }

    #[test]
    fn full_spread_reaches_everyone_within_diameter() {
        let cfg = path_config(1.0, 0.0);
        let mut s = SisState::susceptible(4);
        s = step(&s, &cfg, Treatment::Node(0), &PeriodRng::new(0, 1)).unwrap().state;
        for t in 2..=3 {
            s = step(&s, &cfg, Treatment::None, &PeriodRng::new(0, t)).unwrap().state;
        }
        assert_eq!(s.adopted, vec![1; 4]);
    }

    #[test]
    fn frozen_dynamics_panel_holds_exactly_the_seeds() {
        let (g, p) = gen_sbm(&[6, 6], 0.5, 0.1, 3).unwrap();
        let cfg = SisConfig::new(g, p, vec![0.0; 2], vec![0.0; 2]).unwrap();
        let panel = generate_panel(&cfg, &Policy::RandomBin, 5, 11, None).unwrap();
        let mut seeded = vec![0u8; 12];
        for rec in &panel.records {
            if let Some(a) = rec.action {
                seeded[a] = 1;
            }
            assert_eq!(rec.y, seeded);
        }
    }

    #[test]
    fn panel_generation_is_bit_exact() {
        let (g, p) = gen_sbm(&[10, 5], 0.3, 0.05, 1).unwrap();
        let cfg = SisConfig::new(g, p, vec![0.2, 0.3], vec![0.3, 0.2]).unwrap();
        let a = generate_panel(&cfg, &Policy::RandomBin, 1, 5, None).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, generate_panel(&cfg, &Policy::RandomBin, 1, 5, None).unwrap());
        let long = generate_panel(&cfg, &Policy::RandomBin, 30, 5, None).unwrap();
        assert_eq!(long, generate_panel(&cfg, &Policy::RandomBin, 30, 5, None).unwrap());
        assert!(generate_panel(&cfg, &Policy::RandomBin, 0, 5, None).is_err());
    }

    #[test]
    fn panel_jsonl_format() {
        let panel = Panel {
            y0: vec![0, 0],
            records: vec![
                PanelRecord { action: Some(1), y: vec![0, 1] },
                PanelRecord { action: None, y: vec![1, 1] },
            ],
        };
        let mut buf = Vec::new();
        panel.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "{\"t\":0,\"y0\":[0,0]}\n{\"t\":1,\"a\":1,\"y\":[0,1]}\n{\"t\":2,\"a\":null,\"y\":[1,1]}\n");
        assert_eq!(Panel::read_jsonl(buf.as_slice()).unwrap(), panel);
        assert!(Panel::read_jsonl("{\"t\":0,\"y0\":[0]}\n{\"t\":2,\"a\":null,\"y\":[1]}".as_bytes()).is_err());
        assert!(Panel::read_jsonl("{\"t\":0,\"y0\":[0]}\n{\"t\":1,\"a\":3,\"y\":[1]}".as_bytes()).is_err());
    }

    #[test]
    fn config_validation() {
        let g = Graph::new(2, [(0, 1)]).unwrap();
        let p = BinPartition::new(vec![0, 1]).unwrap();
        assert!(SisConfig::new(g.clone(), p.clone(), vec![0.1], vec![0.1, 0.1]).is_err());
        assert!(SisConfig::new(g, p, vec![0.1, 1.5], vec![0.1, 0.1]).is_err());
    }
}
