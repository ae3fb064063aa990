//! Treatment policies behind one interface: topological baselines, learned
//! bin policies and their majority-vote ensemble.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{expected_reward, SisConfig, Treatment};
use crate::error::{Error, Result};
use crate::graph::{BinPartition, Graph};
use crate::ising::{IsingParams, QIsingState};
use crate::rl::{argmax, observe_state, PeviPolicy, QFunction, StateMode};
use crate::rng::Rng;

/// What a policy may look at before acting in period `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<'a> {
    pub y_prev: &'a [u8],
    pub t: u64,
    /// Precomputed state for learned policies that carry no fitted model.
    pub state: Option<QIsingState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub bin: usize,
    /// Node-level baselines force a specific node; it always lies in `bin`.
    pub node: Option<usize>,
}

impl Decision {
    pub fn treatment(&self) -> Treatment {
        match self.node {
            Some(v) => Treatment::Node(v),
            None => Treatment::Bin(self.bin),
        }
    }
}

/// Number of strictly higher-degree neighbors of every node.
pub fn lir_index(graph: &Graph) -> Vec<usize> {
    let deg = graph.degrees();
    (0..graph.n()).map(|v| graph.neighbors(v).iter().filter(|&&u| deg[u] > deg[v]).count()).collect()
}

/// Local leaders (index 0) by descending degree, then everyone else by
/// descending degree; ties by node id.
fn lir_schedule(graph: &Graph) -> Vec<usize> {
    let deg = graph.degrees();
    let li = lir_index(graph);
    let mut order: Vec<usize> = (0..graph.n()).collect();
    order.sort_by_key(|&v| (li[v] != 0, std::cmp::Reverse(deg[v]), v));
    order
}

/// A Q-network together with how it builds its state.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedQ {
    pub q: QFunction,
    pub params: Option<IsingParams>,
    pub mode: StateMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedPevi {
    pub policy: PeviPolicy,
    pub params: Option<IsingParams>,
    pub mode: StateMode,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    RandomBin,
    Degree,
    /// Round-robin over bins by index, highest-degree susceptible node within.
    DegreeBin,
    Lir { schedule: Vec<usize> },
    /// One-step lookahead under known dynamics; an oracle, not a deployable policy.
    GreedyMyopic(Box<SisConfig>),
    LearnedQ(Box<LearnedQ>),
    Pevi(Box<LearnedPevi>),
    Ensemble(Vec<Policy>),
}

fn resolve_state(
    params: Option<&IsingParams>,
    mode: StateMode,
    obs: &Observation<'_>,
    graph: &Graph,
    partition: &BinPartition,
) -> Result<QIsingState> {
    match (mode, params) {
        (StateMode::Observed, _) | (StateMode::QIsing, Some(_)) => {
            observe_state(mode, params, graph, partition, obs.y_prev)
        }
        (StateMode::QIsing, None) => obs.state.clone().ok_or(Error::MissingState),
    }
}

/// Highest-degree node among `candidates` that is still susceptible, falling
/// back to the highest-degree candidate when all have adopted.
fn top_degree(graph: &Graph, candidates: &[usize], y_prev: &[u8]) -> Option<usize> {
    let pick = |filter: &dyn Fn(usize) -> bool| {
        candidates
            .iter()
            .copied()
            .filter(|&v| filter(v))
            .min_by_key(|&v| (std::cmp::Reverse(graph.neighbors(v).len()), v))
    };
    pick(&|v| y_prev[v] == 0).or_else(|| pick(&|_| true))
}

impl Policy {
    pub fn lir(graph: &Graph) -> Self {
        Policy::Lir { schedule: lir_schedule(graph) }
    }

    pub fn greedy_myopic(config: SisConfig) -> Self {
        Policy::GreedyMyopic(Box::new(config))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Policy::RandomBin => "random_bin",
            Policy::Degree => "degree",
            Policy::DegreeBin => "degree_bin",
            Policy::Lir { .. } => "lir",
            Policy::GreedyMyopic(_) => "greedy_myopic",
            Policy::LearnedQ(_) => "learned_q",
            Policy::Pevi(_) => "pevi",
            Policy::Ensemble(_) => "ensemble",
        }
    }

    pub fn act(&self, obs: &Observation<'_>, graph: &Graph, partition: &BinPartition, rng: &mut Rng) -> Result<Decision> {
        let n = graph.n();
        if obs.y_prev.len() != n || partition.n() != n {
            return Err(Error::invalid(format!(
                "observation has {} nodes, graph {n}, partition {}",
                obs.y_prev.len(),
                partition.n()
            )));
        }
        let k = partition.k();
        let forced = |v: usize| Decision { bin: partition.bin_of(v), node: Some(v) };
        match self {
            Policy::RandomBin => Ok(Decision { bin: rng.random_range(0..k), node: None }),
            Policy::Degree => {
                let all: Vec<usize> = (0..n).collect();
                Ok(forced(top_degree(graph, &all, obs.y_prev).ok_or_else(|| Error::invalid("empty graph"))?))
            }
            Policy::DegreeBin => {
                let bin = (obs.t.saturating_sub(1) % k as u64) as usize;
                let v = top_degree(graph, partition.members(bin), obs.y_prev).expect("bins are nonempty");
                Ok(forced(v))
            }
            Policy::Lir { schedule } => {
                if schedule.len() != n {
                    return Err(Error::invalid("LIR schedule was built for a different graph"));
                }
                let v = schedule.iter().copied().find(|&v| obs.y_prev[v] == 0).unwrap_or(schedule[0]);
                Ok(forced(v))
            }
            Policy::GreedyMyopic(config) => {
                if config.graph().n() != n || config.partition().k() != k {
                    return Err(Error::invalid("greedy oracle dynamics do not match the graph"));
                }
                let values: Vec<f64> = (0..k)
                    .map(|b| expected_reward(config, obs.y_prev, Treatment::Bin(b)))
                    .collect::<Result<_>>()?;
                Ok(Decision { bin: argmax(&values), node: None })
            }
            Policy::LearnedQ(agent) => {
                let state = resolve_state(agent.params.as_ref(), agent.mode, obs, graph, partition)?;
                check_width(state.k(), k)?;
                Ok(Decision { bin: agent.q.greedy(&state.to_vec())?, node: None })
            }
            Policy::Pevi(agent) => {
                let state = resolve_state(agent.params.as_ref(), agent.mode, obs, graph, partition)?;
                check_width(state.k(), k)?;
                let horizon = agent.policy.horizon() as u64;
                let h = (obs.t.saturating_sub(1) % horizon) as usize + 1;
                Ok(Decision { bin: agent.policy.greedy(h, &state.to_vec())?, node: None })
            }
            Policy::Ensemble(members) => {
                if members.is_empty() {
                    return Err(Error::invalid("ensemble without members"));
                }
                let mut votes = vec![0.0; k];
                for member in members {
                    votes[member.act(obs, graph, partition, rng)?.bin] += 1.0;
                }
                Ok(Decision { bin: argmax(&votes), node: None })
            }
        }
    }
}

fn check_width(state_k: usize, k: usize) -> Result<()> {
    if state_k != k {
        return Err(Error::invalid(format!("state covers {state_k} bins, partition has {k}")));
    }
    Ok(())
}

/// Serializable policy description, `{"kind": ..., "config": {...}}`.
/// Model paths are resolved against a base directory at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    RandomBin {},
    Degree {},
    DegreeBin {},
    Lir {},
    GreedyMyopic {
        spread: Vec<f64>,
        churn: Vec<f64>,
    },
    LearnedQ {
        model: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        params: Option<PathBuf>,
        #[serde(default)]
        state: StateMode,
    },
    Pevi {
        model: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        params: Option<PathBuf>,
        #[serde(default)]
        state: StateMode,
    },
    Ensemble {
        members: Vec<PolicySpec>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifact { path: path.to_path_buf(), reason: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| Error::MissingArtifact { path: path.to_path_buf(), reason: e.to_string() })
}

impl PolicySpec {
    pub fn kind(&self) -> &'static str {
        match self {
            PolicySpec::RandomBin {} => "random_bin",
            PolicySpec::Degree {} => "degree",
            PolicySpec::DegreeBin {} => "degree_bin",
            PolicySpec::Lir {} => "lir",
            PolicySpec::GreedyMyopic { .. } => "greedy_myopic",
            PolicySpec::LearnedQ { .. } => "learned_q",
            PolicySpec::Pevi { .. } => "pevi",
            PolicySpec::Ensemble { .. } => "ensemble",
        }
    }

    pub fn load(&self, graph: &Graph, partition: &BinPartition, base: &Path) -> Result<Policy> {
        let params = |p: &Option<PathBuf>| -> Result<Option<IsingParams>> {
            p.as_ref()
                .map(|p| {
                    let params: IsingParams = read_json(&base.join(p))?;
                    params.validate()?;
                    Ok(params)
                })
                .transpose()
        };
        Ok(match self {
            PolicySpec::RandomBin {} => Policy::RandomBin,
            PolicySpec::Degree {} => Policy::Degree,
            PolicySpec::DegreeBin {} => Policy::DegreeBin,
            PolicySpec::Lir {} => Policy::lir(graph),
            PolicySpec::GreedyMyopic { spread, churn } => {
                Policy::greedy_myopic(SisConfig::new(graph.clone(), partition.clone(), spread.clone(), churn.clone())?)
            }
            PolicySpec::LearnedQ { model, params: p, state } => Policy::LearnedQ(Box::new(LearnedQ {
                q: read_json(&base.join(model))?,
                params: params(p)?,
                mode: *state,
            })),
            PolicySpec::Pevi { model, params: p, state } => Policy::Pevi(Box::new(LearnedPevi {
                policy: read_json(&base.join(model))?,
                params: params(p)?,
                mode: *state,
            })),
            PolicySpec::Ensemble { members } => {
                Policy::Ensemble(members.iter().map(|m| m.load(graph, partition, base)).collect::<Result<_>>()?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn star(n: usize) -> Graph {
        Graph::new(n, (1..n).map(|v| (0, v))).unwrap()
    }

    fn obs(y: &[u8], t: u64) -> Observation<'_> {
        Observation { y_prev: y, t, state: None }
    }

    #[test]
    fn degree_examples() {
        let g = star(5);
        let p = BinPartition::new(vec![0, 0, 1, 1, 1]).unwrap();
        let mut rng = rng_from_seed(0);
        let d = Policy::Degree.act(&obs(&[0; 5], 1), &g, &p, &mut rng).unwrap();
        assert_eq!(d, Decision { bin: 0, node: Some(0) });
        // center adopted: next-highest is the lowest-id leaf
        let d = Policy::Degree.act(&obs(&[1, 0, 0, 0, 0], 1), &g, &p, &mut rng).unwrap();
        assert_eq!(d.node, Some(1));
    }

    #[test]
    fn degree_bin_rotates() {
        let g = star(5);
        let p = BinPartition::new(vec![0, 0, 1, 1, 1]).unwrap();
        let mut rng = rng_from_seed(0);
        let bins: Vec<usize> =
            (1..=4).map(|t| Policy::DegreeBin.act(&obs(&[0; 5], t), &g, &p, &mut rng).unwrap().bin).collect();
        assert_eq!(bins, vec![0, 1, 0, 1]);
        let d = Policy::DegreeBin.act(&obs(&[0, 0, 1, 0, 0], 2), &g, &p, &mut rng).unwrap();
        assert_eq!(d.node, Some(3));
    }

    #[test]
    fn lir_examples() {
        assert_eq!(lir_index(&star(5)), vec![0, 1, 1, 1, 1]);
        let cycle = Graph::new(4, [(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        assert_eq!(lir_index(&cycle), vec![0; 4]);
        let path = Graph::new(3, [(0, 1), (1, 2)]).unwrap();
        assert_eq!(lir_index(&path), vec![1, 0, 1]);

        let p = BinPartition::single(3).unwrap();
        let policy = Policy::lir(&path);
        let mut rng = rng_from_seed(0);
        assert_eq!(policy.act(&obs(&[0, 0, 0], 1), &path, &p, &mut rng).unwrap().node, Some(1));
        assert_eq!(policy.act(&obs(&[0, 1, 0], 1), &path, &p, &mut rng).unwrap().node, Some(0));
    }

    #[test]
    fn ensemble_majority() {
        let g = star(4);
        let p = BinPartition::new(vec![0, 1, 2, 2]).unwrap();
        let mut rng = rng_from_seed(0);
        // at t=3 DegreeBin picks bin 2; only node 0 is susceptible
        let (t, y) = (3, vec![0, 1, 1, 1]);
        let members = vec![Policy::DegreeBin, Policy::DegreeBin, Policy::Degree];
        let d = Policy::Ensemble(members).act(&obs(&y, t), &g, &p, &mut rng).unwrap();
        // DegreeBin votes bin 2 twice, Degree votes bin 0 once
        assert_eq!(d, Decision { bin: 2, node: None });
        let single = Policy::Ensemble(vec![Policy::DegreeBin]);
        for t in 1..=6 {
            let a = single.act(&obs(&y, t), &g, &p, &mut rng).unwrap().bin;
            let b = Policy::DegreeBin.act(&obs(&y, t), &g, &p, &mut rng).unwrap().bin;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn learned_without_state_is_an_error() {
        let g = star(3);
        let p = BinPartition::new(vec![0, 1, 1]).unwrap();
        let q = QFunction::new(4, &[3], 2, 1).unwrap();
        let policy = Policy::LearnedQ(Box::new(LearnedQ { q, params: None, mode: StateMode::QIsing }));
        let mut rng = rng_from_seed(0);
        assert!(matches!(policy.act(&obs(&[0; 3], 1), &g, &p, &mut rng), Err(Error::MissingState)));
        let with_state = Observation {
            y_prev: &[0; 3],
            t: 1,
            state: Some(QIsingState { l0_bar: vec![0.1, 0.2], y_bar: vec![0.0, 0.0] }),
        };
        assert!(policy.act(&with_state, &g, &p, &mut rng).unwrap().bin < 2);
    }

    #[test]
    fn spec_json_shape() {
        let spec = PolicySpec::Ensemble {
            members: vec![
                PolicySpec::RandomBin {},
                PolicySpec::LearnedQ { model: "q0.json".into(), params: None, state: StateMode::QIsing },
            ],
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            json,
            r#"{"kind":"ensemble","config":{"members":[{"kind":"random_bin","config":{}},{"kind":"learned_q","config":{"model":"q0.json","state":"q_ising"}}]}}"#
        );
        assert_eq!(serde_json::from_str::<PolicySpec>(&json).unwrap(), spec);
        assert!(serde_json::from_str::<PolicySpec>(r#"{"kind":"degree","config":{"x":1}}"#).is_err());
    }

    #[test]
    fn missing_model_file_is_reported() {
        let g = star(3);
        let p = BinPartition::single(3).unwrap();
        let spec = PolicySpec::LearnedQ { model: "nope.json".into(), params: None, state: StateMode::QIsing };
        let err = spec.load(&g, &p, Path::new("/nonexistent")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { .. }));
    }
}
