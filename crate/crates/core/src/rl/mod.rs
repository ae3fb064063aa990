//! Offline policy learning on Q-Ising states.

mod cql;
mod pevi;

use serde::{Deserialize, Serialize};

pub use cql::{cql_loss, cql_loss_parts, train_cql, train_cql_traced, CqlHyper, CqlLoss, QFunction, TrainSummary};
pub use pevi::{
    bonus_beta_from_radius, pevi_bonus, pevi_uncertainty, stage_datasets, train_pevi, FeatureMap, PeviPolicy, Sample,
};

use crate::diffusion::{reward, Panel};
use crate::error::{Error, Result};
use crate::graph::{BinPartition, Graph};
use crate::ising::{build_state, state_from_params, IsingParams, QIsingState};

/// How the policy-visible state is formed from a lagged adoption vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateMode {
    /// Bin means of the fitted no-intervention beliefs and of lagged adoption.
    #[default]
    QIsing,
    /// Observed bin adoption twice, for the ablation without the structural
    /// model. Keeps the input width at `2K`.
    Observed,
}

/// State for `y_prev` under `mode`. `params` is ignored in observed mode.
pub fn observe_state(
    mode: StateMode,
    params: Option<&IsingParams>,
    graph: &Graph,
    partition: &BinPartition,
    y_prev: &[u8],
) -> Result<QIsingState> {
    match mode {
        StateMode::QIsing => {
            let params = params.ok_or(Error::MissingState)?;
            state_from_params(params, graph, partition, y_prev)
        }
        StateMode::Observed => {
            let y: Vec<f64> = y_prev.iter().map(|&v| v as f64).collect();
            let s = build_state(&y, y_prev, partition)?;
            Ok(QIsingState { l0_bar: s.y_bar.clone(), y_bar: s.y_bar })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Period whose action and outcome this transition records.
    pub t: usize,
    pub s: QIsingState,
    pub b: usize,
    pub r: f64,
    pub s_next: QIsingState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSet {
    pub transitions: Vec<Transition>,
    /// Periods dropped because nothing was seeded.
    pub skipped: usize,
    /// Periods in the source panel.
    pub periods: usize,
}

/// One transition per panel period with a seeded node: the state before the
/// period, the treated node's bin, the period's adoption rate and the state
/// after it.
pub fn build_transitions(
    panel: &Panel,
    params: Option<&IsingParams>,
    graph: &Graph,
    partition: &BinPartition,
    mode: StateMode,
) -> Result<TransitionSet> {
    panel.validate()?;
    if panel.n() != graph.n() || partition.n() != graph.n() {
        return Err(Error::invalid("panel, graph and partition sizes differ"));
    }
    let states: Vec<QIsingState> =
        (0..=panel.len()).map(|t| observe_state(mode, params, graph, partition, panel.y(t))).collect::<Result<_>>()?;
    let mut transitions = Vec::new();
    let mut skipped = 0;
    for t in 1..=panel.len() {
        let Some(node) = panel.action(t) else {
            skipped += 1;
            continue;
        };
        transitions.push(Transition {
            t,
            s: states[t - 1].clone(),
            b: partition.bin_of(node),
            r: reward(panel.y(t))?,
            s_next: states[t].clone(),
        });
    }
    if transitions.is_empty() {
        return Err(Error::invalid(format!("no transitions: all {skipped} periods lack a seeded node")));
    }
    if skipped > 0 {
        log::info!("skipped {skipped} periods without a seeded node");
    }
    Ok(TransitionSet { transitions, skipped, periods: panel.len() })
}

/// Lowest-index argmax.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
