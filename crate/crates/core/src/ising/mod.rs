//! Bin-level dynamic Ising model.
//!
//! A node `i` in bin `k` adopts at period `t` with probability `σ(η)` where
//!
//! ```text
//! η = β0[k] + β1[k]·1{a_t = i} + β2[k]·y_{i,t−1} + β3[k]·1{a_t ∈ N(i)}
//!     + Σ_{j ∈ N(i)} γ[k][bin(j)]·y_{j,t−1}
//! ```
//!
//! Conditional on the previous period and the action, nodes are independent,
//! so the panel likelihood factorizes into one logistic regression per bin.
//! [`IsingDesign`] exploits this: it collapses the panel into distinct
//! covariate patterns per bin with adoption/non-adoption counts.

mod emvs;
mod hmc;

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use emvs::{fit_emvs, fit_emvs_design, log_posterior, EmvsFit, EmvsOptions};
pub use hmc::{
    hamiltonian, leapfrog, sample_posterior, sample_posterior_with, HmcOptions, LogPosterior, PosteriorDraws, Target,
};

use crate::diffusion::{Panel, PanelRecord};
use crate::error::{Error, Result};
use crate::graph::{BinPartition, Graph};
use crate::rng::rng_from_seed;

/// Clamp applied to every linear predictor before exponentiation.
pub const ETA_CLAMP: f64 = 35.0;

/// Number of β coefficients per bin (intercept, direct treatment,
/// persistence, neighbor treatment).
pub const N_BETA: usize = 4;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-ETA_CLAMP, ETA_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

/// `log(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Bin-level coefficients. `gamma[k][m]` is the pull of an adopted neighbor
/// in bin `m` on a node in bin `k`; it need not be symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsingParams {
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub beta3: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
}

impl IsingParams {
    pub fn zeros(k: usize) -> Self {
        Self {
            beta0: vec![0.0; k],
            beta1: vec![0.0; k],
            beta2: vec![0.0; k],
            beta3: vec![0.0; k],
            gamma: vec![vec![0.0; k]; k],
        }
    }

    pub fn k(&self) -> usize {
        self.beta0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::invalid("parameters for zero bins"));
        }
        if [&self.beta1, &self.beta2, &self.beta3].iter().any(|b| b.len() != k)
            || self.gamma.len() != k
            || self.gamma.iter().any(|row| row.len() != k)
        {
            return Err(Error::invalid("inconsistent parameter dimensions"));
        }
        if !self.to_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Ising parameter".into()));
        }
        Ok(())
    }

    /// Coefficients of bin `k` in design order `[β0, β1, β2, β3, γ_k·]`.
    pub fn bin_coefficients(&self, k: usize) -> Vec<f64> {
        let mut out = vec![self.beta0[k], self.beta1[k], self.beta2[k], self.beta3[k]];
        out.extend_from_slice(&self.gamma[k]);
        out
    }

    /// Bin-major concatenation of [`Self::bin_coefficients`]; length `K(4+K)`.
    pub fn to_flat(&self) -> Vec<f64> {
        (0..self.k()).flat_map(|k| self.bin_coefficients(k)).collect()
    }

    pub fn from_flat(k: usize, flat: &[f64]) -> Result<Self> {
        let p = N_BETA + k;
        if flat.len() != k * p {
            return Err(Error::invalid(format!("expected {} coefficients, got {}", k * p, flat.len())));
        }
        let mut out = Self::zeros(k);
        for (b, chunk) in flat.chunks(p).enumerate() {
            out.beta0[b] = chunk[0];
            out.beta1[b] = chunk[1];
            out.beta2[b] = chunk[2];
            out.beta3[b] = chunk[3];
            out.gamma[b].copy_from_slice(&chunk[N_BETA..]);
        }
        Ok(out)
    }
}

/// Spike-and-slab prior on γ and Gaussian prior on the β coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub v0: f64,
    pub v1: f64,
    pub c: f64,
    pub tau2: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { v0: 0.01, v1: 10.0, c: 1.0, tau2: 10.0 }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.v0 > 0.0 && self.v0 < self.v1) {
            return Err(Error::invalid(format!("need 0 < v0 < v1, got v0={} v1={}", self.v0, self.v1)));
        }
        if !(self.c > 0.0 && self.tau2 > 0.0) {
            return Err(Error::invalid("c and tau2 must be positive"));
        }
        Ok(())
    }

    /// Prior inclusion rate for couplings out of a source bin of this size.
    pub fn inclusion_weight(&self, source_bin_size: usize) -> f64 {
        (self.c / source_bin_size as f64).min(1.0)
    }

    /// Posterior probability that a coupling of value `gamma` comes from the
    /// slab, given prior inclusion rate `w`.
    pub fn inclusion_probability(&self, gamma: f64, w: f64) -> f64 {
        if w >= 1.0 {
            return 1.0;
        }
        if w <= 0.0 {
            return 0.0;
        }
        let slab = w.ln() + log_normal_density(gamma, self.v1);
        let spike = (1.0 - w).ln() + log_normal_density(gamma, self.v0);
        1.0 / (1.0 + (spike - slab).exp())
    }

    /// `log[w N(γ; 0, v1) + (1 − w) N(γ; 0, v0)]`.
    pub fn log_mixture_density(&self, gamma: f64, w: f64) -> f64 {
        let slab = if w > 0.0 { w.ln() + log_normal_density(gamma, self.v1) } else { f64::NEG_INFINITY };
        let spike = if w < 1.0 { (1.0 - w).ln() + log_normal_density(gamma, self.v0) } else { f64::NEG_INFINITY };
        let hi = slab.max(spike);
        hi + ((slab - hi).exp() + (spike - hi).exp()).ln()
    }
}

pub(crate) fn log_normal_density(x: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * x * x / var
}

/// Integer covariate pattern of one node-period: `[1, treated, y_prev,
/// neighbor treated, adopted-neighbor count per bin...]`.
fn covariates(
    graph: &Graph,
    partition: &BinPartition,
    y_prev: &[u8],
    action: Option<usize>,
    node: usize,
) -> Vec<u32> {
    let k = partition.k();
    let mut x = vec![0u32; N_BETA + k];
    x[0] = 1;
    x[1] = (action == Some(node)) as u32;
    x[2] = y_prev[node] as u32;
    x[3] = action.is_some_and(|a| a != node && graph.has_edge(node, a)) as u32;
    for &j in graph.neighbors(node) {
        if y_prev[j] == 1 {
            x[N_BETA + partition.bin_of(j)] += 1;
        }
    }
    x
}

fn check_inputs(params: &IsingParams, graph: &Graph, partition: &BinPartition, y_prev: &[u8]) -> Result<()> {
    if params.k() != partition.k() {
        return Err(Error::invalid(format!("params have K={}, partition K={}", params.k(), partition.k())));
    }
    if graph.n() != partition.n() || y_prev.len() != graph.n() {
        return Err(Error::invalid("graph, partition and adoption vector sizes differ"));
    }
    Ok(())
}

fn dot_counts(coef: &[f64], x: &[u32]) -> f64 {
    coef.iter().zip(x).map(|(c, &v)| c * v as f64).sum()
}

/// Linear predictor of `node` given the previous adoption vector and the
/// treated node (`None` zeroes both treatment indicators).
pub fn linear_predictor(
    params: &IsingParams,
    graph: &Graph,
    partition: &BinPartition,
    y_prev: &[u8],
    action: Option<usize>,
    node: usize,
) -> Result<f64> {
    check_inputs(params, graph, partition, y_prev)?;
    if node >= graph.n() {
        return Err(Error::invalid(format!("node {node} out of range for n={}", graph.n())));
    }
    let x = covariates(graph, partition, y_prev, action, node);
    Ok(dot_counts(&params.bin_coefficients(partition.bin_of(node)), &x))
}

/// One distinct covariate pattern with its outcome counts.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DesignRow {
    pub x: Vec<f64>,
    pub adopted: f64,
    pub not_adopted: f64,
}

/// Panel collapsed to per-bin logistic-regression rows.
#[derive(Debug, Clone, PartialEq)]
pub struct IsingDesign {
    k: usize,
    bin_sizes: Vec<usize>,
    bins: Vec<Vec<DesignRow>>,
    observations: usize,
}

impl IsingDesign {
    pub fn from_panel(panel: &Panel, graph: &Graph, partition: &BinPartition) -> Result<Self> {
        panel.validate()?;
        if panel.is_empty() {
            return Err(Error::invalid("panel has no periods"));
        }
        if panel.n() != graph.n() || partition.n() != graph.n() {
            return Err(Error::invalid("panel, graph and partition sizes differ"));
        }
        let k = partition.k();
        let mut tables: Vec<BTreeMap<Vec<u32>, (u64, u64)>> = vec![BTreeMap::new(); k];
        for t in 1..=panel.len() {
            let y_prev = panel.y(t - 1);
            let y = panel.y(t);
            let action = panel.action(t);
            for node in 0..graph.n() {
                let x = covariates(graph, partition, y_prev, action, node);
                let entry = tables[partition.bin_of(node)].entry(x).or_insert((0, 0));
                if y[node] == 1 {
                    entry.0 += 1;
                } else {
                    entry.1 += 1;
                }
            }
        }
        let bins = tables
            .into_iter()
            .map(|table| {
                table
                    .into_iter()
                    .map(|(x, (pos, neg))| DesignRow {
                        x: x.into_iter().map(f64::from).collect(),
                        adopted: pos as f64,
                        not_adopted: neg as f64,
                    })
                    .collect()
            })
            .collect();
        Ok(Self { k, bin_sizes: partition.sizes(), bins, observations: panel.len() * graph.n() })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Coefficients per bin, `4 + K`.
    pub fn bin_dim(&self) -> usize {
        N_BETA + self.k
    }

    pub fn bin_sizes(&self) -> &[usize] {
        &self.bin_sizes
    }

    /// Node-period observations covered.
    pub fn observations(&self) -> usize {
        self.observations
    }

    pub(crate) fn rows(&self, k: usize) -> &[DesignRow] {
        &self.bins[k]
    }

    /// Log-likelihood contribution of bin `k`.
    pub(crate) fn bin_log_likelihood(&self, k: usize, coef: &[f64]) -> f64 {
        self.bins[k]
            .iter()
            .map(|row| {
                let eta = dot(coef, &row.x).clamp(-ETA_CLAMP, ETA_CLAMP);
                row.adopted * eta - (row.adopted + row.not_adopted) * softplus(eta)
            })
            .sum()
    }

    /// Adds the log-likelihood gradient of bin `k` into `grad`.
    pub(crate) fn add_bin_gradient(&self, k: usize, coef: &[f64], grad: &mut [f64]) {
        for row in &self.bins[k] {
            let p = sigmoid(dot(coef, &row.x));
            let resid = row.adopted - (row.adopted + row.not_adopted) * p;
            for (g, x) in grad.iter_mut().zip(&row.x) {
                *g += resid * x;
            }
        }
    }

    pub fn log_likelihood(&self, params: &IsingParams) -> Result<f64> {
        if params.k() != self.k {
            return Err(Error::invalid("parameter K does not match design"));
        }
        Ok((0..self.k).map(|k| self.bin_log_likelihood(k, &params.bin_coefficients(k))).sum())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Panel log-likelihood `Σ_i Σ_t [y η − log(1 + e^η)]`.
pub fn log_likelihood(params: &IsingParams, panel: &Panel, graph: &Graph, partition: &BinPartition) -> Result<f64> {
    IsingDesign::from_panel(panel, graph, partition)?.log_likelihood(params)
}

/// Per-node adoption probability with both treatment indicators off.
pub fn belief_no_intervention(
    params: &IsingParams,
    graph: &Graph,
    partition: &BinPartition,
    y_prev: &[u8],
) -> Result<Vec<f64>> {
    check_inputs(params, graph, partition, y_prev)?;
    let coefs: Vec<Vec<f64>> = (0..params.k()).map(|k| params.bin_coefficients(k)).collect();
    Ok((0..graph.n())
        .map(|node| {
            let x = covariates(graph, partition, y_prev, None, node);
            sigmoid(dot_counts(&coefs[partition.bin_of(node)], &x))
        })
        .collect())
}

/// Bin means of the no-intervention beliefs and of the lagged adoptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QIsingState {
    pub l0_bar: Vec<f64>,
    pub y_bar: Vec<f64>,
}

impl QIsingState {
    pub fn k(&self) -> usize {
        self.l0_bar.len()
    }

    /// `(l̄⁰, ȳ)` concatenated, length `2K`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.l0_bar.iter().chain(&self.y_bar).copied().collect()
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.len() % 2 != 0 {
            return Err(Error::invalid("state vector must have even, nonzero length"));
        }
        let k = values.len() / 2;
        Ok(Self { l0_bar: values[..k].to_vec(), y_bar: values[k..].to_vec() })
    }
}

pub fn build_state(l0: &[f64], y_prev: &[u8], partition: &BinPartition) -> Result<QIsingState> {
    if l0.len() != partition.n() || y_prev.len() != partition.n() {
        return Err(Error::invalid("belief and adoption vectors must cover every node"));
    }
    let k = partition.k();
    let mut l0_bar = vec![0.0; k];
    let mut y_bar = vec![0.0; k];
    for b in 0..k {
        let members = partition.members(b);
        let size = members.len() as f64;
        l0_bar[b] = members.iter().map(|&v| l0[v]).sum::<f64>() / size;
        y_bar[b] = members.iter().map(|&v| y_prev[v] as f64).sum::<f64>() / size;
    }
    Ok(QIsingState { l0_bar, y_bar })
}

/// Belief followed by aggregation: the state a learned policy sees before
/// acting on `y_prev`.
pub fn state_from_params(
    params: &IsingParams,
    graph: &Graph,
    partition: &BinPartition,
    y_prev: &[u8],
) -> Result<QIsingState> {
    let l0 = belief_no_intervention(params, graph, partition, y_prev)?;
    build_state(&l0, y_prev, partition)
}

/// Rank AUC of weighted scores: `P(score⁺ > score⁻) + ½ P(score⁺ = score⁻)`.
/// Each item is `(score, positive weight, negative weight)`.
pub fn weighted_auc(items: &[(f64, f64, f64)]) -> Result<f64> {
    let mut sorted: Vec<(f64, f64, f64)> = items.to_vec();
    if sorted.iter().any(|it| !it.0.is_finite()) {
        return Err(Error::NonFinite("AUC score".into()));
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_pos: f64 = sorted.iter().map(|it| it.1).sum();
    let total_neg: f64 = sorted.iter().map(|it| it.2).sum();
    if total_pos <= 0.0 || total_neg <= 0.0 {
        return Err(Error::Undefined("AUC needs both outcome classes".into()));
    }
    let mut neg_below = 0.0;
    let mut concordant = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0.0, 0.0);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            pos += sorted[j].1;
            neg += sorted[j].2;
            j += 1;
        }
        concordant += pos * (neg_below + 0.5 * neg);
        neg_below += neg;
        i = j;
    }
    Ok(concordant / (total_pos * total_neg))
}

/// Unweighted AUC of scores against binary labels.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let items: Vec<_> = scores.iter().zip(labels).map(|(&s, &l)| (s, l as u8 as f64, (!l) as u8 as f64)).collect();
    weighted_auc(&items)
}

/// AUC of one-step-ahead predictions `σ(η_{i,t})`, pooled over nodes and
/// periods of the hold-out panel.
pub fn one_step_auc(params: &IsingParams, holdout: &Panel, graph: &Graph, partition: &BinPartition) -> Result<f64> {
    let design = IsingDesign::from_panel(holdout, graph, partition)?;
    if params.k() != design.k() {
        return Err(Error::invalid("parameter K does not match partition"));
    }
    let mut items = Vec::new();
    for k in 0..design.k() {
        let coef = params.bin_coefficients(k);
        for row in design.rows(k) {
            items.push((sigmoid(dot(&coef, &row.x)), row.adopted, row.not_adopted));
        }
    }
    weighted_auc(&items)
}

/// Simulates a panel directly from dynamic-Ising dynamics. Each period a
/// uniformly random bin is chosen and a uniformly random member treated.
pub fn simulate_panel(
    params: &IsingParams,
    graph: &Graph,
    partition: &BinPartition,
    periods: usize,
    seed: u64,
) -> Result<Panel> {
    params.validate()?;
    let n = graph.n();
    check_inputs(params, graph, partition, &vec![0; n])?;
    let mut rng = rng_from_seed(seed);
    let coefs: Vec<Vec<f64>> = (0..params.k()).map(|k| params.bin_coefficients(k)).collect();
    let mut y = vec![0u8; n];
    let mut records = Vec::with_capacity(periods);
    for _ in 0..periods {
        let bin = rng.random_range(0..partition.k());
        let members = partition.members(bin);
        let action = members[rng.random_range(0..members.len())];
        let next: Vec<u8> = (0..n)
            .map(|node| {
                let x = covariates(graph, partition, &y, Some(action), node);
                let p = sigmoid(dot_counts(&coefs[partition.bin_of(node)], &x));
                (rng.random::<f64>() < p) as u8
            })
            .collect();
        records.push(PanelRecord { action: Some(action), y: next.clone() });
        y = next;
    }
    Ok(Panel { y0: vec![0; n], records })
}
