//! EM variable selection for the coupling matrix.
//!
//! The E-step turns the spike-and-slab prior into a per-coupling ridge
//! precision; the M-step is then an independent penalized logistic regression
//! per bin, solved by damped Newton.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dot, log_normal_density, sigmoid, IsingDesign, IsingParams, PriorSpec, N_BETA};
use crate::diffusion::Panel;
use crate::error::{Error, Result};
use crate::graph::{BinPartition, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmvsOptions {
    /// Stop when no coefficient moves more than this between iterations.
    pub tol: f64,
    pub max_iters: usize,
    pub newton_tol: f64,
    pub max_newton_steps: usize,
}

impl Default for EmvsOptions {
    fn default() -> Self {
        Self { tol: 1e-4, max_iters: 500, newton_tol: 1e-10, max_newton_steps: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmvsFit {
    pub params: IsingParams,
    /// Posterior slab probability of each coupling at the final iterate.
    pub inclusion: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Marginal log posterior after each iteration (index 0 is the start).
    pub objective_trace: Vec<f64>,
}

/// Log posterior with the mixture prior integrated over the indicators:
/// the quantity EM climbs.
pub fn log_posterior(design: &IsingDesign, params: &IsingParams, prior: &PriorSpec) -> Result<f64> {
    let weights: Vec<f64> = design.bin_sizes().iter().map(|&s| prior.inclusion_weight(s)).collect();
    let mut lp = design.log_likelihood(params)?;
    for k in 0..design.k() {
        for b in [params.beta0[k], params.beta1[k], params.beta2[k], params.beta3[k]] {
            lp += log_normal_density(b, prior.tau2);
        }
        for (m, &g) in params.gamma[k].iter().enumerate() {
            lp += prior.log_mixture_density(g, weights[m]);
        }
    }
    Ok(lp)
}

/// Ridge-penalized log-likelihood of one bin.
fn penalized(design: &IsingDesign, k: usize, coef: &[f64], precision: &[f64]) -> f64 {
    design.bin_log_likelihood(k, coef) - 0.5 * coef.iter().zip(precision).map(|(c, d)| d * c * c).sum::<f64>()
}

/// Maximizes the penalized bin objective from `start`.
fn newton_bin(design: &IsingDesign, k: usize, start: &[f64], precision: &[f64], opts: &EmvsOptions) -> Result<Vec<f64>> {
    let p = start.len();
    let mut coef = start.to_vec();
    let mut value = penalized(design, k, &coef, precision);
    for _ in 0..opts.max_newton_steps {
        let mut grad = vec![0.0; p];
        design.add_bin_gradient(k, &coef, &mut grad);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for row in design.rows(k) {
            let mu = sigmoid(dot(&coef, &row.x));
            let w = (row.adopted + row.not_adopted) * mu * (1.0 - mu);
            if w == 0.0 {
                continue;
            }
            for a in 0..p {
                let xa = row.x[a] * w;
                if xa == 0.0 {
                    continue;
                }
                for b in a..p {
                    hess[(a, b)] += xa * row.x[b];
                }
            }
        }
        for a in 0..p {
            grad[a] -= precision[a] * coef[a];
            hess[(a, a)] += precision[a];
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        let chol = hess
            .cholesky()
            .ok_or_else(|| Error::NonFinite(format!("Newton Hessian of bin {k} is not positive definite")))?;
        let step = chol.solve(&DVector::from_vec(grad));
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = coef.iter().zip(step.iter()).map(|(c, s)| c + scale * s).collect();
            let trial_value = penalized(design, k, &trial, precision);
            if trial_value.is_finite() && trial_value >= value - 1e-12 * value.abs().max(1.0) {
                coef = trial;
                value = trial_value;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        let moved = scale * step.amax();
        if !accepted || moved < opts.newton_tol {
            break;
        }
    }
    if coef.iter().all(|c| c.is_finite()) {
        Ok(coef)
    } else {
        Err(Error::NonFinite(format!("EMVS coefficients of bin {k}")))
    }
}

/// Runs EMVS on a panel of at least two periods.
pub fn fit_emvs(
    panel: &Panel,
    graph: &Graph,
    partition: &BinPartition,
    prior: &PriorSpec,
    opts: &EmvsOptions,
) -> Result<EmvsFit> {
    if panel.len() < 2 {
        return Err(Error::invalid("EMVS needs a panel with at least two periods"));
    }
    fit_emvs_design(&IsingDesign::from_panel(panel, graph, partition)?, prior, opts)
}

/// Runs EMVS from all-zero coefficients. A run that exhausts `max_iters`
/// returns its last iterate with `converged = false`.
pub fn fit_emvs_design(design: &IsingDesign, prior: &PriorSpec, opts: &EmvsOptions) -> Result<EmvsFit> {
    prior.validate()?;
    let k = design.k();
    let p = N_BETA + k;
    let weights: Vec<f64> = design.bin_sizes().iter().map(|&s| prior.inclusion_weight(s)).collect();
    let mut params = IsingParams::zeros(k);
    let mut trace = vec![log_posterior(design, &params, prior)?];
    let mut inclusion = vec![vec![0.0; k]; k];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        iterations += 1;
        for (row, gammas) in inclusion.iter_mut().zip(&params.gamma) {
            for (m, (incl, &g)) in row.iter_mut().zip(gammas).enumerate() {
                *incl = prior.inclusion_probability(g, weights[m]);
            }
        }
        let updated: Vec<Vec<f64>> = (0..k)
            .into_par_iter()
            .map(|b| {
                let mut precision = vec![1.0 / prior.tau2; p];
                for m in 0..k {
                    let incl = inclusion[b][m];
                    precision[N_BETA + m] = incl / prior.v1 + (1.0 - incl) / prior.v0;
                }
                newton_bin(design, b, &params.bin_coefficients(b), &precision, opts)
            })
            .collect::<Result<_>>()?;
        let next = IsingParams::from_flat(k, &updated.concat())?;
        let shift = params
            .to_flat()
            .iter()
            .zip(next.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        params = next;
        trace.push(log_posterior(design, &params, prior)?);
        if shift < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("EMVS stopped after {iterations} iterations without reaching tol {}", opts.tol);
    }
    for (row, gammas) in inclusion.iter_mut().zip(&params.gamma) {
        for (m, (incl, &g)) in row.iter_mut().zip(gammas).enumerate() {
            *incl = prior.inclusion_probability(g, weights[m]);
        }
    }
    Ok(EmvsFit { params, inclusion, iterations, converged, objective_trace: trace })
}
