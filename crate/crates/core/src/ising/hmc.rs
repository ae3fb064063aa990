//! Hamiltonian Monte Carlo over the full coefficient vector.
//!
//! Fixed-length leapfrog trajectories with a diagonal mass matrix. Tuning
//! adapts the step size by dual averaging toward a target acceptance rate and
//! estimates the inverse mass from a middle window of warm-up draws.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{IsingDesign, IsingParams, PriorSpec, N_BETA};
use crate::diffusion::Panel;
use crate::error::{Error, Result};
use crate::graph::{BinPartition, Graph};
use crate::rng::{rng_from_seed, Rng};

/// A differentiable log density.
pub trait Target {
    fn dim(&self) -> usize;
    /// Returns `log p(q)` and overwrites `grad` with its gradient.
    fn log_density(&self, q: &[f64], grad: &mut [f64]) -> f64;
}

/// Log posterior of the flattened coefficients (see
/// [`IsingParams::to_flat`]) under the mixture prior.
pub struct LogPosterior<'a> {
    design: &'a IsingDesign,
    prior: PriorSpec,
    weights: Vec<f64>,
}

impl<'a> LogPosterior<'a> {
    pub fn new(design: &'a IsingDesign, prior: PriorSpec) -> Result<Self> {
        prior.validate()?;
        let weights = design.bin_sizes().iter().map(|&s| prior.inclusion_weight(s)).collect();
        Ok(Self { design, prior, weights })
    }

    pub fn value_and_gradient(&self, q: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; q.len()];
        let value = self.log_density(q, &mut grad);
        (value, grad)
    }
}

impl Target for LogPosterior<'_> {
    fn dim(&self) -> usize {
        self.design.k() * self.design.bin_dim()
    }

    fn log_density(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let p = self.design.bin_dim();
        let mut value = 0.0;
        for (k, (coef, g)) in q.chunks(p).zip(grad.chunks_mut(p)).enumerate() {
            g.fill(0.0);
            value += self.design.bin_log_likelihood(k, coef);
            self.design.add_bin_gradient(k, coef, g);
            for j in 0..N_BETA {
                value += super::log_normal_density(coef[j], self.prior.tau2);
                g[j] -= coef[j] / self.prior.tau2;
            }
            for (m, &w) in self.weights.iter().enumerate() {
                let gamma = coef[N_BETA + m];
                let incl = self.prior.inclusion_probability(gamma, w);
                value += self.prior.log_mixture_density(gamma, w);
                g[N_BETA + m] -= gamma * (incl / self.prior.v1 + (1.0 - incl) / self.prior.v0);
            }
        }
        value
    }
}

/// `−log p(q) + ½ pᵀ M⁻¹ p`.
pub fn hamiltonian(log_density: f64, momentum: &[f64], inv_mass: &[f64]) -> f64 {
    -log_density + 0.5 * momentum.iter().zip(inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
}

/// Runs `steps` leapfrog steps in place and returns the final log density.
pub fn leapfrog<T: Target + ?Sized>(
    target: &T,
    q: &mut [f64],
    momentum: &mut [f64],
    step_size: f64,
    steps: usize,
    inv_mass: &[f64],
) -> f64 {
    let mut grad = vec![0.0; q.len()];
    let mut logp = target.log_density(q, &mut grad);
    for _ in 0..steps {
        for (p, g) in momentum.iter_mut().zip(&grad) {
            *p += 0.5 * step_size * g;
        }
        for ((x, p), m) in q.iter_mut().zip(momentum.iter()).zip(inv_mass) {
            *x += step_size * m * p;
        }
        logp = target.log_density(q, &mut grad);
        for (p, g) in momentum.iter_mut().zip(&grad) {
            *p += 0.5 * step_size * g;
        }
    }
    logp
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmcOptions {
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    /// Energy error above which a trajectory counts as divergent.
    pub max_energy_error: f64,
    /// Draws are flagged when more than this fraction diverged.
    pub max_divergent_fraction: f64,
    pub adapt_mass: bool,
}

impl Default for HmcOptions {
    fn default() -> Self {
        Self {
            leapfrog_steps: 16,
            target_accept: 0.8,
            max_energy_error: 1000.0,
            max_divergent_fraction: 0.1,
            adapt_mass: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub draws: Vec<IsingParams>,
    pub n_tune: usize,
    pub seed: u64,
    pub step_size: f64,
    pub accept_rate: f64,
    pub divergences: usize,
    /// True when the divergent fraction exceeded the configured limit.
    pub flagged: bool,
}

impl PosteriorDraws {
    /// Coordinate-wise posterior mean.
    pub fn mean(&self) -> Result<IsingParams> {
        let first = self.draws.first().ok_or_else(|| Error::invalid("no posterior draws"))?;
        let k = first.k();
        let mut acc = vec![0.0; first.to_flat().len()];
        for d in &self.draws {
            for (a, v) in acc.iter_mut().zip(d.to_flat()) {
                *a += v;
            }
        }
        let n = self.draws.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        IsingParams::from_flat(k, &acc)
    }

    /// Coordinate-wise sample standard deviation in flat layout.
    pub fn std_dev(&self) -> Result<Vec<f64>> {
        if self.draws.len() < 2 {
            return Err(Error::invalid("need at least two draws for a standard deviation"));
        }
        let mean = self.mean()?.to_flat();
        let mut acc = vec![0.0; mean.len()];
        for d in &self.draws {
            for ((a, v), m) in acc.iter_mut().zip(d.to_flat()).zip(&mean) {
                *a += (v - m).powi(2);
            }
        }
        let denom = (self.draws.len() - 1) as f64;
        Ok(acc.into_iter().map(|a| (a / denom).sqrt()).collect())
    }
}

pub fn sample_posterior(
    panel: &Panel,
    graph: &Graph,
    partition: &BinPartition,
    prior: &PriorSpec,
    n_draws: usize,
    n_tune: usize,
    seed: u64,
) -> Result<PosteriorDraws> {
    let design = IsingDesign::from_panel(panel, graph, partition)?;
    sample_posterior_with(&design, prior, n_draws, n_tune, seed, &HmcOptions::default(), None)
}

/// HMC with explicit options and an optional starting point.
pub fn sample_posterior_with(
    design: &IsingDesign,
    prior: &PriorSpec,
    n_draws: usize,
    n_tune: usize,
    seed: u64,
    opts: &HmcOptions,
    init: Option<&IsingParams>,
) -> Result<PosteriorDraws> {
    if n_draws == 0 {
        return Err(Error::invalid("n_draws must be positive"));
    }
    if opts.leapfrog_steps == 0 || !(0.0 < opts.target_accept && opts.target_accept < 1.0) {
        return Err(Error::invalid("leapfrog_steps must be positive and target_accept in (0, 1)"));
    }
    let target = LogPosterior::new(design, *prior)?;
    let k = design.k();
    let dim = target.dim();
    let mut q = match init {
        Some(p) => {
            p.validate()?;
            if p.k() != k {
                return Err(Error::invalid("initial parameters do not match design"));
            }
            p.to_flat()
        }
        None => vec![0.0; dim],
    };
    let mut rng = rng_from_seed(seed);
    let mut inv_mass = vec![1.0; dim];
    let mut grad = vec![0.0; dim];
    let mut logp = target.log_density(&q, &mut grad);
    if !logp.is_finite() {
        return Err(Error::NonFinite("log posterior at the initial point".into()));
    }

    let mut step = initial_step_size(&target, &q, &inv_mass, &mut rng);
    let mut adapt = DualAveraging::new(step, opts.target_accept);
    let window = if opts.adapt_mass && n_tune >= 40 { (n_tune * 15 / 100, n_tune * 75 / 100) } else { (n_tune, n_tune) };
    let mut welford = Welford::new(dim);

    let mut draws = Vec::with_capacity(n_draws);
    let mut accept_sum = 0.0;
    let mut divergences = 0;
    for iter in 0..n_tune + n_draws {
        let tuning = iter < n_tune;
        let mut momentum: Vec<f64> = inv_mass.iter().map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt()).collect();
        let h0 = hamiltonian(logp, &momentum, &inv_mass);
        let mut proposal = q.clone();
        let new_logp = leapfrog(&target, &mut proposal, &mut momentum, step, opts.leapfrog_steps, &inv_mass);
        let h1 = hamiltonian(new_logp, &momentum, &inv_mass);
        let energy_error = h1 - h0;
        let divergent = !energy_error.is_finite() || energy_error > opts.max_energy_error;
        let accept_prob = if divergent { 0.0 } else { (-energy_error).exp().min(1.0) };
        if rng.random::<f64>() < accept_prob {
            q = proposal;
            logp = new_logp;
        }

        if tuning {
            step = adapt.update(accept_prob);
            if iter >= window.0 && iter < window.1 {
                welford.push(&q);
            }
            if iter + 1 == window.1 && welford.count > 1 {
                inv_mass = welford.regularized_variance();
                step = initial_step_size(&target, &q, &inv_mass, &mut rng);
                adapt = DualAveraging::new(step, opts.target_accept);
            }
            if iter + 1 == n_tune {
                step = adapt.final_step();
            }
        } else {
            accept_sum += accept_prob;
            divergences += divergent as usize;
            draws.push(IsingParams::from_flat(k, &q)?);
        }
    }
    let flagged = divergences as f64 / n_draws as f64 > opts.max_divergent_fraction;
    if flagged {
        log::warn!("{divergences} of {n_draws} HMC trajectories diverged");
    }
    Ok(PosteriorDraws {
        draws,
        n_tune,
        seed,
        step_size: step,
        accept_rate: accept_sum / n_draws as f64,
        divergences,
        flagged,
    })
}

/// Doubles or halves a unit step until one leapfrog step crosses acceptance ½.
fn initial_step_size(target: &LogPosterior<'_>, q: &[f64], inv_mass: &[f64], rng: &mut Rng) -> f64 {
    let mut grad = vec![0.0; q.len()];
    let logp = target.log_density(q, &mut grad);
    let momentum: Vec<f64> = inv_mass.iter().map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt()).collect();
    let h0 = hamiltonian(logp, &momentum, inv_mass);
    let log_ratio = |step: f64| {
        let mut qq = q.to_vec();
        let mut pp = momentum.clone();
        let lp = leapfrog(target, &mut qq, &mut pp, step, 1, inv_mass);
        let d = h0 - hamiltonian(lp, &pp, inv_mass);
        if d.is_finite() { d } else { f64::NEG_INFINITY }
    };
    let mut step = 1.0;
    let direction = if log_ratio(step) > 0.5f64.ln() { 1.0 } else { -1.0 };
    for _ in 0..100 {
        let r = log_ratio(step);
        if direction * r <= -direction * 2f64.ln() {
            break;
        }
        step *= 2f64.powf(direction);
    }
    step
}

struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_step_bar: f64,
    count: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(step: f64, target: f64) -> Self {
        Self { mu: (10.0 * step).ln(), target, h_bar: 0.0, log_step_bar: step.ln(), count: 0.0 }
    }

    fn update(&mut self, accept_prob: f64) -> f64 {
        self.count += 1.0;
        let m = self.count;
        let eta = 1.0 / (m + Self::T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob);
        let log_step = self.mu - m.sqrt() / Self::GAMMA * self.h_bar;
        let weight = m.powf(-Self::KAPPA);
        self.log_step_bar = weight * log_step + (1.0 - weight) * self.log_step_bar;
        log_step.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_step_bar.exp()
    }
}

struct Welford {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    /// Sample variance shrunk toward a small constant, as in Stan's warm-up.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}
