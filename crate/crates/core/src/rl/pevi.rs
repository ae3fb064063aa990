//! Finite-horizon pessimistic value iteration with linear features.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::{argmax, Transition};
use crate::error::{Error, Result};

/// State-action features with `‖φ(s, b)‖₂ ≤ 1` on the intended state space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureMap {
    /// Q-Ising states in `[0,1]^{2K}`: block `b` holds `[1, s]`, all blocks
    /// scaled by `1/√(2K+1)`. Dimension `K(2K+1)`.
    Bin { k: usize },
    /// One-hot states of a tabular MDP: block `b` holds the state indicator.
    /// Dimension `n_states · n_actions`.
    OneHot { n_states: usize, n_actions: usize },
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        match *self {
            FeatureMap::Bin { k } => k * (2 * k + 1),
            FeatureMap::OneHot { n_states, n_actions } => n_states * n_actions,
        }
    }

    pub fn n_actions(&self) -> usize {
        match *self {
            FeatureMap::Bin { k } => k,
            FeatureMap::OneHot { n_actions, .. } => n_actions,
        }
    }

    pub fn state_len(&self) -> usize {
        match *self {
            FeatureMap::Bin { k } => 2 * k,
            FeatureMap::OneHot { n_states, .. } => n_states,
        }
    }

    pub fn features(&self, s: &[f64], b: usize) -> Result<DVector<f64>> {
        if b >= self.n_actions() {
            return Err(Error::invalid(format!("action {b} out of range for {} actions", self.n_actions())));
        }
        if s.len() != self.state_len() {
            return Err(Error::invalid(format!("state has length {}, features expect {}", s.len(), self.state_len())));
        }
        let mut phi = DVector::zeros(self.dim());
        match *self {
            FeatureMap::Bin { k } => {
                let block = 2 * k + 1;
                let scale = 1.0 / (block as f64).sqrt();
                phi[b * block] = scale;
                for (i, v) in s.iter().enumerate() {
                    phi[b * block + 1 + i] = scale * v;
                }
            }
            FeatureMap::OneHot { n_states, .. } => {
                for (i, v) in s.iter().enumerate() {
                    phi[b * n_states + i] = *v;
                }
            }
        }
        Ok(phi)
    }
}

/// A stage-level regression sample with states as plain vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub s: Vec<f64>,
    pub b: usize,
    pub r: f64,
    pub s_next: Vec<f64>,
}

impl From<&Transition> for Sample {
    fn from(tr: &Transition) -> Self {
        Self { s: tr.s.to_vec(), b: tr.b, r: tr.r, s_next: tr.s_next.to_vec() }
    }
}

/// Splits a single trajectory into `⌊T/H⌋` contiguous blocks of `H` periods;
/// the `h`-th period of every block feeds stage `h`. Periods past the last
/// full block and periods without a transition are left out.
pub fn stage_datasets(transitions: &[Transition], periods: usize, horizon: usize) -> Result<Vec<Vec<Sample>>> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be positive"));
    }
    let blocks = periods / horizon;
    if blocks == 0 {
        return Err(Error::invalid(format!("{periods} periods cannot fill one block of length {horizon}")));
    }
    let mut stages = vec![Vec::new(); horizon];
    for tr in transitions {
        if tr.t == 0 || tr.t > periods {
            return Err(Error::invalid(format!("transition period {} outside 1..={periods}", tr.t)));
        }
        let idx = tr.t - 1;
        if idx / horizon < blocks {
            stages[idx % horizon].push(Sample::from(tr));
        }
    }
    Ok(stages)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "PeviFile", try_from = "PeviFile")]
pub struct PeviPolicy {
    features: FeatureMap,
    horizon: usize,
    lambda: f64,
    bonus_beta: f64,
    weights: Vec<DVector<f64>>,
    lambdas: Vec<DMatrix<f64>>,
    inverses: Vec<DMatrix<f64>>,
}

impl PartialEq for PeviPolicy {
    fn eq(&self, other: &Self) -> bool {
        self.features == other.features
            && self.horizon == other.horizon
            && self.lambda == other.lambda
            && self.bonus_beta == other.bonus_beta
            && self.weights == other.weights
            && self.lambdas == other.lambdas
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PeviFile {
    features: FeatureMap,
    horizon: usize,
    lambda: f64,
    bonus_beta: f64,
    weights: Vec<Vec<f64>>,
    lambdas: Vec<Vec<Vec<f64>>>,
}

impl From<PeviPolicy> for PeviFile {
    fn from(p: PeviPolicy) -> Self {
        Self {
            features: p.features,
            horizon: p.horizon,
            lambda: p.lambda,
            bonus_beta: p.bonus_beta,
            weights: p.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            lambdas: p
                .lambdas
                .iter()
                .map(|m| (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect())
                .collect(),
        }
    }
}

impl TryFrom<PeviFile> for PeviPolicy {
    type Error = Error;

    fn try_from(f: PeviFile) -> Result<Self> {
        let d = f.features.dim();
        if f.weights.len() != f.horizon || f.lambdas.len() != f.horizon {
            return Err(Error::invalid("need one weight vector and one design matrix per stage"));
        }
        let mut weights = Vec::new();
        let mut lambdas = Vec::new();
        let mut inverses = Vec::new();
        for (w, m) in f.weights.iter().zip(&f.lambdas) {
            if w.len() != d || m.len() != d || m.iter().any(|r| r.len() != d) {
                return Err(Error::invalid("stage arrays do not match the feature dimension"));
            }
            let lam = DMatrix::from_row_slice(d, d, &m.concat());
            inverses.push(spd_inverse(&lam)?);
            lambdas.push(lam);
            weights.push(DVector::from_column_slice(w));
        }
        check_scalars(f.lambda, f.bonus_beta)?;
        Ok(Self { features: f.features, horizon: f.horizon, lambda: f.lambda, bonus_beta: f.bonus_beta, weights, lambdas, inverses })
    }
}

fn check_scalars(lambda: f64, bonus_beta: f64) -> Result<()> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("ridge lambda must be positive, got {lambda}")));
    }
    if !(bonus_beta >= 0.0) || !bonus_beta.is_finite() {
        return Err(Error::invalid(format!("bonus_beta must be a finite nonnegative number, got {bonus_beta}")));
    }
    Ok(())
}

fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() || (m - m.transpose()).amax() > 1e-9 * m.amax().max(1.0) {
        return Err(Error::invalid("design matrix must be square and symmetric"));
    }
    m.clone().cholesky().ok_or_else(|| Error::invalid("design matrix is not positive definite"))
}

fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(cholesky(m)?.inverse())
}

fn quad_width(phi: &DVector<f64>, inverse: &DMatrix<f64>) -> f64 {
    phi.dot(&(inverse * phi)).max(0.0).sqrt()
}

impl PeviPolicy {
    pub fn features(&self) -> FeatureMap {
        self.features
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn bonus_beta(&self) -> f64 {
        self.bonus_beta
    }

    /// Ridge weights of stage `h ∈ 1..=H`.
    pub fn stage_weights(&self, h: usize) -> &DVector<f64> {
        &self.weights[h - 1]
    }

    pub fn stage_lambdas(&self) -> &[DMatrix<f64>] {
        &self.lambdas
    }

    fn check_stage(&self, h: usize) -> Result<()> {
        if h == 0 || h > self.horizon {
            return Err(Error::invalid(format!("stage {h} outside 1..={}", self.horizon)));
        }
        Ok(())
    }

    /// `√(φᵀ Λ_h⁻¹ φ)`.
    pub fn width(&self, h: usize, s: &[f64], b: usize) -> Result<f64> {
        self.check_stage(h)?;
        Ok(quad_width(&self.features.features(s, b)?, &self.inverses[h - 1]))
    }

    /// Pessimistic, clipped action value.
    pub fn q_value(&self, h: usize, s: &[f64], b: usize) -> Result<f64> {
        self.check_stage(h)?;
        let phi = self.features.features(s, b)?;
        let raw = phi.dot(&self.weights[h - 1]) - self.bonus_beta * quad_width(&phi, &self.inverses[h - 1]);
        Ok(raw.clamp(0.0, (self.horizon - h + 1) as f64))
    }

    pub fn q_values(&self, h: usize, s: &[f64]) -> Result<Vec<f64>> {
        (0..self.features.n_actions()).map(|b| self.q_value(h, s, b)).collect()
    }

    pub fn value(&self, h: usize, s: &[f64]) -> Result<f64> {
        if h == self.horizon + 1 {
            return Ok(0.0);
        }
        Ok(self.q_values(h, s)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }

    /// Greedy action at stage `h`, lowest index on ties.
    pub fn greedy(&self, h: usize, s: &[f64]) -> Result<usize> {
        Ok(argmax(&self.q_values(h, s)?))
    }
}

/// Backward ridge recursion from `h = H` to `1`. `stage_data[h-1]` holds the
/// samples of stage `h`; empty stages leave `Λ_h = λI`.
pub fn train_pevi(
    stage_data: &[Vec<Sample>],
    features: FeatureMap,
    lambda: f64,
    bonus_beta: f64,
    horizon: usize,
) -> Result<PeviPolicy> {
    check_scalars(lambda, bonus_beta)?;
    if horizon == 0 || stage_data.len() != horizon {
        return Err(Error::invalid(format!("need {horizon} stage datasets, got {}", stage_data.len())));
    }
    let d = features.dim();
    let mut policy = PeviPolicy {
        features,
        horizon,
        lambda,
        bonus_beta,
        weights: vec![DVector::zeros(d); horizon],
        lambdas: vec![DMatrix::identity(d, d) * lambda; horizon],
        inverses: vec![DMatrix::identity(d, d) / lambda; horizon],
    };
    for h in (1..=horizon).rev() {
        let mut lam = DMatrix::identity(d, d) * lambda;
        let mut rhs = DVector::zeros(d);
        for sample in &stage_data[h - 1] {
            let phi = features.features(&sample.s, sample.b)?;
            let target = sample.r + policy.value(h + 1, &sample.s_next)?;
            lam.ger(1.0, &phi, &phi, 1.0);
            rhs.axpy(target, &phi, 1.0);
        }
        let chol = cholesky(&lam)?;
        policy.weights[h - 1] = chol.solve(&rhs);
        policy.inverses[h - 1] = chol.inverse();
        policy.lambdas[h - 1] = lam;
    }
    Ok(policy)
}

/// `β √(φᵀ Λ⁻¹ φ)`.
pub fn pevi_bonus(phi: &DVector<f64>, lambda: &DMatrix<f64>, bonus_beta: f64) -> Result<f64> {
    if lambda.nrows() != phi.len() {
        return Err(Error::invalid("feature and design dimensions differ"));
    }
    if !(bonus_beta >= 0.0) {
        return Err(Error::invalid("bonus_beta must be nonnegative"));
    }
    let chol = cholesky(lambda)?;
    Ok(bonus_beta * phi.dot(&chol.solve(phi)).max(0.0).sqrt())
}

/// Monte Carlo estimate of `Σ_h E[√(φ(s_h,b_h)ᵀ Λ_h⁻¹ φ(s_h,b_h))]` from
/// trajectories of the policy, each listing its `(s_h, b_h)` for `h = 1..=H`.
pub fn pevi_uncertainty(
    features: FeatureMap,
    stage_lambdas: &[DMatrix<f64>],
    trajectories: &[Vec<(Vec<f64>, usize)>],
) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::invalid("no trajectories supplied"));
    }
    let inverses: Vec<DMatrix<f64>> = stage_lambdas.iter().map(spd_inverse).collect::<Result<_>>()?;
    let mut total = 0.0;
    for traj in trajectories {
        if traj.len() != inverses.len() {
            return Err(Error::invalid(format!("trajectory has {} stages, expected {}", traj.len(), inverses.len())));
        }
        for ((s, b), inv) in traj.iter().zip(&inverses) {
            total += quad_width(&features.features(s, *b)?, inv);
        }
    }
    Ok(total / trajectories.len() as f64)
}

/// `C_β [H √(d log(H(1 + n/λ)/δ)) + √λ W]`.
pub fn bonus_beta_from_radius(
    horizon: usize,
    d_phi: usize,
    n_log: usize,
    lambda: f64,
    delta: f64,
    w_bound: f64,
    c_beta: f64,
) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if horizon == 0 || d_phi == 0 || !(lambda > 0.0) || !(w_bound >= 0.0) || !(c_beta > 0.0) {
        return Err(Error::invalid("horizon, d_phi, lambda and c_beta must be positive and W nonnegative"));
    }
    let h = horizon as f64;
    let log_term = (h * (1.0 + n_log as f64 / lambda) / delta).ln();
    Ok(c_beta * (h * (d_phi as f64 * log_term).sqrt() + lambda.sqrt() * w_bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_examples() {
        let map = FeatureMap::Bin { k: 2 };
        assert_eq!(map.dim(), 10);
        let phi = map.features(&[0.0; 4], 0).unwrap();
        assert!((phi[0] - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(phi.iter().filter(|v| **v != 0.0).count(), 1);
        let s = [1.0, 0.3, 0.7, 1.0];
        assert!(map.features(&s, 1).unwrap().norm() <= 1.0 + 1e-15);
        assert_eq!(map.features(&s, 0).unwrap().dot(&map.features(&s, 1).unwrap()), 0.0);
        assert!(map.features(&s, 2).is_err());
    }

    #[test]
    fn bonus_examples() {
        let phi = DVector::from_vec(vec![0.6, 0.8]);
        let eye = DMatrix::<f64>::identity(2, 2);
        assert!((pevi_bonus(&phi, &eye, 3.0).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(pevi_bonus(&DVector::zeros(2), &eye, 3.0).unwrap(), 0.0);
        assert!((pevi_bonus(&phi, &(eye * 4.0), 3.0).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn radius_examples() {
        let b = bonus_beta_from_radius(1, 1, 0, 1.0, 0.5, 0.0, 1.0).unwrap();
        assert!((b - 2f64.ln().sqrt()).abs() < 1e-15);
        let delta = 0.2;
        let b = bonus_beta_from_radius(1, 1, 0, 1.0, delta, 1.5, 2.0).unwrap();
        assert!((b - 2.0 * ((1.0f64 / delta).ln().sqrt() + 1.5)).abs() < 1e-12);
        assert!(bonus_beta_from_radius(1, 1, 0, 1.0, 1.0, 0.0, 1.0).is_err());
        let mut prev = 0.0;
        for n in [0, 1, 10, 100, 10_000] {
            let b = bonus_beta_from_radius(5, 12, n, 1.0, 0.05, 2.0, 1.0).unwrap();
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn empty_data_is_fully_pessimistic() {
        let map = FeatureMap::Bin { k: 2 };
        let policy = train_pevi(&vec![Vec::new(); 3], map, 1.0, 0.5, 3).unwrap();
        for h in 1..=3 {
            for b in 0..2 {
                assert_eq!(policy.q_value(h, &[0.4, 0.1, 0.9, 0.0], b).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn single_point_ridge() {
        let map = FeatureMap::OneHot { n_states: 1, n_actions: 2 };
        let data = vec![vec![Sample { s: vec![1.0], b: 0, r: 1.0, s_next: vec![1.0] }]];
        let policy = train_pevi(&data, map, 1.0, 0.0, 1).unwrap();
        let w = policy.stage_weights(1);
        assert!((w[0] - 0.5).abs() < 1e-15 && w[1] == 0.0);
    }

    #[test]
    fn json_round_trip() {
        let map = FeatureMap::Bin { k: 1 };
        let data = vec![
            vec![Sample { s: vec![0.2, 0.5], b: 0, r: 0.3, s_next: vec![0.4, 0.6] }],
            vec![Sample { s: vec![0.4, 0.6], b: 0, r: 0.6, s_next: vec![0.1, 0.1] }],
        ];
        let policy = train_pevi(&data, map, 1.0, 0.1, 2).unwrap();
        let json = serde_json::to_string(&policy).unwrap();
        let back: PeviPolicy = serde_json::from_str(&json).unwrap();
        assert_eq!(back, policy);
        assert_eq!(back.q_value(1, &[0.3, 0.3], 0).unwrap(), policy.q_value(1, &[0.3, 0.3], 0).unwrap());
    }

    #[test]
    fn isotropic_uncertainty() {
        let map = FeatureMap::Bin { k: 1 };
        let lam = DMatrix::identity(3, 3) * 4.0;
        let traj = vec![(vec![1.0, 1.0], 0), (vec![0.0, 0.0], 0)];
        let u = pevi_uncertainty(map, &[lam.clone(), lam], &[traj]).unwrap();
        let norm1 = 1.0;
        let norm2 = 1.0 / 3f64.sqrt();
        assert!((u - (norm1 + norm2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn stage_blocks() {
        use crate::ising::QIsingState;
        let st = QIsingState { l0_bar: vec![0.1], y_bar: vec![0.2] };
        let trs: Vec<Transition> = (1..=7)
            .map(|t| Transition { t, s: st.clone(), b: 0, r: t as f64 / 10.0, s_next: st.clone() })
            .collect();
        let stages = stage_datasets(&trs, 7, 3).unwrap();
        let rewards: Vec<Vec<f64>> = stages.iter().map(|s| s.iter().map(|x| x.r).collect()).collect();
        assert_eq!(rewards, vec![vec![0.1, 0.4], vec![0.2, 0.5], vec![0.3, 0.6]]);
        assert!(stage_datasets(&trs, 2, 3).is_err());
    }
}
