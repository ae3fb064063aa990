//! Stationary law of the synchronous Ising chain on a complete graph.

use nalgebra::{DMatrix, RowDVector};

use crate::error::{Error, Result};
use crate::ising::sigmoid;

const MAX_NODES: usize = 12;
const TOL: f64 = 1e-12;
const MAX_ITER: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Stationary {
    /// Probability of each configuration; bit `i` of the index is node `i`.
    pub mu: Vec<f64>,
    /// `Δ_m = log(μ_{m+1} / μ_m)` where `μ_m` is the probability of one
    /// configuration with `m` adopters, `m = 0..n−1`.
    pub delta: Vec<f64>,
    /// `‖μK − μ‖∞` at the returned `μ`.
    pub residual: f64,
    pub iterations: usize,
    /// Largest `|Σ_y' K(y, y') − 1|`.
    pub row_error: f64,
}

fn kernel(n: usize, coupling: f64, intercept: f64) -> DMatrix<f64> {
    let states = 1usize << n;
    DMatrix::from_fn(states, states, |from, to| {
        let total = from.count_ones() as f64;
        (0..n)
            .map(|i| {
                let own = ((from >> i) & 1) as f64;
                let p = sigmoid(intercept + coupling * (total - own));
                if (to >> i) & 1 == 1 {
                    p
                } else {
                    1.0 - p
                }
            })
            .product()
    })
}

/// Every node updates simultaneously with probability
/// `σ(intercept + coupling · Σ_{j≠i} y_j)`. Solved by power iteration from
/// the uniform law.
pub fn synchronous_stationary(n: usize, coupling: f64, intercept: f64) -> Result<Stationary> {
    if n == 0 || n > MAX_NODES {
        return Err(Error::OracleTooLarge(format!("{n} nodes, between 1 and {MAX_NODES} supported")));
    }
    if !coupling.is_finite() || !intercept.is_finite() {
        return Err(Error::NonFinite("coupling or intercept".into()));
    }
    let k = kernel(n, coupling, intercept);
    let states = k.nrows();
    let row_error = k.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    let mut mu = RowDVector::from_element(states, 1.0 / states as f64);
    let mut iterations = 0;
    loop {
        let next = &mu * &k;
        let change = (&next - &mu).amax();
        mu = next;
        iterations += 1;
        if change < TOL {
            break;
        }
        if iterations == MAX_ITER {
            return Err(Error::NotConverged(format!("power iteration stalled at change {change:e}")));
        }
    }
    mu /= mu.sum();
    let residual = (&mu * &k - &mu).amax();
    let mu: Vec<f64> = mu.iter().copied().collect();
    let first_m = |m: usize| mu[(1usize << m) - 1];
    let delta = (0..n).map(|m| (first_m(m + 1) / first_m(m)).ln()).collect();
    Ok(Stationary { mu, delta, residual, iterations, row_error })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_node_constants() {
        let st = synchronous_stationary(4, 1.0, 0.0).unwrap();
        let expected = [1.860, 2.247, 2.549, 2.765];
        for (d, e) in st.delta.iter().zip(expected) {
            assert!((d - e).abs() < 5e-4, "{:?}", st.delta);
        }
        assert!(st.residual < 1e-10);
        assert!(st.row_error < 1e-12);
        assert!((st.mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // exchangeable: depends only on the adopter count
        for s in 0..16usize {
            let rep = (1usize << s.count_ones()) - 1;
            assert!((st.mu[s] - st.mu[rep]).abs() < 1e-12);
        }
        let diffs: Vec<f64> = st.delta.windows(2).map(|w| w[1] - w[0]).collect();
        assert!((diffs[0] - diffs[1]).abs() > 1e-3 && (diffs[1] - diffs[2]).abs() > 1e-3);
    }

    #[test]
    fn independent_nodes_give_product_law() {
        let st = synchronous_stationary(3, 0.0, 0.7).unwrap();
        for d in &st.delta {
            assert!((d - 0.7).abs() < 1e-10);
        }
    }
}
