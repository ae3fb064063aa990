//! Conservative Q-learning with a small ReLU network.
//!
//! Batches are stored column-wise: a `d × B` matrix holds `B` states. Each
//! hidden layer is linear, ReLU, optional batch normalization, then dropout.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{argmax, Transition};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization after a hidden activation. Training batches use their
/// own statistics; evaluation uses the running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
    pub running_mean: DVector<f64>,
    pub running_var: DVector<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: DVector::from_element(width, 1.0),
            beta: DVector::zeros(width),
            running_mean: DVector::zeros(width),
            running_var: DVector::from_element(width, 1.0),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchNormFile {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

/// Feed-forward Q-network mapping a `2K` state to `K` action values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "QFunctionFile", try_from = "QFunctionFile")]
pub struct QFunction {
    widths: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    /// One per hidden layer, or empty.
    norms: Vec<BatchNorm>,
    pub psi: f64,
    pub alpha: f64,
    pub seed: u64,
}

/// On-disk layout: row-major weight arrays, one `[out][in]` array per layer.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QFunctionFile {
    widths: Vec<usize>,
    activation: String,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    batch_norm: Vec<BatchNormFile>,
    psi: f64,
    alpha: f64,
    seed: u64,
    state_dim: usize,
    n_actions: usize,
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

impl From<QFunction> for QFunctionFile {
    fn from(q: QFunction) -> Self {
        let weights = q
            .weights
            .iter()
            .map(|w| (0..w.nrows()).map(|r| w.row(r).iter().copied().collect()).collect())
            .collect();
        let batch_norm = q
            .norms
            .iter()
            .map(|n| BatchNormFile {
                gamma: to_vec(&n.gamma),
                beta: to_vec(&n.beta),
                running_mean: to_vec(&n.running_mean),
                running_var: to_vec(&n.running_var),
            })
            .collect();
        Self {
            state_dim: q.state_dim(),
            n_actions: q.n_actions(),
            widths: q.widths,
            activation: "relu".into(),
            weights,
            biases: q.biases.iter().map(to_vec).collect(),
            batch_norm,
            psi: q.psi,
            alpha: q.alpha,
            seed: q.seed,
        }
    }
}

impl TryFrom<QFunctionFile> for QFunction {
    type Error = Error;

    fn try_from(f: QFunctionFile) -> Result<Self> {
        if f.activation != "relu" {
            return Err(Error::invalid(format!("unsupported activation {:?}", f.activation)));
        }
        let layers = f.widths.len().saturating_sub(1);
        if layers == 0 || f.weights.len() != layers || f.biases.len() != layers {
            return Err(Error::invalid("layer count does not match widths"));
        }
        if f.state_dim != f.widths[0] || f.n_actions != f.widths[layers] {
            return Err(Error::invalid("state_dim/n_actions disagree with widths"));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (l, (w, b)) in f.weights.iter().zip(&f.biases).enumerate() {
            let (rows, cols) = (f.widths[l + 1], f.widths[l]);
            if w.len() != rows || w.iter().any(|r| r.len() != cols) || b.len() != rows {
                return Err(Error::invalid(format!("layer {l} has the wrong shape")));
            }
            let values: Vec<f64> = w.iter().flatten().copied().collect();
            if !values.iter().chain(b).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("weights of layer {l}")));
            }
            weights.push(DMatrix::from_row_slice(rows, cols, &values));
            biases.push(DVector::from_column_slice(b));
        }
        if !f.batch_norm.is_empty() && f.batch_norm.len() != layers - 1 {
            return Err(Error::invalid("need one batch norm per hidden layer"));
        }
        let mut norms = Vec::with_capacity(f.batch_norm.len());
        for (l, n) in f.batch_norm.iter().enumerate() {
            let width = f.widths[l + 1];
            let parts = [&n.gamma, &n.beta, &n.running_mean, &n.running_var];
            if parts.iter().any(|p| p.len() != width) {
                return Err(Error::invalid(format!("batch norm {l} has the wrong width")));
            }
            if !parts.iter().all(|p| p.iter().all(|v| v.is_finite())) || n.running_var.iter().any(|v| *v < 0.0) {
                return Err(Error::NonFinite(format!("batch norm {l}")));
            }
            norms.push(BatchNorm {
                gamma: DVector::from_column_slice(&n.gamma),
                beta: DVector::from_column_slice(&n.beta),
                running_mean: DVector::from_column_slice(&n.running_mean),
                running_var: DVector::from_column_slice(&n.running_var),
            });
        }
        Ok(Self { widths: f.widths, weights, biases, norms, psi: f.psi, alpha: f.alpha, seed: f.seed })
    }
}

/// Normalized activations of one hidden layer.
struct NormCache {
    xhat: DMatrix<f64>,
    inv_std: DVector<f64>,
    /// Batch mean and biased variance when batch statistics were used.
    batch: Option<(DVector<f64>, DVector<f64>)>,
}

/// Layer inputs and pre-activations of one forward pass.
struct Cache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    norms: Vec<Option<NormCache>>,
    masks: Vec<Option<DMatrix<f64>>>,
    output: DMatrix<f64>,
}

/// Gradients in the same tensor order as [`QFunction::tensors_mut`].
struct Grads {
    tensors: Vec<Vec<f64>>,
}

impl QFunction {
    /// Uniform fan-in initialization: every parameter of a layer with fan-in
    /// `m` is drawn from `U(−1/√m, 1/√m)`.
    pub fn new(state_dim: usize, hidden: &[usize], n_actions: usize, seed: u64) -> Result<Self> {
        if state_dim == 0 || n_actions == 0 || hidden.contains(&0) {
            return Err(Error::invalid("network widths must be positive"));
        }
        let mut widths = vec![state_dim];
        widths.extend_from_slice(hidden);
        widths.push(n_actions);
        let mut rng = rng_from_seed(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let bound = 1.0 / (pair[0] as f64).sqrt();
            weights.push(DMatrix::from_fn(pair[1], pair[0], |_, _| rng.random_range(-bound..bound)));
            biases.push(DVector::from_fn(pair[1], |_, _| rng.random_range(-bound..bound)));
        }
        Ok(Self { widths, weights, biases, norms: Vec::new(), psi: 0.0, alpha: 0.0, seed })
    }

    /// Adds batch normalization (unit scale, zero shift) to every hidden layer.
    pub fn with_batch_norm(mut self) -> Self {
        let hidden = &self.widths[1..self.widths.len() - 1];
        self.norms = hidden.iter().map(|&w| BatchNorm::new(w)).collect();
        self
    }

    pub fn norms(&self) -> &[BatchNorm] {
        &self.norms
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn state_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn n_actions(&self) -> usize {
        *self.widths.last().expect("at least one layer")
    }

    pub fn q_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim() {
            return Err(Error::invalid(format!("state has length {}, network expects {}", state.len(), self.state_dim())));
        }
        let x = DMatrix::from_column_slice(state.len(), 1, state);
        Ok(self.forward(&x, None).output.column(0).iter().copied().collect())
    }

    /// Greedy action, lowest index on ties.
    pub fn greedy(&self, state: &[f64]) -> Result<usize> {
        Ok(argmax(&self.q_values(state)?))
    }

    /// Running statistics are not trainable.
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        let mut norms = self.norms.iter_mut();
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
            if let Some(n) = norms.next() {
                out.push(n.gamma.as_mut_slice());
                out.push(n.beta.as_mut_slice());
            }
        }
        out
    }

    /// All trainable parameters in tensor order: per layer the column-major
    /// weights and the bias, then the batch-norm scale and shift if present.
    pub fn parameters(&self) -> Vec<f64> {
        let mut probe = self.clone();
        probe.tensors_mut().into_iter().flat_map(|t| t.to_vec()).collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        let mut tensors = self.tensors_mut();
        let total: usize = tensors.iter().map(|t| t.len()).sum();
        if values.len() != total {
            return Err(Error::invalid(format!("expected {total} parameters, got {}", values.len())));
        }
        let mut offset = 0;
        for t in tensors.iter_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// `train` switches on batch statistics and dropout.
    fn forward(&self, x: &DMatrix<f64>, mut train: Option<(&mut Rng, f64)>) -> Cache {
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(last);
        let mut norms = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);
        let mut a = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a;
            for mut col in z.column_iter_mut() {
                col += b;
            }
            inputs.push(a);
            if l == last {
                return Cache { inputs, pre, norms, masks, output: z };
            }
            let mut h = z.map(|v| v.max(0.0));
            let norm = self.norms.get(l).map(|bn| {
                let (mean, var, batch) = if train.is_some() {
                    let n = h.ncols() as f64;
                    let mean = h.column_mean();
                    let var = DVector::from_fn(h.nrows(), |r, _| h.row(r).iter().map(|v| (v - mean[r]).powi(2)).sum::<f64>() / n);
                    (mean.clone(), var.clone(), Some((mean, var)))
                } else {
                    (bn.running_mean.clone(), bn.running_var.clone(), None)
                };
                let inv_std = var.map(|v| 1.0 / (v + BN_EPS).sqrt());
                let xhat = DMatrix::from_fn(h.nrows(), h.ncols(), |r, c| (h[(r, c)] - mean[r]) * inv_std[r]);
                h = DMatrix::from_fn(h.nrows(), h.ncols(), |r, c| bn.gamma[r] * xhat[(r, c)] + bn.beta[r]);
                NormCache { xhat, inv_std, batch }
            });
            let mask = train.as_mut().filter(|(_, p)| *p > 0.0).map(|(rng, p)| {
                let keep = 1.0 / (1.0 - *p);
                DMatrix::from_fn(h.nrows(), h.ncols(), |_, _| if rng.random::<f64>() < *p { 0.0 } else { keep })
            });
            if let Some(m) = &mask {
                h.component_mul_assign(m);
            }
            pre.push(z);
            norms.push(norm);
            masks.push(mask);
            a = h;
        }
        unreachable!("the output layer returns")
    }

    /// Moves the running statistics toward the batch statistics of `cache`,
    /// storing the unbiased variance.
    fn update_running(&mut self, cache: &Cache, batch_size: usize) {
        let n = batch_size as f64;
        let unbias = if batch_size > 1 { n / (n - 1.0) } else { 1.0 };
        for (bn, nc) in self.norms.iter_mut().zip(&cache.norms) {
            if let Some(NormCache { batch: Some((mean, var)), .. }) = nc {
                bn.running_mean = &bn.running_mean * (1.0 - BN_MOMENTUM) + mean * BN_MOMENTUM;
                bn.running_var = &bn.running_var * (1.0 - BN_MOMENTUM) + var * (BN_MOMENTUM * unbias);
            }
        }
    }

    fn backward(&self, cache: &Cache, d_out: DMatrix<f64>) -> Grads {
        let layers = self.weights.len();
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers];
        let mut dz = d_out;
        for l in (0..layers).rev() {
            let dw = &dz * cache.inputs[l].transpose();
            per_layer[l].push(dw.as_slice().to_vec());
            per_layer[l].push(dz.column_sum().as_slice().to_vec());
            if l == 0 {
                break;
            }
            let h = l - 1;
            let mut da = self.weights[l].transpose() * &dz;
            if let Some(m) = &cache.masks[h] {
                da.component_mul_assign(m);
            }
            if let (Some(bn), Some(nc)) = (self.norms.get(h), &cache.norms[h]) {
                let dbeta = da.column_sum();
                let dgamma = da.component_mul(&nc.xhat).column_sum();
                let n = da.ncols() as f64;
                da = if nc.batch.is_some() {
                    DMatrix::from_fn(da.nrows(), da.ncols(), |r, c| {
                        let g = bn.gamma[r];
                        g * nc.inv_std[r] / n * (n * da[(r, c)] - dbeta[r] - nc.xhat[(r, c)] * dgamma[r])
                    })
                } else {
                    DMatrix::from_fn(da.nrows(), da.ncols(), |r, c| da[(r, c)] * bn.gamma[r] * nc.inv_std[r])
                };
                per_layer[h].push(dgamma.as_slice().to_vec());
                per_layer[h].push(dbeta.as_slice().to_vec());
            }
            da.zip_apply(&cache.pre[h], |g, z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            dz = da;
        }
        // hidden layers collected gamma, beta before weights, bias
        for t in per_layer.iter_mut().filter(|t| t.len() == 4) {
            t.rotate_left(2);
        }
        Grads { tensors: per_layer.into_iter().flatten().collect() }
    }
}

/// Bellman and conservative parts of the CQL objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CqlLoss {
    pub bellman: f64,
    pub penalty: f64,
    pub alpha: f64,
}

impl CqlLoss {
    pub fn total(&self) -> f64 {
        self.bellman + self.alpha * self.penalty
    }
}

fn batch_matrices(batch: &[&Transition], state_dim: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut s = DMatrix::zeros(state_dim, batch.len());
    let mut s_next = DMatrix::zeros(state_dim, batch.len());
    for (i, tr) in batch.iter().enumerate() {
        let (a, b) = (tr.s.to_vec(), tr.s_next.to_vec());
        if a.len() != state_dim || b.len() != state_dim {
            return Err(Error::invalid(format!("transition state has length {}, network expects {state_dim}", a.len())));
        }
        s.set_column(i, &DVector::from_vec(a));
        s_next.set_column(i, &DVector::from_vec(b));
    }
    Ok((s, s_next))
}

/// Loss and the gradient with respect to the network output.
fn loss_and_output_grad(
    q: &DMatrix<f64>,
    target_next: &DMatrix<f64>,
    batch: &[&Transition],
    alpha: f64,
    psi: f64,
) -> (CqlLoss, DMatrix<f64>) {
    let n = batch.len() as f64;
    let mut grad = DMatrix::zeros(q.nrows(), q.ncols());
    let (mut bellman, mut penalty) = (0.0, 0.0);
    for (i, tr) in batch.iter().enumerate() {
        let col = q.column(i);
        let max_next = target_next.column(i).max();
        let td = col[tr.b] - (tr.r + psi * max_next);
        bellman += td * td;
        let hi = col.max();
        let sum_exp: f64 = col.iter().map(|v| (v - hi).exp()).sum();
        let lse = hi + sum_exp.ln();
        penalty += lse - col[tr.b];
        for a in 0..q.nrows() {
            let softmax = (col[a] - hi).exp() / sum_exp;
            let onehot = (a == tr.b) as u8 as f64;
            grad[(a, i)] = (2.0 * td * onehot + alpha * (softmax - onehot)) / n;
        }
    }
    (CqlLoss { bellman: bellman / n, penalty: penalty / n, alpha }, grad)
}

fn check_loss_args(batch: &[Transition], alpha: f64, psi: f64, q: &QFunction) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if !(alpha >= 0.0) || !(0.0..1.0).contains(&psi) {
        return Err(Error::invalid(format!("need alpha >= 0 and 0 <= psi < 1, got {alpha}, {psi}")));
    }
    if let Some(tr) = batch.iter().find(|tr| tr.b >= q.n_actions()) {
        return Err(Error::invalid(format!("action {} out of range for {} actions", tr.b, q.n_actions())));
    }
    Ok(())
}

/// CQL objective on a batch, both networks in evaluation mode.
pub fn cql_loss_parts(q: &QFunction, batch: &[Transition], target: &QFunction, alpha: f64, psi: f64) -> Result<CqlLoss> {
    check_loss_args(batch, alpha, psi, q)?;
    let refs: Vec<&Transition> = batch.iter().collect();
    let (s, s_next) = batch_matrices(&refs, q.state_dim())?;
    let out = q.forward(&s, None).output;
    let next = target.forward(&s_next, None).output;
    Ok(loss_and_output_grad(&out, &next, &refs, alpha, psi).0)
}

pub fn cql_loss(q: &QFunction, batch: &[Transition], target: &QFunction, alpha: f64, psi: f64) -> Result<f64> {
    Ok(cql_loss_parts(q, batch, target, alpha, psi)?.total())
}

impl QFunction {
    /// Loss and its gradient in [`Self::parameters`] order, without dropout.
    pub fn loss_gradient(&self, batch: &[Transition], target: &QFunction, alpha: f64, psi: f64) -> Result<(f64, Vec<f64>)> {
        check_loss_args(batch, alpha, psi, self)?;
        let refs: Vec<&Transition> = batch.iter().collect();
        let (s, s_next) = batch_matrices(&refs, self.state_dim())?;
        let cache = self.forward(&s, None);
        let next = target.forward(&s_next, None).output;
        let (loss, d_out) = loss_and_output_grad(&cache.output, &next, &refs, alpha, psi);
        let grads = self.backward(&cache, d_out);
        Ok((loss.total(), grads.tensors.concat()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CqlHyper {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub psi: f64,
    pub alpha: f64,
    pub max_steps: usize,
    pub steps_per_epoch: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub batch_norm: bool,
}

impl Default for CqlHyper {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            batch_size: 64,
            learning_rate: 3e-4,
            dropout: 0.3,
            psi: 0.8,
            alpha: 0.1,
            max_steps: 30_000,
            steps_per_epoch: 1000,
            patience: 10,
            min_delta: 1e-4,
            batch_norm: true,
        }
    }
}

impl CqlHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.steps_per_epoch == 0 {
            return Err(Error::invalid("batch_size, max_steps and steps_per_epoch must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("learning_rate must be positive and dropout in [0, 1)"));
        }
        if !(self.alpha >= 0.0) || !(0.0..1.0).contains(&self.psi) {
            return Err(Error::invalid("need alpha >= 0 and 0 <= psi < 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    /// Mean Bellman loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub early_stopped: bool,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(q: &mut QFunction) -> Self {
        let zeros: Vec<Vec<f64>> = q.tensors_mut().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, q: &mut QFunction, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, m), v), g) in q.tensors_mut().into_iter().zip(&mut self.m).zip(&mut self.v).zip(&grads.tensors) {
            for (((p, m), v), g) in p.iter_mut().zip(m).zip(v).zip(g) {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

pub fn train_cql(dataset: &[Transition], hyper: &CqlHyper, seed: u64) -> Result<QFunction> {
    Ok(train_cql_traced(dataset, hyper, seed)?.0)
}

/// Adam on minibatches drawn with replacement. The target network is synced
/// at the end of every epoch; training stops once the epoch Bellman loss has
/// not improved by `min_delta` for `patience` epochs.
pub fn train_cql_traced(dataset: &[Transition], hyper: &CqlHyper, seed: u64) -> Result<(QFunction, TrainSummary)> {
    hyper.validate()?;
    let first = dataset.first().ok_or_else(|| Error::invalid("empty training dataset"))?;
    let k = first.s.k();
    if let Some(tr) = dataset.iter().find(|tr| tr.b >= k || tr.s.k() != k || tr.s_next.k() != k) {
        return Err(Error::invalid(format!("transition at t={} is inconsistent with K={k}", tr.t)));
    }
    let mut q = QFunction::new(2 * k, &hyper.hidden, k, seed)?;
    if hyper.batch_norm {
        q = q.with_batch_norm();
    }
    q.psi = hyper.psi;
    q.alpha = hyper.alpha;
    let mut target = q.clone();
    let mut adam = Adam::new(&mut q);
    let mut rng = rng_from_seed(seed ^ 0x5eed_0f_ba7c4);

    let mut summary = TrainSummary { steps: 0, epochs: 0, epoch_losses: Vec::new(), early_stopped: false };
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut epoch_sum = 0.0;
    let mut epoch_count = 0;
    while summary.steps < hyper.max_steps {
        let batch: Vec<&Transition> =
            (0..hyper.batch_size).map(|_| &dataset[rng.random_range(0..dataset.len())]).collect();
        let (s, s_next) = batch_matrices(&batch, 2 * k)?;
        let cache = q.forward(&s, Some((&mut rng, hyper.dropout)));
        let next = target.forward(&s_next, None).output;
        let (loss, d_out) = loss_and_output_grad(&cache.output, &next, &batch, hyper.alpha, hyper.psi);
        if !loss.total().is_finite() {
            return Err(Error::NonFinite(format!(
                "CQL loss at step {} (bellman {}, penalty {})",
                summary.steps, loss.bellman, loss.penalty
            )));
        }
        let grads = q.backward(&cache, d_out);
        adam.step(&mut q, &grads, hyper.learning_rate);
        q.update_running(&cache, hyper.batch_size);
        summary.steps += 1;
        epoch_sum += loss.bellman;
        epoch_count += 1;

        if summary.steps % hyper.steps_per_epoch == 0 || summary.steps == hyper.max_steps {
            let epoch_loss = epoch_sum / epoch_count as f64;
            summary.epochs += 1;
            summary.epoch_losses.push(epoch_loss);
            epoch_sum = 0.0;
            epoch_count = 0;
            target = q.clone();
            if epoch_loss < best - hyper.min_delta {
                best = epoch_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= hyper.patience {
                    summary.early_stopped = true;
                    break;
                }
            }
        }
    }
    Ok((q, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ising::QIsingState;

    fn tr(s: &[f64], b: usize, r: f64, s_next: &[f64]) -> Transition {
        Transition {
            t: 1,
            s: QIsingState::from_slice(s).unwrap(),
            b,
            r,
            s_next: QIsingState::from_slice(s_next).unwrap(),
        }
    }

    fn zero_network(k: usize) -> QFunction {
        let mut q = QFunction::new(2 * k, &[4], k, 0).unwrap();
        let n = q.parameters().len();
        q.set_parameters(&vec![0.0; n]).unwrap();
        q
    }

    #[test]
    fn loss_examples() {
        let q = zero_network(2);
        let batch = [tr(&[0.1, 0.2, 0.3, 0.4], 0, 0.5, &[0.2, 0.2, 0.2, 0.2])];
        let parts = cql_loss_parts(&q, &batch, &q, 0.0, 0.8).unwrap();
        assert!((parts.bellman - 0.25).abs() < 1e-15);
        assert_eq!(cql_loss(&q, &batch, &q, 0.0, 0.8).unwrap(), parts.bellman);
        // constant Q across actions: penalty is exactly log K
        let parts = cql_loss_parts(&q, &batch, &q, 1.0, 0.8).unwrap();
        assert!((parts.penalty - 2f64.ln()).abs() < 1e-15);
        assert!(cql_loss(&q, &batch, &q, 1.0, 1.0).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let q = QFunction::new(4, &[5, 3], 2, 9).unwrap();
        let json = serde_json::to_string(&q).unwrap();
        let back: QFunction = serde_json::from_str(&json).unwrap();
        assert_eq!(back, q);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        assert!(json.contains("\"state_dim\":4"));
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let q = zero_network(3);
        assert_eq!(q.greedy(&[0.0; 6]).unwrap(), 0);
        assert!(q.q_values(&[0.0; 5]).is_err());
    }

    fn batch() -> Vec<Transition> {
        vec![
            tr(&[0.1, 0.2, 0.3, 0.4], 0, 0.5, &[0.2, 0.2, 0.2, 0.2]),
            tr(&[0.9, 0.1, 0.0, 0.6], 1, 1.5, &[0.4, 0.3, 0.1, 0.0]),
            tr(&[0.3, 0.7, 0.5, 0.2], 1, 0.0, &[0.8, 0.1, 0.6, 0.3]),
            tr(&[0.0, 0.4, 0.9, 0.1], 0, 2.0, &[0.1, 0.9, 0.2, 0.5]),
        ]
    }

    /// Loss with batch statistics and no dropout.
    fn train_loss(q: &QFunction, target: &QFunction, batch: &[Transition]) -> (f64, Vec<f64>) {
        let refs: Vec<&Transition> = batch.iter().collect();
        let (s, s_next) = batch_matrices(&refs, 4).unwrap();
        let mut rng = rng_from_seed(0);
        let cache = q.forward(&s, Some((&mut rng, 0.0)));
        let next = target.forward(&s_next, None).output;
        let (loss, d_out) = loss_and_output_grad(&cache.output, &next, &refs, 0.7, 0.8);
        (loss.total(), q.backward(&cache, d_out).tensors.concat())
    }

    fn assert_matches_finite_difference(q: &QFunction, f: impl Fn(&QFunction) -> (f64, Vec<f64>)) {
        let theta = q.parameters();
        let (_, grad) = f(q);
        assert_eq!(grad.len(), theta.len());
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut probe = q.clone();
            let mut shifted = theta.clone();
            shifted[i] += h;
            probe.set_parameters(&shifted).unwrap();
            let up = f(&probe).0;
            shifted[i] -= 2.0 * h;
            probe.set_parameters(&shifted).unwrap();
            let down = f(&probe).0;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn batch_norm_gradient_with_batch_statistics() {
        let q = QFunction::new(4, &[6, 5], 2, 3).unwrap().with_batch_norm();
        let mut q = q;
        // move scale and shift off their initial values
        let p: Vec<f64> = q.parameters().iter().enumerate().map(|(i, v)| v + 0.05 * ((i % 7) as f64 - 3.0)).collect();
        q.set_parameters(&p).unwrap();
        let target = QFunction::new(4, &[6, 5], 2, 4).unwrap();
        let data = batch();
        assert_matches_finite_difference(&q, |probe| train_loss(probe, &target, &data));
    }

    #[test]
    fn batch_norm_gradient_with_running_statistics() {
        let mut q = QFunction::new(4, &[6], 2, 5).unwrap().with_batch_norm();
        q.norms[0].running_mean = DVector::from_fn(6, |i, _| 0.1 * i as f64);
        q.norms[0].running_var = DVector::from_fn(6, |i, _| 0.5 + 0.2 * i as f64);
        let target = q.clone();
        let data = batch();
        assert_matches_finite_difference(&q, |probe| probe.loss_gradient(&data, &target, 0.7, 0.8).unwrap());
    }

    #[test]
    fn running_statistics_track_the_batch() {
        let mut q = QFunction::new(4, &[3], 2, 1).unwrap().with_batch_norm();
        let data = batch();
        let refs: Vec<&Transition> = data.iter().collect();
        let (s, _) = batch_matrices(&refs, 4).unwrap();
        let mut rng = rng_from_seed(0);
        let cache = q.forward(&s, Some((&mut rng, 0.0)));
        let (mean, var) = cache.norms[0].as_ref().unwrap().batch.clone().unwrap();
        q.update_running(&cache, 4);
        for r in 0..3 {
            assert!((q.norms[0].running_mean[r] - 0.1 * mean[r]).abs() < 1e-15);
            assert!((q.norms[0].running_var[r] - (0.9 + 0.1 * var[r] * 4.0 / 3.0)).abs() < 1e-15);
        }
        let json = serde_json::to_string(&q).unwrap();
        let back: QFunction = serde_json::from_str(&json).unwrap();
        assert_eq!(back, q);
    }
}
