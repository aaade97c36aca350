//! Zero-shifted sine network for `(p, V)`, its three-term loss with hand
//! written gradients, Adam training, adaptive data refinement and the
//! induced feedback controller.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::LinearAnalysis;
use crate::manifold::{generate_from_points, trajectory_rng, Dataset, GenerationConfig, Sample};
use crate::model::{ControlSystem, Matrix, Vector};

/// Feedforward network `n → hidden… → n+1` with `sin` on hidden layers and
/// a linear output layer. Outputs are shifted so that `forward(0) = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    weights: Vec<Matrix>,
    biases: Vec<Vector>,
    pub seed: u64,
}

impl Network {
    /// Glorot-uniform weights and biases, seeded.
    pub fn new(input: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(input + 1);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound)));
            biases.push(Vector::from_fn(fan_out, |_, _| rng.random_range(-bound..bound)));
        }
        Network { weights, biases, seed }
    }

    pub fn from_parts(weights: Vec<Matrix>, biases: Vec<Vector>, seed: u64) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidArgument("need one bias per weight matrix".into()));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != b.len() {
                return Err(Error::InvalidArgument(format!("layer {i}: bias length mismatch")));
            }
            if i > 0 && weights[i - 1].nrows() != w.ncols() {
                return Err(Error::InvalidArgument(format!("layer {i}: input width mismatch")));
            }
        }
        let net = Network { weights, biases, seed };
        if net.output() != net.input() + 1 {
            return Err(Error::InvalidArgument("output width must be input width + 1".into()));
        }
        Ok(net)
    }

    pub fn input(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output(&self) -> usize {
        self.weights.last().unwrap().nrows()
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.weights[..self.weights.len() - 1].iter().map(|w| w.nrows()).collect()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vector] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let len = w.len();
            w.as_mut_slice().copy_from_slice(&flat[at..at + len]);
            at += len;
            let len = b.len();
            b.as_mut_slice().copy_from_slice(&flat[at..at + len]);
            at += len;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Unshifted network output.
    pub fn raw(&self, x: &Vector) -> Vector {
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = w * &a + b;
            a = if i < last { z.map(f64::sin) } else { z };
        }
        a
    }

    /// `(p, V)` with the zero shift applied.
    pub fn forward(&self, x: &Vector) -> (Vector, f64) {
        split(&(self.raw(x) - self.raw(&Vector::zeros(self.input()))), self.input())
    }

    /// Exact `∂p/∂x` at the origin.
    pub fn jacobian_at_zero(&self) -> Matrix {
        let n = self.input();
        let last = self.weights.len() - 1;
        let mut a = Vector::zeros(n);
        let mut tangent = Matrix::identity(n, n);
        for i in 0..last {
            let z = &self.weights[i] * &a + &self.biases[i];
            let mut u = &self.weights[i] * &tangent;
            for (r, zr) in z.iter().enumerate() {
                u.row_mut(r).scale_mut(zr.cos());
            }
            tangent = u;
            a = z.map(f64::sin);
        }
        self.weights[last].rows(0, n) * tangent
    }

    fn forward_batch(&self, x: &Matrix) -> Cache {
        let last = self.weights.len() - 1;
        let mut acts = vec![x.clone()];
        let mut pre = Vec::with_capacity(last);
        for i in 0..=last {
            let mut z = &self.weights[i] * &acts[i];
            for mut col in z.column_iter_mut() {
                col += &self.biases[i];
            }
            if i < last {
                acts.push(z.map(f64::sin));
                pre.push(z);
            } else {
                return Cache { acts, pre, out: z };
            }
        }
        unreachable!()
    }
}

fn split(v: &Vector, n: usize) -> (Vector, f64) {
    (v.rows(0, n).into_owned(), v[n])
}

struct Cache {
    /// Layer inputs `a₀ = X, a₁, …`.
    acts: Vec<Matrix>,
    /// Hidden pre-activations.
    pre: Vec<Matrix>,
    out: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianNorm {
    Frobenius,
    Spectral,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    pub nu: f64,
    pub jacobian_norm: JacobianNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sigma1: 1.0,
            sigma2: 0.01,
            sigma3: 0.01,
            nu: 2.0,
            jacobian_norm: JacobianNorm::Frobenius,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let s = [self.sigma1, self.sigma2, self.sigma3];
        if s.iter().any(|v| !(*v >= 0.0)) || s.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidConfig("loss weights must be >= 0 with at least one positive".into()));
        }
        if !(self.nu >= 1.0) || !self.nu.is_finite() {
            return Err(Error::InvalidConfig("nu must lie in [1, inf)".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        LossWeights {
            sigma1: self.sigma1 * c,
            sigma2: self.sigma2 * c,
            sigma3: self.sigma3 * c,
            ..*self
        }
    }
}

fn matrix_norm(m: &Matrix, norm: JacobianNorm) -> f64 {
    match norm {
        JacobianNorm::Frobenius => m.norm(),
        JacobianNorm::Spectral => m.clone().svd(false, false).singular_values.max(),
    }
}

/// `∂‖M‖/∂M`, zero at `M = 0`.
fn matrix_norm_grad(m: &Matrix, norm: JacobianNorm) -> Matrix {
    match norm {
        JacobianNorm::Frobenius => {
            let f = m.norm();
            if f > 0.0 {
                m / f
            } else {
                Matrix::zeros(m.nrows(), m.ncols())
            }
        }
        JacobianNorm::Spectral => {
            let svd = m.clone().svd(true, true);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            let k = svd.singular_values.imax();
            if svd.singular_values[k] == 0.0 {
                return Matrix::zeros(m.nrows(), m.ncols());
            }
            u.column(k) * vt.row(k)
        }
    }
}

/// Inputs and targets in column form, with the origin prepended as column 0.
#[derive(Clone, Debug)]
pub struct Batch {
    x: Matrix,
    y: Matrix,
}

impl Batch {
    pub fn from_samples<'a, I>(n: usize, samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let b = samples.len();
        let mut x = Matrix::zeros(n, b + 1);
        let mut y = Matrix::zeros(n + 1, b + 1);
        for (j, s) in samples.iter().enumerate() {
            if s.x.len() != n || s.p.len() != n {
                return Err(Error::InvalidArgument(format!("sample {j} has the wrong dimension")));
            }
            x.column_mut(j + 1).copy_from(&s.x);
            y.view_mut((0, j + 1), (n, 1)).copy_from(&s.p);
            y[(n, j + 1)] = s.v;
        }
        Ok(Batch { x, y })
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let n = ds.samples.first().map(|s| s.x.len()).unwrap_or(0);
        Batch::from_samples(n, &ds.samples)
    }

    pub fn len(&self) -> usize {
        self.x.ncols() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn columns(&self, idx: &[usize]) -> Batch {
        let n = self.x.nrows();
        let mut x = Matrix::zeros(n, idx.len() + 1);
        let mut y = Matrix::zeros(n + 1, idx.len() + 1);
        for (j, &i) in idx.iter().enumerate() {
            x.column_mut(j + 1).copy_from(&self.x.column(i + 1));
            y.column_mut(j + 1).copy_from(&self.y.column(i + 1));
        }
        Batch { x, y }
    }
}

/// Loss value and its pieces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mean_term: f64,
    pub max_error: f64,
    pub jacobian_gap: f64,
    /// Index (within the batch) of the sample attaining `max_error`.
    pub argmax: usize,
}

/// Per-sample errors `(p_i, V_i) − (pᴺᴺ, Vᴺᴺ)(x_i)` (columns), using the
/// cached raw outputs.
fn errors(cache: &Cache, batch: &Batch) -> Matrix {
    let b = batch.len();
    let out0 = cache.out.column(0).into_owned();
    let mut e = batch.y.columns(1, b).into_owned();
    for (j, mut col) in e.column_iter_mut().enumerate() {
        col -= cache.out.column(j + 1) - &out0;
    }
    e
}

fn breakdown(net: &Network, cache: &Cache, batch: &Batch, w: &LossWeights, p: &Matrix) -> (LossBreakdown, Matrix, Matrix) {
    let e = errors(cache, batch);
    let b = batch.len();
    let norms: Vec<f64> = e.column_iter().map(|c| c.norm()).collect();
    let mean_term = norms.iter().map(|r| r.powf(w.nu)).sum::<f64>() / b as f64;
    let mut argmax = 0;
    for (j, r) in norms.iter().enumerate() {
        if *r > norms[argmax] {
            argmax = j;
        }
    }
    let jac = net.jacobian_at_zero();
    let gap_m = &jac - p;
    let jacobian_gap = matrix_norm(&gap_m, w.jacobian_norm);
    let total = w.sigma1 * mean_term + w.sigma2 * norms[argmax] + w.sigma3 * jacobian_gap;
    (
        LossBreakdown {
            total,
            mean_term,
            max_error: norms[argmax],
            jacobian_gap,
            argmax,
        },
        e,
        gap_m,
    )
}

pub fn loss(net: &Network, batch: &Batch, w: &LossWeights, p: &Matrix) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let cache = net.forward_batch(&batch.x);
    Ok(breakdown(net, &cache, batch, w, p).0)
}

/// Loss and its gradient, flattened in [`Network::params`] order.
pub fn loss_and_gradient(net: &Network, batch: &Batch, w: &LossWeights, p: &Matrix) -> Result<(LossBreakdown, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = net.input();
    let b = batch.len();
    let layers = net.weights.len();
    let last = layers - 1;
    let cache = net.forward_batch(&batch.x);
    let (lb, e, gap_m) = breakdown(net, &cache, batch, w, p);

    // ∂L/∂(prediction) per sample; prediction = raw(xᵢ) − raw(0).
    let mut dout = Matrix::zeros(n + 1, b + 1);
    if w.sigma1 != 0.0 {
        for j in 0..b {
            let ej = e.column(j);
            let r = ej.norm();
            let coef = if w.nu == 2.0 {
                2.0
            } else if r > 0.0 {
                w.nu * r.powf(w.nu - 2.0)
            } else {
                0.0
            };
            let g = ej * (-w.sigma1 * coef / b as f64);
            dout.column_mut(j + 1).copy_from(&g);
        }
    }
    if w.sigma2 != 0.0 && lb.max_error > 0.0 {
        let j = lb.argmax;
        let g = e.column(j) * (-w.sigma2 / lb.max_error);
        let mut col = dout.column_mut(j + 1);
        col += g;
    }
    let total_grad: Vector = dout.column_sum();
    dout.column_mut(0).copy_from(&(-total_grad));

    let mut dw: Vec<Matrix> = net.weights.iter().map(|m| Matrix::zeros(m.nrows(), m.ncols())).collect();
    let mut db: Vec<Vector> = net.biases.iter().map(|v| Vector::zeros(v.len())).collect();
    let mut inject: Vec<Vector> = cache.pre.iter().map(|z| Vector::zeros(z.nrows())).collect();

    // Jacobian term, reverse mode through the tangent recursion
    // T_{i+1} = diag(cos z_i(0)) W_i T_i, J = W_last[..n] T_last.
    if w.sigma3 != 0.0 && lb.jacobian_gap > 0.0 {
        let g = matrix_norm_grad(&gap_m, w.jacobian_norm) * w.sigma3;
        let mut tangents = vec![Matrix::identity(n, n)];
        let mut scaled = Vec::with_capacity(last);
        for i in 0..last {
            let u = &net.weights[i] * &tangents[i];
            let c = cache.pre[i].column(0).map(f64::cos);
            let mut t = u.clone();
            for (r, cr) in c.iter().enumerate() {
                t.row_mut(r).scale_mut(*cr);
            }
            scaled.push(u);
            tangents.push(t);
        }
        let top = net.weights[last].rows(0, n);
        {
            let mut rows = dw[last].rows_mut(0, n);
            rows += &g * tangents[last].transpose();
        }
        let mut gbar = top.transpose() * &g;
        for i in (0..last).rev() {
            let u = &scaled[i];
            let z0 = cache.pre[i].column(0);
            let mut du = gbar.clone();
            for r in 0..du.nrows() {
                let dc = gbar.row(r).dot(&u.row(r));
                inject[i][r] += -z0[r].sin() * dc;
                du.row_mut(r).scale_mut(z0[r].cos());
            }
            dw[i] += &du * tangents[i].transpose();
            gbar = net.weights[i].transpose() * du;
        }
    }

    let mut delta = dout;
    for l in (0..layers).rev() {
        dw[l] += &delta * cache.acts[l].transpose();
        db[l] += delta.column_sum();
        if l > 0 {
            let da = net.weights[l].transpose() * &delta;
            let mut d = da.component_mul(&cache.pre[l - 1].map(f64::cos));
            let mut c0 = d.column_mut(0);
            c0 += &inject[l - 1];
            delta = d;
        }
    }
    let mut grad = Vec::with_capacity(net.param_count());
    for (a, c) in dw.iter().zip(&db) {
        grad.extend_from_slice(a.as_slice());
        grad.extend_from_slice(c.as_slice());
    }
    Ok((lb, grad))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub base_lr: f64,
    /// The learning rate halves every `decay_every` epochs.
    pub decay_every: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Mini-batch size; `None` trains on the full batch.
    pub batch_size: Option<usize>,
    /// Validation loss is evaluated every `val_every` epochs (and at the end).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![60, 60, 60],
            epochs: 4000,
            base_lr: 1e-3,
            decay_every: 1500,
            weights: LossWeights::default(),
            seed: 0,
            batch_size: None,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let halvings = if self.decay_every == 0 { 0 } else { epoch / self.decay_every };
        self.base_lr * 0.5f64.powi(halvings as i32)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.base_lr > 0.0) {
            return Err(Error::InvalidConfig("base_lr must be positive".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        if self.batch_size == Some(0) || self.val_every == 0 {
            return Err(Error::InvalidConfig("batch_size and val_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub lr: Vec<f64>,
    /// Loss on the training set before each epoch's update (mean over
    /// mini-batches when batching).
    pub train_loss: Vec<f64>,
    /// Validation loss per epoch; `None` on epochs where it was skipped.
    pub val_loss: Vec<Option<f64>>,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub max_pointwise_error: f64,
    pub jacobian_gap: f64,
}

/// Trains `net` in place from its current parameters.
pub fn train(net0: &Network, train_set: &Batch, val_set: &Batch, p: &Matrix, cfg: &TrainConfig) -> Result<(Network, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be nonempty".into()));
    }
    let mut net = net0.clone();
    let mut params = net.params();
    let mut adam = Adam::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();
    let mut last_finite = net.clone();

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let epoch_loss = match cfg.batch_size {
            None => {
                let (lb, grad) = loss_and_gradient(&net, train_set, &cfg.weights, p)?;
                if !lb.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::TrainingDiverged {
                        epoch,
                        last_finite: Box::new(last_finite),
                    });
                }
                adam.step(&mut params, &grad, lr);
                lb.total
            }
            Some(size) => {
                order.shuffle(&mut rng);
                let mut acc = 0.0;
                let mut count = 0;
                for chunk in order.chunks(size) {
                    let mb = train_set.columns(chunk);
                    let (lb, grad) = loss_and_gradient(&net, &mb, &cfg.weights, p)?;
                    if !lb.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                        return Err(Error::TrainingDiverged {
                            epoch,
                            last_finite: Box::new(last_finite),
                        });
                    }
                    adam.step(&mut params, &grad, lr);
                    net.set_params(&params);
                    acc += lb.total;
                    count += 1;
                }
                acc / count as f64
            }
        };
        net.set_params(&params);
        if !net.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                last_finite: Box::new(last_finite),
            });
        }
        last_finite = net.clone();
        report.lr.push(lr);
        report.train_loss.push(epoch_loss);
        let val = if epoch % cfg.val_every == 0 || epoch + 1 == cfg.epochs {
            Some(loss(&net, val_set, &cfg.weights, p)?.total)
        } else {
            None
        };
        report.val_loss.push(val);
    }
    let final_train = loss(&net, train_set, &cfg.weights, p)?;
    if !final_train.total.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: cfg.epochs,
            last_finite: Box::new(last_finite),
        });
    }
    report.final_train_loss = final_train.total;
    report.final_val_loss = loss(&net, val_set, &cfg.weights, p)?.total;
    report.max_pointwise_error = final_train.max_error;
    report.jacobian_gap = (net.jacobian_at_zero() - p).norm();
    Ok((net, report))
}

/// Pointwise error norms `|(p_i, V_i) − (pᴺᴺ, Vᴺᴺ)(x_i)|` over a batch.
pub fn pointwise_errors(net: &Network, batch: &Batch) -> Vec<f64> {
    let cache = net.forward_batch(&batch.x);
    errors(&cache, batch).column_iter().map(|c| c.norm()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    /// Fraction of worst-fitted samples that spawn new trajectories.
    pub fraction: f64,
    pub per_point: usize,
    /// Angular perturbation is uniform in `[0, max_angle]` radians.
    pub max_angle: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            fraction: 0.1,
            per_point: 1,
            max_angle: 0.2,
            seed: 1,
        }
    }
}

/// Output of one refinement round.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub dataset: Dataset,
    pub attempted: usize,
    pub accepted: usize,
}

/// Spawns new trajectories around the worst-fitted samples and returns the
/// union with the original data.
pub fn adaptive_refine(
    net: &Network,
    data: &Dataset,
    sys: &ControlSystem,
    analysis: &LinearAnalysis,
    gen: &GenerationConfig,
    cfg: &RefineConfig,
) -> Result<Refinement> {
    if !(0.0..=1.0).contains(&cfg.fraction) {
        return Err(Error::InvalidConfig("refine fraction must lie in [0, 1]".into()));
    }
    let selected = (cfg.fraction * data.len() as f64).floor() as usize;
    if selected == 0 || cfg.per_point == 0 {
        return Ok(Refinement {
            dataset: data.clone(),
            attempted: 0,
            accepted: 0,
        });
    }
    let batch = Batch::from_dataset(data)?;
    let errs = pointwise_errors(net, &batch);
    let mut ranked: Vec<usize> = (0..errs.len()).collect();
    ranked.sort_by(|&a, &b| errs[b].total_cmp(&errs[a]).then(a.cmp(&b)));
    let n = sys.n();
    let mut starts = Vec::new();
    for (rank, &idx) in ranked.iter().take(selected).enumerate() {
        let x = &data.samples[idx].x;
        for k in 0..cfg.per_point {
            let mut rng = trajectory_rng(cfg.seed, (rank * cfg.per_point + k) as u64);
            let dir = if x.norm() > 0.0 {
                x.normalize()
            } else {
                crate::manifold::sample_sphere(&mut rng, n, 1.0)
            };
            let mut v = crate::manifold::sample_sphere(&mut rng, n, 1.0);
            v -= &dir * dir.dot(&v);
            let v = if v.norm() > 1e-12 { v.normalize() } else { Vector::zeros(n) };
            let theta = rng.random_range(0.0..=cfg.max_angle);
            let start = (dir * theta.cos() + v * theta.sin()) * gen.radius;
            starts.push((start, rng));
        }
    }
    let attempted = starts.len();
    let out = generate_from_points(sys, analysis, gen, starts, false)?;
    if out.dataset.meta.accepted == 0 {
        return Err(Error::RefineFailed { attempted });
    }
    Ok(Refinement {
        accepted: out.dataset.meta.accepted,
        attempted,
        dataset: data.merged(&out.dataset),
    })
}

/// `ũ(x) = −½W⁻¹g(x)ᵀpᴺᴺ(x)`.
#[derive(Clone)]
pub struct NnController {
    net: Arc<Network>,
    raw_zero: Vector,
    sys: ControlSystem,
}

impl NnController {
    pub fn control(&self, x: &Vector) -> Vector {
        let p = self.costate(x);
        self.sys.saddle_inputs(x, &p).0
    }

    pub fn costate(&self, x: &Vector) -> Vector {
        let n = self.net.input();
        (self.net.raw(x) - &self.raw_zero).rows(0, n).into_owned()
    }

    pub fn value(&self, x: &Vector) -> f64 {
        let n = self.net.input();
        self.net.raw(x)[n] - self.raw_zero[n]
    }

    pub fn network(&self) -> &Network {
        &self.net
    }
}

pub fn nn_controller(net: &Network, sys: &ControlSystem) -> Result<NnController> {
    if net.input() != sys.n() {
        return Err(Error::InvalidArgument(format!(
            "network input width {} does not match state dimension {}",
            net.input(),
            sys.n()
        )));
    }
    Ok(NnController {
        raw_zero: net.raw(&Vector::zeros(net.input())),
        net: Arc::new(net.clone()),
        sys: sys.clone(),
    })
}

/// Serialized network parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub activation: String,
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub layers: Vec<LayerRecord>,
    pub meta: TrainingMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingMeta {
    pub init_seed: u64,
    pub train_seed: u64,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub max_pointwise_error: f64,
    pub jacobian_gap: f64,
}

impl Checkpoint {
    pub fn from_network(net: &Network, meta: TrainingMeta) -> Self {
        let layers = net
            .weights
            .iter()
            .zip(&net.biases)
            .map(|(w, b)| LayerRecord {
                rows: w.nrows(),
                cols: w.ncols(),
                weights: w.transpose().as_slice().to_vec(),
                bias: b.as_slice().to_vec(),
            })
            .collect();
        Checkpoint {
            activation: "sine".into(),
            input: net.input(),
            hidden: net.hidden(),
            output: net.output(),
            layers,
            meta,
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        if self.activation != "sine" {
            return Err(Error::InvalidArgument(format!("unsupported activation `{}`", self.activation)));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(Error::InvalidArgument(format!("layer {i}: array sizes do not match its shape")));
            }
            weights.push(Matrix::from_row_slice(l.rows, l.cols, &l.weights));
            biases.push(Vector::from_column_slice(&l.bias));
        }
        let net = Network::from_parts(weights, biases, self.meta.init_seed)?;
        if net.input() != self.input || net.output() != self.output || net.hidden() != self.hidden {
            return Err(Error::InvalidArgument("layer shapes disagree with the header".into()));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::DatasetMeta;
    use crate::model::Gamma;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample(x: Vec<f64>, p: Vec<f64>, v: f64) -> Sample {
        Sample {
            traj: 0,
            t: 0.0,
            x: Vector::from_vec(x),
            p: Vector::from_vec(p),
            v,
        }
    }

    fn random_batch(n: usize, count: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Sample> = (0..count)
            .map(|_| {
                sample(
                    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        Batch::from_samples(n, &samples).unwrap()
    }

    #[test]
    fn zero_shift_and_zero_weights() {
        let net = Network::new(3, &[8, 8], 7);
        let (p, v) = net.forward(&Vector::zeros(3));
        assert_eq!(p, Vector::zeros(3));
        assert_eq!(v, 0.0);
        let mut zero = net.clone();
        zero.set_params(&vec![0.0; net.param_count()]);
        let (p, v) = zero.forward(&Vector::from_vec(vec![0.3, -0.2, 0.9]));
        assert_eq!((p.norm(), v), (0.0, 0.0));
        assert_eq!(zero.jacobian_at_zero(), Matrix::zeros(3, 3));
    }

    #[test]
    fn forward_is_shifted_raw() {
        let net = Network::new(2, &[5], 3);
        let x = Vector::from_vec(vec![0.4, -0.7]);
        let (p, v) = net.forward(&x);
        let diff = net.raw(&x) - net.raw(&Vector::zeros(2));
        assert_eq!(p, diff.rows(0, 2).into_owned());
        assert_eq!(v, diff[2]);
    }

    #[test]
    fn linear_output_layer_jacobian() {
        // No hidden layers: p = Mx.
        let m = Matrix::from_row_slice(3, 2, &[1.0, 2.0, -3.0, 0.5, 4.0, 4.0]);
        let net = Network::from_parts(vec![m.clone()], vec![Vector::from_vec(vec![0.1, 0.2, 0.3])], 0).unwrap();
        assert_eq!(net.jacobian_at_zero(), m.rows(0, 2).into_owned());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let net = Network::new(4, &[12, 12, 12], 5);
        let j = net.jacobian_at_zero();
        let eps = 1e-6;
        for k in 0..4 {
            let mut e = Vector::zeros(4);
            e[k] = eps;
            let col = (net.forward(&e).0 - net.forward(&(-&e)).0) / (2.0 * eps);
            for i in 0..4 {
                assert!((col[i] - j[(i, k)]).abs() <= 1e-6 * (1.0 + j[(i, k)].abs()));
            }
        }
    }

    #[test]
    fn loss_examples() {
        let n = 1;
        let p = Matrix::zeros(1, 1);
        // Single linear layer with weight 0, bias chosen so the shifted output
        // is exactly the input times the weights; use weights on x = 1.
        let net = Network::from_parts(
            vec![Matrix::from_row_slice(2, 1, &[0.3, 0.4])],
            vec![Vector::zeros(2)],
            0,
        )
        .unwrap();
        let batch = Batch::from_samples(n, &[sample(vec![1.0], vec![0.0], 0.0)]).unwrap();
        let w = LossWeights {
            sigma1: 1.0,
            sigma2: 0.0,
            sigma3: 0.0,
            ..LossWeights::default()
        };
        let l = loss(&net, &batch, &w, &p).unwrap();
        assert!((l.total - 0.25).abs() < 1e-15);

        // Two samples with error norms 0.1 and 0.7 under the max term.
        let zero = Network::from_parts(vec![Matrix::zeros(2, 1)], vec![Vector::zeros(2)], 0).unwrap();
        let batch = Batch::from_samples(
            n,
            &[sample(vec![0.5], vec![0.1], 0.0), sample(vec![-0.5], vec![0.0], 0.7)],
        )
        .unwrap();
        let w = LossWeights {
            sigma1: 0.0,
            sigma2: 1.0,
            sigma3: 0.0,
            ..LossWeights::default()
        };
        let l = loss(&zero, &batch, &w, &p).unwrap();
        assert!((l.total - 0.7).abs() < 1e-15);
        assert_eq!(l.argmax, 1);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let none: Vec<Sample> = Vec::new();
        assert!(matches!(Batch::from_samples(2, &none), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let net = Network::new(2, &[6], 9);
        let xs = [vec![0.3, 0.1], vec![-0.5, 0.2]];
        let samples: Vec<Sample> = xs
            .iter()
            .map(|x| {
                let (p, v) = net.forward(&Vector::from_vec(x.clone()));
                Sample {
                    traj: 0,
                    t: 0.0,
                    x: Vector::from_vec(x.clone()),
                    p,
                    v,
                }
            })
            .collect();
        let batch = Batch::from_samples(2, &samples).unwrap();
        let l = loss(&net, &batch, &LossWeights::default(), &net.jacobian_at_zero()).unwrap();
        assert!(l.total.abs() < 1e-14);
    }

    fn directional_check(w: LossWeights, seed: u64) {
        let net = Network::new(3, &[7, 6, 5], seed);
        let batch = random_batch(3, 9, seed + 100);
        let p = Matrix::from_fn(3, 3, |i, j| 0.1 * (i as f64 + 1.0) - 0.05 * j as f64);
        let (_, grad) = loss_and_gradient(&net, &batch, &w, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let theta = net.params();
        for _ in 0..20 {
            let dir: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let h = 1e-6;
            let eval = |s: f64| {
                let mut m = net.clone();
                let shifted: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + s * d).collect();
                m.set_params(&shifted);
                loss(&m, &batch, &w, &p).unwrap().total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - analytic).abs() <= 1e-4 * fd.abs().max(analytic.abs()).max(1e-8),
                "fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        directional_check(LossWeights::default(), 1);
        directional_check(
            LossWeights {
                sigma1: 0.0,
                sigma2: 0.0,
                sigma3: 1.0,
                ..LossWeights::default()
            },
            2,
        );
        directional_check(
            LossWeights {
                sigma1: 0.5,
                sigma2: 0.2,
                sigma3: 0.3,
                nu: 1.5,
                jacobian_norm: JacobianNorm::Spectral,
            },
            3,
        );
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(0), 1e-3);
        assert_eq!(cfg.learning_rate(1499), 1e-3);
        assert_eq!(cfg.learning_rate(1500), 5e-4);
        assert_eq!(cfg.learning_rate(3000), 2.5e-4);
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let net = Network::new(2, &[4], 1);
        let batch = random_batch(2, 5, 2);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, report) = train(&net, &batch, &batch, &Matrix::zeros(2, 2), &cfg).unwrap();
        assert_eq!(out, net);
        assert!(report.train_loss.is_empty());
    }

    fn quadratic_dataset(p: &Matrix, count: usize, seed: u64) -> Vec<Sample> {
        let n = p.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let r = rng.random_range(0.05..0.8);
                let x = crate::manifold::sample_sphere(&mut rng, n, r);
                let px = p * &x;
                Sample {
                    traj: 0,
                    t: 0.0,
                    v: 0.5 * x.dot(&px),
                    p: px,
                    x,
                }
            })
            .collect()
    }

    #[test]
    fn linear_problem_training_sanity() {
        let p = Matrix::from_row_slice(2, 2, &[0.8, 0.1, 0.1, 0.5]);
        let train_s = quadratic_dataset(&p, 200, 1);
        let val_s = quadratic_dataset(&p, 50, 2);
        let tb = Batch::from_samples(2, &train_s).unwrap();
        let vb = Batch::from_samples(2, &val_s).unwrap();
        let cfg = TrainConfig {
            hidden: vec![16, 16],
            epochs: 2000,
            base_lr: 3e-3,
            seed: 4,
            val_every: 100,
            ..TrainConfig::default()
        };
        let net = Network::new(2, &cfg.hidden, 3);
        let (trained, report) = train(&net, &tb, &vb, &p, &cfg).unwrap();
        assert!(report.final_train_loss <= 1e-3, "loss {}", report.final_train_loss);
        assert_eq!(report.train_loss.len(), 2000);
        assert_eq!(trained.forward(&Vector::zeros(2)).0, Vector::zeros(2));
        // Repeatable given the seeds.
        let (again, _) = train(&net, &tb, &vb, &p, &cfg).unwrap();
        assert_eq!(again, trained);
    }

    #[test]
    fn minibatch_training_runs() {
        let p = Matrix::identity(2, 2) * 0.5;
        let tb = Batch::from_samples(2, &quadratic_dataset(&p, 40, 1)).unwrap();
        let cfg = TrainConfig {
            hidden: vec![8],
            epochs: 5,
            batch_size: Some(16),
            ..TrainConfig::default()
        };
        let net = Network::new(2, &cfg.hidden, 3);
        let (_, report) = train(&net, &tb, &tb, &p, &cfg).unwrap();
        assert_eq!(report.val_loss.len(), 5);
    }

    #[test]
    fn controller_vanishes_at_origin_and_matches_linear_gain() {
        let sys = ControlSystem::scalar_lq(-1.0, Gamma::Infinite, 0.0).unwrap();
        let net = Network::new(1, &[6, 6], 2);
        let ctl = nn_controller(&net, &sys).unwrap();
        assert_eq!(ctl.control(&Vector::zeros(1))[0], 0.0);

        let pval = -2.0 + 2.0 * 2f64.sqrt();
        let exact = Network::from_parts(
            vec![Matrix::from_row_slice(2, 1, &[pval, 0.0])],
            vec![Vector::zeros(2)],
            0,
        )
        .unwrap();
        let ctl = nn_controller(&exact, &sys).unwrap();
        let u = ctl.control(&Vector::from_element(1, 0.6));
        assert!((u[0] + 0.5 * pval * 0.6).abs() < 1e-15);
        // Closed loop a + R̃P = −1 − ½P = −√2.
        assert!((-1.0 - 0.5 * pval + 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = Network::new(3, &[5, 4], 11);
        let ck = Checkpoint::from_network(&net, TrainingMeta::default());
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_network().unwrap().params(), net.params());
        assert_eq!(ck.layers[0].weights[1], net.weights()[0][(0, 1)]);
    }

    #[test]
    fn refine_with_zero_fraction_is_identity() {
        let sys = ControlSystem::scalar_lq(-1.0, Gamma::Infinite, 0.1).unwrap();
        let la = crate::linear::analyze(&sys).unwrap();
        let data = Dataset {
            meta: DatasetMeta {
                n: 1,
                gamma: Gamma::Infinite,
                alpha: 0.1,
                horizon: 1.0,
                attempted: 1,
                accepted: 1,
                rejected: 0,
                config: GenerationConfig::default(),
            },
            samples: vec![sample(vec![0.5], vec![0.2], 0.05)],
        };
        let net = Network::new(1, &[4], 0);
        let cfg = RefineConfig {
            fraction: 0.0,
            ..RefineConfig::default()
        };
        let out = adaptive_refine(&net, &data, &sys, &la, &GenerationConfig::default(), &cfg).unwrap();
        assert_eq!(out.dataset, data);
        assert_eq!(out.attempted, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn forward_zero_is_exactly_zero(seed in 0u64..10_000) {
            let net = Network::new(3, &[6, 6], seed);
            let (p, v) = net.forward(&Vector::zeros(3));
            prop_assert_eq!(p, Vector::zeros(3));
            prop_assert_eq!(v, 0.0);
        }

        #[test]
        fn loss_scales_with_sigmas(seed in 0u64..10_000, k in -6i32..6) {
            // Powers of two scale every term exactly.
            let c = 2f64.powi(k);
            let net = Network::new(2, &[5], seed);
            let batch = random_batch(2, 6, seed);
            let p = Matrix::identity(2, 2);
            let w = LossWeights::default();
            let a = loss(&net, &batch, &w, &p).unwrap().total;
            let b = loss(&net, &batch, &w.scaled(c), &p).unwrap().total;
            prop_assert_eq!(b, c * a);
        }

        #[test]
        fn controller_error_bound(seed in 0u64..10_000, x in proptest::collection::vec(-0.8f64..0.8, 3)) {
            // |ũ − u*| ≤ ½‖W⁻¹‖‖g‖|pᴺᴺ − p| for any reference costate p.
            let sys = crate::model::build_allen_cahn(&crate::model::AllenCahnConfig {
                intervals: 4, sigma: 0.1, gamma: Gamma::Finite(1.2), alpha_fraction: 0.5,
            }).unwrap();
            let net = Network::new(3, &[5], seed);
            let ctl = nn_controller(&net, &sys).unwrap();
            let x = Vector::from_vec(x);
            let p_ref = &x * 0.3;
            let u_star = sys.saddle_inputs(&x, &p_ref).0;
            let gap = (ctl.control(&x) - u_star).norm();
            let w_inv = sys.control_weight_inv().clone().svd(false, false).singular_values.max();
            let g = sys.input_map(&x).svd(false, false).singular_values.max();
            let bound = 0.5 * w_inv * g * (ctl.costate(&x) - p_ref).norm();
            prop_assert!(gap <= bound * (1.0 + 1e-12) + 1e-15);
        }
    }
}
