//! Trajectories on the stable manifold of the contact characteristic system:
//! Picard iteration for the local two-point problem, backward extension,
//! value recovery and dataset assembly.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::{DecouplingTransform, LinearAnalysis};
use crate::model::{ControlSystem, Gamma, Matrix, Vector};
use crate::ode::{Dopri5, Flow, OdeOptions, Outcome};

/// `T∞ = −ln(tail_tol)/margin`, rounded up to one decimal.
pub fn pick_horizon(margin: f64, tail_tol: f64) -> Result<f64> {
    if !(margin > 0.0) {
        return Err(Error::NotHyperbolic {
            n: 0,
            stable: 0,
            min_abs_re: margin,
        });
    }
    if !(tail_tol > 0.0 && tail_tol < 1.0) {
        return Err(Error::InvalidArgument(format!("tail_tol must lie in (0, 1), got {tail_tol}")));
    }
    let raw = -tail_tol.ln() / margin;
    // Guard against 10.000000000000002 rounding up to 10.1.
    Ok(((raw * 10.0) - 1e-9).ceil() / 10.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// Exact integration of the piecewise-linear interpolant of `N`.
    Exponential,
    Trapezoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BvpOptions {
    /// Base step is `T∞/steps`.
    pub steps: usize,
    /// Number of halvings of the base step near `t = 0`.
    pub refine_levels: usize,
    /// Steps taken at each refinement level.
    pub refine_steps: usize,
    pub quadrature: Quadrature,
    pub tol: f64,
    pub max_iter: usize,
    /// Iterates larger than `blowup_factor · radius` abort the iteration.
    pub blowup_factor: f64,
}

impl Default for BvpOptions {
    fn default() -> Self {
        BvpOptions {
            steps: 2000,
            refine_levels: 6,
            refine_steps: 64,
            quadrature: Quadrature::Exponential,
            tol: 1e-8,
            max_iter: 100,
            blowup_factor: 1e3,
        }
    }
}

impl BvpOptions {
    /// Uniform grid with the plain trapezoidal rule.
    pub fn uniform_trapezoid() -> Self {
        BvpOptions {
            refine_levels: 0,
            quadrature: Quadrature::Trapezoid,
            ..BvpOptions::default()
        }
    }
}

/// Time grid on `[0, T∞]`: steps of `dt/2^L, …, dt/2` (each repeated
/// `refine_steps` times) followed by uniform steps of `dt = T∞/steps`.
pub fn bvp_grid(t_inf: f64, opts: &BvpOptions) -> Vec<f64> {
    let dt = t_inf / opts.steps as f64;
    let mut times = vec![0.0];
    let mut t = 0.0;
    for level in (1..=opts.refine_levels).rev() {
        let h = dt / f64::powi(2.0, level as i32);
        for _ in 0..opts.refine_steps {
            t += h;
            times.push(t);
        }
    }
    let fine_end = t;
    let mut k = 1usize;
    loop {
        let next = fine_end + k as f64 * dt;
        if next >= t_inf - 1e-9 * dt {
            break;
        }
        times.push(next);
        k += 1;
    }
    if t_inf > *times.last().unwrap() {
        times.push(t_inf);
    }
    times
}

struct StepKernel {
    exp_b: Matrix,
    phi1_b: Matrix,
    phi2_b: Matrix,
    exp_f: Matrix,
    phi1_f: Matrix,
    phi2_f: Matrix,
}

/// `(e^{M h}, ∫₀ʰ e^{M s} ds, (1/h)∫₀ʰ e^{M(h−s)} s ds)` from one
/// augmented exponential.
fn phi_blocks(m: &Matrix, h: f64) -> (Matrix, Matrix, Matrix) {
    let n = m.nrows();
    let mut z = Matrix::zeros(3 * n, 3 * n);
    z.view_mut((0, 0), (n, n)).copy_from(&(m * h));
    for i in 0..n {
        z[(i, n + i)] = h;
        z[(n + i, 2 * n + i)] = h;
    }
    let e = z.exp();
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, n)).into_owned(),
        e.view((0, 2 * n), (n, n)).into_owned() / h,
    )
}

/// Grid and step propagators for the Picard iteration, shared by every
/// trajectory of a run.
pub struct BvpPlan {
    times: Vec<f64>,
    kernel_of_step: Vec<usize>,
    kernels: Vec<StepKernel>,
    quadrature: Quadrature,
    opts: BvpOptions,
}

impl BvpPlan {
    pub fn new(tr: &DecouplingTransform, t_inf: f64, opts: &BvpOptions) -> Result<Self> {
        if !(t_inf > 0.0) || opts.steps == 0 {
            return Err(Error::InvalidConfig("BVP horizon and step count must be positive".into()));
        }
        let times = bvp_grid(t_inf, opts);
        let mut kernels: Vec<StepKernel> = Vec::new();
        let mut widths: Vec<f64> = Vec::new();
        let mut kernel_of_step = Vec::with_capacity(times.len() - 1);
        for w in times.windows(2) {
            let h = w[1] - w[0];
            let found = widths.iter().position(|&x| (x - h).abs() <= 1e-12 * h);
            let idx = match found {
                Some(i) => i,
                None => {
                    let (exp_b, phi1_b, phi2_b) = phi_blocks(&tr.bmat, h);
                    let (exp_f, phi1_f, phi2_f) = phi_blocks(&tr.fmat, h);
                    kernels.push(StepKernel {
                        exp_b,
                        phi1_b,
                        phi2_b,
                        exp_f,
                        phi1_f,
                        phi2_f,
                    });
                    widths.push(h);
                    kernels.len() - 1
                }
            };
            kernel_of_step.push(idx);
        }
        Ok(BvpPlan {
            times,
            kernel_of_step,
            kernels,
            quadrature: opts.quadrature,
            opts: *opts,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// Solution of the local problem on `[0, T∞]` in original coordinates.
#[derive(Clone, Debug)]
pub struct LocalSolution {
    pub times: Vec<f64>,
    pub x: Vec<Vector>,
    pub p: Vec<Vector>,
    pub iterations: usize,
    pub last_update: f64,
}

fn sup_diff(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v).amax())
        .fold(0.0, f64::max)
}

/// Picard iteration for `x̄(0) = x̄₀`, `p̄(T∞) = 0`.
pub fn solve_local_bvp(sys: &ControlSystem, tr: &DecouplingTransform, plan: &BvpPlan, xbar0: &Vector) -> Result<LocalSolution> {
    let n = tr.n();
    let steps = plan.times.len() - 1;
    let cap = plan.opts.blowup_factor * sys.domain_radius();
    let dts: Vec<f64> = plan.times.windows(2).map(|w| w[1] - w[0]).collect();

    let mut xb = Vec::with_capacity(steps + 1);
    xb.push(xbar0.clone());
    for k in 0..steps {
        let next = &plan.kernels[plan.kernel_of_step[k]].exp_b * &xb[k];
        xb.push(next);
    }
    let mut pb = vec![Vector::zeros(n); steps + 1];
    let mut ns = vec![Vector::zeros(n); steps + 1];
    let mut nu = vec![Vector::zeros(n); steps + 1];

    let mut update = f64::INFINITY;
    for iteration in 1..=plan.opts.max_iter {
        for k in 0..=steps {
            let (a, b) = crate::linear::nonlinear_residuals(sys, tr, &xb[k], &pb[k])?;
            ns[k] = a;
            nu[k] = b;
        }
        let mut new_x = Vec::with_capacity(steps + 1);
        new_x.push(xbar0.clone());
        for k in 0..steps {
            let ker = &plan.kernels[plan.kernel_of_step[k]];
            let next = match plan.quadrature {
                Quadrature::Exponential => {
                    &ker.exp_b * &new_x[k] + &ker.phi1_b * &ns[k] + &ker.phi2_b * (&ns[k + 1] - &ns[k])
                }
                Quadrature::Trapezoid => {
                    let h = 0.5 * dts[k];
                    &ker.exp_b * (&new_x[k] + &ns[k] * h) + &ns[k + 1] * h
                }
            };
            new_x.push(next);
        }
        let mut new_p = vec![Vector::zeros(n); steps + 1];
        for k in (1..=steps).rev() {
            let ker = &plan.kernels[plan.kernel_of_step[k - 1]];
            new_p[k - 1] = match plan.quadrature {
                Quadrature::Exponential => {
                    &ker.exp_f * &new_p[k] - (&ker.phi1_f * &nu[k] + &ker.phi2_f * (&nu[k - 1] - &nu[k]))
                }
                Quadrature::Trapezoid => {
                    let h = 0.5 * dts[k - 1];
                    &ker.exp_f * (&new_p[k] - &nu[k] * h) - &nu[k - 1] * h
                }
            };
        }
        update = sup_diff(&new_x, &xb).max(sup_diff(&new_p, &pb));
        let norm = new_x
            .iter()
            .chain(new_p.iter())
            .map(|v| v.amax())
            .fold(0.0, f64::max);
        if !norm.is_finite() || norm > cap || !update.is_finite() {
            return Err(Error::BvpBlowup {
                iteration,
                norm,
                cap,
            });
        }
        xb = new_x;
        pb = new_p;
        if update < plan.opts.tol {
            let (x, p): (Vec<_>, Vec<_>) = xb.iter().zip(&pb).map(|(a, b)| tr.to_original(a, b)).unzip();
            return Ok(LocalSolution {
                times: plan.times.clone(),
                x,
                p,
                iterations: iteration,
                last_update: update,
            });
        }
    }
    Err(Error::BvpDiverged {
        iterations: plan.opts.max_iter,
        update,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMethod {
    /// Integrates `V̇ = ẋᵀp` backward from `V(T∞) = ½xᵀPx`.
    Ode,
    /// `V = (pᵀf + pᵀMp + xᵀQx)/α` from `H̄ = 0`.
    Algebraic,
}

fn second_derivative_x(sys: &ControlSystem, x: &Vector, p: &Vector, xd: &Vector, pd: &Vector) -> Result<Vector> {
    if sys.has_constant_maps() {
        Ok(sys.drift_jacobian(x) * xd + sys.coupling_matrix(x) * pd * 2.0)
    } else {
        let eps = 1e-6 / (1.0 + xd.norm() + pd.norm());
        let (a, _) = sys.characteristic_field(&(x + xd * eps), &(p + pd * eps))?;
        let (b, _) = sys.characteristic_field(&(x - xd * eps), &(p - pd * eps))?;
        Ok((a - b) / (2.0 * eps))
    }
}

/// Value along a solved trajectory with increasing `times`.
pub fn recover_value(
    sys: &ControlSystem,
    times: &[f64],
    xs: &[Vector],
    ps: &[Vector],
    p_mat: &Matrix,
    method: ValueMethod,
) -> Result<Vec<f64>> {
    if times.is_empty() {
        return Ok(Vec::new());
    }
    match method {
        ValueMethod::Algebraic => {
            let alpha = sys.alpha();
            if alpha <= 0.0 {
                return Err(Error::MethodUnavailable("algebraic value recovery requires alpha > 0"));
            }
            Ok(xs
                .iter()
                .zip(ps)
                .map(|(x, p)| (sys.contact_hamiltonian(x, 0.0, p)) / alpha)
                .collect())
        }
        ValueMethod::Ode => {
            let len = times.len();
            let mut g = Vec::with_capacity(len);
            let mut gd = Vec::with_capacity(len);
            for (x, p) in xs.iter().zip(ps) {
                let (xd, pd) = sys.characteristic_field(x, p)?;
                let xdd = second_derivative_x(sys, x, p, &xd, &pd)?;
                g.push(xd.dot(p));
                gd.push(xdd.dot(p) + xd.dot(&pd));
            }
            let mut v = vec![0.0; len];
            let last = &xs[len - 1];
            v[len - 1] = 0.5 * last.dot(&(p_mat * last));
            for k in (1..len).rev() {
                let h = times[k] - times[k - 1];
                v[k - 1] = v[k] - 0.5 * h * (g[k] + g[k - 1]) - h * h / 12.0 * (gd[k - 1] - gd[k]);
            }
            Ok(v)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: Vector,
    pub p: Vector,
    pub v: f64,
}

#[derive(Clone, Debug)]
pub struct Extension {
    pub points: Vec<TrajectoryPoint>,
    /// Set when the integrator gave up before reaching `T₋`.
    pub truncated: bool,
}

/// Integrates `(x, p, V)` backward from `t = 0` and stores `count` points at
/// `t = T₋·j/count`, `j = 1..=count`, returned in increasing time.
pub fn extend_backward(
    sys: &ControlSystem,
    head: (&Vector, &Vector, f64),
    t_minus: f64,
    count: usize,
    integrator_tol: f64,
    domain_box: f64,
) -> Result<Extension> {
    if t_minus > 0.0 {
        return Err(Error::InvalidArgument("T₋ must be ≤ 0".into()));
    }
    if t_minus == 0.0 || count == 0 {
        return Ok(Extension {
            points: Vec::new(),
            truncated: false,
        });
    }
    let n = sys.n();
    let rhs = |_t: f64, y: &Vector| -> Result<Vector> {
        let x = y.rows(0, n).into_owned();
        let p = y.rows(n, n).into_owned();
        let (xd, pd) = sys.characteristic_field(&x, &p)?;
        let mut out = Vector::zeros(2 * n + 1);
        out.rows_mut(0, n).copy_from(&xd);
        out.rows_mut(n, n).copy_from(&pd);
        out[2 * n] = xd.dot(&p);
        Ok(out)
    };
    let mut y = Vector::zeros(2 * n + 1);
    y.rows_mut(0, n).copy_from(head.0);
    y.rows_mut(n, n).copy_from(head.1);
    y[2 * n] = head.2;
    let mut solver = Dopri5::new(rhs, OdeOptions::with_tol(integrator_tol));
    let mut t = 0.0;
    let mut points = Vec::with_capacity(count);
    let mut truncated = false;
    for j in 1..=count {
        let target = t_minus * j as f64 / count as f64;
        let outcome = solver.advance(&mut t, &mut y, target, |_, y| {
            if y.rows(0, n).amax() > domain_box {
                Flow::Stop
            } else {
                Flow::Continue
            }
        });
        match outcome {
            Ok(Outcome::Reached) => points.push(TrajectoryPoint {
                t: target,
                x: y.rows(0, n).into_owned(),
                p: y.rows(n, n).into_owned(),
                v: y[2 * n],
            }),
            Ok(Outcome::Stopped { t }) => return Err(Error::LeftDomain { t }),
            Err(Error::StiffExtension { .. }) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    points.reverse();
    Ok(Extension { points, truncated })
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Increasing in `t`, spanning `[T₋, T∞]`.
    pub points: Vec<TrajectoryPoint>,
    /// Number of leading points with `t < 0`.
    pub negative_count: usize,
    pub h_residual_max: f64,
    /// `max |V_ode − V_alg|` over the local part; zero when `α = 0`.
    pub value_discrepancy: f64,
    pub bvp_iterations: usize,
    pub converged: bool,
    pub extension_truncated: bool,
    /// `|x(T∞)| / |x(0)|`.
    pub tail_ratio: f64,
}

impl Trajectory {
    pub fn residuals(&self, sys: &ControlSystem) -> Vec<f64> {
        self.points
            .iter()
            .map(|pt| sys.contact_hamiltonian(&pt.x, pt.v, &pt.p))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub count: usize,
    pub radius: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
    /// Overrides the horizon picked from the margin and `tail_tol`.
    pub horizon: Option<f64>,
    pub tail_tol: f64,
    pub t_minus: f64,
    /// Stored points of the backward extension.
    pub negative_points: usize,
    pub integrator_tol: f64,
    pub residual_tol: f64,
    /// Gate on `max |V_ode − V_alg| / (1 + max |V|)`.
    pub value_tol: f64,
    /// Gate on `|x(T∞)| / |x(0)|`.
    pub tail_ratio_max: f64,
    /// The backward extension is rejected once `|x|_∞` exceeds this multiple
    /// of the domain radius.
    pub domain_box_factor: f64,
    pub bvp: BvpOptions,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            count: 100,
            radius: 0.8,
            n_pos: 22,
            n_neg: 4,
            seed: 0,
            horizon: None,
            tail_tol: 1e-5,
            t_minus: -0.015,
            negative_points: 32,
            integrator_tol: 1e-9,
            residual_tol: 1e-5,
            value_tol: 1e-5,
            tail_ratio_max: 1e-3,
            domain_box_factor: 2.0,
            bvp: BvpOptions::default(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.radius > 0.0) {
            return bad("radius must be positive");
        }
        if self.t_minus > 0.0 {
            return bad("t_minus must be <= 0");
        }
        if !(self.residual_tol > 0.0 && self.integrator_tol > 0.0 && self.value_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.bvp.steps == 0 || self.bvp.max_iter == 0 {
            return bad("bvp.steps and bvp.max_iter must be positive");
        }
        if let Some(h) = self.horizon {
            if !(h > 0.0) {
                return bad("horizon must be positive");
            }
        }
        Ok(())
    }

    pub fn resolve_horizon(&self, analysis: &LinearAnalysis) -> Result<f64> {
        match self.horizon {
            Some(h) => Ok(h),
            None => pick_horizon(analysis.cert.horizon_margin, self.tail_tol),
        }
    }
}

/// Solves, extends and validates one trajectory starting from `x̄₀`.
pub fn compute_trajectory(
    sys: &ControlSystem,
    analysis: &LinearAnalysis,
    plan: &BvpPlan,
    cfg: &GenerationConfig,
    xbar0: &Vector,
) -> Result<Trajectory> {
    let local = solve_local_bvp(sys, &analysis.transform, plan, xbar0)?;
    let p_mat = &analysis.cert.p;
    let v_ode = recover_value(sys, &local.times, &local.x, &local.p, p_mat, ValueMethod::Ode)?;
    let value_discrepancy = if sys.alpha() > 0.0 {
        let v_alg = recover_value(sys, &local.times, &local.x, &local.p, p_mat, ValueMethod::Algebraic)?;
        v_ode.iter().zip(&v_alg).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    } else {
        0.0
    };
    let ext = extend_backward(
        sys,
        (&local.x[0], &local.p[0], v_ode[0]),
        cfg.t_minus,
        cfg.negative_points,
        cfg.integrator_tol,
        cfg.domain_box_factor * sys.domain_radius(),
    )?;
    let negative_count = ext.points.len();
    let mut points = ext.points;
    points.extend(
        local
            .times
            .iter()
            .zip(local.x.iter().zip(&local.p))
            .zip(&v_ode)
            .map(|((&t, (x, p)), &v)| TrajectoryPoint {
                t,
                x: x.clone(),
                p: p.clone(),
                v,
            }),
    );
    let h_residual_max = points
        .iter()
        .map(|pt| sys.contact_hamiltonian(&pt.x, pt.v, &pt.p).abs())
        .fold(0.0, f64::max);
    let x0 = local.x[0].norm();
    let tail_ratio = if x0 > 0.0 { local.x.last().unwrap().norm() / x0 } else { 0.0 };
    Ok(Trajectory {
        points,
        negative_count,
        h_residual_max,
        value_discrepancy,
        bvp_iterations: local.iterations,
        converged: true,
        extension_truncated: ext.truncated,
        tail_ratio,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    BvpDiverged,
    BvpBlowup,
    LeftDomain,
    Residual,
    ValueMismatch,
    Tail,
    Other,
}

impl RejectReason {
    pub fn label(self) -> &'static str {
        match self {
            RejectReason::BvpDiverged => "bvp-diverged",
            RejectReason::BvpBlowup => "bvp-blowup",
            RejectReason::LeftDomain => "left-domain",
            RejectReason::Residual => "hamiltonian-residual",
            RejectReason::ValueMismatch => "value-mismatch",
            RejectReason::Tail => "tail",
            RejectReason::Other => "other",
        }
    }
}

/// Applies the acceptance gates of `cfg` to a computed trajectory.
pub fn gate(traj: &Trajectory, cfg: &GenerationConfig) -> std::result::Result<(), RejectReason> {
    let vmax = traj.points.iter().map(|pt| pt.v.abs()).fold(0.0, f64::max);
    if !(traj.h_residual_max <= cfg.residual_tol) {
        Err(RejectReason::Residual)
    } else if !(traj.value_discrepancy <= cfg.value_tol * (1.0 + vmax)) {
        Err(RejectReason::ValueMismatch)
    } else if !(traj.tail_ratio <= cfg.tail_ratio_max) {
        Err(RejectReason::Tail)
    } else {
        Ok(())
    }
}

fn classify(err: &Error) -> RejectReason {
    match err {
        Error::BvpDiverged { .. } => RejectReason::BvpDiverged,
        Error::BvpBlowup { .. } => RejectReason::BvpBlowup,
        Error::LeftDomain { .. } => RejectReason::LeftDomain,
        _ => RejectReason::Other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub traj: usize,
    pub t: f64,
    pub x: Vector,
    pub p: Vector,
    pub v: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub n: usize,
    pub gamma: Gamma,
    pub alpha: f64,
    pub horizon: f64,
    pub attempted: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub config: GenerationConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off every `every`-th trajectory (in order of appearance) as a
    /// held-out set; with fewer than `every` trajectories the last one is
    /// held out. Metadata counts are left as generated.
    pub fn split_by_trajectory(&self, every: usize) -> (Dataset, Dataset) {
        let every = every.max(2);
        let mut ids: Vec<usize> = Vec::new();
        for s in &self.samples {
            if ids.last() != Some(&s.traj) && !ids.contains(&s.traj) {
                ids.push(s.traj);
            }
        }
        let held: Vec<usize> = if ids.len() < 2 {
            Vec::new()
        } else if ids.len() < every {
            vec![ids[ids.len() - 1]]
        } else {
            ids.iter().enumerate().filter(|(k, _)| k % every == every - 1).map(|(_, &id)| id).collect()
        };
        let (out, kept): (Vec<Sample>, Vec<Sample>) = self.samples.iter().cloned().partition(|s| held.contains(&s.traj));
        let part = |samples| Dataset {
            meta: self.meta.clone(),
            samples,
        };
        (part(kept), part(out))
    }

    /// Concatenates `other` after `self`, renumbering its trajectories.
    pub fn merged(&self, other: &Dataset) -> Dataset {
        let offset = self.meta.attempted;
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().map(|s| Sample {
            traj: s.traj + offset,
            ..s.clone()
        }));
        let mut meta = self.meta.clone();
        meta.attempted += other.meta.attempted;
        meta.accepted += other.meta.accepted;
        meta.rejected += other.meta.rejected;
        meta.config.count += other.meta.config.count;
        Dataset { meta, samples }
    }
}

/// Independent generator for trajectory `index` of a run seeded by `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

pub fn sample_sphere<R: rand::Rng>(rng: &mut R, n: usize, radius: f64) -> Vector {
    loop {
        let v = Vector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let norm = v.norm();
        if norm > 1e-12 {
            return v * (radius / norm);
        }
    }
}

/// Result of a batch of trajectories.
#[derive(Clone, Debug)]
pub struct Generation {
    pub dataset: Dataset,
    pub rejected: usize,
    pub rejections: Vec<(RejectReason, usize)>,
    /// Accepted trajectories with their index within the batch.
    pub trajectories: Vec<(usize, Trajectory)>,
}

impl Generation {
    pub fn diagnostics(&self) -> String {
        if self.rejections.is_empty() {
            return "no rejections".into();
        }
        self.rejections
            .iter()
            .map(|(r, c)| format!("{}: {c}", r.label()))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Runs the pipeline from explicit initial points `x̄₀`, each paired with
/// the generator used to pick its samples. No acceptance-rate check.
pub fn generate_from_points(
    sys: &ControlSystem,
    analysis: &LinearAnalysis,
    cfg: &GenerationConfig,
    starts: Vec<(Vector, ChaCha8Rng)>,
    keep_trajectories: bool,
) -> Result<Generation> {
    cfg.validate()?;
    let horizon = cfg.resolve_horizon(analysis)?;
    let plan = BvpPlan::new(&analysis.transform, horizon, &cfg.bvp)?;
    let attempted = starts.len();
    let outcomes: Vec<(std::result::Result<Trajectory, RejectReason>, ChaCha8Rng)> = starts
        .into_par_iter()
        .map(|(x0, rng)| {
            let res = match compute_trajectory(sys, analysis, &plan, cfg, &x0) {
                Ok(traj) => gate(&traj, cfg).map(|_| traj),
                Err(e) => Err(classify(&e)),
            };
            (res, rng)
        })
        .collect();

    let mut samples = Vec::new();
    let mut trajectories = Vec::new();
    let mut rejections: std::collections::BTreeMap<RejectReason, usize> = Default::default();
    for (i, (res, mut rng)) in outcomes.into_iter().enumerate() {
        match res {
            Ok(traj) => {
                let neg = traj.negative_count;
                let pos = traj.points.len() - neg;
                let mut picked: Vec<usize> = sample_indices(&mut rng, pos, cfg.n_pos.min(pos))
                    .into_iter()
                    .map(|j| neg + j)
                    .collect();
                picked.extend(sample_indices(&mut rng, neg, cfg.n_neg.min(neg)));
                picked.sort_unstable();
                samples.extend(picked.into_iter().map(|j| {
                    let pt = &traj.points[j];
                    Sample {
                        traj: i,
                        t: pt.t,
                        x: pt.x.clone(),
                        p: pt.p.clone(),
                        v: pt.v,
                    }
                }));
                if keep_trajectories {
                    trajectories.push((i, traj));
                }
            }
            Err(reason) => *rejections.entry(reason).or_default() += 1,
        }
    }
    let rejected: usize = rejections.values().sum();
    let accepted = attempted - rejected;
    let mut meta_cfg = cfg.clone();
    meta_cfg.count = attempted;
    Ok(Generation {
        dataset: Dataset {
            meta: DatasetMeta {
                n: sys.n(),
                gamma: sys.gamma(),
                alpha: sys.alpha(),
                horizon,
                attempted,
                accepted,
                rejected,
                config: meta_cfg,
            },
            samples,
        },
        rejected,
        rejections: rejections.into_iter().collect(),
        trajectories,
    })
}

/// Draws `cfg.count` initial points uniformly on the sphere of radius
/// `cfg.radius` (taking `x̄₀ = x₀`) and assembles the dataset.
pub fn generate_dataset(sys: &ControlSystem, analysis: &LinearAnalysis, cfg: &GenerationConfig) -> Result<Generation> {
    generate_dataset_with(sys, analysis, cfg, false)
}

pub fn generate_dataset_with(
    sys: &ControlSystem,
    analysis: &LinearAnalysis,
    cfg: &GenerationConfig,
    keep_trajectories: bool,
) -> Result<Generation> {
    let n = sys.n();
    let starts = (0..cfg.count)
        .map(|i| {
            let mut rng = trajectory_rng(cfg.seed, i as u64);
            let x0 = sample_sphere(&mut rng, n, cfg.radius);
            (x0, rng)
        })
        .collect();
    let out = generate_from_points(sys, analysis, cfg, starts, keep_trajectories)?;
    let (accepted, attempted) = (out.dataset.meta.accepted, out.dataset.meta.attempted);
    if attempted > 0 && 2 * accepted < attempted {
        return Err(Error::GenerationFailed {
            accepted,
            attempted,
            diagnostics: out.diagnostics(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{analyze, resolve_discount, HamiltonianForm};
    use crate::model::{build_allen_cahn, AllenCahnConfig};

    fn linear_benchmark() -> (ControlSystem, LinearAnalysis) {
        let a = Matrix::from_row_slice(2, 2, &[0.5, 1.0, -1.0, -0.3]);
        let b = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let d = Matrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let sys = ControlSystem::linear(
            a,
            b,
            d,
            Matrix::identity(2, 2),
            Matrix::identity(1, 1),
            Matrix::identity(1, 1),
            Gamma::Finite(3.0),
            0.0,
            1.0,
        )
        .unwrap();
        resolve_discount(&sys, 0.5).unwrap()
    }

    #[test]
    fn horizon_rule() {
        assert_eq!(pick_horizon(1.0, (-10.0f64).exp()).unwrap(), 10.0);
        assert!((pick_horizon(0.277, 1e-5).unwrap() - 41.0).abs() <= 1.0);
        assert!((pick_horizon(0.5, 1e-5).unwrap() - 23.3).abs() <= 0.5);
        assert!(pick_horizon(0.0, 1e-5).is_err());
    }

    #[test]
    fn graded_grid_shape() {
        let opts = BvpOptions::default();
        let g = bvp_grid(20.0, &opts);
        assert_eq!(g[0], 0.0);
        assert!((g.last().unwrap() - 20.0).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        let dt = 20.0 / 2000.0;
        assert!((g[1] - dt / 64.0).abs() < 1e-15);
        let uniform = bvp_grid(20.0, &BvpOptions::uniform_trapezoid());
        assert_eq!(uniform.len(), 2001);
    }

    #[test]
    fn phi_blocks_scalar() {
        let m = Matrix::from_element(1, 1, -2.0);
        let h = 0.3;
        let (e, p1, p2) = phi_blocks(&m, h);
        let z = -2.0 * h;
        assert!((e[(0, 0)] - z.exp()).abs() < 1e-14);
        // ∫₀ʰ e^{ms} ds and (1/h)∫₀ʰ e^{m(h−s)} s ds.
        assert!((p1[(0, 0)] - (z.exp() - 1.0) / -2.0).abs() < 1e-14);
        let expect = (z.exp() - 1.0 - z) / (z * z) * h;
        assert!((p2[(0, 0)] - expect).abs() < 1e-14);
    }

    #[test]
    fn linear_bvp_is_exact() {
        let (sys, la) = linear_benchmark();
        let cfg = GenerationConfig::default();
        let horizon = cfg.resolve_horizon(&la).unwrap();
        let plan = BvpPlan::new(&la.transform, horizon, &cfg.bvp).unwrap();
        let x0 = Vector::from_vec(vec![0.3, -0.2]);
        let sol = solve_local_bvp(&sys, &la.transform, &plan, &x0).unwrap();
        assert_eq!(sol.iterations, 1);
        let p = &la.cert.p;
        for (x, pp) in sol.x.iter().zip(&sol.p) {
            assert!((pp - p * x).amax() <= 1e-8);
        }
        let closed = &la.transform.bmat;
        let t = sol.times[700];
        let exact = (closed * t).exp() * &x0;
        assert!((&sol.x[700] - exact).amax() < 1e-10);
        for method in [ValueMethod::Ode, ValueMethod::Algebraic] {
            let v = recover_value(&sys, &sol.times, &sol.x, &sol.p, p, method).unwrap();
            for (vi, x) in v.iter().zip(&sol.x) {
                let q = 0.5 * x.dot(&(p * x));
                assert!((vi - q).abs() <= 1e-6 * q.abs().max(1e-12), "{method:?}: {vi} vs {q}");
            }
        }
    }

    #[test]
    fn zero_start_gives_zero_trajectory() {
        let (sys, la) = linear_benchmark();
        let cfg = GenerationConfig::default();
        let plan = BvpPlan::new(&la.transform, 5.0, &cfg.bvp).unwrap();
        let sol = solve_local_bvp(&sys, &la.transform, &plan, &Vector::zeros(2)).unwrap();
        assert!(sol.x.iter().chain(&sol.p).all(|v| v.amax() == 0.0));
        let v = recover_value(&sys, &sol.times, &sol.x, &sol.p, &la.cert.p, ValueMethod::Ode).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn algebraic_value_needs_discount() {
        let sys = ControlSystem::scalar_lq(-1.0, Gamma::Infinite, 0.0).unwrap();
        let one = vec![Vector::from_element(1, 1.0)];
        let err = recover_value(&sys, &[0.0], &one, &one, &Matrix::identity(1, 1), ValueMethod::Algebraic);
        assert!(matches!(err, Err(Error::MethodUnavailable(_))));
    }

    #[test]
    fn backward_extension_matches_linear_flow() {
        let (sys, la) = linear_benchmark();
        let x0 = Vector::from_vec(vec![0.3, -0.2]);
        let p0 = Vector::from_vec(vec![0.1, 0.4]);
        let ext = extend_backward(&sys, (&x0, &p0, 0.0), -0.5, 5, 1e-11, 100.0).unwrap();
        assert_eq!(ext.points.len(), 5);
        assert!(!ext.truncated);
        assert!((ext.points[0].t + 0.5).abs() < 1e-15);
        assert!(ext.points.windows(2).all(|w| w[0].t < w[1].t));
        let hc = crate::linear::hamiltonian_matrix(&la.lin, sys.alpha(), sys.gamma(), HamiltonianForm::Characteristic);
        let mut z0 = Vector::zeros(4);
        z0.rows_mut(0, 2).copy_from(&x0);
        z0.rows_mut(2, 2).copy_from(&p0);
        for pt in &ext.points {
            let z = (&hc * pt.t).exp() * &z0;
            assert!((pt.x.clone() - z.rows(0, 2)).amax() < 1e-9);
            assert!((pt.p.clone() - z.rows(2, 2)).amax() < 1e-9);
        }
        let empty = extend_backward(&sys, (&x0, &p0, 0.0), 0.0, 5, 1e-9, 100.0).unwrap();
        assert!(empty.points.is_empty());
    }

    #[test]
    fn split_holds_out_whole_trajectories() {
        let meta = DatasetMeta {
            n: 1,
            gamma: crate::model::Gamma::Infinite,
            alpha: 0.0,
            horizon: 1.0,
            attempted: 0,
            accepted: 0,
            rejected: 0,
            config: GenerationConfig::default(),
        };
        let make = |trajs: usize| Dataset {
            meta: meta.clone(),
            samples: (0..trajs * 3)
                .map(|k| Sample {
                    traj: k / 3,
                    t: k as f64,
                    x: Vector::zeros(1),
                    p: Vector::zeros(1),
                    v: 0.0,
                })
                .collect(),
        };
        let (train, val) = make(25).split_by_trajectory(10);
        let held: std::collections::BTreeSet<_> = val.samples.iter().map(|s| s.traj).collect();
        assert_eq!(held.into_iter().collect::<Vec<_>>(), vec![9, 19]);
        assert_eq!(train.len() + val.len(), 75);
        let (train, val) = make(4).split_by_trajectory(10);
        assert_eq!((train.len(), val.len()), (9, 3));
        assert!(make(1).split_by_trajectory(10).1.is_empty());
    }

    #[test]
    fn empty_generation() {
        let (sys, la) = linear_benchmark();
        let cfg = GenerationConfig {
            count: 0,
            ..GenerationConfig::default()
        };
        let out = generate_dataset(&sys, &la, &cfg).unwrap();
        assert!(out.dataset.is_empty());
        assert_eq!(out.rejected, 0);
    }

    fn allen_cahn_11() -> (ControlSystem, LinearAnalysis) {
        let sys = build_allen_cahn(&AllenCahnConfig {
            intervals: 11,
            sigma: 0.1,
            gamma: Gamma::Finite(1.2),
            alpha_fraction: 0.5,
        })
        .unwrap();
        resolve_discount(&sys, 0.5).unwrap()
    }

    #[test]
    fn allen_cahn_trajectories_pass_gates() {
        let (sys, la) = allen_cahn_11();
        let cfg = GenerationConfig {
            count: 6,
            seed: 3,
            ..GenerationConfig::default()
        };
        let out = generate_dataset_with(&sys, &la, &cfg, true).unwrap();
        assert_eq!(out.rejected, 0);
        assert_eq!(out.dataset.len(), 6 * 26);
        for (_, traj) in &out.trajectories {
            assert!(traj.h_residual_max <= 1e-5);
            assert!(traj.tail_ratio <= 1e-3);
            assert_eq!(traj.negative_count, cfg.negative_points);
            assert!(traj.points.windows(2).all(|w| w[0].t < w[1].t));
        }
        let again = generate_dataset(&sys, &la, &cfg).unwrap();
        assert_eq!(again.dataset, out.dataset);
    }

    #[test]
    fn samples_near_origin_follow_the_riccati_gain() {
        let (sys, la) = allen_cahn_11();
        let cfg = GenerationConfig {
            count: 4,
            seed: 11,
            n_pos: 200,
            ..GenerationConfig::default()
        };
        let out = generate_dataset(&sys, &la, &cfg).unwrap();
        let mut checked = 0;
        for s in &out.dataset.samples {
            let r = s.x.norm();
            if r <= 0.1 * cfg.radius && r > 0.0 {
                assert!((&s.p - &la.cert.p * &s.x).norm() <= 0.2 * r);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn analyze_is_reused_by_resolve_discount() {
        let (sys, la) = allen_cahn_11();
        let again = analyze(&sys).unwrap();
        assert_eq!(again.cert.p, la.cert.p);
    }
}
