//! Closed-loop simulation, discounted L₂-gain certification, decay fits and
//! sampled-reference tracking.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControlSystem, Vector};
use crate::ode::{Dopri5, Flow, OdeOptions, Outcome};

pub type Controller<'a> = &'a (dyn Fn(&Vector) -> Vector + Sync);
pub type Disturbance<'a> = &'a (dyn Fn(f64, &Vector) -> Vector + Sync);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOptions {
    pub integrator_tol: f64,
    pub output_points: usize,
    /// Escape threshold as a multiple of the system's domain radius.
    pub escape_factor: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            integrator_tol: 1e-9,
            output_points: 500,
            escape_factor: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationResult {
    pub t: Vec<f64>,
    pub x: Vec<Vector>,
    pub u: Vec<Vector>,
    pub d: Vec<Vector>,
    /// `∫₀ᵗ e^{−αs}(xᵀQx + uᵀWu) ds`.
    pub i_z: Vec<f64>,
    /// `∫₀ᵗ e^{−αs} dᵀGd ds`.
    pub i_d: Vec<f64>,
    /// `∫₀ᵗ e^{−αs} |x|² ds`.
    pub i_x: Vec<f64>,
    pub alpha: f64,
    pub integrator_tol: f64,
    /// Spectral norm of `G`, used to bound the truncated tail.
    pub disturbance_weight_norm: f64,
}

impl SimulationResult {
    fn with_capacity(cap: usize, alpha: f64, tol: f64) -> Self {
        SimulationResult {
            t: Vec::with_capacity(cap),
            x: Vec::with_capacity(cap),
            u: Vec::with_capacity(cap),
            d: Vec::with_capacity(cap),
            i_z: Vec::with_capacity(cap),
            i_d: Vec::with_capacity(cap),
            i_x: Vec::with_capacity(cap),
            alpha,
            integrator_tol: tol,
            disturbance_weight_norm: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Integrates `ẋ = f(x) + g(x)ũ(x) + k(x)d(t, x)` together with the
/// discounted output and disturbance integrals.
pub fn simulate(
    sys: &ControlSystem,
    controller: Controller,
    disturbance: Disturbance,
    x0: &Vector,
    horizon: f64,
    opts: &SimOptions,
) -> Result<SimulationResult> {
    let n = sys.n();
    if x0.len() != n {
        return Err(Error::InvalidArgument(format!("x0 has {} entries, expected {n}", x0.len())));
    }
    if !(horizon > 0.0) || opts.output_points < 2 {
        return Err(Error::InvalidArgument("horizon must be positive and output_points >= 2".into()));
    }
    let alpha = sys.alpha();
    let q = sys.state_weight();
    let w = sys.control_weight();
    let gw = sys.disturbance_weight();
    let rhs = |t: f64, y: &Vector| -> Result<Vector> {
        let x = y.rows(0, n).into_owned();
        let u = controller(&x);
        let d = disturbance(t, &x);
        let xd = sys.drift(&x) + sys.input_map(&x) * &u + sys.disturbance_map(&x) * &d;
        let disc = (-alpha * t).exp();
        let mut out = Vector::zeros(n + 3);
        out.rows_mut(0, n).copy_from(&xd);
        out[n] = disc * (x.dot(&(q * &x)) + u.dot(&(w * &u)));
        out[n + 1] = disc * d.dot(&(gw * &d));
        out[n + 2] = disc * x.norm_squared();
        Ok(out)
    };
    let escape = opts.escape_factor * sys.domain_radius();
    let mut solver = Dopri5::new(rhs, OdeOptions::with_tol(opts.integrator_tol));
    let mut y = Vector::zeros(n + 3);
    y.rows_mut(0, n).copy_from(x0);
    let mut t = 0.0;
    let mut out = SimulationResult::with_capacity(opts.output_points, alpha, opts.integrator_tol);
    out.disturbance_weight_norm = gw.clone().symmetric_eigenvalues().max();
    let record = |out: &mut SimulationResult, t: f64, y: &Vector| {
        let x = y.rows(0, n).into_owned();
        out.u.push(controller(&x));
        out.d.push(disturbance(t, &x));
        out.t.push(t);
        out.x.push(x);
        out.i_z.push(y[n]);
        out.i_d.push(y[n + 1]);
        out.i_x.push(y[n + 2]);
    };
    record(&mut out, t, &y);
    for j in 1..opts.output_points {
        let target = horizon * j as f64 / (opts.output_points - 1) as f64;
        let outcome = solver.advance(&mut t, &mut y, target, |_, y| {
            if y.rows(0, n).norm() > escape {
                Flow::Stop
            } else {
                Flow::Continue
            }
        });
        let stop_at = match outcome {
            Ok(Outcome::Reached) => None,
            Ok(Outcome::Stopped { t }) => Some(t),
            Err(Error::StiffExtension { t }) => Some(t),
            Err(e) => return Err(e),
        };
        if let Some(ts) = stop_at {
            record(&mut out, ts, &y);
            return Err(Error::InstabilityDetected {
                t: ts,
                norm: y.rows(0, n).norm(),
                partial: Box::new(out),
            });
        }
        record(&mut out, target, &y);
    }
    Ok(out)
}

/// Smallest horizon with `e^{−αT} ≤ tol`.
pub fn gain_horizon(alpha: f64, tol: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("gain horizon needs alpha > 0".into()));
    }
    Ok(-tol.ln() / alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainCertificate {
    /// `I_z(T)/I_d(T)`; `None` when `I_d(T) = 0`.
    pub ratio: Option<f64>,
    /// `(I_z(T) − Vᴺᴺ(x₀))/I_d(T)` for `x₀ ≠ 0`.
    pub offset_ratio: Option<f64>,
    pub gamma: f64,
    pub epsilon_budget: f64,
    /// `γ + ε`; `pass ⇔ ratio ≤ gamma_threshold²`.
    pub gamma_threshold: f64,
    pub pass: bool,
    pub vacuous: bool,
    pub initial_value: Option<f64>,
    pub i_z: f64,
    pub i_d: f64,
    pub horizon: f64,
    /// `e^{−αT}/α`, multiplying the sup of each integrand beyond `T`.
    pub truncation_weight: f64,
    /// Truncation bound on `I_d` using the largest observed integrand.
    pub truncation_bound: f64,
}

pub fn discounted_gain(sim: &SimulationResult, gamma: f64, epsilon_budget: f64, initial_value: Option<f64>) -> GainCertificate {
    let i_z = *sim.i_z.last().unwrap_or(&0.0);
    let i_d = *sim.i_d.last().unwrap_or(&0.0);
    let horizon = *sim.t.last().unwrap_or(&0.0);
    let threshold = gamma + epsilon_budget;
    let x0_zero = sim.x.first().map_or(true, |x| x.norm() == 0.0);
    let (ratio, offset_ratio, pass, vacuous) = if i_d > 0.0 {
        let ratio = i_z / i_d;
        let offset = if x0_zero { None } else { initial_value.map(|v| (i_z - v) / i_d) };
        (Some(ratio), offset, ratio <= threshold * threshold, false)
    } else {
        (None, None, true, true)
    };
    let truncation_weight = if sim.alpha > 0.0 {
        (-sim.alpha * horizon).exp() / sim.alpha
    } else {
        f64::INFINITY
    };
    let max_d_integrand = sim
        .d
        .iter()
        .map(|d| d.norm_squared() * sim.disturbance_weight_norm)
        .fold(0.0, f64::max);
    GainCertificate {
        ratio,
        offset_ratio,
        gamma,
        epsilon_budget,
        gamma_threshold: threshold,
        pass,
        vacuous,
        initial_value: if x0_zero { None } else { initial_value },
        i_z,
        i_d,
        horizon,
        truncation_weight,
        truncation_bound: truncation_weight * max_d_integrand,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Fitted slope of `log|x(t)|`; `None` for the zero trajectory.
    pub rate: Option<f64>,
    pub points_used: usize,
    pub final_ratio: f64,
}

/// Least-squares slope of `log|x(t)|` over the second half of the part of
/// the trace that stays above the integrator noise floor.
pub fn decay_rate(sim: &SimulationResult) -> Result<DecayFit> {
    let x0 = sim.x.first().map_or(0.0, |x| x.norm());
    if x0 == 0.0 {
        return Ok(DecayFit {
            rate: None,
            points_used: 0,
            final_ratio: 0.0,
        });
    }
    let floor = 1e3 * sim.integrator_tol * x0.max(1.0);
    let last_above = sim.x.iter().rposition(|x| x.norm() > floor).unwrap_or(0);
    let end = last_above + 1;
    let start = end / 2;
    let pts: Vec<(f64, f64)> = (start..end).map(|k| (sim.t[k], sim.x[k].norm().ln())).collect();
    let final_ratio = sim.x.last().unwrap().norm() / x0;
    if pts.len() < 2 {
        return Err(Error::DecayViolation { rate: 0.0 });
    }
    let m = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let rate = sxy / sxx;
    if !(rate < 0.0) {
        return Err(Error::DecayViolation { rate });
    }
    Ok(DecayFit {
        rate: Some(rate),
        points_used: pts.len(),
        final_ratio,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissipationAudit {
    /// `max_t [e^{−αt}V(x(t)) + ∫e^{−αs}(|z|² − γ²dᵀGd) − V(x₀)]₊`.
    pub max_violation: f64,
    /// Smallest `C` with violation ≤ `C·∫e^{−αs}|x|²ds` on the trace.
    pub slack_constant: f64,
}

/// Checks the dissipation inequality along a trace using a value estimate.
pub fn dissipation_audit(sim: &SimulationResult, value: &dyn Fn(&Vector) -> f64, gamma: f64) -> DissipationAudit {
    let v0 = sim.x.first().map_or(0.0, |x| value(x));
    let mut max_violation = 0.0f64;
    let mut slack_constant = 0.0f64;
    for k in 0..sim.len() {
        let lhs = (-sim.alpha * sim.t[k]).exp() * value(&sim.x[k]) + sim.i_z[k] - gamma * gamma * sim.i_d[k] - v0;
        if lhs > 0.0 {
            max_violation = max_violation.max(lhs);
            if sim.i_x[k] > 0.0 {
                slack_constant = slack_constant.max(lhs / sim.i_x[k]);
            } else {
                slack_constant = f64::INFINITY;
            }
        }
    }
    DissipationAudit {
        max_violation,
        slack_constant,
    }
}

/// How the absolute state is rebuilt from the relative one inside an
/// update interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reconstruction {
    /// `X(t) = Y(t) + r(t)`.
    Current,
    /// `X(t) = Y(t) + r(t_k)`.
    Held,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingResult {
    /// Interval boundaries `t_k = k·s₀`.
    pub t: Vec<f64>,
    /// Absolute states at the boundaries.
    pub x: Vec<Vector>,
    /// Reference at the boundaries.
    pub r: Vec<Vector>,
    /// `|X(t_k) − r(t_k)|_∞`.
    pub error_sup: Vec<f64>,
    /// `|X(t_k) − r(t_k)|₂`.
    pub error_l2: Vec<f64>,
}

impl TrackingResult {
    pub fn max_error_after(&self, t0: f64) -> f64 {
        self.t
            .iter()
            .zip(&self.error_sup)
            .filter(|(t, _)| **t >= t0)
            .map(|(_, e)| *e)
            .fold(0.0, f64::max)
    }
}

/// Sampled-reference tracking: on `[t_k, t_{k+1})` the relative state
/// `Y = X − r(t_k)` is driven by the regulator with the disturbance
/// `w_k(t) = r(t) − r(t_k)` through `k(x)`.
#[allow(clippy::too_many_arguments)]
pub fn track(
    sys: &ControlSystem,
    controller: Controller,
    reference: &(dyn Fn(usize, f64) -> f64 + Sync),
    x0: &Vector,
    update_rate_hz: f64,
    horizon: f64,
    reconstruction: Reconstruction,
    opts: &SimOptions,
) -> Result<TrackingResult> {
    let n = sys.n();
    if sys.l() != n {
        return Err(Error::InvalidArgument("tracking needs a disturbance channel of state dimension".into()));
    }
    if !(update_rate_hz > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidArgument("update rate and horizon must be positive".into()));
    }
    let s0 = 1.0 / update_rate_hz;
    let intervals = (horizon / s0).round() as usize;
    let r_at = |t: f64| Vector::from_fn(n, |i, _| reference(i, t));
    let held = Cell::new(0.0f64);
    let rhs = |t: f64, y: &Vector| -> Result<Vector> {
        let u = controller(y);
        let w = r_at(t) - r_at(held.get());
        Ok(sys.drift(y) + sys.input_map(y) * u + sys.disturbance_map(y) * w)
    };
    let escape = opts.escape_factor * sys.domain_radius();
    let mut solver = Dopri5::new(rhs, OdeOptions::with_tol(opts.integrator_tol));
    let mut x = x0.clone();
    let mut out = TrackingResult {
        t: Vec::with_capacity(intervals + 1),
        x: Vec::with_capacity(intervals + 1),
        r: Vec::with_capacity(intervals + 1),
        error_sup: Vec::with_capacity(intervals + 1),
        error_l2: Vec::with_capacity(intervals + 1),
    };
    let push = |out: &mut TrackingResult, t: f64, x: &Vector| {
        let r = r_at(t);
        let e = x - &r;
        out.t.push(t);
        out.x.push(x.clone());
        out.error_sup.push(e.amax());
        out.error_l2.push(e.norm());
        out.r.push(r);
    };
    push(&mut out, 0.0, &x);
    for k in 0..intervals {
        let tk = k as f64 * s0;
        let tk1 = (k + 1) as f64 * s0;
        held.set(tk);
        let rk = r_at(tk);
        let mut y = &x - &rk;
        let mut t = tk;
        let outcome = solver.advance(&mut t, &mut y, tk1, |_, y| {
            if y.norm() > escape {
                Flow::Stop
            } else {
                Flow::Continue
            }
        });
        match outcome {
            Ok(Outcome::Reached) => {}
            Ok(Outcome::Stopped { t }) | Err(Error::StiffExtension { t }) => {
                return Err(Error::InstabilityDetected {
                    t,
                    norm: y.norm(),
                    partial: Box::new(SimulationResult::with_capacity(0, sys.alpha(), opts.integrator_tol)),
                })
            }
            Err(e) => return Err(e),
        }
        x = match reconstruction {
            Reconstruction::Current => y + r_at(tk1),
            Reconstruction::Held => y + rk,
        };
        push(&mut out, tk1, &x);
    }
    Ok(out)
}
