//! Adaptive Dormand–Prince 5(4) integrator for `DVector` states.

use crate::error::{Error, Result};
use crate::model::Vector;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Steps smaller than this (relative to `|t|`) count as underflow.
    pub min_step: f64,
    pub max_step: f64,
    pub max_steps: usize,
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        OdeOptions {
            rtol: tol,
            atol: tol,
            min_step: 1e-14,
            max_step: f64::INFINITY,
            max_steps: 10_000_000,
        }
    }
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions::with_tol(1e-9)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Outcome {
    Reached,
    /// The monitor asked to stop after the accepted step ending at `t`.
    Stopped { t: f64 },
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Stateful stepper; keeps the last accepted step size between calls to
/// [`Dopri5::advance`] so a trajectory can be integrated piecewise.
pub struct Dopri5<F> {
    rhs: F,
    opts: OdeOptions,
    step: Option<f64>,
    pub evaluations: usize,
}

impl<F> Dopri5<F>
where
    F: FnMut(f64, &Vector) -> Result<Vector>,
{
    pub fn new(rhs: F, opts: OdeOptions) -> Self {
        Dopri5 {
            rhs,
            opts,
            step: None,
            evaluations: 0,
        }
    }

    fn eval(&mut self, t: f64, y: &Vector) -> Result<Vector> {
        self.evaluations += 1;
        (self.rhs)(t, y)
    }

    fn error_norm(&self, y: &Vector, y_new: &Vector, err: &Vector) -> f64 {
        let mut acc = 0.0;
        for i in 0..y.len() {
            let sc = self.opts.atol + self.opts.rtol * y[i].abs().max(y_new[i].abs());
            acc += (err[i] / sc).powi(2);
        }
        (acc / y.len().max(1) as f64).sqrt()
    }

    fn initial_step(&mut self, t: f64, y: &Vector, f0: &Vector, dir: f64, span: f64) -> Result<f64> {
        let scale = y.map(|v| self.opts.atol + self.opts.rtol * v.abs());
        let n = y.len().max(1) as f64;
        let d0 = (y.component_div(&scale).norm_squared() / n).sqrt();
        let d1 = (f0.component_div(&scale).norm_squared() / n).sqrt();
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        let y1 = y + f0 * (dir * h0);
        let f1 = self.eval(t + dir * h0, &y1)?;
        let d2 = ((&f1 - f0).component_div(&scale).norm_squared() / n).sqrt() / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        Ok((100.0 * h0).min(h1).min(span).min(self.opts.max_step))
    }

    /// Integrates `y` in place from `t` to `t_end` (either direction). The
    /// monitor sees every accepted step and may stop the integration early.
    pub fn advance<M>(&mut self, t: &mut f64, y: &mut Vector, t_end: f64, mut monitor: M) -> Result<Outcome>
    where
        M: FnMut(f64, &Vector) -> Flow,
    {
        let span = (t_end - *t).abs();
        if span == 0.0 {
            return Ok(Outcome::Reached);
        }
        let dir = (t_end - *t).signum();
        let mut k1 = self.eval(*t, y)?;
        let mut h = match self.step {
            Some(h) => h.min(span),
            None => self.initial_step(*t, y, &k1, dir, span)?,
        };
        let mut steps = 0usize;
        loop {
            let remaining = (t_end - *t).abs();
            if remaining <= 1e-14 * (1.0 + t_end.abs()) {
                *t = t_end;
                return Ok(Outcome::Reached);
            }
            let last = h >= remaining;
            let hh = if last { remaining } else { h };
            let min_step = self.opts.min_step * (1.0 + t.abs());
            if hh < min_step && !last {
                return Err(Error::StiffExtension { t: *t });
            }
            steps += 1;
            if steps > self.opts.max_steps {
                return Err(Error::StiffExtension { t: *t });
            }
            let s = dir * hh;
            let t0 = *t;
            let k2 = self.eval(t0 + C2 * s, &(&*y + &k1 * (s * A21)))?;
            let k3 = self.eval(t0 + C3 * s, &(&*y + (&k1 * A31 + &k2 * A32) * s))?;
            let k4 = self.eval(t0 + C4 * s, &(&*y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * s))?;
            let k5 = self.eval(
                t0 + C5 * s,
                &(&*y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * s),
            )?;
            let k6 = self.eval(
                t0 + s,
                &(&*y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * s),
            )?;
            let y_new = &*y + (&k1 * B1 + &k3 * B3 + &k4 * B4 + &k5 * B5 + &k6 * B6) * s;
            let k7 = self.eval(t0 + s, &y_new)?;
            let err = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * s;
            let en = self.error_norm(y, &y_new, &err);
            if !en.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
                h = hh * 0.2;
                if h < min_step {
                    return Err(Error::StiffExtension { t: *t });
                }
                continue;
            }
            if en <= 1.0 {
                *t = if last { t_end } else { t0 + s };
                *y = y_new;
                k1 = k7;
                let fac = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 5.0) };
                let proposed = (hh * fac).min(self.opts.max_step);
                // Keep the natural step when the last one was shortened to land on t_end.
                self.step = Some(if last { proposed.max(h) } else { proposed });
                h = proposed;
                if monitor(*t, y) == Flow::Stop {
                    return Ok(Outcome::Stopped { t: *t });
                }
                if last {
                    return Ok(Outcome::Reached);
                }
            } else {
                h = hh * (0.9 * en.powf(-0.2)).clamp(0.2, 1.0);
            }
        }
    }
}

/// One-shot integration of `y' = f(t, y)` from `t0` to `t1`.
pub fn integrate<F>(rhs: F, t0: f64, y0: &Vector, t1: f64, opts: OdeOptions) -> Result<Vector>
where
    F: FnMut(f64, &Vector) -> Result<Vector>,
{
    let mut solver = Dopri5::new(rhs, opts);
    let mut t = t0;
    let mut y = y0.clone();
    solver.advance(&mut t, &mut y, t1, |_, _| Flow::Continue)?;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Matrix;

    #[test]
    fn exponential_decay() {
        let y = integrate(|_, y| Ok(-y), 0.0, &Vector::from_element(1, 1.0), 2.0, OdeOptions::with_tol(1e-10)).unwrap();
        assert!((y[0] - (-2.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn backward_harmonic_oscillator() {
        let rhs = |_: f64, y: &Vector| Ok(Vector::from_vec(vec![y[1], -y[0]]));
        let y0 = Vector::from_vec(vec![1.0, 0.0]);
        let y = integrate(rhs, 0.0, &y0, -1.5, OdeOptions::with_tol(1e-11)).unwrap();
        assert!((y[0] - 1.5f64.cos()).abs() < 1e-9);
        assert!((y[1] - 1.5f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn linear_system_matches_matrix_exponential() {
        let a = Matrix::from_row_slice(2, 2, &[-1.0, 3.0, -2.0, -0.5]);
        let y0 = Vector::from_vec(vec![0.3, -0.7]);
        let a2 = a.clone();
        let y = integrate(move |_, y| Ok(&a2 * y), 0.0, &y0, 3.0, OdeOptions::with_tol(1e-11)).unwrap();
        let exact = (a * 3.0).exp() * y0;
        assert!((y - exact).norm() < 1e-9);
    }

    #[test]
    fn piecewise_equals_one_shot_within_tolerance() {
        let mut solver = Dopri5::new(|t: f64, y: &Vector| Ok(y.map(|v| -v) + Vector::from_element(1, t.sin())), OdeOptions::with_tol(1e-10));
        let mut t = 0.0;
        let mut y = Vector::from_element(1, 1.0);
        for k in 1..=10 {
            solver.advance(&mut t, &mut y, k as f64 * 0.5, |_, _| Flow::Continue).unwrap();
            assert_eq!(t, k as f64 * 0.5);
        }
        // y' = −y + sin t, y(0) = 1.
        let exact = 1.5 * (-5.0f64).exp() + 0.5 * (5.0f64.sin() - 5.0f64.cos());
        assert!((y[0] - exact).abs() < 1e-8);
    }

    #[test]
    fn monitor_can_stop() {
        let mut solver = Dopri5::new(|_, y: &Vector| Ok(y.clone()), OdeOptions::with_tol(1e-8));
        let mut t = 0.0;
        let mut y = Vector::from_element(1, 1.0);
        let out = solver.advance(&mut t, &mut y, 10.0, |_, y| if y[0] > 5.0 { Flow::Stop } else { Flow::Continue }).unwrap();
        assert!(matches!(out, Outcome::Stopped { .. }));
        assert!(t < 10.0 && y[0] > 5.0);
    }

    #[test]
    fn blowup_reports_underflow() {
        // y' = y² from y(0) = 1 blows up at t = 1.
        let err = integrate(|_, y| Ok(y.map(|v| v * v)), 0.0, &Vector::from_element(1, 1.0), 2.0, OdeOptions::with_tol(1e-9));
        assert!(matches!(err, Err(Error::StiffExtension { .. })));
    }
}
