//! Control-affine systems `ẋ = f(x) + g(x)u + k(x)d`, their discounted HJI
//! Hamiltonian and the associated contact characteristic field.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

pub type VectorField = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;
/// `(x, p) ↦ ∇ₓ(pᵀ M(x) p)`.
pub type CouplingGradient = Arc<dyn Fn(&Vector, &Vector) -> Vector + Send + Sync>;

/// Disturbance attenuation level. `Infinite` is the HJB limit, in which every
/// `γ⁻²` term is exactly zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gamma {
    Finite(f64),
    Infinite,
}

impl Gamma {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_infinite() && value > 0.0 {
            Ok(Gamma::Infinite)
        } else if value.is_finite() && value > 0.0 {
            Ok(Gamma::Finite(value))
        } else {
            Err(Error::InvalidConfig(format!("gamma must lie in (0, inf], got {value}")))
        }
    }

    /// `1/γ²`, exactly zero for `Infinite`.
    pub fn inv_sq(self) -> f64 {
        match self {
            Gamma::Finite(g) => 1.0 / (g * g),
            Gamma::Infinite => 0.0,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Gamma::Finite(g) => g,
            Gamma::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Gamma::Infinite)
    }
}

impl fmt::Display for Gamma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gamma::Finite(g) => write!(f, "{g}"),
            Gamma::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Gamma {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Gamma::Finite(g) => s.serialize_f64(*g),
            Gamma::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Gamma {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let value = match Raw::deserialize(d)? {
            Raw::Num(v) => v,
            Raw::Text(t) => match t.to_ascii_lowercase().as_str() {
                "inf" | "infinity" | "+inf" => f64::INFINITY,
                other => other
                    .parse::<f64>()
                    .map_err(|_| serde::de::Error::custom(format!("invalid gamma `{t}`")))?,
            },
        };
        Gamma::new(value).map_err(serde::de::Error::custom)
    }
}

/// How the control and disturbance maps depend on the state.
#[derive(Clone)]
pub enum InputMaps {
    Constant {
        g: Matrix,
        k: Matrix,
    },
    /// State-dependent `g(x)`, `k(x)`. The costate equation needs
    /// `∇ₓ(pᵀM(x)p)`; without it `contact_rhs` refuses to run.
    StateDependent {
        g: MatrixField,
        k: MatrixField,
        coupling_gradient: Option<CouplingGradient>,
    },
}

/// Everything needed to assemble a [`ControlSystem`].
pub struct SystemParts {
    pub drift: VectorField,
    pub drift_jacobian: MatrixField,
    pub maps: InputMaps,
    pub state_weight: Matrix,
    pub control_weight: Matrix,
    pub disturbance_weight: Matrix,
    pub gamma: Gamma,
    pub alpha: f64,
    pub domain_radius: f64,
}

/// Control-affine dynamics with quadratic costs `xᵀQx + uᵀWu − γ² dᵀGd`
/// discounted by `e^{−αt}`.
#[derive(Clone)]
pub struct ControlSystem {
    n: usize,
    m: usize,
    l: usize,
    drift: VectorField,
    drift_jacobian: MatrixField,
    maps: InputMaps,
    q: Matrix,
    w: Matrix,
    g_weight: Matrix,
    w_inv: Matrix,
    g_weight_inv: Matrix,
    /// `M` for constant input maps.
    coupling_const: Option<Matrix>,
    gamma: Gamma,
    alpha: f64,
    domain_radius: f64,
    state_scale: Vector,
}

impl fmt::Debug for ControlSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlSystem")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("l", &self.l)
            .field("gamma", &self.gamma)
            .field("alpha", &self.alpha)
            .field("domain_radius", &self.domain_radius)
            .finish_non_exhaustive()
    }
}

fn check_spd(name: &str, mat: &Matrix) -> Result<()> {
    if !mat.is_square() || mat.nrows() == 0 {
        return Err(Error::InvalidConfig(format!("{name} must be a non-empty square matrix")));
    }
    let asym = (mat - mat.transpose()).abs().max();
    if asym > 1e-12 * (1.0 + mat.abs().max()) {
        return Err(Error::InvalidConfig(format!("{name} is not symmetric (defect {asym:e})")));
    }
    let min_eig = mat.clone().symmetric_eigenvalues().min();
    if !(min_eig > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "{name} is not positive definite (min eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}

fn invert(name: &str, mat: &Matrix) -> Result<Matrix> {
    mat.clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidConfig(format!("{name} is singular")))
}

impl ControlSystem {
    pub fn new(parts: SystemParts) -> Result<Self> {
        let n = parts.state_weight.nrows();
        let m = parts.control_weight.nrows();
        let l = parts.disturbance_weight.nrows();
        check_spd("Q", &parts.state_weight)?;
        check_spd("W", &parts.control_weight)?;
        check_spd("G", &parts.disturbance_weight)?;
        if !(parts.alpha >= 0.0) || !parts.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", parts.alpha)));
        }
        if !(parts.domain_radius > 0.0) {
            return Err(Error::InvalidConfig("domain_radius must be positive".into()));
        }
        let w_inv = invert("W", &parts.control_weight)?;
        let g_weight_inv = invert("G", &parts.disturbance_weight)?;

        let zero = Vector::zeros(n);
        let f0 = (parts.drift)(&zero);
        if f0.len() != n {
            return Err(Error::InvalidConfig(format!("drift returns {} entries, expected {n}", f0.len())));
        }
        if f0.norm() > 1e-12 {
            return Err(Error::InvalidConfig(format!("f(0) = 0 violated: |f(0)| = {:e}", f0.norm())));
        }
        let j0 = (parts.drift_jacobian)(&zero);
        if j0.shape() != (n, n) {
            return Err(Error::InvalidConfig("drift_jacobian has the wrong shape".into()));
        }

        let (g0, k0) = match &parts.maps {
            InputMaps::Constant { g, k } => (g.clone(), k.clone()),
            InputMaps::StateDependent { g, k, .. } => (g(&zero), k(&zero)),
        };
        if g0.shape() != (n, m) {
            return Err(Error::InvalidConfig(format!("g(x) must be {n}x{m}")));
        }
        if k0.shape() != (n, l) {
            return Err(Error::InvalidConfig(format!("k(x) must be {n}x{l}")));
        }

        let mut sys = ControlSystem {
            n,
            m,
            l,
            drift: parts.drift,
            drift_jacobian: parts.drift_jacobian,
            maps: parts.maps,
            q: parts.state_weight,
            w: parts.control_weight,
            g_weight: parts.disturbance_weight,
            w_inv,
            g_weight_inv,
            coupling_const: None,
            gamma: parts.gamma,
            alpha: parts.alpha,
            domain_radius: parts.domain_radius,
            state_scale: Vector::from_element(n, 1.0),
        };
        if let InputMaps::Constant { g, k } = &sys.maps {
            sys.coupling_const = Some(sys.coupling_from(g, k));
        }
        Ok(sys)
    }

    /// Linear system `ẋ = Ax + Bu + Dd`.
    #[allow(clippy::too_many_arguments)]
    pub fn linear(
        a: Matrix,
        b: Matrix,
        d: Matrix,
        q: Matrix,
        w: Matrix,
        g: Matrix,
        gamma: Gamma,
        alpha: f64,
        domain_radius: f64,
    ) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::InvalidConfig("A must be square".into()));
        }
        let a_drift = a.clone();
        ControlSystem::new(SystemParts {
            drift: Arc::new(move |x| &a_drift * x),
            drift_jacobian: Arc::new(move |_| a.clone()),
            maps: InputMaps::Constant { g: b, k: d },
            state_weight: q,
            control_weight: w,
            disturbance_weight: g,
            gamma,
            alpha,
            domain_radius,
        })
    }

    /// The scalar test system `ẋ = a·x + u + d` with unit weights.
    pub fn scalar_lq(a: f64, gamma: Gamma, alpha: f64) -> Result<Self> {
        let one = || Matrix::from_element(1, 1, 1.0);
        ControlSystem::linear(
            Matrix::from_element(1, 1, a),
            one(),
            one(),
            one(),
            one(),
            one(),
            gamma,
            alpha,
            1.0,
        )
    }

    fn coupling_from(&self, g: &Matrix, k: &Matrix) -> Matrix {
        let control = g * &self.w_inv * g.transpose() * 0.25;
        if self.gamma.is_infinite() {
            -control
        } else {
            k * &self.g_weight_inv * k.transpose() * (0.25 * self.gamma.inv_sq()) - control
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn l(&self) -> usize {
        self.l
    }
    pub fn gamma(&self) -> Gamma {
        self.gamma
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn domain_radius(&self) -> f64 {
        self.domain_radius
    }
    pub fn state_weight(&self) -> &Matrix {
        &self.q
    }
    pub fn control_weight(&self) -> &Matrix {
        &self.w
    }
    pub fn disturbance_weight(&self) -> &Matrix {
        &self.g_weight
    }
    pub fn control_weight_inv(&self) -> &Matrix {
        &self.w_inv
    }
    pub fn disturbance_weight_inv(&self) -> &Matrix {
        &self.g_weight_inv
    }
    pub fn state_scale(&self) -> &Vector {
        &self.state_scale
    }
    pub fn has_constant_maps(&self) -> bool {
        matches!(self.maps, InputMaps::Constant { .. })
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
        }
        let mut out = self.clone();
        out.alpha = alpha;
        Ok(out)
    }

    pub fn with_gamma(&self, gamma: Gamma) -> Self {
        let mut out = self.clone();
        out.gamma = gamma;
        if let InputMaps::Constant { g, k } = &out.maps {
            out.coupling_const = Some(out.coupling_from(g, k));
        }
        out
    }

    pub fn with_domain_radius(&self, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidConfig("domain_radius must be positive".into()));
        }
        let mut out = self.clone();
        out.domain_radius = radius;
        Ok(out)
    }

    /// Rescales the state as `x = D z` with `D = diag(scale)`. The returned
    /// system describes `z`; costs become `zᵀ(DQD)z`, the value function is
    /// unchanged and costates map as `p_z = D p_x`.
    pub fn with_state_scale(&self, scale: &Vector) -> Result<Self> {
        if scale.len() != self.n || scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig("state_scale must be n positive entries".into()));
        }
        let d = Matrix::from_diagonal(scale);
        let d_inv = Matrix::from_diagonal(&scale.map(|s| 1.0 / s));

        let drift = self.drift.clone();
        let (d1, di1) = (d.clone(), d_inv.clone());
        let new_drift: VectorField = Arc::new(move |z| &di1 * drift(&(&d1 * z)));
        let jac = self.drift_jacobian.clone();
        let (d2, di2) = (d.clone(), d_inv.clone());
        let new_jac: MatrixField = Arc::new(move |z| &di2 * jac(&(&d2 * z)) * &d2);

        let maps = match &self.maps {
            InputMaps::Constant { g, k } => InputMaps::Constant {
                g: &d_inv * g,
                k: &d_inv * k,
            },
            InputMaps::StateDependent {
                g,
                k,
                coupling_gradient,
            } => {
                let (g, k) = (g.clone(), k.clone());
                let (d3, di3, d4, di4) = (d.clone(), d_inv.clone(), d.clone(), d_inv.clone());
                // pᵀM̃(z)p = (D⁻¹p)ᵀ M(Dz) (D⁻¹p), so ∇_z = D ∇ₓ(qᵀM q)|_{q=D⁻¹p}.
                let grad = coupling_gradient.clone().map(|cg| {
                    let (d5, di5) = (d.clone(), d_inv.clone());
                    Arc::new(move |z: &Vector, p: &Vector| &d5 * cg(&(&d5 * z), &(&di5 * p)))
                        as CouplingGradient
                });
                InputMaps::StateDependent {
                    g: Arc::new(move |z| &di3 * g(&(&d3 * z))),
                    k: Arc::new(move |z| &di4 * k(&(&d4 * z))),
                    coupling_gradient: grad,
                }
            }
        };
        let mut out = ControlSystem::new(SystemParts {
            drift: new_drift,
            drift_jacobian: new_jac,
            maps,
            state_weight: &d * &self.q * &d,
            control_weight: self.w.clone(),
            disturbance_weight: self.g_weight.clone(),
            gamma: self.gamma,
            alpha: self.alpha,
            domain_radius: self.domain_radius,
        })?;
        out.state_scale = self.state_scale.component_mul(scale);
        Ok(out)
    }

    pub fn drift(&self, x: &Vector) -> Vector {
        (self.drift)(x)
    }

    pub fn drift_jacobian(&self, x: &Vector) -> Matrix {
        (self.drift_jacobian)(x)
    }

    pub fn input_map(&self, x: &Vector) -> Matrix {
        match &self.maps {
            InputMaps::Constant { g, .. } => g.clone(),
            InputMaps::StateDependent { g, .. } => g(x),
        }
    }

    pub fn disturbance_map(&self, x: &Vector) -> Matrix {
        match &self.maps {
            InputMaps::Constant { k, .. } => k.clone(),
            InputMaps::StateDependent { k, .. } => k(x),
        }
    }

    /// `M(x) = (1/4γ²) k G⁻¹ kᵀ − ¼ g W⁻¹ gᵀ`.
    pub fn coupling_matrix(&self, x: &Vector) -> Matrix {
        match (&self.coupling_const, &self.maps) {
            (Some(m), _) => m.clone(),
            (None, InputMaps::StateDependent { g, k, .. }) => self.coupling_from(&g(x), &k(x)),
            (None, InputMaps::Constant { g, k }) => self.coupling_from(g, k),
        }
    }

    fn coupling_times(&self, x: &Vector, p: &Vector) -> Vector {
        match &self.coupling_const {
            Some(m) => m * p,
            None => self.coupling_matrix(x) * p,
        }
    }

    /// Saddle-point inputs `u* = −½W⁻¹gᵀp`, `d* = (1/2γ²)G⁻¹kᵀp`.
    pub fn saddle_inputs(&self, x: &Vector, p: &Vector) -> (Vector, Vector) {
        let g = self.input_map(x);
        let u = &self.w_inv * (g.transpose() * p) * -0.5;
        let d = if self.gamma.is_infinite() {
            Vector::zeros(self.l)
        } else {
            let k = self.disturbance_map(x);
            &self.g_weight_inv * (k.transpose() * p) * (0.5 * self.gamma.inv_sq())
        };
        (u, d)
    }

    /// `H̄(x, V, p) = pᵀf + pᵀM(x)p − αV + xᵀQx`.
    pub fn contact_hamiltonian(&self, x: &Vector, value: f64, p: &Vector) -> f64 {
        let f = self.drift(x);
        p.dot(&f) + p.dot(&self.coupling_times(x, p)) - self.alpha * value + x.dot(&(&self.q * x))
    }

    /// The pre-Hamiltonian `xᵀQx + uᵀWu − γ²dᵀGd − αV + pᵀ(f + gu + kd)`
    /// for arbitrary inputs.
    pub fn pre_hamiltonian(&self, x: &Vector, value: f64, p: &Vector, u: &Vector, d: &Vector) -> f64 {
        let g = self.input_map(x);
        let k = self.disturbance_map(x);
        let flow = self.drift(x) + g * u + k * d;
        let disturbance = if self.gamma.is_infinite() {
            0.0
        } else {
            let gv = self.gamma.value();
            gv * gv * d.dot(&(&self.g_weight * d))
        };
        x.dot(&(&self.q * x)) + u.dot(&(&self.w * u)) - disturbance - self.alpha * value + p.dot(&flow)
    }

    /// `(ẋ, ṗ)` of the characteristic system; independent of `V`.
    pub fn characteristic_field(&self, x: &Vector, p: &Vector) -> Result<(Vector, Vector)> {
        let mp = self.coupling_times(x, p);
        let xdot = self.drift(x) + &mp * 2.0;
        let jac = self.drift_jacobian(x);
        let mut pdot = p * self.alpha - jac.tr_mul(p) - (&self.q * x) * 2.0;
        if let InputMaps::StateDependent {
            coupling_gradient, ..
        } = &self.maps
        {
            match coupling_gradient {
                Some(cg) => pdot -= cg(x, p),
                None => {
                    return Err(Error::UnsupportedModel(
                        "state-dependent g(x)/k(x) need a coupling gradient callback".into(),
                    ))
                }
            }
        }
        Ok((xdot, pdot))
    }

    /// Right-hand side `(ẋ, ṗ, V̇)` of the contact characteristic system.
    pub fn contact_rhs(&self, x: &Vector, p: &Vector, _value: f64) -> Result<(Vector, Vector, f64)> {
        let (xdot, pdot) = self.characteristic_field(x, p)?;
        let vdot = xdot.dot(p);
        Ok((xdot, pdot, vdot))
    }
}

/// Finite-difference Allen-Cahn benchmark on `[-1, 1]` with Dirichlet ends.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllenCahnConfig {
    /// Number of grid intervals `N`; the state has `N − 1` interior nodes.
    pub intervals: usize,
    pub sigma: f64,
    pub gamma: Gamma,
    pub alpha_fraction: f64,
}

impl AllenCahnConfig {
    pub fn spacing(&self) -> f64 {
        2.0 / self.intervals as f64
    }

    pub fn dim(&self) -> usize {
        self.intervals - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.intervals < 3 {
            return Err(Error::InvalidConfig(format!("N must be >= 3, got {}", self.intervals)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig("sigma must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.alpha_fraction) {
            return Err(Error::InvalidConfig("alpha_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `(1/h²)·tridiag(1, −2, 1)` of order `N − 1`.
pub fn dirichlet_laplacian(intervals: usize) -> Matrix {
    let n = intervals - 1;
    let h = 2.0 / intervals as f64;
    let s = 1.0 / (h * h);
    Matrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
        0 => -2.0 * s,
        1 => s,
        _ => 0.0,
    })
}

/// Builds `Ẋ = (σA + I)X − X³ + u + d` with `Q = W = G = hI`. The discount is
/// left at zero; resolve it from `alpha_fraction · ᾱ`.
pub fn build_allen_cahn(cfg: &AllenCahnConfig) -> Result<ControlSystem> {
    cfg.validate()?;
    let n = cfg.dim();
    let h = cfg.spacing();
    let linear = dirichlet_laplacian(cfg.intervals) * cfg.sigma + Matrix::identity(n, n);
    let lin_drift = linear.clone();
    let eye = Matrix::identity(n, n);
    ControlSystem::new(SystemParts {
        drift: Arc::new(move |x| &lin_drift * x - x.map(|v| v * v * v)),
        drift_jacobian: Arc::new(move |x| {
            let mut j = linear.clone();
            for i in 0..x.len() {
                j[(i, i)] -= 3.0 * x[i] * x[i];
            }
            j
        }),
        maps: InputMaps::Constant {
            g: eye.clone(),
            k: eye.clone(),
        },
        state_weight: &eye * h,
        control_weight: &eye * h,
        disturbance_weight: &eye * h,
        gamma: cfg.gamma,
        alpha: 0.0,
        domain_radius: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ac(n: usize, sigma: f64, gamma: Gamma) -> ControlSystem {
        build_allen_cahn(&AllenCahnConfig {
            intervals: n,
            sigma,
            gamma,
            alpha_fraction: 0.5,
        })
        .unwrap()
    }

    #[test]
    fn laplacian_for_four_intervals() {
        let a = dirichlet_laplacian(4);
        assert_eq!(a.shape(), (3, 3));
        for i in 0..3 {
            assert_eq!(a[(i, i)], -8.0);
        }
        assert_eq!(a[(0, 1)], 4.0);
        assert_eq!(a[(1, 2)], 4.0);
        assert_eq!(a[(0, 2)], 0.0);
    }

    #[test]
    fn allen_cahn_sizes_and_weights() {
        let sys = ac(31, 0.1, Gamma::Finite(1.2));
        assert_eq!(sys.n(), 30);
        let h = 2.0 / 31.0;
        assert!((sys.state_weight() - Matrix::identity(30, 30) * h).abs().max() < 1e-15);
        assert!((sys.control_weight() - Matrix::identity(30, 30) * h).abs().max() < 1e-15);
        assert!((sys.disturbance_weight() - Matrix::identity(30, 30) * h).abs().max() < 1e-15);
        assert_eq!(sys.drift(&Vector::zeros(30)).norm(), 0.0);
    }

    #[test]
    fn allen_cahn_rejects_small_grids() {
        let err = build_allen_cahn(&AllenCahnConfig {
            intervals: 2,
            sigma: 0.1,
            gamma: Gamma::Infinite,
            alpha_fraction: 0.0,
        });
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn allen_cahn_jacobian_formula() {
        let sys = ac(4, 1.0, Gamma::Infinite);
        let x = Vector::from_vec(vec![0.3, -0.2, 0.5]);
        let j = sys.drift_jacobian(&x);
        let expected = dirichlet_laplacian(4) + Matrix::identity(3, 3)
            - Matrix::from_diagonal(&x.map(|v| 3.0 * v * v));
        assert!((j - expected).abs().max() < 1e-14);
    }

    #[test]
    fn saddle_inputs_scalar() {
        let sys = ControlSystem::scalar_lq(-1.0, Gamma::Infinite, 0.0).unwrap();
        let (u, d) = sys.saddle_inputs(&Vector::from_element(1, 0.7), &Vector::from_element(1, 0.5));
        assert!((u[0] + 0.25).abs() < 1e-15);
        assert_eq!(d[0], 0.0);

        let sys = ControlSystem::scalar_lq(-1.0, Gamma::Finite(2.0), 0.0).unwrap();
        let (_, d) = sys.saddle_inputs(&Vector::from_element(1, 0.0), &Vector::from_element(1, 1.0));
        assert!((d[0] - 0.125).abs() < 1e-15);
        let (u, d) = sys.saddle_inputs(&Vector::from_element(1, 3.0), &Vector::zeros(1));
        assert_eq!((u[0], d[0]), (0.0, 0.0));
    }

    #[test]
    fn hamiltonian_scalar_values() {
        let sys = ControlSystem::scalar_lq(-1.0, Gamma::Infinite, 0.0).unwrap();
        let zero = Vector::zeros(1);
        assert_eq!(sys.contact_hamiltonian(&zero, 0.0, &zero), 0.0);
        let x = Vector::from_element(1, 1.0);
        assert!((sys.contact_hamiltonian(&x, 0.0, &zero) - 1.0).abs() < 1e-15);
        // p = P x with P = −2 + 2√2 solves 2 − 2P − ½P² = 0.
        let p = Vector::from_element(1, -2.0 + 2.0 * 2f64.sqrt());
        assert!(sys.contact_hamiltonian(&x, 123.0, &p).abs() < 1e-14);
    }

    #[test]
    fn contact_rhs_scalar_and_equilibrium() {
        let sys = ControlSystem::scalar_lq(-1.0, Gamma::Infinite, 0.0).unwrap();
        let (xd, pd, vd) = sys
            .contact_rhs(&Vector::from_element(1, 1.0), &Vector::zeros(1), 0.0)
            .unwrap();
        assert_eq!((xd[0], pd[0], vd), (-1.0, -2.0, 0.0));
        let (xd, pd, vd) = sys.contact_rhs(&Vector::zeros(1), &Vector::zeros(1), 5.0).unwrap();
        assert_eq!((xd[0], pd[0], vd), (0.0, 0.0, 0.0));
    }

    #[test]
    fn allen_cahn_value_rate_matches_closed_form() {
        let gamma = 1.2;
        let sys = ac(4, 1.0, Gamma::Finite(gamma));
        let h = 0.5;
        let x = Vector::from_vec(vec![0.2, -0.4, 0.1]);
        let p = Vector::from_vec(vec![-0.3, 0.6, 0.25]);
        let (_, _, vd) = sys.contact_rhs(&x, &p, 0.0).unwrap();
        let expected = sys.drift(&x).dot(&p) + (1.0 / (2.0 * h)) * (1.0 / (gamma * gamma) - 1.0) * p.dot(&p);
        assert!((vd - expected).abs() < 1e-14);
    }

    #[test]
    fn state_dependent_maps_need_coupling_gradient() {
        let sys = ControlSystem::new(SystemParts {
            drift: Arc::new(|x| -x),
            drift_jacobian: Arc::new(|x| -Matrix::identity(x.len(), x.len())),
            maps: InputMaps::StateDependent {
                g: Arc::new(|x| Matrix::from_element(1, 1, 1.0 + x[0] * x[0])),
                k: Arc::new(|_| Matrix::from_element(1, 1, 1.0)),
                coupling_gradient: None,
            },
            state_weight: Matrix::identity(1, 1),
            control_weight: Matrix::identity(1, 1),
            disturbance_weight: Matrix::identity(1, 1),
            gamma: Gamma::Infinite,
            alpha: 0.1,
            domain_radius: 1.0,
        })
        .unwrap();
        let v = Vector::from_element(1, 0.5);
        assert!(matches!(sys.contact_rhs(&v, &v, 0.0), Err(Error::UnsupportedModel(_))));
    }

    #[test]
    fn rejects_indefinite_weights_and_nonzero_equilibrium() {
        let one = Matrix::identity(1, 1);
        let bad = ControlSystem::linear(
            one.clone(),
            one.clone(),
            one.clone(),
            -one.clone(),
            one.clone(),
            one.clone(),
            Gamma::Infinite,
            0.0,
            1.0,
        );
        assert!(matches!(bad, Err(Error::InvalidConfig(_))));
        let shifted = ControlSystem::new(SystemParts {
            drift: Arc::new(|x| x.map(|v| v + 1.0)),
            drift_jacobian: Arc::new(|_| Matrix::identity(1, 1)),
            maps: InputMaps::Constant {
                g: one.clone(),
                k: one.clone(),
            },
            state_weight: one.clone(),
            control_weight: one.clone(),
            disturbance_weight: one,
            gamma: Gamma::Infinite,
            alpha: 0.0,
            domain_radius: 1.0,
        });
        assert!(matches!(shifted, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn state_scale_preserves_hamiltonian() {
        let sys = ac(6, 0.1, Gamma::Finite(1.5)).with_alpha(0.2).unwrap();
        let scale = Vector::from_vec(vec![0.5, 2.0, 1.0, 3.0, 0.25]);
        let scaled = sys.with_state_scale(&scale).unwrap();
        let x = Vector::from_vec(vec![0.1, -0.2, 0.3, 0.05, -0.4]);
        let p = Vector::from_vec(vec![0.3, 0.1, -0.2, 0.4, 0.2]);
        let z = x.component_div(&scale);
        let pz = p.component_mul(&scale);
        let h_x = sys.contact_hamiltonian(&x, 0.7, &p);
        let h_z = scaled.contact_hamiltonian(&z, 0.7, &pz);
        assert!((h_x - h_z).abs() < 1e-13);
        assert_eq!(scaled.state_scale(), &scale);
    }

    #[test]
    fn gamma_serde_roundtrip() {
        let inf: Gamma = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(inf, Gamma::Infinite);
        let g: Gamma = serde_json::from_str("1.2").unwrap();
        assert_eq!(g, Gamma::Finite(1.2));
        assert_eq!(serde_json::to_string(&Gamma::Infinite).unwrap(), "\"inf\"");
        assert!(serde_json::from_str::<Gamma>("-1").is_err());
    }

    fn random_state() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(-1.0f64..1.0, 5),
            proptest::collection::vec(-1.0f64..1.0, 5),
        )
    }

    proptest! {
        #[test]
        fn saddle_control_minimizes_quadratic((x, p) in random_state(), delta in proptest::collection::vec(-1.0f64..1.0, 5)) {
            let sys = ac(6, 0.1, Gamma::Finite(1.2));
            let x = Vector::from_vec(x);
            let p = Vector::from_vec(p);
            let (u, _) = sys.saddle_inputs(&x, &p);
            let g = sys.input_map(&x);
            let cost = |u: &Vector| u.dot(&(sys.control_weight() * u)) + p.dot(&(&g * u));
            let delta = Vector::from_vec(delta);
            prop_assume!(delta.norm() > 1e-6);
            prop_assert!(cost(&(&u + &delta)) > cost(&u));
        }

        #[test]
        fn saddle_substitution_recovers_hji((x, p) in random_state(), value in -1.0f64..1.0) {
            let sys = ac(6, 0.1, Gamma::Finite(1.2)).with_alpha(0.3).unwrap();
            let x = Vector::from_vec(x);
            let p = Vector::from_vec(p);
            let (u, d) = sys.saddle_inputs(&x, &p);
            let lhs = sys.pre_hamiltonian(&x, value, &p, &u, &d);
            let rhs = sys.contact_hamiltonian(&x, value, &p);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn drift_jacobian_matches_central_differences(x in proptest::collection::vec(-1.0f64..1.0, 5)) {
            let sys = ac(6, 0.1, Gamma::Infinite);
            let x = Vector::from_vec(x);
            let jac = sys.drift_jacobian(&x);
            let eps = 1e-6;
            for j in 0..5 {
                let mut e = Vector::zeros(5);
                e[j] = eps;
                let col = (sys.drift(&(&x + &e)) - sys.drift(&(&x - &e))) / (2.0 * eps);
                for i in 0..5 {
                    let tol = 1e-6 * (1.0 + jac[(i, j)].abs());
                    prop_assert!((col[i] - jac[(i, j)]).abs() <= tol);
                }
            }
        }
    }
}
