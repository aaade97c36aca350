//! Linearization at the origin: Hamiltonian matrices, hyperbolicity margins,
//! the generalized algebraic Riccati equation and the decoupling transform.

use nalgebra::{Complex, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControlSystem, Gamma, Matrix, Vector};

/// Default threshold on `|Re λ|` below which an eigenvalue counts as imaginary.
pub const HYPERBOLICITY_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Linearization {
    pub a: Matrix,
    pub b: Matrix,
    pub d: Matrix,
    pub q: Matrix,
    pub w_inv: Matrix,
    pub g_inv: Matrix,
    pub gamma: Gamma,
    /// `R̃ = −½(BW⁻¹Bᵀ − γ⁻²DG⁻¹Dᵀ)` at the working `γ`.
    pub r_tilde: Matrix,
}

impl Linearization {
    /// `R̃` for an arbitrary `γ`.
    pub fn r_tilde_at(&self, gamma: Gamma) -> Matrix {
        let control = &self.b * &self.w_inv * self.b.transpose();
        let r = if gamma.is_infinite() {
            control
        } else {
            control - &self.d * &self.g_inv * self.d.transpose() * gamma.inv_sq()
        };
        let r = r * -0.5;
        (&r + r.transpose()) * 0.5
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
}

pub fn linearize(sys: &ControlSystem) -> Linearization {
    let zero = Vector::zeros(sys.n());
    let mut lin = Linearization {
        a: sys.drift_jacobian(&zero),
        b: sys.input_map(&zero),
        d: sys.disturbance_map(&zero),
        q: sys.state_weight().clone(),
        w_inv: sys.control_weight_inv().clone(),
        g_inv: sys.disturbance_weight_inv().clone(),
        gamma: sys.gamma(),
        r_tilde: Matrix::zeros(0, 0),
    };
    lin.r_tilde = lin.r_tilde_at(sys.gamma());
    lin
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HamiltonianForm {
    /// `[[A, R̃], [−2Q, −Aᵀ + αI]]`, the linear part of the characteristic flow.
    Characteristic,
    /// The characteristic form shifted by `−(α/2)I`.
    Symmetric,
}

pub fn hamiltonian_matrix(lin: &Linearization, alpha: f64, gamma: Gamma, form: HamiltonianForm) -> Matrix {
    let n = lin.n();
    let r = lin.r_tilde_at(gamma);
    let mut h = Matrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&lin.a);
    h.view_mut((0, n), (n, n)).copy_from(&r);
    h.view_mut((n, 0), (n, n)).copy_from(&(&lin.q * -2.0));
    h.view_mut((n, n), (n, n)).copy_from(&(-lin.a.transpose()));
    for i in 0..n {
        h[(n + i, n + i)] += alpha;
    }
    if form == HamiltonianForm::Symmetric {
        for i in 0..2 * n {
            h[(i, i)] -= 0.5 * alpha;
        }
    }
    h
}

pub fn eigenvalues(m: &Matrix) -> Vec<Complex<f64>> {
    m.clone().complex_eigenvalues().iter().copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralDistance {
    /// `min |Re λ|` over eigenvalues with `Re λ < 0`.
    pub dist: f64,
    pub hyperbolic: bool,
    pub min_abs_re: f64,
    pub stable_count: usize,
}

pub fn stable_spectral_distance(h: &Matrix, tol: f64) -> Result<SpectralDistance> {
    if !h.is_square() || h.nrows() % 2 != 0 {
        return Err(Error::InvalidArgument("expected a square matrix of even order".into()));
    }
    let eig = eigenvalues(h);
    let min_abs_re = eig.iter().map(|l| l.re.abs()).fold(f64::INFINITY, f64::min);
    let hyperbolic = min_abs_re > tol;
    let stable: Vec<f64> = eig.iter().filter(|l| l.re < 0.0 && l.re.abs() > tol).map(|l| -l.re).collect();
    let dist = stable.iter().copied().fold(f64::INFINITY, f64::min);
    if stable.is_empty() {
        return Err(Error::DegenerateSpectrum);
    }
    Ok(SpectralDistance {
        dist,
        hyperbolic,
        min_abs_re,
        stable_count: stable.len(),
    })
}

/// `dist(σ₋(H₀), Im)` with `H₀` the characteristic matrix at `α = 0`,
/// evaluated at the given `γ`.
pub fn alpha_bar(lin: &Linearization, gamma: Gamma) -> Result<f64> {
    let h0 = hamiltonian_matrix(lin, 0.0, gamma, HamiltonianForm::Characteristic);
    match stable_spectral_distance(&h0, HYPERBOLICITY_TOL) {
        Ok(s) if s.hyperbolic => Ok(s.dist),
        Ok(s) => Err(Error::ConditionC1Violated {
            min_abs_re: s.min_abs_re,
            tol: HYPERBOLICITY_TOL,
        }),
        Err(Error::DegenerateSpectrum) => Err(Error::ConditionC1Violated {
            min_abs_re: 0.0,
            tol: HYPERBOLICITY_TOL,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug)]
pub struct StabilityCertificate {
    pub p: Matrix,
    pub gare_residual: f64,
    pub delta0: f64,
    pub alpha_bar: f64,
    pub alpha: f64,
    pub gamma: Gamma,
    /// `dist(σ₋(H(α,γ)), Im)` of the symmetric form.
    pub h_stable_margin: f64,
    /// `ᾱ − α`, the decay margin used to size the BVP horizon.
    pub horizon_margin: f64,
    /// Eigenvalues of `A + R̃P`.
    pub closedloop_spectrum: Vec<Complex<f64>>,
}

/// `2Q + AᵀP + PA − αP + PR̃P`.
pub fn gare_residual_matrix(lin: &Linearization, r_tilde: &Matrix, alpha: f64, p: &Matrix) -> Matrix {
    &lin.q * 2.0 + lin.a.transpose() * p + p * &lin.a - p * alpha + p * r_tilde * p
}

/// Matrix sign function by the determinant-scaled Newton iteration.
fn matrix_sign(h: &Matrix) -> Result<Matrix> {
    let dim = h.nrows();
    let mut z = h.clone();
    for _ in 0..100 {
        let lu = z.clone().lu();
        let inv = lu.try_inverse().ok_or(Error::NotHyperbolic {
            n: dim / 2,
            stable: 0,
            min_abs_re: 0.0,
        })?;
        let det = lu.determinant().abs();
        let c = if det > 0.0 && det.is_finite() {
            det.powf(1.0 / dim as f64)
        } else {
            1.0
        };
        let next = (&z / c + inv * c) * 0.5;
        let change = (&next - &z).norm();
        let scale = next.norm();
        z = next;
        if change <= 1e-13 * scale {
            return Ok(z);
        }
    }
    Ok(z)
}

pub fn solve_gare(lin: &Linearization, alpha: f64) -> Result<StabilityCertificate> {
    let n = lin.n();
    let gamma = lin.gamma;
    let abar = alpha_bar(lin, gamma)?;
    let hs = hamiltonian_matrix(lin, alpha, gamma, HamiltonianForm::Symmetric);
    let spec = match stable_spectral_distance(&hs, HYPERBOLICITY_TOL) {
        Ok(s) => s,
        Err(Error::DegenerateSpectrum) => {
            return Err(Error::NotHyperbolic {
                n,
                stable: 0,
                min_abs_re: 0.0,
            })
        }
        Err(e) => return Err(e),
    };
    if !spec.hyperbolic || spec.stable_count != n {
        return Err(Error::NotHyperbolic {
            n,
            stable: spec.stable_count,
            min_abs_re: spec.min_abs_re,
        });
    }

    // The stable subspace is ker(sign(H) + I); with basis [I; P] this gives
    // [W₁₂; W₂₂ + I] P = −[W₁₁ + I; W₂₁].
    let sign = matrix_sign(&hs)?;
    let mut lhs = Matrix::zeros(2 * n, n);
    let mut rhs = Matrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&sign.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(sign.view((n, n), (n, n)) + Matrix::identity(n, n)));
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(sign.view((0, 0), (n, n)) + Matrix::identity(n, n))));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-sign.view((n, 0), (n, n))));
    let svd = SVD::new(lhs, true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition < 1e12) {
        return Err(Error::SubspaceNotGraph { condition });
    }
    let p = svd
        .solve(&rhs, 0.0)
        .map_err(|_| Error::SubspaceNotGraph { condition })?;
    let mut p = (&p + p.transpose()) * 0.5;

    // Newton steps on the residual clean up the sign-function rounding:
    // (A − α/2 + R̃P)ᵀX + X(A − α/2 + R̃P) = −Res(P).
    let eye = Matrix::identity(n, n);
    let mut residual = gare_residual_matrix(lin, &lin.r_tilde, alpha, &p).abs().max();
    for _ in 0..4 {
        if residual <= 1e-14 * (1.0 + p.norm()) {
            break;
        }
        let acl = &lin.a - &eye * (0.5 * alpha) + &lin.r_tilde * &p;
        let res = gare_residual_matrix(lin, &lin.r_tilde, alpha, &p);
        let step = solve_lyapunov(&acl.transpose(), &(-res))?;
        let cand = &p + (&step + step.transpose()) * 0.5;
        let cand_res = gare_residual_matrix(lin, &lin.r_tilde, alpha, &cand).abs().max();
        if !(cand_res < residual) {
            break;
        }
        p = cand;
        residual = cand_res;
    }
    if !(residual <= 1e-8 * (1.0 + p.norm())) {
        return Err(Error::InconsistentCertificate {
            what: "GARE residual",
            err: residual,
        });
    }
    let min_eig = p.clone().symmetric_eigenvalues().min();
    if !(min_eig > 0.0) {
        return Err(Error::NoStabilizingSolution { min_eig });
    }
    let closed = &lin.a + &lin.r_tilde * &p;
    let closedloop_spectrum = eigenvalues(&closed);
    let max_re = closedloop_spectrum.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    if !(max_re < 0.0 && max_re < 0.5 * alpha) {
        return Err(Error::InconsistentCertificate {
            what: "closed-loop spectral abscissa",
            err: max_re,
        });
    }
    Ok(StabilityCertificate {
        p,
        gare_residual: residual,
        delta0: 2.0 * abar,
        alpha_bar: abar,
        alpha,
        gamma,
        h_stable_margin: spec.dist,
        horizon_margin: abar - alpha,
        closedloop_spectrum,
    })
}

/// Solves `Acl·S + S·Aclᵀ = RHS` by Kronecker vectorization.
pub fn solve_lyapunov(acl: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    let n = acl.nrows();
    if !acl.is_square() || rhs.shape() != (n, n) {
        return Err(Error::InvalidArgument("Lyapunov operands must be square and conformal".into()));
    }
    let eig = eigenvalues(acl);
    let scale = 1.0 + acl.abs().max();
    for li in &eig {
        for lj in &eig {
            if (li + lj).norm() <= 1e-12 * scale {
                return Err(Error::ResonantSpectrum);
            }
        }
    }
    let eye = Matrix::identity(n, n);
    let op = eye.kronecker(acl) + acl.kronecker(&eye);
    let vec_rhs = Vector::from_column_slice(rhs.as_slice());
    let sol = op.lu().solve(&vec_rhs).ok_or(Error::ResonantSpectrum)?;
    Ok(Matrix::from_column_slice(n, n, sol.as_slice()))
}

#[derive(Clone, Debug)]
pub struct DecouplingTransform {
    pub s: Matrix,
    pub p: Matrix,
    pub t: Matrix,
    pub t_inv: Matrix,
    /// `A + R̃P`, the stable block.
    pub bmat: Matrix,
    /// `(A + R̃P − αI)ᵀ`; the anti-stable block is `−F`.
    pub fmat: Matrix,
    pub alpha: f64,
}

impl DecouplingTransform {
    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    /// `(x, p) = T(x̄, p̄)`.
    pub fn to_original(&self, xbar: &Vector, pbar: &Vector) -> (Vector, Vector) {
        let x = xbar + &self.s * pbar;
        let p = &self.p * &x + pbar;
        (x, p)
    }

    /// `(x̄, p̄) = T⁻¹(x, p)`.
    pub fn to_decoupled(&self, x: &Vector, p: &Vector) -> (Vector, Vector) {
        let pbar = p - &self.p * x;
        let xbar = x - &self.s * &pbar;
        (xbar, pbar)
    }
}

/// `T = [[I, S], [P, PS + I]]` and its closed-form inverse `[[I + SP, −S], [−P, I]]`.
pub fn transform_matrices(p: &Matrix, s: &Matrix) -> (Matrix, Matrix) {
    let n = p.nrows();
    let eye = Matrix::identity(n, n);
    let mut t = Matrix::zeros(2 * n, 2 * n);
    t.view_mut((0, 0), (n, n)).copy_from(&eye);
    t.view_mut((0, n), (n, n)).copy_from(s);
    t.view_mut((n, 0), (n, n)).copy_from(p);
    t.view_mut((n, n), (n, n)).copy_from(&(p * s + &eye));
    let mut t_inv = Matrix::zeros(2 * n, 2 * n);
    t_inv.view_mut((0, 0), (n, n)).copy_from(&(&eye + s * p));
    t_inv.view_mut((0, n), (n, n)).copy_from(&(-s));
    t_inv.view_mut((n, 0), (n, n)).copy_from(&(-p));
    t_inv.view_mut((n, n), (n, n)).copy_from(&eye);
    (t, t_inv)
}

/// Builds the transform and checks both `T·T⁻¹ = I` and the block
/// diagonalization of the characteristic matrix.
pub fn decoupling_transform(lin: &Linearization, p: &Matrix, s: &Matrix, alpha: f64) -> Result<DecouplingTransform> {
    let n = lin.n();
    let eye = Matrix::identity(n, n);
    let (t, t_inv) = transform_matrices(p, s);

    let inv_err = (&t * &t_inv - Matrix::identity(2 * n, 2 * n)).abs().max();
    if !(inv_err <= 1e-8 * (1.0 + t.abs().max() * t_inv.abs().max())) {
        return Err(Error::InconsistentCertificate {
            what: "T·T⁻¹ = I",
            err: inv_err,
        });
    }
    let bmat = &lin.a + &lin.r_tilde * p;
    let fmat = (&bmat - &eye * alpha).transpose();
    let hc = hamiltonian_matrix(lin, alpha, lin.gamma, HamiltonianForm::Characteristic);
    let mut target = Matrix::zeros(2 * n, 2 * n);
    target.view_mut((0, 0), (n, n)).copy_from(&bmat);
    target.view_mut((n, n), (n, n)).copy_from(&(-&fmat));
    let blk_err = (&t_inv * &hc * &t - target).abs().max();
    let scale = 1.0 + hc.abs().max() * t.abs().max() * t_inv.abs().max();
    if !(blk_err <= 1e-8 * scale) {
        return Err(Error::InconsistentCertificate {
            what: "block diagonalization",
            err: blk_err,
        });
    }
    Ok(DecouplingTransform {
        s: s.clone(),
        p: p.clone(),
        t,
        t_inv,
        bmat,
        fmat,
        alpha,
    })
}

/// Solves for `S` in `(B − α/2·I)S + S(B − α/2·I)ᵀ = −R̃` and assembles `T`.
pub fn decoupling_for(lin: &Linearization, cert: &StabilityCertificate) -> Result<DecouplingTransform> {
    let n = lin.n();
    let shifted = &lin.a + &lin.r_tilde * &cert.p - Matrix::identity(n, n) * (0.5 * cert.alpha);
    let s = solve_lyapunov(&shifted, &(-&lin.r_tilde))?;
    let s = (&s + s.transpose()) * 0.5;
    decoupling_transform(lin, &cert.p, &s, cert.alpha)
}

/// Nonlinear remainders `(N_s, N_u)` of the characteristic flow in
/// decoupled coordinates.
pub fn nonlinear_residuals(
    sys: &ControlSystem,
    tr: &DecouplingTransform,
    xbar: &Vector,
    pbar: &Vector,
) -> Result<(Vector, Vector)> {
    let (x, p) = tr.to_original(xbar, pbar);
    let (xd, pd) = sys.characteristic_field(&x, &p)?;
    let (wx, wp) = tr.to_decoupled(&xd, &pd);
    Ok((wx - &tr.bmat * xbar, wp + &tr.fmat * pbar))
}

/// Linearization, certificate and transform for a system with its discount
/// already resolved.
#[derive(Clone, Debug)]
pub struct LinearAnalysis {
    pub lin: Linearization,
    pub cert: StabilityCertificate,
    pub transform: DecouplingTransform,
}

pub fn analyze(sys: &ControlSystem) -> Result<LinearAnalysis> {
    let lin = linearize(sys);
    let cert = solve_gare(&lin, sys.alpha())?;
    let transform = decoupling_for(&lin, &cert)?;
    Ok(LinearAnalysis { lin, cert, transform })
}

/// Resolves `α = alpha_fraction · ᾱ` (working `γ`) and returns the
/// discounted system together with its linear analysis.
pub fn resolve_discount(sys: &ControlSystem, alpha_fraction: f64) -> Result<(ControlSystem, LinearAnalysis)> {
    if !(0.0..1.0).contains(&alpha_fraction) {
        return Err(Error::InvalidConfig("alpha_fraction must lie in [0, 1)".into()));
    }
    let lin = linearize(sys);
    let abar = alpha_bar(&lin, sys.gamma())?;
    let sys = sys.with_alpha(alpha_fraction * abar)?;
    let analysis = analyze(&sys)?;
    Ok((sys, analysis))
}
