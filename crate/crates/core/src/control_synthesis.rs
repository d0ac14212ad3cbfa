//! Offline synthesis of the tube controller: feedback gain, tube metric,
//! contraction factor, disturbance gain, constraint tightening and the
//! terminal ingredients.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernel_features::row_major;
use crate::linalg::{cholesky, inv_sqrt_norm, max_abs, max_eigenvalue_psd, row_times_identity_gain, spectral_radius, symmetrize};
use crate::scalar::Real;

/// Riccati iteration stops once the fixed-point residual is this small
/// (relative to `max(1, ‖P‖)`).
pub const RICCATI_TOL: f64 = 1e-10;
pub const RICCATI_MAX_ITERS: usize = 200_000;
/// Lyapunov series stops once the increment is this small (relative).
pub const LYAPUNOV_TOL: f64 = 1e-12;
/// Accepted Lyapunov residual, relative to `max(1, ‖X‖)`.
pub const LYAPUNOV_RESIDUAL_TOL: f64 = 1e-9;
const LYAPUNOV_MAX_DOUBLINGS: usize = 64;

/// How tube radii evolve along the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TubeLaw {
    /// `σ⁺ = ρσ + √Ξ·d_max`, a valid bound under `‖d‖ ≤ d_max`.
    #[default]
    Radius,
    /// `s⁺ = ρ²s + Ξ·d_max²` on the squared size `s = σ²`.
    Paper,
}

impl fmt::Display for TubeLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TubeLaw::Radius => "radius",
            TubeLaw::Paper => "paper",
        })
    }
}

impl FromStr for TubeLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "radius" => Ok(TubeLaw::Radius),
            "paper" => Ok(TubeLaw::Paper),
            other => invalid(format!("unknown tube law '{other}', expected 'radius' or 'paper'")),
        }
    }
}

/// Polytope `H [x; u] ≤ h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet<T: Real> {
    pub h_mat: DMatrix<T>,
    pub h: DVector<T>,
}

impl<T: Real> ConstraintSet<T> {
    pub fn new(h_mat: DMatrix<T>, h: DVector<T>) -> Result<Self> {
        if h_mat.nrows() == 0 {
            return invalid("constraint set needs at least one row");
        }
        if h.len() != h_mat.nrows() {
            return invalid(format!("H has {} rows but h has {} entries", h_mat.nrows(), h.len()));
        }
        if h_mat.iter().chain(h.iter()).any(|v| !v.is_finite()) {
            return invalid("constraint data must be finite");
        }
        Ok(Self { h_mat, h })
    }

    /// Symmetric box `|xᵢ| ≤ xᵢ_max`, `|uⱼ| ≤ uⱼ_max`, two rows per
    /// coordinate (upper then lower).
    pub fn symmetric_box(state_bounds: &[T], input_bounds: &[T]) -> Result<Self> {
        let n = state_bounds.len();
        let nz = n + input_bounds.len();
        let bounds: Vec<T> = state_bounds.iter().chain(input_bounds).copied().collect();
        if bounds.iter().any(|b| !(*b > T::zero())) {
            return invalid("box bounds must be positive");
        }
        let mut h_mat = DMatrix::zeros(2 * nz, nz);
        let mut h = DVector::zeros(2 * nz);
        for (j, bound) in bounds.iter().enumerate() {
            h_mat[(2 * j, j)] = T::one();
            h_mat[(2 * j + 1, j)] = -T::one();
            h[2 * j] = *bound;
            h[2 * j + 1] = *bound;
        }
        Self::new(h_mat, h)
    }

    pub fn rows(&self) -> usize {
        self.h_mat.nrows()
    }

    pub fn width(&self) -> usize {
        self.h_mat.ncols()
    }

    /// `H_i [x; u] − h_i` for every row.
    pub fn slack(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        let z = DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied());
        &self.h_mat * z - &self.h
    }

    /// Number of rows with `H_i [x; u] > h_i`.
    pub fn violations(&self, x: &DVector<T>, u: &DVector<T>) -> usize {
        self.slack(x, u).iter().filter(|s| **s > T::zero()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution<T: Real> {
    /// Feedback `u = K x`.
    pub gain: DMatrix<T>,
    /// Stabilizing Riccati solution.
    pub cost: DMatrix<T>,
    pub iterations: usize,
    pub residual: T,
}

/// Infinite-horizon discrete LQR by Riccati fixed-point iteration
/// `P ← Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA`, starting from `P = Q`.
pub fn dlqr<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, q: &DMatrix<T>, r: &DMatrix<T>) -> Result<LqrSolution<T>> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return invalid("dlqr: inconsistent matrix dimensions");
    }
    cholesky(r, "R")?;
    let tol = T::tol(RICCATI_TOL);
    let mut p = symmetrize(q);
    let riccati = |p: &DMatrix<T>| -> Result<(DMatrix<T>, DMatrix<T>)> {
        let pb = p * b;
        let gram = r + b.tr_mul(&pb);
        let chol = cholesky(&gram, "R + BᵀPB")?;
        // K = −(R + BᵀPB)⁻¹ BᵀPA
        let k = -chol.solve(&(pb.tr_mul(a)));
        let next = q + a.tr_mul(&(p * a)) + a.tr_mul(&pb) * &k;
        Ok((symmetrize(&next), k))
    };
    for it in 1..=RICCATI_MAX_ITERS {
        let (next, _) = riccati(&p)?;
        let step = max_abs(&(&next - &p));
        let scale = max_abs(&next).max(T::one());
        p = next;
        if !p.iter().all(|v| v.is_finite()) || scale > T::lit(1e15) {
            return Err(Error::Synthesis("Riccati iteration diverged; (A, B) is not stabilizable".into()));
        }
        if step <= tol * scale {
            let (after, gain) = riccati(&p)?;
            let residual = max_abs(&(&after - &p)) / scale;
            let closed = a + b * &gain;
            if spectral_radius(&closed) >= T::one() {
                return Err(Error::Synthesis("LQR closed loop is not Schur stable".into()));
            }
            return Ok(LqrSolution { gain, cost: p, iterations: it, residual });
        }
    }
    Err(Error::Synthesis(format!("Riccati iteration did not converge in {RICCATI_MAX_ITERS} iterations")))
}

/// Solves `AᵀXA − X = −M` by summing `Σ (Aᵀ)ᵏ M Aᵏ` with squared
/// (doubling) partial sums.
pub fn dlyap<T: Real>(a_cl: &DMatrix<T>, m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = a_cl.nrows();
    if a_cl.ncols() != n || m.shape() != (n, n) {
        return invalid("dlyap: inconsistent matrix dimensions");
    }
    let tol = T::tol(LYAPUNOV_TOL);
    let mut x = symmetrize(m);
    let mut ak = a_cl.clone();
    let mut converged = false;
    let mut last_inc = T::zero();
    for k in 0..LYAPUNOV_MAX_DOUBLINGS {
        let inc = ak.tr_mul(&(&x * &ak));
        let inc_norm = max_abs(&inc);
        x += inc;
        ak = &ak * &ak;
        if !inc_norm.is_finite() || !x.iter().all(|v| v.is_finite()) || (k > 8 && inc_norm > last_inc * T::lit(2.0) && inc_norm > T::one()) {
            return Err(Error::Synthesis("Lyapunov series diverges; closed loop is not Schur stable".into()));
        }
        last_inc = inc_norm;
        if inc_norm <= tol * max_abs(&x).max(T::one()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Synthesis("Lyapunov series did not converge; closed loop is not Schur stable".into()));
    }
    let x = symmetrize(&x);
    let res = lyapunov_residual(a_cl, &x, m);
    if res > T::tol(LYAPUNOV_RESIDUAL_TOL) * max_abs(&x).max(T::one()) {
        return Err(Error::Synthesis(format!("Lyapunov residual {res} too large")));
    }
    Ok(x)
}

/// `max |AᵀXA − X + M|`.
pub fn lyapunov_residual<T: Real>(a: &DMatrix<T>, x: &DMatrix<T>, m: &DMatrix<T>) -> T {
    max_abs(&(a.tr_mul(&(x * a)) - x + m))
}

/// Tube metric and contraction data for the error dynamics `e⁺ = A_e e + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeGeometry<T: Real> {
    pub shape: DMatrix<T>,
    pub contraction: T,
    pub disturbance_gain: T,
    pub lyapunov_residual: T,
}

/// `P = dlyap(A+BK, I)`, `ρ² = λ_max(P^{-1/2} A_eᵀ P A_e P^{-1/2})`,
/// `Ξ = λ_max(P)`.
pub fn tube_geometry<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, k: &DMatrix<T>, d_max: T) -> Result<TubeGeometry<T>> {
    let n = a.nrows();
    if k.shape() != (b.ncols(), n) {
        return invalid("feedback gain has the wrong shape");
    }
    if !(d_max >= T::zero()) {
        return invalid("d_max must be nonnegative");
    }
    let a_e = a + b * k;
    let ident = DMatrix::identity(n, n);
    let p = dlyap(&a_e, &ident)?;
    let chol = cholesky(&p, "tube shape P")?;
    let l = chol.l();
    let pa = &p * &a_e;
    let inner = a_e.tr_mul(&pa);
    // L⁻¹ A_eᵀ P A_e L⁻ᵀ is similar to P⁻¹ A_eᵀ P A_e.
    let left = l.solve_lower_triangular(&inner).ok_or_else(|| Error::Synthesis("singular Cholesky factor".into()))?;
    let sim = l
        .solve_lower_triangular(&left.transpose())
        .ok_or_else(|| Error::Synthesis("singular Cholesky factor".into()))?;
    let rho_sq = max_eigenvalue_psd(&symmetrize(&sim))?;
    let contraction = rho_sq.sqrt();
    if !(contraction < T::one()) {
        return Err(Error::Synthesis(format!("contraction factor ρ = {contraction} is not below 1")));
    }
    let disturbance_gain = max_eigenvalue_psd(&p)?;
    let lyapunov_residual = lyapunov_residual(&a_e, &p, &ident);
    Ok(TubeGeometry { shape: p, contraction, disturbance_gain, lyapunov_residual })
}

/// `gᵢ = ‖Hᵢ [I; K] P^{-1/2}‖₂` for every constraint row.
pub fn tightening_factors<T: Real>(h_mat: &DMatrix<T>, k: &DMatrix<T>, p: &DMatrix<T>) -> Result<DVector<T>> {
    let n = p.nrows();
    if k.ncols() != n || h_mat.ncols() != n + k.nrows() {
        return invalid("tightening: H, K and P dimensions disagree");
    }
    let chol = cholesky(p, "tube shape P")?;
    Ok(DVector::from_iterator(
        h_mat.nrows(),
        (0..h_mat.nrows()).map(|i| inv_sqrt_norm(&chol, &row_times_identity_gain(h_mat, i, k))),
    ))
}

/// Every offline ingredient of the tube.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeDesign<T: Real> {
    pub gain: DMatrix<T>,
    pub shape: DMatrix<T>,
    pub contraction: T,
    pub disturbance_gain: T,
    pub tightening: DVector<T>,
    pub d_max: T,
    /// `Ξ d_max² / (1 − ρ²)`.
    pub s_inf: T,
    pub lyapunov_residual: T,
}

impl<T: Real> TubeDesign<T> {
    pub fn synthesize(a: &DMatrix<T>, b: &DMatrix<T>, k: &DMatrix<T>, d_max: T, constraints: &ConstraintSet<T>) -> Result<Self> {
        let geo = tube_geometry(a, b, k, d_max)?;
        let tightening = tightening_factors(&constraints.h_mat, k, &geo.shape)?;
        let rho = geo.contraction;
        let s_inf = geo.disturbance_gain * d_max * d_max / (T::one() - rho * rho);
        Ok(Self {
            gain: k.clone(),
            shape: geo.shape,
            contraction: rho,
            disturbance_gain: geo.disturbance_gain,
            tightening,
            d_max,
            s_inf,
            lyapunov_residual: geo.lyapunov_residual,
        })
    }

    /// One step of the tube radius under `law`.
    pub fn propagate(&self, law: TubeLaw, sigma: T) -> T {
        let rho = self.contraction;
        match law {
            TubeLaw::Radius => rho * sigma + self.disturbance_gain.sqrt() * self.d_max,
            TubeLaw::Paper => (rho * rho * sigma * sigma + self.disturbance_gain * self.d_max * self.d_max).sqrt(),
        }
    }

    /// Smallest squared tube size left invariant by `law`.
    pub fn invariant_level(&self, law: TubeLaw) -> T {
        match law {
            TubeLaw::Paper => self.s_inf,
            TubeLaw::Radius => {
                let r = self.disturbance_gain.sqrt() * self.d_max / (T::one() - self.contraction);
                r * r
            }
        }
    }

    /// `P`-norm squared of `e`.
    pub fn p_norm_sq(&self, e: &DVector<T>) -> T {
        (&self.shape * e).dot(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSet<T: Real> {
    pub gain: DMatrix<T>,
    pub cost: DMatrix<T>,
    pub gamma1: T,
    pub gamma2: T,
    pub lyapunov_residual: T,
}

/// Terminal weights and an optional cap on `γ₁` for problems where no
/// constraint row limits the terminal ellipsoid.
#[derive(Debug, Clone)]
pub struct TerminalOptions<T: Real> {
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
    pub gamma1_cap: Option<T>,
}

/// `K_Ω = dlqr(A, B, Q, R)`, `S` from the Lyapunov equation with right-hand
/// side `Q + K_ΩᵀRK_Ω`, `γ₂` the invariant tube level of `law`, and `γ₁`
/// the largest level whose `S`-ellipsoid satisfies every tightened row.
pub fn terminal_synthesis<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    opts: &TerminalOptions<T>,
    constraints: &ConstraintSet<T>,
    tube: &TubeDesign<T>,
    law: TubeLaw,
) -> Result<TerminalSet<T>> {
    let lqr = dlqr(a, b, &opts.q, &opts.r)?;
    let k = lqr.gain;
    let a_cl = a + b * &k;
    let rhs = &opts.q + k.transpose() * &opts.r * &k;
    let s = dlyap(&a_cl, &rhs)?;
    let chol = cholesky(&s, "terminal cost S")?;
    let gamma2 = tube.invariant_level(law);
    let root = gamma2.sqrt();
    let tiny = T::eps() * T::lit(1e3);
    let mut gamma1: Option<T> = None;
    for i in 0..constraints.rows() {
        let room = constraints.h[i] - tube.tightening[i] * root;
        let row = row_times_identity_gain(&constraints.h_mat, i, &k);
        let c = inv_sqrt_norm(&chol, &row);
        if room <= T::zero() {
            return Err(Error::Synthesis(format!(
                "tube too large for constraints: row {i} has h = {} but tightening g√γ₂ = {}",
                constraints.h[i],
                tube.tightening[i] * root
            )));
        }
        if c <= tiny * row.norm().max(T::one()) {
            continue;
        }
        let level = (room / c) * (room / c);
        gamma1 = Some(gamma1.map_or(level, |g| g.min(level)));
    }
    let gamma1 = match (gamma1, opts.gamma1_cap) {
        (Some(g), Some(cap)) => g.min(cap),
        (Some(g), None) => g,
        (None, Some(cap)) => cap,
        (None, None) => {
            return Err(Error::Synthesis("no constraint row bounds the terminal set; supply a γ₁ cap".into()));
        }
    };
    if !(gamma1 > T::zero()) {
        return Err(Error::Synthesis(format!("terminal level γ₁ = {gamma1} is not positive")));
    }
    let lyapunov_residual = lyapunov_residual(&a_cl, &s, &rhs);
    Ok(TerminalSet { gain: k, cost: s, gamma1, gamma2, lyapunov_residual })
}

/// Structured record of a synthesis run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub tube_law: TubeLaw,
    pub state_dim: usize,
    pub input_dim: usize,
    pub feedback_gain: Vec<f64>,
    pub tube_shape: Vec<f64>,
    pub contraction: f64,
    pub disturbance_gain: f64,
    pub tightening: Vec<f64>,
    pub d_max: f64,
    pub s_inf: f64,
    pub terminal_gain: Vec<f64>,
    pub terminal_cost: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub tube_lyapunov_residual: f64,
    pub terminal_lyapunov_residual: f64,
    pub closed_loop_spectral_radius: f64,
    pub steady_tightening: Vec<f64>,
}

impl SynthesisReport {
    pub fn new<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, tube: &TubeDesign<T>, terminal: &TerminalSet<T>, law: TubeLaw) -> Self {
        let root = terminal.gamma2.sqrt();
        Self {
            tube_law: law,
            state_dim: a.nrows(),
            input_dim: b.ncols(),
            feedback_gain: row_major(&tube.gain),
            tube_shape: row_major(&tube.shape),
            contraction: tube.contraction.as_f64(),
            disturbance_gain: tube.disturbance_gain.as_f64(),
            tightening: tube.tightening.iter().map(|g| g.as_f64()).collect(),
            d_max: tube.d_max.as_f64(),
            s_inf: tube.s_inf.as_f64(),
            terminal_gain: row_major(&terminal.gain),
            terminal_cost: row_major(&terminal.cost),
            gamma1: terminal.gamma1.as_f64(),
            gamma2: terminal.gamma2.as_f64(),
            tube_lyapunov_residual: tube.lyapunov_residual.as_f64(),
            terminal_lyapunov_residual: terminal.lyapunov_residual.as_f64(),
            closed_loop_spectral_radius: spectral_radius(&(a + b * &tube.gain)).as_f64(),
            steady_tightening: tube.tightening.iter().map(|g| (*g * root).as_f64()).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Artifact(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Artifact(e.to_string()))
    }
}
