//! Finite-horizon tube MPC problem in multiple-shooting form, solved by
//! SQP with an ℓ₁ merit line search and dense QP subproblems.
//!
//! Decision vector layout: `ξ₀ … ξ_N`, then `v₀ … v_{N−1}`, then one tube
//! variable per stage `τ₀ … τ_N`. The tube variable is whichever of `s = σ²`
//! (paper law) or `σ` (radius law) makes the law linear. The anchor is then
//! `‖x − ξ₀‖²_P + h ≤ s₀` or `√(‖x − ξ₀‖²_P + h + ε) ≤ σ₀`, both convex; `ε`
//! only tightens it. A floor on the radius keeps `√s` smooth.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::control_synthesis::{ConstraintSet, TerminalSet, TubeDesign, TubeLaw};
use crate::error::{invalid, Result};
use crate::linalg::{max_abs_vec, min_eigenvalue_spd};
use crate::qp::{QpProblem, QpSettings, QpStatus, QP_INFINITY};
use crate::residual_learning::HybridModel;
use crate::scalar::Real;

pub const SIGMA_FLOOR_FRACTION: f64 = 0.1;

const MULTIPLIER_CAP: f64 = 1e9;

#[derive(Debug, Clone)]
pub struct OcpSpec<T: Real> {
    pub model: HybridModel<T>,
    pub horizon: usize,
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
    /// Terminal cost weight; normally `terminal.cost`.
    pub terminal_cost: DMatrix<T>,
    pub constraints: ConstraintSet<T>,
    pub tube: TubeDesign<T>,
    pub terminal: TerminalSet<T>,
    /// Known additive term of each prediction step (length `horizon`).
    pub offsets: Vec<DVector<T>>,
    pub law: TubeLaw,
}

impl<T: Real> OcpSpec<T> {
    pub fn validate(&self) -> Result<()> {
        let n = self.model.state_dim();
        let m = self.model.input_dim();
        if self.horizon == 0 {
            return invalid("horizon must be at least 1");
        }
        if self.q.shape() != (n, n) || self.r.shape() != (m, m) || self.terminal_cost.shape() != (n, n) {
            return invalid("Q, R or S has the wrong dimension");
        }
        if min_eigenvalue_spd(&self.r).is_err() {
            return invalid("R must be positive definite");
        }
        if self.constraints.width() != n + m {
            return invalid(format!("constraint rows have {} columns, expected {}", self.constraints.width(), n + m));
        }
        if self.tube.tightening.len() != self.constraints.rows() || self.tube.shape.shape() != (n, n) {
            return invalid("tube design does not match the constraint set or state dimension");
        }
        if self.terminal.cost.shape() != (n, n) {
            return invalid("terminal set has the wrong dimension");
        }
        if self.offsets.len() != self.horizon || self.offsets.iter().any(|o| o.len() != n) {
            return invalid(format!("need {} offset vectors of length {n}", self.horizon));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout { n: self.model.state_dim(), m: self.model.input_dim(), horizon: self.horizon, rows: self.constraints.rows() }
    }

    /// Next tube radius under the configured law.
    pub fn propagate(&self, sigma: T) -> T {
        self.radius_of(self.law_eval(self.var_of(sigma)).0)
    }

    fn var_of(&self, radius: T) -> T {
        match self.law {
            TubeLaw::Paper => radius * radius,
            TubeLaw::Radius => radius,
        }
    }

    fn radius_of(&self, var: T) -> T {
        match self.law {
            TubeLaw::Paper => var.max(T::zero()).sqrt(),
            TubeLaw::Radius => var,
        }
    }

    /// Added under the square root of the radius-law anchor.
    pub fn anchor_epsilon(&self) -> T {
        self.sigma_floor() * self.sigma_floor()
    }

    /// Lower bound on every radius: a small fraction of the one-step radius
    /// `√Ξ·d_max`. It keeps `√s` differentiable along the iterates.
    pub fn sigma_floor(&self) -> T {
        T::lit(SIGMA_FLOOR_FRACTION) * self.tube.disturbance_gain.sqrt() * self.tube.d_max
    }

    /// Tube law on the tube variable: value and (constant) slope.
    fn law_eval(&self, var: T) -> (T, T) {
        let rho = self.tube.contraction;
        let c2 = self.tube.disturbance_gain * self.tube.d_max * self.tube.d_max;
        match self.law {
            TubeLaw::Paper => (rho * rho * var + c2, rho * rho),
            TubeLaw::Radius => (rho * var + c2.sqrt(), rho),
        }
    }
}

/// Index bookkeeping for the decision vector and constraint rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    /// Constraint-set rows per stage.
    pub rows: usize,
}

impl Layout {
    pub fn xi(&self, t: usize) -> usize {
        t * self.n
    }

    pub fn v(&self, t: usize) -> usize {
        self.n * (self.horizon + 1) + t * self.m
    }

    /// Tube variable `τ_t` (`s_t` or `σ_t` depending on the law).
    pub fn size(&self, t: usize) -> usize {
        self.n * (self.horizon + 1) + self.m * self.horizon + t
    }

    pub fn vars(&self) -> usize {
        self.size(self.horizon) + 1
    }

    /// Dynamics defects then tube-law defects.
    pub fn eq_rows(&self) -> usize {
        self.horizon * (self.n + 1)
    }

    /// Anchor, stage rows, terminal cost level, terminal size, radius floor.
    pub fn ineq_rows(&self) -> usize {
        1 + self.horizon * self.rows + 2 + self.horizon + 1
    }

    pub fn stage_row(&self, t: usize, i: usize) -> usize {
        1 + t * self.rows + i
    }

    pub fn terminal_row(&self) -> usize {
        1 + self.horizon * self.rows
    }

    /// Moves per-stage multipliers one stage earlier, repeating the last.
    pub fn shift_multipliers<T: Real>(&self, y: &DVector<T>) -> DVector<T> {
        let mut out = y.clone();
        if y.len() != self.eq_rows() + self.ineq_rows() {
            return out;
        }
        let (n, hz) = (self.n, self.horizon);
        let ne = self.eq_rows();
        let tr = ne + self.terminal_row();
        for t in 0..hz.saturating_sub(1) {
            for i in 0..n {
                out[t * n + i] = y[(t + 1) * n + i];
            }
            out[hz * n + t] = y[hz * n + t + 1];
            for i in 0..self.rows {
                out[ne + self.stage_row(t, i)] = y[ne + self.stage_row(t + 1, i)];
            }
        }
        for t in 0..hz {
            out[tr + 2 + t] = y[tr + 3 + t];
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::MaxIter => "max-iter",
            SolveStatus::Infeasible => "infeasible",
        })
    }
}

/// One SQP iteration of the optional debug dump.
#[derive(Debug, Clone, Serialize)]
pub struct SqpIterate {
    pub iteration: usize,
    pub objective: f64,
    pub violation: f64,
    pub kkt: f64,
    pub step: f64,
    pub alpha: f64,
    pub penalty: f64,
    pub elastic: bool,
    pub qp_iterations: usize,
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution<T: Real> {
    pub states: Vec<DVector<T>>,
    pub inputs: Vec<DVector<T>>,
    pub radii: Vec<T>,
    pub objective: T,
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt_residual: T,
    pub max_violation: T,
    pub solve_time: f64,
    /// Multipliers of the last QP subproblem (equalities, then
    /// inequalities); used to warm-start the next solve.
    pub multipliers: Option<DVector<T>>,
}

impl<T: Real> OcpSolution<T> {
    /// `s_t = σ_t²`.
    pub fn tube_sizes(&self) -> Vec<T> {
        self.radii.iter().map(|s| *s * *s).collect()
    }

    /// Initial guess for the next step: shift by one stage, repeat the last
    /// input, extend the last state with the model and re-propagate radii.
    pub fn shifted(&self, spec: &OcpSpec<T>) -> Result<Self> {
        let n_steps = spec.horizon;
        if self.states.len() != n_steps + 1 || self.inputs.len() != n_steps {
            return invalid("warm start has a different horizon");
        }
        let mut states: Vec<DVector<T>> = self.states[1..].to_vec();
        let mut inputs: Vec<DVector<T>> = self.inputs[1..].to_vec();
        let last_u = self.inputs[n_steps - 1].clone();
        inputs.push(last_u.clone());
        let tail = spec.model.predict(&self.states[n_steps], &last_u)? + &spec.offsets[n_steps - 1];
        states.push(tail);
        let mut radii = Vec::with_capacity(n_steps + 1);
        radii.push(self.radii.get(1).copied().unwrap_or(T::zero()));
        for t in 0..n_steps {
            radii.push(spec.propagate(radii[t]));
        }
        let multipliers = self.multipliers.as_ref().map(|y| spec.layout().shift_multipliers(y));
        Ok(Self { states, inputs, radii, multipliers, ..self.clone() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqpSettings {
    pub max_iter: usize,
    pub kkt_tol: f64,
    pub step_tol: f64,
    /// Feasibility tolerance of the final audit.
    pub feas_tol: f64,
    pub elastic_penalty: f64,
    /// Added to `γ₂`; kept well inside `feas_tol`.
    pub terminal_slack: f64,
    pub qp: QpSettings,
    pub record_iterates: bool,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            max_iter: 50,
            kkt_tol: 1e-6,
            step_tol: 1e-8,
            feas_tol: 1e-6,
            elastic_penalty: 1e4,
            terminal_slack: 5e-7,
            qp: QpSettings::default(),
            record_iterates: false,
        }
    }
}

/// The nonlinear program for one measured state. Constraint conventions:
/// `c_E(w) = 0`, `c_I(w) ≤ 0`.
pub struct OcpNlp<'a, T: Real> {
    spec: &'a OcpSpec<T>,
    layout: Layout,
    x: DVector<T>,
    history: T,
    terminal_slack: T,
}

impl<'a, T: Real> OcpNlp<'a, T> {
    /// `history` is `s_{1|k−1} − ê₁ᵀPê₁` (absent at cold start); only its
    /// positive part enters the anchor.
    pub fn new(spec: &'a OcpSpec<T>, x: &DVector<T>, history: Option<T>) -> Result<Self> {
        spec.validate()?;
        if x.len() != spec.model.state_dim() || x.iter().any(|v| !v.is_finite()) {
            return invalid("measured state must be finite and match the state dimension");
        }
        let history = history.unwrap_or(T::zero()).max(T::zero());
        Ok(Self { spec, layout: spec.layout(), x: x.clone(), history, terminal_slack: T::zero() })
    }

    /// Loosens the terminal size bound to `s_N ≤ γ₂ + slack`. Any level at or
    /// above `γ₂` is invariant under the tube law, and a small slack keeps the
    /// anchor from pinning `ξ₀` to a single point once the tube settles.
    pub fn with_terminal_slack(mut self, slack: T) -> Self {
        self.terminal_slack = slack.max(T::zero());
        self
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn pack(&self, states: &[DVector<T>], inputs: &[DVector<T>], radii: &[T]) -> DVector<T> {
        let l = self.layout;
        let mut w = DVector::zeros(l.vars());
        for (t, s) in states.iter().enumerate() {
            w.rows_mut(l.xi(t), l.n).copy_from(s);
        }
        for (t, u) in inputs.iter().enumerate() {
            w.rows_mut(l.v(t), l.m).copy_from(u);
        }
        for (t, r) in radii.iter().enumerate() {
            w[l.size(t)] = self.spec.var_of(*r);
        }
        w
    }

    pub fn unpack(&self, w: &DVector<T>) -> (Vec<DVector<T>>, Vec<DVector<T>>, Vec<T>) {
        let l = self.layout;
        let states = (0..=l.horizon).map(|t| w.rows(l.xi(t), l.n).into_owned()).collect();
        let inputs = (0..l.horizon).map(|t| w.rows(l.v(t), l.m).into_owned()).collect();
        let radii = (0..=l.horizon).map(|t| self.spec.radius_of(w[l.size(t)])).collect();
        (states, inputs, radii)
    }

    pub fn objective(&self, w: &DVector<T>) -> T {
        let l = self.layout;
        let s = self.spec;
        let mut acc = T::zero();
        for t in 0..l.horizon {
            let xi = w.rows(l.xi(t), l.n);
            let v = w.rows(l.v(t), l.m);
            acc += (&s.q * xi).dot(&xi) + (&s.r * v).dot(&v);
        }
        let xn = w.rows(l.xi(l.horizon), l.n);
        acc + (&s.terminal_cost * xn).dot(&xn)
    }

    pub fn objective_gradient(&self, w: &DVector<T>) -> DVector<T> {
        let l = self.layout;
        let s = self.spec;
        let two = T::lit(2.0);
        let mut g = DVector::zeros(l.vars());
        for t in 0..l.horizon {
            g.rows_mut(l.xi(t), l.n).copy_from(&((&s.q + s.q.transpose()) * w.rows(l.xi(t), l.n)));
            g.rows_mut(l.v(t), l.m).copy_from(&((&s.r + s.r.transpose()) * w.rows(l.v(t), l.m)));
        }
        let sn = (&s.terminal_cost + s.terminal_cost.transpose()) / two;
        g.rows_mut(l.xi(l.horizon), l.n).copy_from(&(&sn * w.rows(l.xi(l.horizon), l.n) * two));
        g
    }

    /// Constant Hessian of the objective.
    pub fn objective_hessian(&self) -> DMatrix<T> {
        let l = self.layout;
        let s = self.spec;
        let mut h = DMatrix::zeros(l.vars(), l.vars());
        for t in 0..l.horizon {
            h.view_mut((l.xi(t), l.xi(t)), (l.n, l.n)).copy_from(&(&s.q + s.q.transpose()));
            h.view_mut((l.v(t), l.v(t)), (l.m, l.m)).copy_from(&(&s.r + s.r.transpose()));
        }
        let k = l.xi(l.horizon);
        h.view_mut((k, k), (l.n, l.n)).copy_from(&(&s.terminal_cost + s.terminal_cost.transpose()));
        h
    }

    /// Equality residuals and, optionally, their Jacobian.
    pub fn equality(&self, w: &DVector<T>, jac: Option<&mut DMatrix<T>>) -> Result<DVector<T>> {
        let l = self.layout;
        let s = self.spec;
        let (n, m) = (l.n, l.m);
        let mut c = DVector::zeros(l.eq_rows());
        let mut ws = s.model.workspace();
        let mut f = vec![T::zero(); n];
        let mut jf = DMatrix::zeros(n, n + m);
        let mut jac = jac;
        if let Some(j) = jac.as_deref_mut() {
            if j.shape() != (l.eq_rows(), l.vars()) {
                *j = DMatrix::zeros(l.eq_rows(), l.vars());
            } else {
                j.fill(T::zero());
            }
        }
        for t in 0..l.horizon {
            let xi = w.rows(l.xi(t), n);
            let v = w.rows(l.v(t), m);
            if jac.is_some() {
                s.model.eval_with_jacobian(xi.as_slice(), v.as_slice(), &mut f, &mut jf, &mut ws)?;
            } else {
                s.model.eval_into(xi.as_slice(), v.as_slice(), &mut f, None, &mut ws)?;
            }
            for i in 0..n {
                c[t * n + i] = w[l.xi(t + 1) + i] - f[i] - s.offsets[t][i];
            }
            let (next, slope) = s.law_eval(w[l.size(t)]);
            let row = l.horizon * n + t;
            c[row] = w[l.size(t + 1)] - next;
            if let Some(j) = jac.as_deref_mut() {
                for i in 0..n {
                    j[(t * n + i, l.xi(t + 1) + i)] = T::one();
                    for k in 0..n {
                        j[(t * n + i, l.xi(t) + k)] = -jf[(i, k)];
                    }
                    for k in 0..m {
                        j[(t * n + i, l.v(t) + k)] = -jf[(i, n + k)];
                    }
                }
                j[(row, l.size(t + 1))] = T::one();
                j[(row, l.size(t))] = -slope;
            }
        }
        Ok(c)
    }

    /// Inequality values (`≤ 0` when satisfied) and, optionally, their Jacobian.
    pub fn inequality(&self, w: &DVector<T>, jac: Option<&mut DMatrix<T>>) -> DVector<T> {
        let l = self.layout;
        let s = self.spec;
        let (n, m) = (l.n, l.m);
        let two = T::lit(2.0);
        let mut c = DVector::zeros(l.ineq_rows());
        let mut jac = jac;
        if let Some(j) = jac.as_deref_mut() {
            if j.shape() != (l.ineq_rows(), l.vars()) {
                *j = DMatrix::zeros(l.ineq_rows(), l.vars());
            } else {
                j.fill(T::zero());
            }
        }
        let (level, dlevel) = self.anchor_level(&w.rows(l.xi(0), n).into_owned());
        c[0] = level - w[l.size(0)];
        if let Some(j) = jac.as_deref_mut() {
            for k in 0..n {
                j[(0, l.xi(0) + k)] = dlevel[k];
            }
            j[(0, l.size(0))] = -T::one();
        }
        let hm = &s.constraints.h_mat;
        for t in 0..l.horizon {
            let radius = s.radius_of(w[l.size(t)]);
            let dradius = match s.law {
                TubeLaw::Paper => T::one() / (two * radius.max(T::eps().sqrt())),
                TubeLaw::Radius => T::one(),
            };
            for i in 0..l.rows {
                let row = l.stage_row(t, i);
                let mut acc = s.tube.tightening[i] * radius - s.constraints.h[i];
                for k in 0..n {
                    acc += hm[(i, k)] * w[l.xi(t) + k];
                }
                for k in 0..m {
                    acc += hm[(i, n + k)] * w[l.v(t) + k];
                }
                c[row] = acc;
                if let Some(j) = jac.as_deref_mut() {
                    for k in 0..n {
                        j[(row, l.xi(t) + k)] = hm[(i, k)];
                    }
                    for k in 0..m {
                        j[(row, l.v(t) + k)] = hm[(i, n + k)];
                    }
                    j[(row, l.size(t))] = s.tube.tightening[i] * dradius;
                }
            }
        }
        let tr = l.terminal_row();
        let xn = w.rows(l.xi(l.horizon), n).into_owned();
        let sym = (&s.terminal.cost + s.terminal.cost.transpose()) / two;
        let sx = &sym * &xn;
        c[tr] = sx.dot(&xn) - s.terminal.gamma1;
        c[tr + 1] = w[l.size(l.horizon)] - s.var_of((s.terminal.gamma2 + self.terminal_slack).sqrt());
        let floor = s.var_of(s.sigma_floor());
        for t in 0..=l.horizon {
            c[tr + 2 + t] = floor - w[l.size(t)];
        }
        if let Some(j) = jac {
            for k in 0..n {
                j[(tr, l.xi(l.horizon) + k)] = two * sx[k];
            }
            j[(tr + 1, l.size(l.horizon))] = T::one();
            for t in 0..=l.horizon {
                j[(tr + 2 + t, l.size(t))] = -T::one();
            }
        }
        c
    }

    /// Largest constraint violation at `w`.
    pub fn violation(&self, w: &DVector<T>) -> Result<T> {
        let ce = self.equality(w, None)?;
        let ci = self.inequality(w, None);
        Ok(max_abs_vec(&ce).max(ci.iter().fold(T::zero(), |a, v| a.max(*v))))
    }

    /// Anchor bound on `τ₀` as a function of `ξ₀`, with its gradient.
    fn anchor_level(&self, xi0: &DVector<T>) -> (T, DVector<T>) {
        let e = &self.x - xi0;
        let pe = &self.spec.tube.shape * &e;
        let q = pe.dot(&e) + self.history;
        match self.spec.law {
            TubeLaw::Paper => (q, pe * T::lit(-2.0)),
            TubeLaw::Radius => {
                let r = (q + self.spec.anchor_epsilon()).sqrt();
                (r, pe * (-T::one() / r))
            }
        }
    }

    /// Hessian of the anchor row in `ξ₀` (positive semidefinite).
    fn anchor_hessian(&self, xi0: &DVector<T>) -> DMatrix<T> {
        let p = &self.spec.tube.shape;
        match self.spec.law {
            TubeLaw::Paper => p * T::lit(2.0),
            TubeLaw::Radius => {
                let e = &self.x - xi0;
                let pe = p * &e;
                let r = (pe.dot(&e) + self.history + self.spec.anchor_epsilon()).sqrt();
                p / r - &pe * pe.transpose() / (r * r * r)
            }
        }
    }

    /// Curvature of the `g√s` tightening along each paper-law size, taken
    /// in absolute value so the QP stays convex. Zero under the radius law.
    fn size_curvature(&self, mu: &DVector<T>, w: &DVector<T>) -> Vec<T> {
        let l = self.layout;
        let s = self.spec;
        let floor = s.sigma_floor();
        (0..=l.horizon)
            .map(|t| {
                if t == l.horizon || s.law == TubeLaw::Radius {
                    return T::zero();
                }
                let size = w[l.size(t)].max(floor * floor).max(T::eps().sqrt());
                let s32 = size * size.sqrt();
                let mut curv = T::zero();
                for i in 0..l.rows {
                    curv += mu[l.stage_row(t, i)] * s.tube.tightening[i] / (T::lit(4.0) * s32);
                }
                curv
            })
            .collect()
    }

    fn violation_l1(&self, ce: &DVector<T>, ci: &DVector<T>) -> T {
        ce.iter().fold(T::zero(), |a, v| a + v.abs()) + ci.iter().fold(T::zero(), |a, v| a + v.max(T::zero()))
    }

    fn merit(&self, w: &DVector<T>, nu: T) -> Result<(T, T)> {
        let ce = self.equality(w, None)?;
        let ci = self.inequality(w, None);
        let viol = self.violation_l1(&ce, &ci);
        Ok((self.objective(w) + nu * viol, viol))
    }

    /// Smallest radii consistent with `ξ₀`: `τ₀` at the anchor bound (or the
    /// floor), then the tube law. Lowering radii never breaks a tube
    /// constraint.
    fn minimal_radii(&self, w: &mut DVector<T>) {
        let l = self.layout;
        let (level, _) = self.anchor_level(&w.rows(l.xi(0), l.n).into_owned());
        w[l.size(0)] = level.max(self.spec.var_of(self.spec.sigma_floor()));
        for t in 0..l.horizon {
            w[l.size(t + 1)] = self.spec.law_eval(w[l.size(t)]).0;
        }
    }

    /// Zero inputs, states rolled out with the linear baseline and offsets.
    fn cold_start(&self) -> DVector<T> {
        let l = self.layout;
        let s = self.spec;
        let mut w = DVector::zeros(l.vars());
        let mut x = self.x.clone();
        w.rows_mut(l.xi(0), l.n).copy_from(&x);
        for t in 0..l.horizon {
            x = &s.model.baseline.a * &x + &s.offsets[t];
            w.rows_mut(l.xi(t + 1), l.n).copy_from(&x);
        }
        self.minimal_radii(&mut w);
        w
    }
}

struct QpParts<T: Real> {
    hess: DMatrix<T>,
    grad: DVector<T>,
    je: DMatrix<T>,
    ji: DMatrix<T>,
}

fn build_qp<T: Real>(parts: &QpParts<T>, ce: &DVector<T>, ci: &DVector<T>, elastic: Option<T>) -> Result<QpProblem<T>> {
    let nv = parts.grad.len();
    let ne = ce.len();
    let ni = ci.len();
    let ns = if elastic.is_some() { ni } else { 0 };
    let nx = nv + ns;
    let rows = ne + ni + ns;
    let mut p = DMatrix::zeros(nx, nx);
    p.view_mut((0, 0), (nv, nv)).copy_from(&parts.hess);
    let mut q = DVector::zeros(nx);
    q.rows_mut(0, nv).copy_from(&parts.grad);
    let mut a = DMatrix::zeros(rows, nx);
    a.view_mut((0, 0), (ne, nv)).copy_from(&parts.je);
    a.view_mut((ne, 0), (ni, nv)).copy_from(&parts.ji);
    let inf = T::lit(QP_INFINITY * 10.0);
    let mut lo = DVector::from_element(rows, -inf);
    let mut hi = DVector::from_element(rows, inf);
    for i in 0..ne {
        lo[i] = -ce[i];
        hi[i] = -ce[i];
    }
    for i in 0..ni {
        hi[ne + i] = -ci[i];
    }
    if let Some(penalty) = elastic {
        for i in 0..ni {
            q[nv + i] = penalty;
            a[(ne + i, nv + i)] = -T::one();
            a[(ne + ni + i, nv + i)] = T::one();
            lo[ne + ni + i] = T::zero();
        }
    }
    QpProblem::new(p, q, a, lo, hi)
}

/// Solves the OCP from measured state `x`. `warm` is used as the initial
/// guess as given (see [`OcpSolution::shifted`]); `history` feeds the tube
/// anchor.
pub fn solve<T: Real>(
    spec: &OcpSpec<T>,
    x: &DVector<T>,
    warm: Option<&OcpSolution<T>>,
    history: Option<T>,
    settings: &SqpSettings,
) -> Result<(OcpSolution<T>, Vec<SqpIterate>)> {
    let start = Instant::now();
    let nlp = OcpNlp::new(spec, x, history)?.with_terminal_slack(T::lit(settings.terminal_slack));
    let l = nlp.layout();
    let ne = l.eq_rows();
    let ni = l.ineq_rows();
    let mut w = match warm {
        Some(ws) if ws.states.len() == l.horizon + 1 && ws.inputs.len() == l.horizon && ws.radii.len() == l.horizon + 1 => {
            let mut w = nlp.pack(&ws.states, &ws.inputs, &ws.radii);
            // the anchor must hold at the start so τ₀ is never below it
            let (level, _) = nlp.anchor_level(&ws.states[0]);
            if w[l.size(0)] < level || w[l.size(0)] < spec.var_of(spec.sigma_floor()) {
                nlp.minimal_radii(&mut w);
            }
            w
        }
        _ => nlp.cold_start(),
    };
    let obj_hess = nlp.objective_hessian();
    let penalty = T::lit(settings.elastic_penalty);
    let feas_tol = T::lit(settings.feas_tol);
    let mut nu = T::one();
    let mut elastic = false;
    let mut mu_anchor = T::one();
    let mut mu_terminal = T::zero();
    // multipliers beyond this come from a nearly dependent active set and
    // only poison the Hessian, the merit penalty and the next warm start
    let y_cap = T::lit(MULTIPLIER_CAP);
    let usable = |y: &DVector<T>| y.len() == ne + ni && max_abs_vec(y) <= y_cap;
    let mut y_prev: Option<DVector<T>> = warm.and_then(|ws| ws.multipliers.clone()).filter(|y| usable(y));
    if let Some(y) = &y_prev {
        mu_anchor = y[ne].max(T::lit(1e-3));
        mu_terminal = y[ne + l.terminal_row()].max(T::zero());
    }
    let mut log = Vec::new();
    let mut je = DMatrix::zeros(ne, l.vars());
    let mut ji = DMatrix::zeros(ni, l.vars());
    let mut best: Option<(T, T, DVector<T>)> = None;
    let mut converged = false;
    let mut kkt = T::lit(f64::INFINITY);
    let mut iterations = 0;
    let mut qp_failed = false;

    for iter in 1..=settings.max_iter {
        iterations = iter;
        let ce = nlp.equality(&w, Some(&mut je))?;
        let ci = nlp.inequality(&w, Some(&mut ji));
        let grad = nlp.objective_gradient(&w);
        let mut hess = obj_hess.clone();
        // convex curvature of the anchor and terminal constraints
        let p2 = nlp.anchor_hessian(&w.rows(l.xi(0), l.n).into_owned()) * mu_anchor;
        let mut blk = hess.view_mut((l.xi(0), l.xi(0)), (l.n, l.n));
        blk += &p2;
        let s2 = (&spec.terminal.cost + spec.terminal.cost.transpose()) * mu_terminal;
        let k = l.xi(l.horizon);
        let mut blk = hess.view_mut((k, k), (l.n, l.n));
        blk += &s2;
        if let Some(y) = &y_prev {
            let mu = y.rows(ne, ni).map(|v| v.max(T::zero()));
            for (t, c) in nlp.size_curvature(&mu, &w).into_iter().enumerate() {
                hess[(l.size(t), l.size(t))] += c;
            }
        }
        let parts = QpParts { hess, grad, je: je.clone(), ji: ji.clone() };

        let solve_sub = |elastic: bool, ce: &DVector<T>, ci: &DVector<T>, warm_y: Option<&DVector<T>>| -> Result<crate::qp::QpSolution<T>> {
            let qp = build_qp(&parts, ce, ci, elastic.then_some(penalty))?;
            let y0 = warm_y.filter(|y| y.len() == qp.rows()).cloned();
            let x0 = DVector::zeros(qp.vars());
            qp.solve(&settings.qp, y0.as_ref().map(|y| (&x0, y)))
        };
        let mut sol = solve_sub(elastic, &ce, &ci, y_prev.as_ref())?;
        let hard_fail = |s: &crate::qp::QpSolution<T>| {
            matches!(s.status, QpStatus::PrimalInfeasible | QpStatus::DualInfeasible)
                || (s.status == QpStatus::MaxIter && s.primal_residual > feas_tol)
        };
        if hard_fail(&sol) && !elastic {
            elastic = true;
            sol = solve_sub(true, &ce, &ci, None)?;
        }
        if hard_fail(&sol) {
            qp_failed = true;
            break;
        }
        let step = sol.x.rows(0, l.vars()).into_owned();
        let y = sol.y.clone();
        let lam = y.rows(0, ne).into_owned();
        let mu = y.rows(ne, ni).map(|v| v.max(T::zero()));
        let slack_l1 = if elastic { sol.x.rows(l.vars(), ni).iter().fold(T::zero(), |a, v| a + v.max(T::zero())) } else { T::zero() };

        // KKT residual at w with the new multipliers
        let stat = max_abs_vec(&(&parts.grad + je.tr_mul(&lam) + ji.tr_mul(&mu)));
        let viol = max_abs_vec(&ce).max(ci.iter().fold(T::zero(), |a, v| a.max(*v)));
        let compl = mu.iter().zip(ci.iter()).fold(T::zero(), |a, (m, c)| a.max((*m * *c).abs()));
        // large multipliers (a nearly pinned anchor) inflate the raw residual
        let y_scale = (max_abs_vec(&lam).max(max_abs_vec(&mu)) / T::lit(100.0)).max(T::one());
        kkt = (stat.max(compl) / y_scale).max(viol);
        let step_norm = max_abs_vec(&step);

        mu_anchor = mu[0].max(T::lit(1e-3)).min(y_cap);
        mu_terminal = mu[l.terminal_row()].min(y_cap);
        y_prev = if usable(&y) { Some(y.clone()) } else { None };

        let obj = nlp.objective(&w);
        let record = |alpha: T, nu: T, log: &mut Vec<SqpIterate>| {
            if settings.record_iterates {
                log.push(SqpIterate {
                    iteration: iter,
                    objective: obj.as_f64(),
                    violation: viol.as_f64(),
                    kkt: kkt.as_f64(),
                    step: step_norm.as_f64(),
                    alpha: alpha.as_f64(),
                    penalty: nu.as_f64(),
                    elastic,
                    qp_iterations: sol.iterations,
                    active: (0..ni).filter(|i| mu[*i] > T::zero()).collect(),
                });
            }
        };

        let feasible = viol <= feas_tol && !elastic;
        if feasible && (step_norm <= T::tol(settings.step_tol) || kkt <= T::tol(settings.kkt_tol)) {
            record(T::zero(), nu, &mut log);
            converged = true;
            break;
        }

        let y_max = max_abs_vec(&lam).max(max_abs_vec(&mu)).min(y_cap);
        let target = y_max * T::lit(1.5) + T::lit(1e-3);
        if target > nu {
            nu = target;
        }
        if elastic && nu < penalty {
            nu = penalty;
        }
        let viol_l1 = nlp.violation_l1(&ce, &ci);
        let phi0 = obj + nu * viol_l1;
        let deriv = (parts.grad.dot(&step) - nu * (viol_l1 - slack_l1)).min(T::zero());
        let armijo = T::lit(1e-4);
        let mut alpha = T::one();
        let mut accepted = false;
        let mut trial = &w + &step;
        let (phi, _) = nlp.merit(&trial, nu)?;
        if phi <= phi0 + armijo * deriv {
            accepted = true;
        } else {
            // second-order correction for the curvature of the constraints
            let ce_t = nlp.equality(&trial, None)?;
            let ci_t = nlp.inequality(&trial, None);
            let ce_c = &ce_t - &je * &step;
            let ci_c = &ci_t - &ji * &step;
            let corr = solve_sub(elastic, &ce_c, &ci_c, Some(&y))?;
            if corr.status == QpStatus::Solved {
                let soc = &w + corr.x.rows(0, l.vars());
                let (phi_soc, _) = nlp.merit(&soc, nu)?;
                if phi_soc <= phi0 + armijo * deriv {
                    trial = soc;
                    accepted = true;
                }
            }
        }
        while !accepted {
            alpha *= T::lit(0.5);
            trial = &w + &step * alpha;
            let (phi, _) = nlp.merit(&trial, nu)?;
            if phi <= phi0 + armijo * alpha * deriv || alpha < T::lit(1e-10) {
                accepted = true;
            }
        }
        record(alpha, nu, &mut log);
        let stalled = alpha < T::lit(1e-10);
        w = trial;

        let v_now = nlp.violation(&w)?;
        let o_now = nlp.objective(&w);
        let better = match &best {
            None => true,
            Some((bv, bo, _)) => {
                if v_now <= feas_tol && *bv <= feas_tol {
                    o_now < *bo
                } else {
                    v_now < *bv
                }
            }
        };
        if better {
            best = Some((v_now, o_now, w.clone()));
        }
        if stalled {
            break;
        }
    }

    if !converged {
        if let Some((_, _, bw)) = best {
            w = bw;
        }
    }
    let mut canonical = w.clone();
    nlp.minimal_radii(&mut canonical);
    let before = nlp.violation(&w)?;
    if nlp.violation(&canonical)? <= before.max(feas_tol) {
        w = canonical;
    }
    let max_violation = nlp.violation(&w)?;
    let status = if qp_failed || (elastic && max_violation > feas_tol) {
        SolveStatus::Infeasible
    } else if converged && max_violation <= feas_tol {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIter
    };
    let (states, inputs, radii) = nlp.unpack(&w);
    let objective = nlp.objective(&w);
    Ok((
        OcpSolution {
            states,
            inputs,
            radii,
            objective,
            status,
            iterations,
            kkt_residual: kkt,
            max_violation,
            solve_time: start.elapsed().as_secs_f64(),
            multipliers: y_prev.filter(|y| usable(y)),
        },
        log,
    ))
}
