//! Dense convex QP solver for `min ½xᵀPx + qᵀx  s.t.  l ≤ Ax ≤ u` using
//! operator splitting (ADMM) with adaptive step size, followed by an
//! active-set polishing solve.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::linalg::max_abs_vec;
use crate::scalar::Real;

/// Bounds at or beyond this magnitude are treated as infinite.
pub const QP_INFINITY: f64 = 1e20;

/// Active-set corrections tried while polishing.
const POLISH_PASSES: usize = 25;
const REFINE_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// Tolerance of the infeasibility certificates.
    pub eps_infeasible: f64,
    /// Residuals are checked (and polishing attempted) every this many
    /// iterations.
    pub check_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            max_iter: 10_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_infeasible: 1e-7,
            check_interval: 10,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIter,
    PrimalInfeasible,
    DualInfeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T: Real> {
    pub x: DVector<T>,
    /// Multipliers of `l ≤ Ax ≤ u`; positive where the upper bound is
    /// active, negative at the lower bound.
    pub y: DVector<T>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: T,
    pub dual_residual: T,
    pub polished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T: Real> {
    pub p: DMatrix<T>,
    pub q: DVector<T>,
    pub a: DMatrix<T>,
    pub l: DVector<T>,
    pub u: DVector<T>,
}

struct Residuals<T> {
    prim: T,
    dual: T,
    prim_tol: T,
    dual_tol: T,
    prim_scale: T,
    dual_scale: T,
}

impl<T: Real> QpProblem<T> {
    pub fn new(p: DMatrix<T>, q: DVector<T>, a: DMatrix<T>, l: DVector<T>, u: DVector<T>) -> Result<Self> {
        let n = q.len();
        if p.shape() != (n, n) || a.ncols() != n || l.len() != a.nrows() || u.len() != a.nrows() {
            return invalid("QP dimensions are inconsistent");
        }
        if p.iter().chain(q.iter()).chain(a.iter()).any(|v| !v.is_finite()) {
            return invalid("QP data must be finite");
        }
        if l.iter().zip(u.iter()).any(|(lo, hi)| lo != lo || hi != hi || lo > hi) {
            return invalid("QP bounds must satisfy l ≤ u");
        }
        Ok(Self { p, q, a, l, u })
    }

    pub fn vars(&self) -> usize {
        self.q.len()
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    fn is_equality(&self, i: usize) -> bool {
        (self.u[i] - self.l[i]).abs() <= T::lit(1e-12) * (T::one() + self.u[i].abs())
    }

    fn finite_lower(&self, i: usize) -> bool {
        self.l[i] > T::lit(-QP_INFINITY)
    }

    fn finite_upper(&self, i: usize) -> bool {
        self.u[i] < T::lit(QP_INFINITY)
    }

    fn project(&self, i: usize, v: T) -> T {
        v.max(self.l[i]).min(self.u[i])
    }

    fn residuals(&self, x: &DVector<T>, z: &DVector<T>, y: &DVector<T>, s: &QpSettings) -> Residuals<T> {
        let ax = &self.a * x;
        let px = &self.p * x;
        let aty = self.a.tr_mul(y);
        let prim = max_abs_vec(&(&ax - z));
        let dual = max_abs_vec(&(&px + &self.q + &aty));
        let prim_scale = max_abs_vec(&ax).max(max_abs_vec(z));
        let dual_scale = max_abs_vec(&px).max(max_abs_vec(&aty)).max(max_abs_vec(&self.q));
        let eps_abs = T::tol(s.eps_abs);
        let eps_rel = T::tol(s.eps_rel);
        Residuals {
            prim,
            dual,
            prim_tol: eps_abs + eps_rel * prim_scale,
            dual_tol: eps_abs + eps_rel * dual_scale,
            prim_scale,
            dual_scale,
        }
    }

    fn rho_vector(&self, rho: T) -> DVector<T> {
        DVector::from_iterator(
            self.rows(),
            (0..self.rows()).map(|i| {
                if self.is_equality(i) {
                    rho * T::lit(1e3)
                } else if !self.finite_lower(i) && !self.finite_upper(i) {
                    T::lit(1e-6)
                } else {
                    rho
                }
            }),
        )
    }

    fn factor(&self, sigma: T, rho: &DVector<T>) -> Result<nalgebra::Cholesky<T, nalgebra::Dyn>> {
        let mut k = self.p.clone();
        let n = self.vars();
        for i in 0..n {
            k[(i, i)] += sigma;
        }
        let mut scaled = self.a.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= rho[i];
        }
        k += self.a.tr_mul(&scaled);
        nalgebra::Cholesky::new(k).ok_or_else(|| Error::Solver("QP reduced KKT matrix is not positive definite; P must be PSD".into()))
    }

    /// Solves after scaling every constraint row to unit max-norm; the
    /// returned multipliers refer to the original rows.
    pub fn solve(&self, settings: &QpSettings, warm: Option<(&DVector<T>, &DVector<T>)>) -> Result<QpSolution<T>> {
        let m = self.rows();
        let inf = T::lit(QP_INFINITY);
        let scale = DVector::from_iterator(
            m,
            self.a.row_iter().map(|r| {
                let norm = r.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
                if norm > T::lit(1e-12) {
                    T::one() / norm
                } else {
                    T::one()
                }
            }),
        );
        let mut scaled = self.clone();
        for i in 0..m {
            let d = scale[i];
            scaled.a.row_mut(i).scale_mut(d);
            if scaled.l[i] > -inf {
                scaled.l[i] *= d;
            }
            if scaled.u[i] < inf {
                scaled.u[i] *= d;
            }
        }
        let warm_scaled = warm.map(|(x, y)| (x.clone(), y.component_div(&scale)));
        let mut sol = scaled.solve_unscaled(settings, warm_scaled.as_ref().map(|(x, y)| (x, y)))?;
        if matches!(sol.status, QpStatus::Solved | QpStatus::MaxIter) {
            sol.y.component_mul_assign(&scale);
        }
        Ok(sol)
    }

    fn solve_unscaled(&self, settings: &QpSettings, warm: Option<(&DVector<T>, &DVector<T>)>) -> Result<QpSolution<T>> {
        let n = self.vars();
        let m = self.rows();
        let sigma = T::lit(settings.sigma);
        let alpha = T::lit(settings.alpha);
        let mut rho_base = T::lit(settings.rho);
        let (mut x, mut y) = match warm {
            Some((x0, y0)) if x0.len() == n && y0.len() == m => (x0.clone(), y0.clone()),
            _ => (DVector::zeros(n), DVector::zeros(m)),
        };
        if settings.polish {
            if let Some((_, y0)) = warm.filter(|(_, y0)| y0.len() == m) {
                // a good multiplier guess usually names the active set exactly
                if let Some(sol) = self.polish_from(self.sides_from_multipliers(y0), settings, 0)? {
                    return Ok(sol);
                }
            }
        }
        let ax = &self.a * &x;
        let mut z = DVector::from_iterator(m, (0..m).map(|i| self.project(i, ax[i])));
        let mut rho = self.rho_vector(rho_base);
        let mut chol = self.factor(sigma, &rho)?;
        let mut rhs = DVector::zeros(n);
        let mut best: Option<(T, DVector<T>, DVector<T>)> = None;
        let interval = settings.check_interval.max(1);
        let mut last_polish_fail = 0usize;
        let mut polish_gap = 5 * interval;
        for it in 1..=settings.max_iter {
            let y_prev = y.clone();
            let x_prev = x.clone();
            // rhs = σx − q + Aᵀ(ρ∘z − y)
            let w = DVector::from_iterator(m, (0..m).map(|i| rho[i] * z[i] - y[i]));
            rhs.copy_from(&(&x * sigma - &self.q + self.a.tr_mul(&w)));
            let x_tilde = chol.solve(&rhs);
            let z_tilde = &self.a * &x_tilde;
            x = &x_tilde * alpha + &x * (T::one() - alpha);
            for i in 0..m {
                let z_hat = alpha * z_tilde[i] + (T::one() - alpha) * z[i];
                let z_new = self.project(i, z_hat + y[i] / rho[i]);
                y[i] += rho[i] * (z_hat - z_new);
                z[i] = z_new;
            }
            if it % interval != 0 && it != settings.max_iter {
                continue;
            }
            let r = self.residuals(&x, &z, &y, settings);
            let merit = r.prim.max(r.dual);
            if best.as_ref().is_none_or(|b| merit < b.0) {
                best = Some((merit, x.clone(), y.clone()));
            }
            if r.prim <= r.prim_tol && r.dual <= r.dual_tol {
                if settings.polish {
                    if let Some(sol) = self.polish(&z, &y, settings, it)? {
                        return Ok(sol);
                    }
                }
                return Ok(QpSolution { x, y, status: QpStatus::Solved, iterations: it, primal_residual: r.prim, dual_residual: r.dual, polished: false });
            }
            // Polishing often succeeds long before ADMM reaches tight
            // tolerances; try it once the residuals are moderate.
            let loose = T::lit(1e-3);
            if settings.polish && it >= last_polish_fail + polish_gap && r.prim <= loose * (T::one() + r.prim_scale) && r.dual <= loose * (T::one() + r.dual_scale) {
                if let Some(sol) = self.polish(&z, &y, settings, it)? {
                    return Ok(sol);
                }
                last_polish_fail = it;
                // each failed attempt costs a few dense factorizations
                polish_gap *= 2;
            }
            if self.primal_infeasible(&(&y - &y_prev), settings) {
                return Ok(QpSolution { x, y: &y - &y_prev, status: QpStatus::PrimalInfeasible, iterations: it, primal_residual: r.prim, dual_residual: r.dual, polished: false });
            }
            if self.dual_infeasible(&(&x - &x_prev), settings) {
                return Ok(QpSolution { x: &x - &x_prev, y, status: QpStatus::DualInfeasible, iterations: it, primal_residual: r.prim, dual_residual: r.dual, polished: false });
            }
            if it % (5 * interval) == 0 {
                let tiny = T::lit(1e-12);
                let num = r.prim / r.prim_scale.max(tiny);
                let den = r.dual / r.dual_scale.max(tiny);
                if num > T::zero() && den > T::zero() {
                    let proposed = (rho_base * (num / den).sqrt()).max(T::lit(1e-6)).min(T::lit(1e6));
                    if proposed > rho_base * T::lit(5.0) || proposed < rho_base / T::lit(5.0) {
                        rho_base = proposed;
                        rho = self.rho_vector(rho_base);
                        chol = self.factor(sigma, &rho)?;
                    }
                }
            }
        }
        let (_, bx, by) = best.unwrap_or((T::zero(), x, y));
        let bz = DVector::from_iterator(m, (0..m).map(|i| self.project(i, (&self.a * &bx)[i])));
        if settings.polish {
            if let Some(sol) = self.polish(&bz, &by, settings, settings.max_iter)? {
                return Ok(sol);
            }
        }
        let r = self.residuals(&bx, &bz, &by, settings);
        Ok(QpSolution { x: bx, y: by, status: QpStatus::MaxIter, iterations: settings.max_iter, primal_residual: r.prim, dual_residual: r.dual, polished: false })
    }

    fn primal_infeasible(&self, dy: &DVector<T>, s: &QpSettings) -> bool {
        let norm = max_abs_vec(dy);
        if norm <= T::lit(1e-30) {
            return false;
        }
        let eps = T::tol(s.eps_infeasible);
        if max_abs_vec(&self.a.tr_mul(dy)) > eps * norm {
            return false;
        }
        let mut support = T::zero();
        for i in 0..self.rows() {
            if dy[i] > T::zero() {
                if !self.finite_upper(i) {
                    return false;
                }
                support += self.u[i] * dy[i];
            } else if dy[i] < T::zero() {
                if !self.finite_lower(i) {
                    return false;
                }
                support += self.l[i] * dy[i];
            }
        }
        support < -eps * norm
    }

    fn dual_infeasible(&self, dx: &DVector<T>, s: &QpSettings) -> bool {
        let norm = max_abs_vec(dx);
        if norm <= T::lit(1e-30) {
            return false;
        }
        let eps = T::tol(s.eps_infeasible);
        if max_abs_vec(&(&self.p * dx)) > eps * norm || self.q.dot(dx) > -eps * norm {
            return false;
        }
        let adx = &self.a * dx;
        (0..self.rows()).all(|i| {
            let lo_ok = !self.finite_lower(i) || adx[i] >= -eps * norm;
            let hi_ok = !self.finite_upper(i) || adx[i] <= eps * norm;
            lo_ok && hi_ok
        })
    }

    /// Guesses the active set from `(z, y)` and solves the equality-constrained
    /// KKT system on it. Rows with wrong-signed multipliers are dropped and
    /// violated rows added until the guess is consistent or
    /// [`POLISH_PASSES`] is reached. The result is kept only if optimal to
    /// tolerance.
    fn polish(&self, z: &DVector<T>, y: &DVector<T>, s: &QpSettings, iterations: usize) -> Result<Option<QpSolution<T>>> {
        let m = self.rows();
        // side: +1 upper, −1 lower, 0 equality, absent when inactive
        let side: Vec<Option<i8>> = (0..m)
            .map(|i| {
                if self.is_equality(i) {
                    Some(0)
                } else if self.finite_lower(i) && z[i] - self.l[i] < -y[i] {
                    Some(-1)
                } else if self.finite_upper(i) && self.u[i] - z[i] < y[i] {
                    Some(1)
                } else {
                    None
                }
            })
            .collect();
        self.polish_from(side, s, iterations)
    }

    /// Active set read off the signs of warm-start multipliers.
    fn sides_from_multipliers(&self, y: &DVector<T>) -> Vec<Option<i8>> {
        (0..self.rows())
            .map(|i| {
                if self.is_equality(i) {
                    Some(0)
                } else if y[i] > T::zero() && self.finite_upper(i) {
                    Some(1)
                } else if y[i] < T::zero() && self.finite_lower(i) {
                    Some(-1)
                } else {
                    None
                }
            })
            .collect()
    }

    fn polish_from(&self, mut side: Vec<Option<i8>>, s: &QpSettings, iterations: usize) -> Result<Option<QpSolution<T>>> {
        let m = self.rows();
        let tol = T::tol(s.eps_abs);
        for _ in 0..POLISH_PASSES {
            let Some((x, yp)) = self.solve_active(&side) else {
                return Ok(None);
            };
            let ax = &self.a * &x;
            let mut changed = false;
            for i in 0..m {
                match side[i] {
                    Some(1) if yp[i] < -tol => {
                        side[i] = None;
                        changed = true;
                    }
                    Some(-1) if yp[i] > tol => {
                        side[i] = None;
                        changed = true;
                    }
                    None if self.finite_upper(i) && ax[i] > self.u[i] + tol * (T::one() + self.u[i].abs()) => {
                        side[i] = Some(1);
                        changed = true;
                    }
                    None if self.finite_lower(i) && ax[i] < self.l[i] - tol * (T::one() + self.l[i].abs()) => {
                        side[i] = Some(-1);
                        changed = true;
                    }
                    _ => {}
                }
            }
            if changed {
                continue;
            }
            let zp = DVector::from_iterator(m, (0..m).map(|i| self.project(i, ax[i])));
            let r = self.residuals(&x, &zp, &yp, s);
            if r.prim <= r.prim_tol && r.dual <= r.dual_tol {
                return Ok(Some(QpSolution { x, y: yp, status: QpStatus::Solved, iterations, primal_residual: r.prim, dual_residual: r.dual, polished: true }));
            }
            return Ok(None);
        }
        Ok(None)
    }

    /// Regularized KKT solve with iterative refinement on the rows marked
    /// active. Returns `(x, y)` with `y` zero off the active set.
    fn solve_active(&self, side: &[Option<i8>]) -> Option<(DVector<T>, DVector<T>)> {
        let n = self.vars();
        let active: Vec<(usize, T)> = side
            .iter()
            .enumerate()
            .filter_map(|(i, sd)| sd.map(|sd| (i, if sd < 0 { self.l[i] } else { self.u[i] })))
            .collect();
        let na = active.len();
        let dim = n + na;
        let delta = T::lit(1e-9);
        let mut exact = DMatrix::zeros(dim, dim);
        exact.view_mut((0, 0), (n, n)).copy_from(&self.p);
        for (k, (i, _)) in active.iter().enumerate() {
            for j in 0..n {
                exact[(n + k, j)] = self.a[(*i, j)];
                exact[(j, n + k)] = self.a[(*i, j)];
            }
        }
        let mut kkt = exact.clone();
        for j in 0..n {
            kkt[(j, j)] += delta;
        }
        for k in 0..na {
            kkt[(n + k, n + k)] -= delta;
        }
        let mut rhs = DVector::zeros(dim);
        for j in 0..n {
            rhs[j] = -self.q[j];
        }
        for (k, (_, b)) in active.iter().enumerate() {
            rhs[n + k] = *b;
        }
        // exact factorization when the active rows are independent,
        // regularized otherwise; refinement is against the exact system
        let lu = match exact.clone().lu() {
            lu if lu.is_invertible() => lu,
            _ => kkt.lu(),
        };
        let mut sol = lu.solve(&rhs)?;
        let mut res_norm = max_abs_vec(&(&rhs - &exact * &sol));
        for _ in 0..REFINE_STEPS {
            let res = &rhs - &exact * &sol;
            let Some(corr) = lu.solve(&res) else { break };
            let next = &sol + corr;
            let next_norm = max_abs_vec(&(&rhs - &exact * &next));
            if !(next_norm < res_norm) {
                break;
            }
            sol = next;
            res_norm = next_norm;
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut y = DVector::zeros(self.rows());
        for (k, (i, _)) in active.iter().enumerate() {
            y[*i] = sol[n + k];
        }
        Some((sol.rows(0, n).into_owned(), y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(data: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(data)
    }

    #[test]
    fn unconstrained_minimum() {
        let p = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let q = v(&[1.0, 1.0]);
        let a = DMatrix::identity(2, 2);
        let big = 1e30;
        let prob = QpProblem::new(p.clone(), q.clone(), a, v(&[-big, -big]), v(&[big, big])).unwrap();
        let sol = prob.solve(&QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        let expect = p.lu().solve(&(-q)).unwrap();
        assert_relative_eq!(sol.x, expect, epsilon = 1e-8);
    }

    #[test]
    fn small_textbook_qp() {
        // OSQP demo problem; solution x = (0.3, 0.7).
        let p = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let q = v(&[1.0, 1.0]);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let prob = QpProblem::new(p, q, a, v(&[1.0, 0.0, 0.0]), v(&[1.0, 0.7, 0.7])).unwrap();
        let sol = prob.solve(&QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert_relative_eq!(sol.x[0], 0.3, epsilon = 1e-8);
        assert_relative_eq!(sol.x[1], 0.7, epsilon = 1e-8);
        // stationarity with the returned multipliers
        assert!(sol.dual_residual <= 1e-8);
        assert!(sol.y[2] > 0.0);
    }

    #[test]
    fn linear_program_with_polish() {
        // min −x₁ − x₂ on the unit box intersected with x₁ + 2x₂ ≤ 2.
        let p = DMatrix::zeros(2, 2);
        let q = v(&[-1.0, -1.0]);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 2.0]);
        let prob = QpProblem::new(p, q, a, v(&[0.0, 0.0, -1e30]), v(&[1.0, 1.0, 2.0])).unwrap();
        let sol = prob.solve(&QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(sol.x[1], 0.5, epsilon = 1e-8);
    }

    #[test]
    fn detects_primal_infeasibility() {
        let p = DMatrix::identity(1, 1);
        let q = v(&[0.0]);
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let prob = QpProblem::new(p, q, a, v(&[1.0, -1e30]), v(&[1e30, 0.0])).unwrap();
        let sol = prob.solve(&QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn detects_unbounded_problem() {
        let p = DMatrix::zeros(1, 1);
        let q = v(&[-1.0]);
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let prob = QpProblem::new(p, q, a, v(&[0.0]), v(&[1e30])).unwrap();
        let sol = prob.solve(&QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::DualInfeasible);
    }

    #[test]
    fn rejects_bad_data() {
        let p = DMatrix::identity(1, 1);
        assert!(QpProblem::new(p.clone(), v(&[0.0]), DMatrix::identity(1, 1), v(&[1.0]), v(&[0.0])).is_err());
        assert!(QpProblem::new(p, v(&[f64::NAN]), DMatrix::identity(1, 1), v(&[0.0]), v(&[1.0])).is_err());
    }

    #[test]
    fn warm_start_is_accepted() {
        let p = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let q = v(&[1.0, 1.0]);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let prob = QpProblem::new(p, q, a, v(&[1.0, 0.0, 0.0]), v(&[1.0, 0.7, 0.7])).unwrap();
        let cold = prob.solve(&QpSettings::default(), None).unwrap();
        let warm = prob.solve(&QpSettings::default(), Some((&cold.x, &cold.y))).unwrap();
        assert!(warm.iterations <= cold.iterations);
        assert_relative_eq!(warm.x, cold.x, epsilon = 1e-8);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            /// Random strictly convex box-and-row problems: the returned point
            /// is feasible and no random feasible point does better.
            #[test]
            fn solution_beats_feasible_samples(
                m in proptest::collection::vec(-1.0..1.0f64, 9),
                q in proptest::collection::vec(-2.0..2.0f64, 3),
                row in proptest::collection::vec(-1.0..1.0f64, 3),
                probes in proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, 3), 50),
            ) {
                let m = DMatrix::from_row_slice(3, 3, &m);
                let p = &m * m.transpose() + DMatrix::identity(3, 3) * 0.1;
                let mut a = DMatrix::zeros(4, 3);
                a.view_mut((0, 0), (3, 3)).copy_from(&DMatrix::identity(3, 3));
                for j in 0..3 {
                    a[(3, j)] = row[j];
                }
                let (l, u) = (v(&[-1.0, -1.0, -1.0, -0.5]), v(&[1.0, 1.0, 1.0, 0.5]));
                let prob = QpProblem::new(p.clone(), v(&q), a.clone(), l.clone(), u.clone()).unwrap();
                let sol = prob.solve(&QpSettings::default(), None).unwrap();
                prop_assert_eq!(sol.status, QpStatus::Solved);
                let ax = &a * &sol.x;
                prop_assert!((0..4).all(|i| ax[i] >= l[i] - 1e-6 && ax[i] <= u[i] + 1e-6));
                let f = |x: &DVector<f64>| 0.5 * x.dot(&(&p * x)) + v(&q).dot(x);
                let best = f(&sol.x);
                for z in probes {
                    let z = v(&z);
                    let az = &a * &z;
                    if (0..4).all(|i| az[i] >= l[i] && az[i] <= u[i]) {
                        prop_assert!(best <= f(&z) + 1e-6);
                    }
                }
            }
        }
    }
}
