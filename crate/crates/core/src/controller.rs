//! Receding-horizon tube MPC loop: tube initialization from the previous
//! update, OCP solve and the applied input `u = v₀ + K(x − ξ₀)`.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ocp::{solve, OcpSolution, OcpSpec, SolveStatus, SqpIterate, SqpSettings};
use crate::scalar::Real;

/// Memory carried from one update to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState<T: Real> {
    pub previous: OcpSolution<T>,
    /// `ê_{1|k−1} = x̂_{1|k−1} − ξ_{1|k−1}` from the hybrid model.
    pub predicted_error: DVector<T>,
    /// `ê_{1|k−1}ᵀ P ê_{1|k−1}`.
    pub predicted_error_norm: T,
    /// `s_{1|k−1}`.
    pub next_tube: T,
    pub step: usize,
}

impl<T: Real> ControllerState<T> {
    /// `s_{1|k−1} − ê_{1|k−1}ᵀPê_{1|k−1}`, the part of the tube initialization
    /// that does not depend on the new nominal state.
    pub fn history(&self) -> T {
        self.next_tube - self.predicted_error_norm
    }
}

/// `s_{0|k} = s_{1|k−1} + e₀ᵀPe₀ − ê₁ᵀPê₁` with `e₀ = x − ξ₀`, clamped
/// below at `e₀ᵀPe₀`. Returns the value and whether the clamp was applied.
pub fn initialize_tube<T: Real>(state: &ControllerState<T>, p: &nalgebra::DMatrix<T>, x: &DVector<T>, xi0: &DVector<T>) -> (T, bool) {
    let e = x - xi0;
    let current = (p * &e).dot(&e);
    let raw = state.next_tube + current - state.predicted_error_norm;
    if raw < current {
        log::debug!("tube initialization clamped: {raw} < {current}");
        (current, true)
    } else {
        (raw, false)
    }
}

/// One row of the controller trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub k: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub xi0: Vec<f64>,
    pub u: Vec<f64>,
    pub v0: Vec<f64>,
    pub s0: f64,
    pub s1: f64,
    pub objective: f64,
    pub status: SolveStatus,
    pub solve_ms: f64,
    /// The input came from the shifted previous plan.
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutcome<T: Real> {
    pub input: DVector<T>,
    pub solution: OcpSolution<T>,
    pub record: TraceRecord,
    pub iterates: Vec<SqpIterate>,
}

#[derive(Debug, Clone)]
pub struct TubeMpc<T: Real> {
    spec: OcpSpec<T>,
    settings: SqpSettings,
    state: Option<ControllerState<T>>,
    dt: f64,
}

fn to_f64<T: Real>(v: &DVector<T>) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

impl<T: Real> TubeMpc<T> {
    pub fn new(spec: OcpSpec<T>, settings: SqpSettings, dt: f64) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, settings, state: None, dt })
    }

    pub fn spec(&self) -> &OcpSpec<T> {
        &self.spec
    }

    pub fn state(&self) -> Option<&ControllerState<T>> {
        self.state.as_ref()
    }

    pub fn reset(&mut self) {
        self.state = None;
    }

    /// Replaces the per-step offsets of the prediction horizon.
    pub fn set_offsets(&mut self, offsets: Vec<DVector<T>>) -> Result<()> {
        let old = std::mem::replace(&mut self.spec.offsets, offsets);
        if let Err(e) = self.spec.validate() {
            self.spec.offsets = old;
            return Err(e);
        }
        Ok(())
    }

    /// `v₀ + K(x − ξ₀)`.
    pub fn control_law(&self, x: &DVector<T>, xi0: &DVector<T>, v0: &DVector<T>) -> DVector<T> {
        v0 + &self.spec.tube.gain * (x - xi0)
    }

    pub fn step(&mut self, x: &DVector<T>) -> Result<StepOutcome<T>> {
        let k = self.state.as_ref().map_or(0, |s| s.step + 1);
        let (warm, history) = match &self.state {
            Some(s) => (Some(s.previous.shifted(&self.spec)?), Some(s.history())),
            None => (None, None),
        };
        let (solution, iterates) = solve(&self.spec, x, warm.as_ref(), history, &self.settings)?;
        for it in &iterates {
            if let Ok(line) = serde_json::to_string(it) {
                log::debug!("sqp k={k} {line}");
            }
        }
        let usable = solution.status == SolveStatus::Optimal
            || (solution.status == SolveStatus::MaxIter && solution.max_violation <= T::lit(self.settings.feas_tol));
        let (plan, input, fallback) = if usable {
            let u = self.control_law(x, &solution.states[0], &solution.inputs[0]);
            (solution.clone(), u, false)
        } else {
            let Some(state) = &self.state else {
                return Err(Error::Solver(format!(
                    "OCP {} at the first step (max violation {})",
                    solution.status, solution.max_violation
                )));
            };
            log::warn!("step {k}: OCP {} (violation {}), using the shifted previous plan", solution.status, solution.max_violation);
            let prev = &state.previous;
            let u = self.control_law(x, &prev.states[1], &prev.inputs[1.min(prev.inputs.len() - 1)]);
            let shifted = prev.shifted(&self.spec)?;
            (shifted, u, true)
        };
        let predicted = self.spec.model.predict(x, &input)? + &self.spec.offsets[0];
        let e1 = &predicted - &plan.states[1];
        let e1_norm = (&self.spec.tube.shape * &e1).dot(&e1);
        let s0 = plan.radii[0] * plan.radii[0];
        let s1 = plan.radii[1] * plan.radii[1];
        let record = TraceRecord {
            k,
            t: k as f64 * self.dt,
            x: to_f64(x),
            xi0: to_f64(&plan.states[0]),
            u: to_f64(&input),
            v0: to_f64(&plan.inputs[0]),
            s0: s0.as_f64(),
            s1: s1.as_f64(),
            objective: solution.objective.as_f64(),
            status: solution.status,
            solve_ms: solution.solve_time * 1e3,
            fallback,
        };
        self.state = Some(ControllerState { previous: plan, predicted_error: e1, predicted_error_norm: e1_norm, next_tube: s1, step: k });
        Ok(StepOutcome { input, solution, record, iterates })
    }
}
