//! Kinematic bicycle lane-keeping benchmark in path error coordinates
//! `(e_y, e_ψ)` with steering input `δ` and road curvature `κ`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::control_synthesis::ConstraintSet;
use crate::controller::{TraceRecord, TubeMpc};
use crate::error::{invalid, Error, Result};
use crate::ocp::SolveStatus;
use crate::residual_learning::{Domain, LinearBaseline};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BicycleParams {
    /// Speed (m/s).
    pub speed: f64,
    /// Wheelbase (m).
    pub wheelbase: f64,
    /// Sampling period (s).
    pub dt: f64,
    /// Bound on road curvature (1/m).
    pub kappa_max: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self { speed: 5.0, wheelbase: 2.5, dt: 0.033, kappa_max: 0.13 }
    }
}

impl BicycleParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.speed, self.wheelbase, self.dt, self.kappa_max];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return invalid("bicycle speed, wheelbase, step and curvature bound must be positive");
        }
        if self.speed * self.dt >= self.wheelbase {
            return invalid(format!("v·Δt = {} must be below the wheelbase {}", self.speed * self.dt, self.wheelbase));
        }
        Ok(())
    }
}

fn check_steer(delta: f64) -> Result<()> {
    if !(delta.abs() < std::f64::consts::FRAC_PI_2) {
        return Err(Error::Domain(format!("steering angle {delta} is outside (−π/2, π/2)")));
    }
    Ok(())
}

/// One step of the nonlinear kinematic model.
pub fn plant_step<T: Real>(params: &BicycleParams, x: &DVector<T>, delta: T, kappa: T) -> Result<DVector<T>> {
    check_steer(delta.as_f64())?;
    if x.len() != 2 {
        return invalid("bicycle state is (e_y, e_ψ)");
    }
    let v = T::lit(params.speed);
    let dt = T::lit(params.dt);
    let l = T::lit(params.wheelbase);
    Ok(DVector::from_vec(vec![
        x[0] + v * x[1].sin() * dt,
        x[1] + v / l * delta.tan() * dt - v * kappa * dt,
    ]))
}

/// Small-angle model around `e_ψ = δ = 0`.
pub fn linearize<T: Real>(params: &BicycleParams) -> Result<LinearBaseline<T>> {
    let v = params.speed;
    let dt = params.dt;
    let a = DMatrix::from_row_slice(2, 2, &[T::one(), T::lit(v * dt), T::zero(), T::one()]);
    let b = DMatrix::from_row_slice(2, 1, &[T::zero(), T::lit(v / params.wheelbase * dt)]);
    LinearBaseline::new(a, b)
}

/// Known additive term `(0, −vκΔt)`.
pub fn curvature_offset<T: Real>(params: &BicycleParams, kappa: T) -> DVector<T> {
    DVector::from_vec(vec![T::zero(), -T::lit(params.speed * params.dt) * kappa])
}

/// Plant minus linearization minus offset.
pub fn residual_oracle<T: Real>(params: &BicycleParams, e_psi: T, delta: T) -> Result<DVector<T>> {
    check_steer(delta.as_f64())?;
    let v = T::lit(params.speed);
    let dt = T::lit(params.dt);
    let l = T::lit(params.wheelbase);
    Ok(DVector::from_vec(vec![v * (e_psi.sin() - e_psi) * dt, v / l * (delta.tan() - delta) * dt]))
}

/// The plant at zero curvature as an `(x, u) ↦ x⁺` oracle for training.
pub fn training_oracle<T: Real>(params: BicycleParams) -> impl Fn(&DVector<T>, &DVector<T>) -> DVector<T> {
    move |x: &DVector<T>, u: &DVector<T>| match plant_step(&params, x, u[0], T::zero()) {
        Ok(next) => next,
        Err(_) => DVector::from_element(2, T::lit(f64::NAN)),
    }
}

/// Training domain used for the benchmark.
pub fn default_domain<T: Real>() -> Domain<T> {
    Domain::new(
        DVector::from_vec(vec![T::lit(-6.0), T::lit(-0.8)]),
        DVector::from_vec(vec![T::lit(6.0), T::lit(0.8)]),
        DVector::from_vec(vec![T::lit(-0.6)]),
        DVector::from_vec(vec![T::lit(0.6)]),
    )
    .expect("static domain is well ordered")
}

/// `|e_y| ≤ e_y_max`, `|e_ψ| ≤ e_psi_max`, `|δ| ≤ delta_max` as six rows.
pub fn box_constraints<T: Real>(e_y_max: f64, e_psi_max: f64, delta_max: f64) -> Result<ConstraintSet<T>> {
    ConstraintSet::symmetric_box(&[T::lit(e_y_max), T::lit(e_psi_max)], &[T::lit(delta_max)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Duration `T_f` (s).
    pub duration: f64,
    /// Slalom period `T_s` (s).
    pub period: f64,
    /// Per-component bound of uniform process noise; zero disables it.
    pub noise_bound: f64,
    pub noise_seed: u64,
    pub initial_state: [f64; 2],
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { duration: 12.0, period: 3.0, noise_bound: 0.0, noise_seed: 11, initial_state: [0.0, 0.0] }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.period > 0.0) {
            return invalid("scenario duration and slalom period must be positive");
        }
        if !(self.noise_bound >= 0.0) || self.initial_state.iter().any(|v| !v.is_finite()) {
            return invalid("noise bound must be nonnegative and the initial state finite");
        }
        Ok(())
    }

    /// `⌈T_f / Δt⌉`.
    pub fn steps(&self, params: &BicycleParams) -> usize {
        (self.duration / params.dt - 1e-9).ceil() as usize
    }

    /// Largest `k` with `kΔt ≤ T_f`.
    fn last_index(&self, params: &BicycleParams) -> usize {
        (self.duration / params.dt + 1e-9).floor() as usize
    }
}

/// Growing-amplitude slalom `κ_k = 0.9 κ_max (kΔt/T_f) sin(2π kΔt/T_s)`.
pub fn reference_curvature(params: &BicycleParams, scenario: &ScenarioConfig, k: usize) -> Result<f64> {
    if k > scenario.last_index(params) {
        return Err(Error::Domain(format!("step {k} lies beyond the scenario duration {} s", scenario.duration)));
    }
    let t = k as f64 * params.dt;
    Ok(0.9 * params.kappa_max * (t / scenario.duration) * (2.0 * std::f64::consts::PI * t / scenario.period).sin())
}

/// Curvature preview; indices past the end hold the last value.
pub fn preview_curvature(params: &BicycleParams, scenario: &ScenarioConfig, k: usize) -> f64 {
    let k = k.min(scenario.last_index(params));
    reference_curvature(params, scenario, k).unwrap_or(0.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosedLoopTrace {
    pub label: String,
    pub records: Vec<TraceRecord>,
    /// Curvature applied at each step.
    pub curvature: Vec<f64>,
    /// Set when the run stopped early.
    pub aborted: Option<String>,
}

impl ClosedLoopTrace {
    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn e_y(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.x[0]).collect()
    }

    pub fn e_psi(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.x[1]).collect()
    }

    pub fn steering(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.u[0]).collect()
    }

    pub fn tube(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.s0).collect()
    }
}

/// Runs the plant in closed loop with `controller` for the scenario.
/// The controller's own offsets are overwritten with the curvature preview.
pub fn run_closed_loop<T: Real>(
    label: &str,
    controller: &mut TubeMpc<T>,
    params: &BicycleParams,
    scenario: &ScenarioConfig,
) -> Result<ClosedLoopTrace> {
    params.validate()?;
    scenario.validate()?;
    let horizon = controller.spec().horizon;
    let steps = scenario.steps(params);
    let mut noise_rng = ChaCha20Rng::seed_from_u64(scenario.noise_seed);
    let mut x = DVector::from_vec(vec![T::lit(scenario.initial_state[0]), T::lit(scenario.initial_state[1])]);
    let mut trace = ClosedLoopTrace { label: label.to_string(), records: Vec::with_capacity(steps), curvature: Vec::with_capacity(steps), aborted: None };
    controller.reset();
    for k in 0..steps {
        let offsets = (0..horizon)
            .map(|j| curvature_offset(params, T::lit(preview_curvature(params, scenario, k + j))))
            .collect();
        controller.set_offsets(offsets)?;
        let outcome = match controller.step(&x) {
            Ok(o) => o,
            Err(e) if k == 0 => return Err(e),
            Err(e) => {
                trace.aborted = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let kappa = preview_curvature(params, scenario, k);
        trace.curvature.push(kappa);
        trace.records.push(outcome.record);
        let mut next = plant_step(params, &x, outcome.input[0], T::lit(kappa))?;
        if scenario.noise_bound > 0.0 {
            for v in next.iter_mut() {
                *v += T::lit(noise_rng.random_range(-scenario.noise_bound..=scenario.noise_bound));
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            trace.aborted = Some(format!("step {k}: non-finite state {:?}", next.as_slice()));
            break;
        }
        x = next;
    }
    Ok(trace)
}

/// Summary of an RFF-vs-linear comparison. Ratios are RFF over linear.
/// Timings are left out of the serialized form so repeated runs write
/// identical files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub tube_ratio: f64,
    pub e_y_ratio: f64,
    pub e_psi_ratio: f64,
    pub mean_tube_rff: f64,
    pub mean_tube_lin: f64,
    pub mean_abs_e_y_rff: f64,
    pub mean_abs_e_y_lin: f64,
    pub mean_abs_e_psi_rff: f64,
    pub mean_abs_e_psi_lin: f64,
    pub violations_rff: usize,
    pub violations_lin: usize,
    pub non_optimal_rff: usize,
    pub non_optimal_lin: usize,
    pub fallbacks_rff: usize,
    pub fallbacks_lin: usize,
    #[serde(skip)]
    pub mean_solve_ms_rff: f64,
    #[serde(skip)]
    pub mean_solve_ms_lin: f64,
    #[serde(skip)]
    pub max_solve_ms_rff: f64,
    #[serde(skip)]
    pub max_solve_ms_lin: f64,
    pub d_max_ratio: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

/// Samples outside `|e_y| ≤ 1`, `|e_ψ| ≤ 0.2`, `|δ| ≤ 0.5`, counted per
/// bound.
pub fn count_violations(trace: &ClosedLoopTrace, limits: [f64; 3]) -> usize {
    trace
        .records
        .iter()
        .map(|r| [r.x[0].abs() > limits[0], r.x[1].abs() > limits[1], r.u[0].abs() > limits[2]].iter().filter(|b| **b).count())
        .sum()
}

pub const CONSTRAINT_LIMITS: [f64; 3] = [1.0, 0.2, 0.5];

pub fn compute_metrics(rff: &ClosedLoopTrace, lin: &ClosedLoopTrace, d_max_rff: f64, d_max_lin: f64) -> Result<Metrics> {
    if rff.records.len() != lin.records.len() {
        return invalid(format!("trace lengths differ: {} vs {}", rff.records.len(), lin.records.len()));
    }
    let abs_mean = |v: Vec<f64>| mean(&v.iter().map(|x| x.abs()).collect::<Vec<_>>());
    let solve = |t: &ClosedLoopTrace| t.records.iter().map(|r| r.solve_ms).collect::<Vec<_>>();
    let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    let non_optimal = |t: &ClosedLoopTrace| t.records.iter().filter(|r| r.status != SolveStatus::Optimal).count();
    let fallbacks = |t: &ClosedLoopTrace| t.records.iter().filter(|r| r.fallback).count();
    let (tr, tl) = (mean(&rff.tube()), mean(&lin.tube()));
    let (yr, yl) = (abs_mean(rff.e_y()), abs_mean(lin.e_y()));
    let (pr, pl) = (abs_mean(rff.e_psi()), abs_mean(lin.e_psi()));
    Ok(Metrics {
        tube_ratio: ratio(tr, tl),
        e_y_ratio: ratio(yr, yl),
        e_psi_ratio: ratio(pr, pl),
        mean_tube_rff: tr,
        mean_tube_lin: tl,
        mean_abs_e_y_rff: yr,
        mean_abs_e_y_lin: yl,
        mean_abs_e_psi_rff: pr,
        mean_abs_e_psi_lin: pl,
        violations_rff: count_violations(rff, CONSTRAINT_LIMITS),
        violations_lin: count_violations(lin, CONSTRAINT_LIMITS),
        non_optimal_rff: non_optimal(rff),
        non_optimal_lin: non_optimal(lin),
        fallbacks_rff: fallbacks(rff),
        fallbacks_lin: fallbacks(lin),
        mean_solve_ms_rff: mean(&solve(rff)),
        mean_solve_ms_lin: mean(&solve(lin)),
        max_solve_ms_rff: max(solve(rff)),
        max_solve_ms_lin: max(solve(lin)),
        d_max_ratio: ratio(d_max_rff, d_max_lin),
    })
}

impl Metrics {
    /// Plain-text table for the CLI.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let row = |s: &mut String, name: &str, r: String, l: String, ratio: String| {
            s.push_str(&format!("{name:<22} {r:>14} {l:>14} {ratio:>10}\n"));
        };
        row(&mut s, "metric", "rff".into(), "linear".into(), "ratio".into());
        row(&mut s, "mean tube size", format!("{:.4e}", self.mean_tube_rff), format!("{:.4e}", self.mean_tube_lin), format!("{:.4}", self.tube_ratio));
        row(&mut s, "mean |e_y|", format!("{:.4e}", self.mean_abs_e_y_rff), format!("{:.4e}", self.mean_abs_e_y_lin), format!("{:.4}", self.e_y_ratio));
        row(&mut s, "mean |e_psi|", format!("{:.4e}", self.mean_abs_e_psi_rff), format!("{:.4e}", self.mean_abs_e_psi_lin), format!("{:.4}", self.e_psi_ratio));
        row(&mut s, "violations", self.violations_rff.to_string(), self.violations_lin.to_string(), "-".into());
        row(&mut s, "non-optimal solves", self.non_optimal_rff.to_string(), self.non_optimal_lin.to_string(), "-".into());
        row(&mut s, "fallback steps", self.fallbacks_rff.to_string(), self.fallbacks_lin.to_string(), "-".into());
        row(&mut s, "mean solve (ms)", format!("{:.3}", self.mean_solve_ms_rff), format!("{:.3}", self.mean_solve_ms_lin), format!("{:.3}", ratio(self.mean_solve_ms_rff, self.mean_solve_ms_lin)));
        row(&mut s, "max solve (ms)", format!("{:.3}", self.max_solve_ms_rff), format!("{:.3}", self.max_solve_ms_lin), "-".into());
        row(&mut s, "d_max", "-".into(), "-".into(), format!("{:.4}", self.d_max_ratio));
        s
    }
}

fn write_rows(path: &Path, header: &str, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.10e}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Writes `bicycle_results.csv` and `bicycle_control.csv` into `dir`.
pub fn write_csvs(dir: &Path, rff: &ClosedLoopTrace, lin: &ClosedLoopTrace) -> Result<()> {
    let n = rff.records.len().min(lin.records.len());
    write_rows(
        &dir.join("bicycle_results.csv"),
        "t_rff,ey_rff,epsi_rff,tube_rff,t_lin,ey_lin,epsi_lin,tube_lin",
        (0..n).map(|i| {
            let (a, b) = (&rff.records[i], &lin.records[i]);
            vec![a.t, a.x[0], a.x[1], a.s0, b.t, b.x[0], b.x[1], b.s0]
        }),
    )?;
    write_rows(
        &dir.join("bicycle_control.csv"),
        "t_rff,delta_rff,t_lin,delta_lin",
        (0..n).map(|i| {
            let (a, b) = (&rff.records[i], &lin.records[i]);
            vec![a.t, a.u[0], b.t, b.u[0]]
        }),
    )
}
