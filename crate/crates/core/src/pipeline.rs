//! Train, synthesize and simulate stages wired from an [`ExperimentConfig`].

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bicycle::{self, BicycleParams, ClosedLoopTrace, Metrics};
use crate::config::ExperimentConfig;
use crate::control_synthesis::{dlqr, terminal_synthesis, ConstraintSet, SynthesisReport, TerminalOptions, TerminalSet, TubeDesign, TubeLaw};
use crate::controller::TubeMpc;
use crate::error::Result;
use crate::kernel_features::{median_heuristic, RffBasis};
use crate::ocp::{OcpSpec, SqpSettings};
use crate::residual_learning::{fit_ridge, fit_rmse, generate_dataset, quantify_error, ArtifactParts, Domain, HybridModel, ModelArtifact, ResidualModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub feature_count: usize,
    pub length_scale: f64,
    pub ridge: f64,
    pub fit_rmse: f64,
    pub d_max_rff: f64,
    pub d_max_linear: f64,
    pub d_max_ratio: f64,
    pub max_validation_error_rff: f64,
    pub max_validation_error_linear: f64,
}

pub fn domain(cfg: &ExperimentConfig) -> Result<Domain<f64>> {
    let d = &cfg.domain;
    Domain::new(
        DVector::from_vec(d.state_lower.clone()),
        DVector::from_vec(d.state_upper.clone()),
        DVector::from_vec(d.input_lower.clone()),
        DVector::from_vec(d.input_upper.clone()),
    )
}

/// Learns the residual of the bicycle plant and bounds both models.
pub fn train(cfg: &ExperimentConfig) -> Result<(ModelArtifact, TrainingReport)> {
    cfg.validate()?;
    let f = &cfg.features;
    let baseline = bicycle::linearize::<f64>(&cfg.plant)?;
    let dom = domain(cfg)?;
    let oracle = bicycle::training_oracle::<f64>(cfg.plant);
    let data = generate_dataset(&oracle, &baseline, &dom, f.training_count, cfg.seeds.training)?;
    let sigma = match cfg.length_scale()? {
        Some(s) => s,
        None => median_heuristic(&data.inputs, f.median_points)?,
    };
    let basis = RffBasis::sample(3, f.count, sigma, cfg.seeds.basis)?;
    let w = fit_ridge(&data, &basis, f.ridge)?;
    let rmse = fit_rmse(&basis, &w, &data)?;
    let bound = quantify_error(Some((&basis, &w)), &oracle, &baseline, &dom, f.validation_count, f.safety_factor, cfg.seeds.validation)?;
    let lin = quantify_error(None, &oracle, &baseline, &dom, f.validation_count, f.safety_factor, cfg.seeds.validation)?;
    let residual = ResidualModel::new(basis, w, f.ridge, &bound)?;
    let model = HybridModel::new(baseline, Some(residual))?;
    let artifact = ModelArtifact::build(ArtifactParts {
        model: &model,
        domain: &dom,
        max_validation_error: bound.max_error,
        d_max_linear: lin.d_max,
        training_seed: cfg.seeds.training,
        validation_seed: cfg.seeds.validation,
        training_count: f.training_count,
    })?;
    let report = TrainingReport {
        feature_count: f.count,
        length_scale: sigma,
        ridge: f.ridge,
        fit_rmse: rmse,
        d_max_rff: bound.d_max,
        d_max_linear: lin.d_max,
        d_max_ratio: bound.d_max / lin.d_max,
        max_validation_error_rff: bound.max_error,
        max_validation_error_linear: lin.max_error,
    };
    log::info!("trained D={} σ={sigma:.4} d_max rff={:.3e} linear={:.3e}", f.count, bound.d_max, lin.d_max);
    Ok((artifact, report))
}

/// Offline ingredients for one controller.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub tube: TubeDesign<f64>,
    pub terminal: TerminalSet<f64>,
    pub constraints: ConstraintSet<f64>,
    pub law: TubeLaw,
    pub report: SynthesisReport,
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(v))
}

/// Disturbance bound used by the tube: model bound plus the optional
/// process-noise box.
pub fn effective_d_max(cfg: &ExperimentConfig, model_bound: f64) -> f64 {
    model_bound + cfg.scenario.noise_bound * 2f64.sqrt()
}

pub fn constraints(cfg: &ExperimentConfig) -> Result<ConstraintSet<f64>> {
    bicycle::box_constraints(cfg.mpc.e_y_max, cfg.mpc.e_psi_max, cfg.mpc.delta_max)
}

pub fn synthesize(cfg: &ExperimentConfig, model: &HybridModel<f64>, model_bound: f64) -> Result<Synthesis> {
    let (a, b) = (&model.baseline.a, &model.baseline.b);
    let k = dlqr(a, b, &diag(&cfg.mpc.feedback_q), &diag(&cfg.mpc.feedback_r))?.gain;
    let cons = constraints(cfg)?;
    let tube = TubeDesign::synthesize(a, b, &k, effective_d_max(cfg, model_bound), &cons)?;
    let opts = TerminalOptions { q: diag(&cfg.mpc.q), r: diag(&cfg.mpc.r), gamma1_cap: None };
    let law = cfg.mpc.tube_law;
    let terminal = terminal_synthesis(a, b, &opts, &cons, &tube, law)?;
    let report = SynthesisReport::new(a, b, &tube, &terminal, law);
    Ok(Synthesis { tube, terminal, constraints: cons, law, report })
}

pub fn sqp_settings(cfg: &ExperimentConfig) -> SqpSettings {
    SqpSettings { max_iter: cfg.mpc.max_sqp_iterations, record_iterates: log::log_enabled!(log::Level::Debug), ..SqpSettings::default() }
}

pub fn controller(cfg: &ExperimentConfig, model: HybridModel<f64>, syn: &Synthesis) -> Result<TubeMpc<f64>> {
    let n = model.state_dim();
    let spec = OcpSpec {
        model,
        horizon: cfg.mpc.horizon,
        q: diag(&cfg.mpc.q),
        r: diag(&cfg.mpc.r),
        terminal_cost: syn.terminal.cost.clone(),
        constraints: syn.constraints.clone(),
        tube: syn.tube.clone(),
        terminal: syn.terminal.clone(),
        offsets: vec![DVector::zeros(n); cfg.mpc.horizon],
        law: syn.law,
    };
    TubeMpc::new(spec, sqp_settings(cfg), cfg.plant.dt)
}

/// Which model drives the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rff,
    Linear,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Rff => "rff",
            ModelKind::Linear => "linear",
        }
    }
}

/// Model and disturbance bound of the requested kind from an artifact.
pub fn load_model(artifact: &ModelArtifact, kind: ModelKind) -> Result<(HybridModel<f64>, f64)> {
    match kind {
        ModelKind::Rff => Ok((artifact.hybrid_model()?, artifact.d_max)),
        ModelKind::Linear => artifact.linear_model(),
    }
}

pub fn synthesize_kind(cfg: &ExperimentConfig, artifact: &ModelArtifact, kind: ModelKind) -> Result<Synthesis> {
    let (model, bound) = load_model(artifact, kind)?;
    synthesize(cfg, &model, bound)
}

pub fn simulate(cfg: &ExperimentConfig, artifact: &ModelArtifact, kind: ModelKind) -> Result<ClosedLoopTrace> {
    let (model, bound) = load_model(artifact, kind)?;
    let syn = synthesize(cfg, &model, bound)?;
    let mut mpc = controller(cfg, model, &syn)?;
    let start = Instant::now();
    let trace = bicycle::run_closed_loop(kind.label(), &mut mpc, &cfg.plant, &cfg.scenario)?;
    log::info!("{} run: {} steps in {:.2} s", kind.label(), trace.records.len(), start.elapsed().as_secs_f64());
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rff: ClosedLoopTrace,
    pub linear: ClosedLoopTrace,
    pub metrics: Metrics,
}

/// Runs both controllers one after the other so their solve times are
/// measured under the same load.
pub fn compare(cfg: &ExperimentConfig, artifact: &ModelArtifact) -> Result<Comparison> {
    let rff = simulate(cfg, artifact, ModelKind::Rff)?;
    let linear = simulate(cfg, artifact, ModelKind::Linear)?;
    let metrics = bicycle::compute_metrics(&rff, &linear, artifact.d_max, artifact.d_max_linear)?;
    Ok(Comparison { rff, linear, metrics })
}

/// Parameters echoed next to a comparison.
pub fn describe(cfg: &ExperimentConfig) -> String {
    let BicycleParams { speed, wheelbase, dt, kappa_max } = cfg.plant;
    format!(
        "tube law: {}\nplant: v={speed} L={wheelbase} dt={dt} kappa_max={kappa_max}\nhorizon: {}  features: {}\n",
        cfg.mpc.tube_law, cfg.mpc.horizon, cfg.features.count
    )
}
