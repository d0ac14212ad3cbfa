use rff_tube_mpc::bicycle::{self, CONSTRAINT_LIMITS};
use nalgebra::DVector;
use rff_tube_mpc::config::ExperimentConfig;
use rff_tube_mpc::ocp::SolveStatus;
use rff_tube_mpc::pipeline::{self, ModelKind};
use rff_tube_mpc::residual_learning::ModelArtifact;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.features.count = 80;
    cfg.features.training_count = 3000;
    cfg.features.validation_count = 1000;
    cfg.scenario.duration = 2.0;
    cfg
}

#[test]
fn train_synthesize_simulate() {
    let cfg = small();
    let (artifact, report) = pipeline::train(&cfg).unwrap();
    assert_eq!(report.feature_count, 80);
    assert!(report.d_max_rff < report.d_max_linear);
    assert!(report.d_max_ratio > 0.0 && report.d_max_ratio < 1.0);

    // the artifact survives a JSON round trip bit for bit
    let again = ModelArtifact::from_json(&artifact.to_json().unwrap()).unwrap();
    assert_eq!(again.to_json().unwrap(), artifact.to_json().unwrap());

    let rff = pipeline::synthesize_kind(&cfg, &artifact, ModelKind::Rff).unwrap();
    let lin = pipeline::synthesize_kind(&cfg, &artifact, ModelKind::Linear).unwrap();
    assert_eq!(rff.tube.gain, lin.tube.gain);
    assert!(rff.tube.s_inf < lin.tube.s_inf);

    let cmp = pipeline::compare(&cfg, &again).unwrap();
    for trace in [&cmp.rff, &cmp.linear] {
        assert!(trace.aborted.is_none());
        assert_eq!(trace.records.len(), cfg.scenario.steps(&cfg.plant));
        assert_eq!(bicycle::count_violations(trace, CONSTRAINT_LIMITS), 0);
        assert!(trace.records.iter().all(|r| !r.fallback));
        // recursive feasibility after the first step
        assert!(trace.records[1..].iter().all(|r| r.status != SolveStatus::Infeasible));
        // every visited (x, u) lies where the model was validated
        let dom = again.domain::<f64>().unwrap();
        for r in &trace.records {
            assert!(dom.contains(&DVector::from_vec(r.x.clone()), &DVector::from_vec(r.u.clone())));
        }
    }
    assert!(cmp.metrics.tube_ratio < 1.0);
}

#[test]
fn synthesis_fails_cleanly_when_the_tube_cannot_fit() {
    let mut cfg = small();
    cfg.mpc.e_psi_max = 0.001;
    let (artifact, _) = pipeline::train(&cfg).unwrap();
    assert!(pipeline::synthesize_kind(&cfg, &artifact, ModelKind::Linear).is_err());
}
