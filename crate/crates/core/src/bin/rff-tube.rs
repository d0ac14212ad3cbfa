use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rff_tube_mpc::bicycle;
use rff_tube_mpc::config::{ExperimentConfig, SeedConfig};
use rff_tube_mpc::control_synthesis::TubeLaw;
use rff_tube_mpc::error::{Error, Result};
use rff_tube_mpc::pipeline::{self, ModelKind};
use rff_tube_mpc::residual_learning::ModelArtifact;

#[derive(Parser)]
#[command(name = "rff-tube", about = "Tube MPC with learned RFF residual dynamics on the bicycle benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment configuration; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for the basis, training and validation draws.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of random Fourier features.
    #[arg(long, global = true)]
    features: Option<usize>,
    #[arg(long = "tube-law", global = true, value_enum)]
    tube_law: Option<LawArg>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LawArg {
    Radius,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Rff,
    Linear,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the residual model and write model.json + training_report.json.
    Train,
    /// Synthesize tube and terminal ingredients for both models.
    Synthesize,
    /// Closed-loop run of one controller.
    Simulate {
        #[arg(long, value_enum, default_value = "rff")]
        controller: KindArg,
    },
    /// Run both controllers and write CSVs and metrics.
    Compare,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = SeedConfig::from_base(s);
    }
    if let Some(d) = cli.features {
        cfg.features.count = d;
    }
    if let Some(law) = cli.tube_law {
        cfg.mpc.tube_law = match law {
            LawArg::Radius => TubeLaw::Radius,
            LawArg::Paper => TubeLaw::Paper,
        };
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Artifact(format!("cannot write {}: {e}", path.display())))
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Artifact(e.to_string()))
}

fn read_artifact(dir: &Path) -> Result<ModelArtifact> {
    let path = dir.join("model.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Artifact(format!("cannot read {} ({e}); run `rff-tube train` first", path.display())))?;
    ModelArtifact::from_json(&text)
}

fn run(cli: &Cli) -> std::result::Result<(), (&'static str, Error)> {
    let cfg = load_config(cli).map_err(|e| ("config", e))?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| ("output", Error::Io(e)))?;
    match &cli.command {
        Command::Train => {
            let (artifact, report) = pipeline::train(&cfg).map_err(|e| ("train", e))?;
            let stage = |e| ("train", e);
            write(&out.join("model.json"), &artifact.to_json().map_err(stage)?).map_err(stage)?;
            write(&out.join("training_report.json"), &json(&report).map_err(stage)?).map_err(stage)?;
            println!(
                "D={} sigma={:.4} rmse={:.3e} d_max rff={:.4e} linear={:.4e} ratio={:.4}",
                report.feature_count, report.length_scale, report.fit_rmse, report.d_max_rff, report.d_max_linear, report.d_max_ratio
            );
        }
        Command::Synthesize => {
            let artifact = read_artifact(&out).map_err(|e| ("synthesize", e))?;
            for kind in [ModelKind::Rff, ModelKind::Linear] {
                let syn = pipeline::synthesize_kind(&cfg, &artifact, kind).map_err(|e| ("synthesize", e))?;
                let path = out.join(format!("synthesis_{}.json", kind.label()));
                write(&path, &syn.report.to_json().map_err(|e| ("synthesize", e))?).map_err(|e| ("synthesize", e))?;
                let r = &syn.report;
                println!(
                    "{}: law={} rho={:.6} xi={:.4} s_inf={:.4e} gamma1={:.4e} gamma2={:.4e}",
                    kind.label(),
                    r.tube_law,
                    r.contraction,
                    r.disturbance_gain,
                    r.s_inf,
                    r.gamma1,
                    r.gamma2
                );
            }
        }
        Command::Simulate { controller } => {
            let kind = match controller {
                KindArg::Rff => ModelKind::Rff,
                KindArg::Linear => ModelKind::Linear,
            };
            let artifact = read_artifact(&out).map_err(|e| ("simulate", e))?;
            let trace = pipeline::simulate(&cfg, &artifact, kind).map_err(|e| ("simulate", e))?;
            let path = out.join(format!("trace_{}.csv", kind.label()));
            let mut text = String::from("t,ey,epsi,delta,tube,status\n");
            for r in &trace.records {
                text.push_str(&format!("{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{}\n", r.t, r.x[0], r.x[1], r.u[0], r.s0, r.status));
            }
            write(&path, &text).map_err(|e| ("simulate", e))?;
            if let Some(reason) = &trace.aborted {
                return Err(("simulate", Error::Simulation { step: trace.records.len(), reason: reason.clone() }));
            }
            println!("{}: {} steps, {} violations", kind.label(), trace.records.len(), bicycle::count_violations(&trace, bicycle::CONSTRAINT_LIMITS));
        }
        Command::Compare => {
            let artifact = read_artifact(&out).map_err(|e| ("compare", e))?;
            let cmp = pipeline::compare(&cfg, &artifact).map_err(|e| ("compare", e))?;
            bicycle::write_csvs(&out, &cmp.rff, &cmp.linear).map_err(|e| ("compare", e))?;
            write(&out.join("metrics.json"), &json(&cmp.metrics).map_err(|e| ("compare", e))?).map_err(|e| ("compare", e))?;
            print!("{}", pipeline::describe(&cfg));
            print!("{}", cmp.metrics.table());
            for t in [&cmp.rff, &cmp.linear] {
                if let Some(reason) = &t.aborted {
                    return Err(("compare", Error::Simulation { step: t.records.len(), reason: reason.clone() }));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            eprintln!("error in {stage}: {e}");
            ExitCode::FAILURE
        }
    }
}
