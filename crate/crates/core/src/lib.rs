pub mod bicycle;
pub mod control_synthesis;
pub mod config;
pub mod controller;
pub mod error;
pub mod kernel_features;
pub mod linalg;
pub mod ocp;
pub mod pipeline;
pub mod qp;
pub mod residual_learning;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

// Double precision is what the CLI and the benchmark run on.
pub type RffBasisF64 = kernel_features::RffBasis<f64>;
pub type HybridModelF64 = residual_learning::HybridModel<f64>;
pub type ResidualModelF64 = residual_learning::ResidualModel<f64>;
pub type TubeDesignF64 = control_synthesis::TubeDesign<f64>;
pub type TerminalSetF64 = control_synthesis::TerminalSet<f64>;
pub type ConstraintSetF64 = control_synthesis::ConstraintSet<f64>;
pub type OcpSpecF64 = ocp::OcpSpec<f64>;
pub type OcpSolutionF64 = ocp::OcpSolution<f64>;
pub type TubeMpcF64 = controller::TubeMpc<f64>;
