//! Causal optimal transport toolkit: entropic and exact transport between
//! discrete path measures, learned causal costs, kernel smoothing of empirical
//! measures and an adversarial conditional sequence trainer.

pub mod autodiff;
pub mod causal;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod lp;
pub mod nets;
pub mod path;
pub mod plan;
pub mod sinkhorn;
pub mod smoothing;
pub mod training;

pub use causal::{
    adapted_wasserstein, causal_cost, causality_residual, exact_causal_ot, exact_ot_lp, martingale_penalty,
    CausalCost, CausalTestFunctions, ExactOTResult, SolverStatus,
};
pub use config::{ConfigSource, RunConfig};
pub use datasets::{generate_dataset, DatasetKind, DatasetSpec};
pub use error::{Error, Result};
pub use eval::{evaluate_predictor, ConditionalSampler, EvalConfig, EvalReport};
pub use experiment::{convergence_experiment, ConvergenceConfig, EstimatorMode, ExperimentReport};
pub use nets::{CausalSummaryNet, EncoderDecoderGenerator, GeneratorShape, ModelBundle};
pub use path::{CostId, CostMatrix, DiscretePathMeasure, Path, PathBatch};
pub use plan::TransportPlan;
pub use sinkhorn::{sinkhorn_divergence, sinkhorn_solve, DivergenceMode, SinkhornConfig, SquaredEuclidean};
pub use smoothing::{BandwidthSchedule, Kernel, SmoothingMode, SmoothingSpec};
pub use training::{kccot_objective, train, train_step, OptimizerKind, StepMetrics, TrainConfig, TrainState};
