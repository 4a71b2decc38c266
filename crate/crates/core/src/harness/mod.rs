//! Experiment harness: configuration, the staged pipeline, and reporting.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{
    EvaluationConfig, ExperimentConfig, InitialStateSpec, LearningConfig, PopulationSpec,
    SimulationConfig,
};
pub use pipeline::{Pipeline, PipelineOutcome, Stage, StageFailure, StageResult};
pub use report::{
    compare_to_ground_truth, emit_finite_population_comparison, emit_mean_field_comparison,
    EvaluationReport,
};
