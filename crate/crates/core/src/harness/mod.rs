//! Configuration, instance generation and Monte Carlo experiments.

mod config;
mod experiment;
mod generator;

pub use config::{
    load_config, log_checkpoints, ChainSection, ConfigError, ExperimentConfig, ExperimentSection,
    FeasibleSection, ModelSection, ObjectiveKind, Overrides, PolicySpec, RawConfig, ScalarOrVec,
    StateSection, DEFAULT_CHECKPOINTS, OUT_DIR_ENV,
};
pub use experiment::{
    build_policy, curve_csv, regret_exponent, render_outputs, run_experiment, simulate_policies,
    summarize, trace_replication, update_csv, ExperimentError, ExperimentOutcome,
    ExperimentSummary, PolicyResult, PolicySummary,
};
pub use generator::{
    generate_states, random_orthogonal, random_symmetric, GeneratorError, GeneratorSpec,
};
