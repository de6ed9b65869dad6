//! Experiment runner, comparison tables and verification suites.

mod checks;
mod config;
mod run;

pub use checks::{
    brute_force_allocation, descent_tally, flow_errors, global_budget_agreement,
    gradtrick_residuals, identity_gap, random_adapter, recovery_ranks, run_checks,
    stiffness_configs, toy_configs, CheckItem, CheckReport, DescentTally, Suite,
};
pub use config::{ExperimentConfig, Method, PolicyMode};
pub use run::{
    run_comparison, run_experiment, run_on, trajectory_header, write_run, Comparison, IterationLog,
    RunOutput, RunSummary,
};
