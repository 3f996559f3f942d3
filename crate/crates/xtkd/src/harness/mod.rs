//! Experiment harness: config parsing, seeded multi-run execution, preset
//! experiments with built-in assertions, and the gradient / bound audits.

pub mod audits;
pub mod config;
pub mod presets;
pub mod runner;

pub use audits::{bound_audit, grad_audit, BoundAuditReport, GradAuditItem, GradAuditReport};
pub use config::{
    load_config, parse_config, Arch, DatasetParams, DistillSpec, ExperimentConfig, RunConfig,
    TeacherKind, TeacherSpec,
};
pub use presets::{preset_names, run_preset, AssertionResult, PresetOutcome};
pub use runner::{
    build_teacher, build_world, execute_run, run_experiment, ExperimentOptions,
    ExperimentOutcome, RunResult, SummaryRow, SummaryTable, World,
};
