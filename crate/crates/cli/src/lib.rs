//! Library surface behind the `polyshield` binary: plan parsing and
//! validation, the plan-execution pipeline, report writers, and the run
//! manifest. Kept as a library so integration tests can drive full runs
//! in-process.

pub mod manifest;
pub mod pipeline;
pub mod plan;
pub mod report;

pub use manifest::{derive_seed, sha256_file, Manifest};
pub use pipeline::{run_plan, PipelineError};
pub use plan::{parse_plan_text, validate_plan, DataSource, Diagnostic, ExperimentPlan, PlanBuilder};
