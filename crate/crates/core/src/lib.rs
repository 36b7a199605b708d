//! Template protection for fixed-length embeddings via subject-specific
//! polynomial transforms, plus the full evaluation battery: verification and
//! identification accuracy, numerical-solver inversion attacks (single
//! template and record multiplicity), and score-distribution linkability.
//!
//! Modules map one-to-one onto the pipeline stages:
//!
//! - [`embedding`]: dataset model, file formats, synthetic generation,
//!   subject-disjoint splitting
//! - [`transform`]: the protection transform itself
//! - [`params`]: secret-parameter generation policies and the params store
//! - [`metrics`]: cosine scoring, verification scenarios, identification,
//!   TMR@FMR / EER / TPIR
//! - [`attack`]: polynomial-system assembly and the damped least-squares
//!   inversion attack
//! - [`unlink`]: mated/non-mated cross-template scores and the global
//!   linkability measure

pub mod attack;
pub mod embedding;
pub mod metrics;
pub mod params;
pub mod template_io;
pub mod transform;
pub mod unlink;

pub use attack::{
    assemble_system, initial_guess, run_arm_attack, run_inversion_attack, solve_least_squares,
    AttackConfig, AttackError, AttackOutcome, AttackReport, GuessSource, PolySystem,
    SolveOutcome, SolverConfig,
};
pub use embedding::{
    generate_synthetic, load_embeddings, save_embeddings, split, Dataset, DatasetError,
    Embedding, FileFormat, SplitTag, SyntheticSpec,
};
pub use metrics::{
    compute_eer, compute_tmr_at_fmr, compute_tpir, cosine_similarity, identify,
    identify_baseline, score_verification, EerPoint, EvaluationReport, MetricError, Scenario,
    ScoreSet, TmrAtFmr,
};
pub use params::{
    assign_params, generate_naive, generate_strict, load_params_store, save_params_store,
    score_percentile, ParamError, ParamPolicy, ScoreRange, Selection,
};
pub use template_io::{load_protected_templates, save_protected_templates, TemplateIoError};
pub use transform::{
    integer_power, protect, protected_dim, PolyParams, ProtectedTemplate, TransformError,
};
pub use unlink::{
    baseline_link_scores, collect_link_scores, compare_policies, compute_d_sys,
    BandwidthPolicy, LinkabilityInput, LinkabilityResult, PolicyComparison, UnlinkError,
};
