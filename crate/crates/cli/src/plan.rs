//! Experiment plans: a flat key=value file format mirrored one-to-one by CLI
//! flags, full-plan validation that reports every violation, and the default
//! protocol configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use polyshield_core::Scenario;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        subjects: usize,
        dim: usize,
        noise: f64,
        seed: u64,
        #[serde(default = "default_shared")]
        shared: f64,
        #[serde(default = "default_identity_dims")]
        identity_dims: usize,
    },
    File { path: PathBuf, format: String },
}

fn default_shared() -> f64 {
    polyshield_core::embedding::DEFAULT_SHARED_COMPONENT
}

fn default_identity_dims() -> usize {
    polyshield_core::embedding::DEFAULT_IDENTITY_DIMS
}

/// Everything a full evaluation run needs; all randomness derives from the
/// seeds recorded here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub source: DataSource,
    pub split_fraction: f64,
    pub split_seed: u64,
    pub param_seed: u64,
    pub m: usize,
    pub coeff_min: i64,
    pub coeff_max: i64,
    pub overlaps: Vec<usize>,
    pub scenarios: Vec<Scenario>,
    pub fmr_levels: Vec<f64>,
    pub tpir_ranks: Vec<usize>,
    pub templates_per_subject: usize,
    pub omega: f64,
    pub strict_quantile: f64,
    pub unlink_overlaps: Vec<usize>,
    pub attack_enabled: bool,
    pub attack_fmr_levels: Vec<f64>,
    pub attack_overlaps: Vec<usize>,
    pub attack_max_targets: usize,
    pub arm_enabled: bool,
    pub arm_p_values: Vec<usize>,
    pub arm_overlaps: Vec<usize>,
    pub arm_max_targets: usize,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Parses the flat key=value plan format. Later assignments win, `#` starts
/// a comment, list values are comma-separated.
pub fn parse_plan_text(text: &str) -> Result<BTreeMap<String, String>, Diagnostic> {
    let mut kv = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Diagnostic {
            field: format!("line {}", idx + 1),
            message: format!("expected key=value, got `{line}`"),
        })?;
        kv.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(kv)
}

pub struct PlanBuilder {
    kv: BTreeMap<String, String>,
    diagnostics: Vec<Diagnostic>,
}

impl PlanBuilder {
    pub fn new(kv: BTreeMap<String, String>) -> Self {
        Self { kv, diagnostics: Vec::new() }
    }

    /// Applies `key=value` overrides on top of the file contents.
    pub fn with_overrides(mut self, overrides: &[(String, String)]) -> Self {
        for (k, v) in overrides {
            self.kv.insert(k.clone(), v.clone());
        }
        self
    }

    fn take<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T {
        match self.kv.remove(key) {
            None => default,
            Some(raw) => raw.parse().unwrap_or_else(|_| {
                self.diagnostics.push(Diagnostic {
                    field: key.to_string(),
                    message: format!("cannot parse `{raw}`"),
                });
                default
            }),
        }
    }

    fn take_list<T: std::str::FromStr>(&mut self, key: &str, default: Vec<T>) -> Vec<T> {
        match self.kv.remove(key) {
            None => default,
            Some(raw) => {
                let mut out = Vec::new();
                for tok in raw.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                    match tok.parse() {
                        Ok(v) => out.push(v),
                        Err(_) => self.diagnostics.push(Diagnostic {
                            field: key.to_string(),
                            message: format!("cannot parse list element `{tok}`"),
                        }),
                    }
                }
                out
            }
        }
    }

    fn missing(&mut self, key: &str) {
        self.diagnostics.push(Diagnostic {
            field: key.to_string(),
            message: "missing required field".to_string(),
        });
    }

    /// Builds the plan; any parse failure or missing required field becomes
    /// a diagnostic, and all diagnostics are reported together.
    pub fn build(mut self) -> Result<ExperimentPlan, Vec<Diagnostic>> {
        let source = match self.kv.remove("dataset").as_deref() {
            Some("synthetic") => {
                let subjects = match self.kv.remove("subjects") {
                    Some(raw) => raw.parse().unwrap_or_else(|_| {
                        self.diagnostics.push(Diagnostic {
                            field: "subjects".into(),
                            message: format!("cannot parse `{raw}`"),
                        });
                        0
                    }),
                    None => {
                        self.missing("subjects");
                        0
                    }
                };
                let dim = match self.kv.remove("dim") {
                    Some(raw) => raw.parse().unwrap_or_else(|_| {
                        self.diagnostics.push(Diagnostic {
                            field: "dim".into(),
                            message: format!("cannot parse `{raw}`"),
                        });
                        0
                    }),
                    None => {
                        self.missing("dim");
                        0
                    }
                };
                let noise = self.take("noise", 0.1f64);
                let seed = self.take("seed", 0u64);
                let shared = self.take("shared", default_shared());
                let identity_dims = self.take("identity_dims", default_identity_dims());
                Some(DataSource::Synthetic { subjects, dim, noise, seed, shared, identity_dims })
            }
            Some("file") => match self.kv.remove("embeddings") {
                Some(path) => Some(DataSource::File {
                    path: PathBuf::from(path),
                    format: self.take("embeddings_format", "text".to_string()),
                }),
                None => {
                    self.missing("embeddings");
                    None
                }
            },
            Some(other) => {
                self.diagnostics.push(Diagnostic {
                    field: "dataset".into(),
                    message: format!("unknown dataset kind `{other}` (expected synthetic or file)"),
                });
                None
            }
            None => {
                self.missing("dataset");
                None
            }
        };
        let out_dir = match self.kv.remove("out_dir") {
            Some(d) => Some(PathBuf::from(d)),
            None => {
                self.missing("out_dir");
                None
            }
        };

        let overlaps = self.take_list("overlaps", (0..=6).collect());
        let scenarios = {
            let raw = self.take_list::<String>(
                "scenarios",
                vec!["baseline".into(), "N".into(), "SCE".into()],
            );
            let mut out = Vec::new();
            for s in raw {
                match s.parse::<Scenario>() {
                    Ok(sc) => out.push(sc),
                    Err(msg) => self
                        .diagnostics
                        .push(Diagnostic { field: "scenarios".into(), message: msg }),
                }
            }
            out
        };
        let attack_overlaps_default = overlaps.clone();
        let arm_overlaps_default: Vec<usize> =
            overlaps.iter().copied().filter(|&o| o <= 4).collect();
        let plan = ExperimentPlan {
            source: source.unwrap_or(DataSource::Synthetic {
                subjects: 0,
                dim: 0,
                noise: 0.0,
                seed: 0,
                shared: default_shared(),
                identity_dims: default_identity_dims(),
            }),
            split_fraction: self.take("split_fraction", 0.5),
            split_seed: self.take("split_seed", 1),
            param_seed: self.take("param_seed", 2),
            m: self.take("m", 7),
            coeff_min: self.take("coeff_min", -100),
            coeff_max: self.take("coeff_max", 100),
            overlaps,
            scenarios,
            fmr_levels: self.take_list("fmr_levels", vec![0.01, 0.1]),
            tpir_ranks: self.take_list("tpir_ranks", vec![1, 3, 10]),
            templates_per_subject: self.take("templates_per_subject", 10),
            omega: self.take("omega", 1.0),
            strict_quantile: self.take("strict_quantile", 0.95),
            unlink_overlaps: self.take_list("unlink_overlaps", vec![0]),
            attack_enabled: self.take("attack_enabled", true),
            attack_fmr_levels: self.take_list("attack_fmr_levels", vec![1.0, 10.0]),
            attack_overlaps: self.take_list("attack_overlaps", attack_overlaps_default),
            attack_max_targets: self.take("attack_max_targets", 12),
            arm_enabled: self.take("arm_enabled", true),
            arm_p_values: self.take_list("arm_p_values", vec![1, 2, 3]),
            arm_overlaps: self.take_list("arm_overlaps", arm_overlaps_default),
            arm_max_targets: self.take("arm_max_targets", 8),
            out_dir: out_dir.unwrap_or_default(),
        };
        for key in self.kv.keys() {
            self.diagnostics.push(Diagnostic {
                field: key.clone(),
                message: "unknown plan key".to_string(),
            });
        }
        if self.diagnostics.is_empty() {
            Ok(plan)
        } else {
            Err(self.diagnostics)
        }
    }
}

/// Semantic validation; returns every violation, not just the first.
pub fn validate_plan(plan: &ExperimentPlan) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut push = |field: &str, message: String| {
        diags.push(Diagnostic { field: field.to_string(), message });
    };

    if plan.m < 5 {
        push(
            "m",
            format!(
                "window size m={} is below 5; degree-5 or higher window polynomials are required \
                 so no closed-form algebraic inverse exists",
                plan.m
            ),
        );
    }
    let non_zero = {
        let span = if plan.coeff_max >= plan.coeff_min {
            (plan.coeff_max - plan.coeff_min + 1) as usize
        } else {
            0
        };
        if plan.coeff_min <= 0 && plan.coeff_max >= 0 && span > 0 { span - 1 } else { span }
    };
    if non_zero < 2 * plan.m {
        push(
            "coeff_min/coeff_max",
            format!(
                "coefficient range [{}, {}] offers {non_zero} non-zero integers, need at least {}",
                plan.coeff_min,
                plan.coeff_max,
                2 * plan.m
            ),
        );
    }
    for (field, list) in [
        ("overlaps", &plan.overlaps),
        ("attack_overlaps", &plan.attack_overlaps),
        ("arm_overlaps", &plan.arm_overlaps),
        ("unlink_overlaps", &plan.unlink_overlaps),
    ] {
        if list.is_empty() {
            push(field, "must not be empty".to_string());
        }
        for &o in list {
            if plan.m > 0 && o > plan.m - 1 {
                push(field, format!("overlap {o} violates o <= m-1 = {}", plan.m - 1));
            }
        }
    }
    if plan.scenarios.is_empty() {
        push("scenarios", "must not be empty".to_string());
    }
    if !(plan.split_fraction > 0.0 && plan.split_fraction < 1.0) {
        push("split_fraction", format!("{} is outside (0, 1)", plan.split_fraction));
    }
    for &level in plan.fmr_levels.iter().chain(&plan.attack_fmr_levels) {
        if !(level > 0.0 && level <= 100.0) {
            push("fmr_levels", format!("FMR level {level} outside (0, 100]"));
        }
    }
    if plan.tpir_ranks.is_empty() || plan.tpir_ranks.iter().any(|&n| n == 0) {
        push("tpir_ranks", "ranks must be positive and non-empty".to_string());
    }
    if plan.templates_per_subject < 2 {
        push(
            "templates_per_subject",
            format!("{} is below the minimum of 2", plan.templates_per_subject),
        );
    }
    if !(plan.omega > 0.0 && plan.omega.is_finite()) {
        push("omega", format!("{} must be positive and finite", plan.omega));
    }
    if !(plan.strict_quantile > 0.0 && plan.strict_quantile <= 1.0) {
        push("strict_quantile", format!("{} outside (0, 1]", plan.strict_quantile));
    }
    if plan.arm_p_values.is_empty() || plan.arm_p_values.iter().any(|&p| p == 0) {
        push("arm_p_values", "record multiplicities must be positive".to_string());
    }
    match &plan.source {
        DataSource::Synthetic { subjects, dim, noise, shared, identity_dims, .. } => {
            if *subjects < 2 {
                push("subjects", format!("{subjects} subjects cannot support a dev/eval split"));
            }
            if *dim < plan.m {
                push("dim", format!("dim {dim} is below the window size m={}", plan.m));
            }
            if !(*noise >= 0.0) {
                push("noise", format!("{noise} must be non-negative"));
            }
            if !(*shared >= 0.0) {
                push("shared", format!("{shared} must be non-negative"));
            }
            if *identity_dims == 0 {
                push("identity_dims", "must be at least 1".to_string());
            }
            // Exponent-uniqueness capacity: subjects per side after the split.
            let capacity: u128 = (2..=plan.m as u128).product();
            let eval_subjects =
                subjects.saturating_sub((plan.split_fraction * *subjects as f64).round() as usize);
            if *subjects as u128 > capacity {
                push(
                    "subjects",
                    format!(
                        "{subjects} subjects exceed the {capacity} distinct exponent \
                         permutations available at m={}",
                        plan.m
                    ),
                );
            }
            for &n in &plan.tpir_ranks {
                if eval_subjects > 0 && n > eval_subjects {
                    push(
                        "tpir_ranks",
                        format!("rank {n} exceeds the evaluation gallery of {eval_subjects}"),
                    );
                }
            }
        }
        DataSource::File { path, format } => {
            if !path.exists() {
                push("embeddings", format!("file {} does not exist", path.display()));
            }
            if format != "text" && format != "binary" {
                push("embeddings_format", format!("unknown format `{format}`"));
            }
        }
    }
    if plan.out_dir.as_os_str().is_empty() {
        push("out_dir", "missing output directory".to_string());
    } else if let Err(e) = std::fs::create_dir_all(&plan.out_dir) {
        push("out_dir", format!("cannot create {}: {e}", plan.out_dir.display()));
    }
    diags
}
