//! Plan execution: wires datasets, parameter policies and the evaluation
//! stages together, emits the report bundle, and records everything needed
//! for a byte-identical rerun in the manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{anyhow, Context};
use polyshield_core::{
    assign_params, baseline_link_scores, collect_link_scores, compute_d_sys, compute_eer,
    compute_tmr_at_fmr, compute_tpir, generate_naive, generate_synthetic, identify,
    identify_baseline, load_embeddings, protect, run_arm_attack, run_inversion_attack,
    score_percentile, score_verification, split, AttackConfig, BandwidthPolicy, Dataset,
    FileFormat, GuessSource, LinkabilityResult, ParamPolicy, PolyParams, Scenario, ScoreRange,
    Selection, SolverConfig, SyntheticSpec,
};
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::Serialize;
use thiserror::Error;

use crate::manifest::{derive_seed, Manifest};
use crate::plan::{validate_plan, DataSource, Diagnostic, ExperimentPlan};
use crate::report::{
    write_attack_csv, write_identify_csv, write_verify_csv, AttackRow, IdentifyRow, VerifyRow,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("plan validation failed with {} diagnostic(s)", .0.len())]
    Validation(Vec<Diagnostic>),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: anyhow::Error,
    },
}

pub const VERIFY_CSV: &str = "verify.csv";
pub const IDENTIFY_CSV: &str = "identify.csv";
pub const ATTACK_CSV: &str = "attack.csv";
pub const UNLINK_JSON: &str = "unlink.json";

#[derive(Debug, Serialize)]
struct UnlinkOverlapReport {
    o: usize,
    naive: LinkabilityResult,
    strict: LinkabilityResult,
    strict_score_max: f64,
}

#[derive(Debug, Serialize)]
struct UnlinkReport {
    omega: f64,
    templates_per_subject: usize,
    baseline: LinkabilityResult,
    per_overlap: Vec<UnlinkOverlapReport>,
}

pub fn load_dataset(source: &DataSource) -> anyhow::Result<Dataset> {
    match source {
        DataSource::Synthetic { subjects, dim, noise, seed, shared, identity_dims } => {
            Ok(generate_synthetic(&SyntheticSpec {
                n_subjects: *subjects,
                dim: *dim,
                intra_class_noise: *noise,
                seed: *seed,
                shared_component: *shared,
                identity_dims: *identity_dims,
            })?)
        }
        DataSource::File { path, format } => {
            let format = parse_format(format)?;
            Ok(load_embeddings(path, format)?)
        }
    }
}

pub fn parse_format(format: &str) -> anyhow::Result<FileFormat> {
    match format {
        "text" => Ok(FileFormat::Text),
        "binary" => Ok(FileFormat::Binary),
        other => Err(anyhow!("unknown embeddings format `{other}`")),
    }
}

/// Keep the first `max` subjects (sorted order); 0 keeps everything.
pub fn cap_subjects(ds: &Dataset, max: usize) -> Dataset {
    let subjects = ds.subjects();
    if max == 0 || subjects.len() <= max {
        return ds.clone();
    }
    let keep: BTreeSet<&str> = subjects.into_iter().take(max).collect();
    let embeddings = ds
        .embeddings()
        .iter()
        .filter(|e| keep.contains(e.subject_id.as_str()))
        .cloned()
        .collect();
    Dataset::new(embeddings, ds.split_tag()).expect("subset of a valid dataset is valid")
}

fn enrol_policy(plan: &ExperimentPlan, overlap: usize, tag: &str) -> ParamPolicy {
    ParamPolicy {
        m: plan.m,
        overlap,
        coeff_lo: plan.coeff_min,
        coeff_hi: plan.coeff_max,
        seed: derive_seed(plan.param_seed, &format!("{tag}-o{overlap}")),
        ..ParamPolicy::default()
    }
}

pub fn fmr_label(level: f64) -> String {
    format!("fmr{level}")
}

/// Baseline verification thresholds at the requested FMR levels, estimated
/// on the development set (the attacker's knowledge).
pub fn baseline_thresholds(dev: &Dataset, levels: &[f64]) -> anyhow::Result<Vec<(String, f64)>> {
    let scores = score_verification(dev, &BTreeMap::new(), Scenario::Baseline)?;
    let points = compute_tmr_at_fmr(&scores, levels)?;
    Ok(points
        .iter()
        .map(|p| (fmr_label(p.fmr_percent), p.threshold))
        .collect())
}

/// Strict-selection score cap: cross-template scores must sit at or below
/// this quantile of the protected system's non-mated scores on the dev set.
pub fn strict_score_cap(
    dev: &Dataset,
    policy: &ParamPolicy,
    templates_per_subject: usize,
    quantile: f64,
) -> anyhow::Result<f64> {
    let input = collect_link_scores(dev, policy, templates_per_subject)?;
    score_percentile(&input.non_mated, quantile)
        .ok_or_else(|| anyhow!("no non-mated scores to calibrate the strict range"))
}

struct StageRunner {
    manifest: Manifest,
}

impl StageRunner {
    fn run<T>(
        &mut self,
        name: &str,
        f: impl FnOnce() -> anyhow::Result<T>,
    ) -> Result<T, PipelineError> {
        match f() {
            Ok(v) => {
                self.manifest.record_stage(name, "ok");
                Ok(v)
            }
            Err(source) => {
                self.manifest.record_stage(name, "failed");
                self.manifest.complete = false;
                let _ = self.manifest.save(&self.manifest.plan.out_dir);
                Err(PipelineError::Stage { stage: name.to_string(), source })
            }
        }
    }
}

/// Runs every stage of the plan and writes verify.csv, identify.csv,
/// attack.csv, unlink.json and manifest.json into the plan's output
/// directory.
pub fn run_plan(plan: &ExperimentPlan) -> Result<Manifest, PipelineError> {
    let diags = validate_plan(plan);
    if !diags.is_empty() {
        return Err(PipelineError::Validation(diags));
    }
    let out_dir = plan.out_dir.clone();
    let mut runner = StageRunner { manifest: Manifest::new(plan.clone()) };

    let dataset = runner.run("dataset", || load_dataset(&plan.source))?;
    let (dev, eval) = runner.run("split", || {
        Ok(split(&dataset, plan.split_fraction, plan.split_seed)?)
    })?;

    // Enrolled parameter stores per overlap, shared by every stage.
    let eval_stores = runner.run("enrol", || {
        let mut stores = BTreeMap::new();
        for &o in plan
            .overlaps
            .iter()
            .chain(&plan.attack_overlaps)
            .chain(&plan.unlink_overlaps)
        {
            if let std::collections::btree_map::Entry::Vacant(slot) = stores.entry(o) {
                let policy = enrol_policy(plan, o, "enrol-eval");
                slot.insert(assign_params(&eval, &policy)?);
            }
        }
        Ok(stores)
    })?;

    runner.run("verify", || run_verify_stage(plan, &eval, &eval_stores, &out_dir))?;
    runner.run("identify", || run_identify_stage(plan, &eval, &eval_stores, &out_dir))?;
    if plan.attack_enabled || plan.arm_enabled {
        runner.run("attack", || run_attack_stage(plan, &dev, &eval, &eval_stores, &out_dir))?;
    }
    runner.run("unlink", || run_unlink_stage(plan, &dev, &eval, &out_dir))?;

    let mut manifest = runner.manifest;
    for name in [VERIFY_CSV, IDENTIFY_CSV, ATTACK_CSV, UNLINK_JSON] {
        if out_dir.join(name).exists() {
            manifest
                .record_report(&out_dir, name)
                .with_context(|| format!("hashing {name}"))
                .map_err(|source| PipelineError::Stage { stage: "manifest".into(), source })?;
        }
    }
    manifest.record_stage("manifest", "ok");
    manifest.complete = true;
    manifest
        .save(&out_dir)
        .map_err(|e| PipelineError::Stage { stage: "manifest".into(), source: e.into() })?;
    Ok(manifest)
}

fn run_verify_stage(
    plan: &ExperimentPlan,
    eval: &Dataset,
    stores: &BTreeMap<usize, BTreeMap<String, PolyParams>>,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for &scenario in &plan.scenarios {
        match scenario {
            Scenario::Baseline => {
                let scores = score_verification(eval, &BTreeMap::new(), scenario)?;
                rows.push(VerifyRow {
                    scenario: scenario.to_string(),
                    overlap: None,
                    tmr: compute_tmr_at_fmr(&scores, &plan.fmr_levels)?,
                    eer: compute_eer(&scores)?,
                });
            }
            Scenario::Normal | Scenario::StolenParams => {
                for &o in &plan.overlaps {
                    let scores = score_verification(eval, &stores[&o], scenario)?;
                    rows.push(VerifyRow {
                        scenario: scenario.to_string(),
                        overlap: Some(o),
                        tmr: compute_tmr_at_fmr(&scores, &plan.fmr_levels)?,
                        eer: compute_eer(&scores)?,
                    });
                }
            }
        }
    }
    write_verify_csv(&out_dir.join(VERIFY_CSV), &plan.fmr_levels, &rows)
}

/// Protected gallery and fan-out rankings for every query of the eval set.
pub fn protected_rankings(
    eval: &Dataset,
    store: &BTreeMap<String, PolyParams>,
) -> anyhow::Result<Vec<(String, Vec<(String, f64)>)>> {
    let by_subject = eval.by_subject();
    let mut gallery = Vec::with_capacity(by_subject.len());
    for (subject, samples) in &by_subject {
        let params = store
            .get(*subject)
            .ok_or_else(|| anyhow!("no parameters for subject {subject}"))?;
        gallery.push((subject.to_string(), protect(&samples[0].values, params)?));
    }
    let mut rankings = Vec::with_capacity(by_subject.len());
    for (subject, samples) in &by_subject {
        let ranked = identify(&samples[1].values, &gallery, store)?;
        rankings.push((subject.to_string(), ranked));
    }
    Ok(rankings)
}

pub fn baseline_rankings(eval: &Dataset) -> anyhow::Result<Vec<(String, Vec<(String, f64)>)>> {
    let by_subject = eval.by_subject();
    let gallery: Vec<(String, Vec<f64>)> = by_subject
        .iter()
        .map(|(s, samples)| (s.to_string(), samples[0].values.clone()))
        .collect();
    let mut rankings = Vec::with_capacity(by_subject.len());
    for (subject, samples) in &by_subject {
        let ranked = identify_baseline(&samples[1].values, &gallery)?;
        rankings.push((subject.to_string(), ranked));
    }
    Ok(rankings)
}

fn run_identify_stage(
    plan: &ExperimentPlan,
    eval: &Dataset,
    stores: &BTreeMap<usize, BTreeMap<String, PolyParams>>,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    let tpir_vec = |tpir: BTreeMap<usize, f64>| -> Vec<(usize, f64)> {
        plan.tpir_ranks.iter().map(|&n| (n, tpir[&n])).collect()
    };
    let rankings = baseline_rankings(eval)?;
    rows.push(IdentifyRow {
        scenario: "baseline".to_string(),
        overlap: None,
        tpir: tpir_vec(compute_tpir(&rankings, &plan.tpir_ranks)?),
    });
    for &o in &plan.overlaps {
        let rankings = protected_rankings(eval, &stores[&o])?;
        rows.push(IdentifyRow {
            scenario: "protected".to_string(),
            overlap: Some(o),
            tpir: tpir_vec(compute_tpir(&rankings, &plan.tpir_ranks)?),
        });
    }
    write_identify_csv(&out_dir.join(IDENTIFY_CSV), &plan.tpir_ranks, &rows)
}

fn run_attack_stage(
    plan: &ExperimentPlan,
    dev: &Dataset,
    eval: &Dataset,
    stores: &BTreeMap<usize, BTreeMap<String, PolyParams>>,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let thresholds = baseline_thresholds(dev, &plan.attack_fmr_levels)?;
    let labels: Vec<String> = thresholds.iter().map(|(l, _)| l.clone()).collect();
    let mut rows = Vec::new();
    if plan.attack_enabled {
        let targets = cap_subjects(eval, plan.attack_max_targets);
        for &o in &plan.attack_overlaps {
            let config = AttackConfig {
                guess: GuessSource::DevMean,
                solver: SolverConfig::default(),
                match_thresholds: thresholds.clone(),
                arm_p: 1,
            };
            let report = run_inversion_attack(&targets, &stores[&o], dev, &config)?;
            rows.push(AttackRow { mode: "single".to_string(), overlap: o, p: 1, report });
        }
    }
    if plan.arm_enabled {
        let targets = cap_subjects(eval, plan.arm_max_targets);
        for &o in &plan.arm_overlaps {
            let policy = enrol_policy(plan, o, "arm-base");
            let config = AttackConfig {
                guess: GuessSource::DevMean,
                solver: SolverConfig::default(),
                match_thresholds: thresholds.clone(),
                arm_p: *plan.arm_p_values.iter().max().unwrap_or(&1),
            };
            let param_seed = plan.param_seed;
            let factory = |subject: &str, j: usize| -> PolyParams {
                let seed = derive_seed(param_seed, &format!("arm-o{o}-{subject}-{j}"));
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                generate_naive(&policy, format!("{subject}#arm{j}"), &mut rng)
                    .expect("policy was validated with the plan")
            };
            let reports = run_arm_attack(&targets, dev, &config, &plan.arm_p_values, factory)?;
            for (p, report) in reports {
                rows.push(AttackRow { mode: "arm".to_string(), overlap: o, p, report });
            }
        }
    }
    write_attack_csv(&out_dir.join(ATTACK_CSV), &labels, &rows)
}

fn run_unlink_stage(
    plan: &ExperimentPlan,
    dev: &Dataset,
    eval: &Dataset,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let baseline =
        compute_d_sys(&baseline_link_scores(eval)?, BandwidthPolicy::Silverman, plan.omega)?;
    let mut per_overlap = Vec::new();
    for &o in &plan.unlink_overlaps {
        let naive_policy = ParamPolicy {
            seed: derive_seed(plan.param_seed, &format!("unlink-naive-o{o}")),
            ..enrol_policy(plan, o, "unlink-naive")
        };
        let cap = strict_score_cap(
            dev,
            &ParamPolicy {
                seed: derive_seed(plan.param_seed, &format!("unlink-cal-o{o}")),
                ..naive_policy.clone()
            },
            plan.templates_per_subject,
            plan.strict_quantile,
        )?;
        let strict_policy = ParamPolicy {
            selection: Selection::Strict,
            strict_score_range: ScoreRange { lo: -1.0, hi: cap },
            seed: derive_seed(plan.param_seed, &format!("unlink-strict-o{o}")),
            ..naive_policy.clone()
        };
        let naive_scores = collect_link_scores(eval, &naive_policy, plan.templates_per_subject)?;
        let naive = compute_d_sys(&naive_scores, BandwidthPolicy::Silverman, plan.omega)?;
        let strict_scores =
            collect_link_scores(eval, &strict_policy, plan.templates_per_subject)?;
        let strict = compute_d_sys(&strict_scores, BandwidthPolicy::Silverman, plan.omega)?;
        per_overlap.push(UnlinkOverlapReport { o, naive, strict, strict_score_max: cap });
    }
    let report = UnlinkReport {
        omega: plan.omega,
        templates_per_subject: plan.templates_per_subject,
        baseline,
        per_overlap,
    };
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(out_dir.join(UNLINK_JSON), json)?;
    Ok(())
}
