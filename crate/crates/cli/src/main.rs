use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polyshield_core::{
    assign_params, baseline_link_scores, collect_link_scores, compute_d_sys, compute_eer,
    compute_tmr_at_fmr, compute_tpir, generate_synthetic, load_params_store, protect,
    run_arm_attack, run_inversion_attack, save_embeddings, save_params_store,
    save_protected_templates, score_percentile, score_verification, split, AttackConfig,
    AttackOutcome, BandwidthPolicy, Dataset, EvaluationReport, GuessSource,
    ParamPolicy, PolyParams, ProtectedTemplate, Scenario, ScoreRange, Selection, SolverConfig,
    SyntheticSpec,
};
use polyshield::manifest::derive_seed;
use polyshield::pipeline::{
    baseline_rankings, baseline_thresholds, cap_subjects, parse_format,
    protected_rankings, run_plan, PipelineError,
};
use polyshield::plan::{parse_plan_text, validate_plan, Diagnostic, PlanBuilder};
use polyshield::Manifest;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Parser)]
#[command(
    name = "polyshield",
    version,
    about = "Polynomial template protection for fixed-length embeddings, with verification, \
             identification, inversion-attack and linkability evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic embedding dataset
    GenSynthetic {
        #[arg(long)]
        subjects: usize,
        #[arg(long)]
        dim: usize,
        /// Standard deviation of the per-sample perturbation
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Weight of the direction shared by all identity centers
        #[arg(long, default_value_t = polyshield_core::embedding::DEFAULT_SHARED_COMPONENT)]
        shared_component: f64,
        /// Rank of the identity subspace the centers are drawn from
        #[arg(long, default_value_t = polyshield_core::embedding::DEFAULT_IDENTITY_DIMS)]
        identity_dims: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "text")]
        format: String,
    },
    /// Protect one sample per subject under subject-specific parameters
    Protect {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value = "text")]
        format: String,
        /// Existing params store; omitted, one is generated
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        m: usize,
        #[arg(long)]
        overlap: Option<usize>,
        #[arg(long, default_value_t = 2)]
        param_seed: u64,
        /// Which sample of each subject to protect (sorted by sample id)
        #[arg(long, default_value_t = 0)]
        sample_index: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write the generated params store here (secret material)
        #[arg(long)]
        save_params: Option<PathBuf>,
    },
    /// Verification evaluation for one scenario
    EvalVerify {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value = "text")]
        format: String,
        #[arg(long)]
        params: Option<PathBuf>,
        /// baseline, N or SCE
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        overlap: Option<usize>,
        #[arg(long, default_value_t = 7)]
        m: usize,
        #[arg(long, default_value_t = 2)]
        param_seed: u64,
        /// Comma-separated FMR levels in percent
        #[arg(long, default_value = "0.01,0.1")]
        fmr: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Closed-set identification evaluation
    EvalIdentify {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value = "text")]
        format: String,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Comma-separated ranks
        #[arg(long, default_value = "1,3,10")]
        ranks: String,
        #[arg(long)]
        overlap: Option<usize>,
        #[arg(long, default_value_t = 7)]
        m: usize,
        #[arg(long, default_value_t = 2)]
        param_seed: u64,
        /// Evaluate the unprotected baseline instead of the protected system
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Reconstruction attack against protected templates
    Attack {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value = "text")]
        format: String,
        /// single or arm
        #[arg(long, default_value = "single")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        overlap: usize,
        /// Templates combined per target in arm mode
        #[arg(long, default_value_t = 2)]
        arm_p: usize,
        /// Comma-separated threshold labels like fmr1,fmr10
        #[arg(long, default_value = "fmr1,fmr10")]
        thresholds: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        #[arg(long, default_value_t = 1)]
        split_seed: u64,
        #[arg(long, default_value_t = 2)]
        param_seed: u64,
        #[arg(long, default_value_t = 7)]
        m: usize,
        /// 0 attacks every evaluation subject
        #[arg(long, default_value_t = 0)]
        max_targets: usize,
        /// mean, median or random
        #[arg(long, default_value = "mean")]
        guess: String,
    },
    /// Linkability of multiply-protected templates
    Unlink {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value = "text")]
        format: String,
        #[arg(long, default_value_t = 10)]
        templates_per_subject: usize,
        /// naive or strict
        #[arg(long, default_value = "naive")]
        policy: String,
        #[arg(long, default_value_t = 1.0)]
        omega: f64,
        #[arg(long, default_value_t = 0)]
        overlap: usize,
        #[arg(long, default_value_t = 7)]
        m: usize,
        #[arg(long, default_value_t = 2)]
        seed: u64,
        #[arg(long, default_value_t = 0.95)]
        strict_quantile: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute a full experiment plan and write the report bundle
    RunPlan {
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Rerun the plan recorded in an existing manifest
        #[arg(long)]
        from_manifest: Option<PathBuf>,
        /// Override the plan's output directory
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override any plan key, repeatable: --set key=value
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Check a plan and report every violation
    Validate {
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

enum CliError {
    Validation(String),
    Diagnostics(Vec<Diagnostic>),
    Stage(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Stage(e)
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("POLYSHIELD_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("validation error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Diagnostics(diags)) => {
            for d in &diags {
                eprintln!("validation error: {d}");
            }
            ExitCode::from(2)
        }
        Err(CliError::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn check_min_window(m: usize) -> Result<(), CliError> {
    if m < 5 {
        return Err(CliError::Validation(format!(
            "window size m={m} is below 5; degree-5 or higher window polynomials are required \
             so no closed-form algebraic inverse exists"
        )));
    }
    Ok(())
}

fn load_file_dataset(path: &PathBuf, format: &str) -> Result<Dataset, CliError> {
    let format = parse_format(format).map_err(|e| CliError::Validation(e.to_string()))?;
    polyshield_core::load_embeddings(path, format).map_err(|e| CliError::Stage(e.into()))
}

/// Load a params store or deterministically generate one for the dataset.
fn obtain_params(
    dataset: &Dataset,
    params_path: &Option<PathBuf>,
    m: usize,
    overlap: Option<usize>,
    param_seed: u64,
) -> Result<(BTreeMap<String, PolyParams>, usize), CliError> {
    match params_path {
        Some(path) => {
            let store = load_params_store(path).map_err(|e| CliError::Stage(e.into()))?;
            let mut overlaps: Vec<usize> = store.values().map(|p| p.overlap()).collect();
            overlaps.dedup();
            let store_overlap = match overlaps.as_slice() {
                [o] => *o,
                _ => {
                    return Err(CliError::Validation(
                        "params store mixes overlap values".to_string(),
                    ))
                }
            };
            if let Some(min_m) = store.values().map(|p| p.m()).min() {
                check_min_window(min_m)?;
            }
            if let Some(o) = overlap {
                if o != store_overlap {
                    return Err(CliError::Validation(format!(
                        "--overlap {o} disagrees with the params store overlap {store_overlap}"
                    )));
                }
            }
            Ok((store, store_overlap))
        }
        None => {
            check_min_window(m)?;
            let overlap = overlap.unwrap_or(0);
            let policy = ParamPolicy { m, overlap, seed: param_seed, ..ParamPolicy::default() };
            let store = assign_params(dataset, &policy).map_err(classify_param_error)?;
            Ok((store, overlap))
        }
    }
}

fn classify_param_error(e: polyshield_core::ParamError) -> CliError {
    use polyshield_core::ParamError::*;
    match e {
        CapacityExceeded { .. } | CoeffRangeTooSmall { .. } | BadScoreRange { .. } => {
            CliError::Validation(e.to_string())
        }
        other => CliError::Stage(other.into()),
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, CliError> {
    raw.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<T>()
                .map_err(|_| CliError::Validation(format!("cannot parse {what} element `{t}`")))
        })
        .collect()
}

fn parse_threshold_labels(raw: &str) -> Result<Vec<f64>, CliError> {
    raw.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.strip_prefix("fmr")
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|&l| l > 0.0 && l <= 100.0)
                .ok_or_else(|| {
                    CliError::Validation(format!(
                        "threshold label `{t}` must look like fmr<percent>, e.g. fmr0.1"
                    ))
                })
        })
        .collect()
}

fn write_long_report(
    rows: &[polyshield::report::LongRow],
    out: &Option<PathBuf>,
) -> Result<(), CliError> {
    match out {
        Some(path) => {
            let mut file = std::fs::File::create(path)
                .map_err(|e| CliError::Stage(anyhow::Error::new(e).context("creating report")))?;
            polyshield::report::write_long_csv(&mut file, rows)?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            polyshield::report::write_long_csv(&mut lock, rows)?;
        }
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, path: &PathBuf) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Stage(anyhow::Error::new(e)))?;
    std::fs::write(path, json).map_err(|e| CliError::Stage(anyhow::Error::new(e)))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenSynthetic {
            subjects,
            dim,
            noise,
            seed,
            shared_component,
            identity_dims,
            out,
            format,
        } => {
            let format = parse_format(&format).map_err(|e| CliError::Validation(e.to_string()))?;
            let spec = SyntheticSpec {
                n_subjects: subjects,
                dim,
                intra_class_noise: noise,
                seed,
                shared_component,
                identity_dims,
            };
            let ds = generate_synthetic(&spec).map_err(|e| CliError::Validation(e.to_string()))?;
            save_embeddings(&ds, &out, format).map_err(|e| CliError::Stage(e.into()))?;
            println!(
                "wrote {} embeddings ({} subjects, dim {}) to {}",
                ds.len(),
                subjects,
                dim,
                out.display()
            );
            Ok(())
        }
        Command::Protect {
            embeddings,
            format,
            params,
            m,
            overlap,
            param_seed,
            sample_index,
            out,
            save_params,
        } => {
            let ds = load_file_dataset(&embeddings, &format)?;
            let (store, _) = obtain_params(&ds, &params, m, overlap, param_seed)?;
            let mut templates: Vec<ProtectedTemplate> = Vec::new();
            for (subject, samples) in ds.by_subject() {
                let sample = samples.get(sample_index).ok_or_else(|| {
                    CliError::Validation(format!(
                        "subject {subject} has {} samples, sample index {sample_index} is out \
                         of range",
                        samples.len()
                    ))
                })?;
                let p = store.get(subject).ok_or_else(|| {
                    CliError::Validation(format!("params store has no entry for {subject}"))
                })?;
                templates.push(protect(&sample.values, p).map_err(|e| CliError::Stage(e.into()))?);
            }
            save_protected_templates(&templates, &out).map_err(|e| CliError::Stage(e.into()))?;
            if params.is_none() {
                if let Some(path) = save_params {
                    save_params_store(&store, &path).map_err(|e| CliError::Stage(e.into()))?;
                    eprintln!(
                        "warning: {} holds subject secrets; under a full-disclosure threat \
                         model anyone with this file can attempt inversion",
                        path.display()
                    );
                }
            }
            println!("wrote {} protected templates to {}", templates.len(), out.display());
            Ok(())
        }
        Command::EvalVerify {
            embeddings,
            format,
            params,
            scenario,
            overlap,
            m,
            param_seed,
            fmr,
            out,
            json_out,
        } => {
            let scenario: Scenario =
                scenario.parse().map_err(CliError::Validation)?;
            let fmr_levels: Vec<f64> = parse_list(&fmr, "fmr")?;
            let ds = load_file_dataset(&embeddings, &format)?;
            let (store, used_overlap) = if scenario == Scenario::Baseline {
                (BTreeMap::new(), None)
            } else {
                let (s, o) = obtain_params(&ds, &params, m, overlap, param_seed)?;
                (s, Some(o))
            };
            let scores = score_verification(&ds, &store, scenario)
                .map_err(|e| CliError::Stage(e.into()))?;
            let tmr = compute_tmr_at_fmr(&scores, &fmr_levels)
                .map_err(|e| CliError::Stage(e.into()))?;
            let eer = compute_eer(&scores).map_err(|e| CliError::Stage(e.into()))?;
            let rows = polyshield::report::long_rows_verify(
                &scenario.to_string(),
                used_overlap,
                &tmr,
                &eer,
            );
            write_long_report(&rows, &out)?;
            if let Some(path) = json_out {
                let report = EvaluationReport {
                    scenario,
                    overlap: used_overlap,
                    tmr_at_fmr: tmr,
                    eer: Some(eer),
                    tpir: BTreeMap::new(),
                };
                write_json(&report, &path)?;
            }
            Ok(())
        }
        Command::EvalIdentify {
            embeddings,
            format,
            params,
            ranks,
            overlap,
            m,
            param_seed,
            baseline,
            out,
            json_out,
        } => {
            let ranks: Vec<usize> = parse_list(&ranks, "ranks")?;
            let ds = load_file_dataset(&embeddings, &format)?;
            let (scenario_name, used_overlap, rankings) = if baseline {
                ("baseline".to_string(), None, baseline_rankings(&ds)?)
            } else {
                let (store, o) = obtain_params(&ds, &params, m, overlap, param_seed)?;
                ("protected".to_string(), Some(o), protected_rankings(&ds, &store)?)
            };
            let tpir = compute_tpir(&rankings, &ranks).map_err(|e| CliError::Stage(e.into()))?;
            let tpir_pairs: Vec<(usize, f64)> = ranks.iter().map(|&n| (n, tpir[&n])).collect();
            let rows =
                polyshield::report::long_rows_tpir(&scenario_name, used_overlap, &tpir_pairs);
            write_long_report(&rows, &out)?;
            if let Some(path) = json_out {
                let report = EvaluationReport {
                    scenario: if baseline { Scenario::Baseline } else { Scenario::Normal },
                    overlap: used_overlap,
                    tmr_at_fmr: Vec::new(),
                    eer: None,
                    tpir,
                };
                write_json(&report, &path)?;
            }
            Ok(())
        }
        Command::Attack {
            embeddings,
            format,
            mode,
            overlap,
            arm_p,
            thresholds,
            out,
            fraction,
            split_seed,
            param_seed,
            m,
            max_targets,
            guess,
        } => {
            check_min_window(m)?;
            let levels = parse_threshold_labels(&thresholds)?;
            let guess = match guess.as_str() {
                "mean" => GuessSource::DevMean,
                "median" => GuessSource::DevMedian,
                "random" => GuessSource::PerDimRandom { seed: param_seed },
                other => {
                    return Err(CliError::Validation(format!(
                        "unknown guess source `{other}` (expected mean, median or random)"
                    )))
                }
            };
            if overlap >= m {
                return Err(CliError::Validation(format!(
                    "overlap {overlap} violates o <= m-1 = {}",
                    m - 1
                )));
            }
            let ds = load_file_dataset(&embeddings, &format)?;
            let (dev, eval) =
                split(&ds, fraction, split_seed).map_err(|e| CliError::Validation(e.to_string()))?;
            let match_thresholds =
                baseline_thresholds(&dev, &levels).map_err(CliError::Stage)?;
            let policy = ParamPolicy { m, overlap, seed: param_seed, ..ParamPolicy::default() };
            let store = assign_params(&eval, &policy).map_err(classify_param_error)?;
            let targets = cap_subjects(&eval, max_targets);
            let config = AttackConfig {
                guess,
                solver: SolverConfig::default(),
                match_thresholds: match_thresholds.clone(),
                arm_p: if mode == "arm" { arm_p } else { 1 },
            };
            let labels: Vec<String> = match_thresholds.iter().map(|(l, _)| l.clone()).collect();
            let report = match mode.as_str() {
                "single" => run_inversion_attack(&targets, &store, &dev, &config)
                    .map_err(|e| CliError::Stage(e.into()))?,
                "arm" => {
                    if arm_p == 0 {
                        return Err(CliError::Validation("--arm-p must be positive".into()));
                    }
                    let factory = |subject: &str, j: usize| -> PolyParams {
                        let seed =
                            derive_seed(param_seed, &format!("arm-o{overlap}-{subject}-{j}"));
                        let mut rng = ChaCha12Rng::seed_from_u64(seed);
                        polyshield_core::generate_naive(
                            &policy,
                            format!("{subject}#arm{j}"),
                            &mut rng,
                        )
                        .expect("policy validated above")
                    };
                    let mut reports =
                        run_arm_attack(&targets, &dev, &config, &[arm_p], factory)
                            .map_err(|e| CliError::Stage(e.into()))?;
                    reports.pop().map(|(_, r)| r).expect("one report per p value")
                }
                other => {
                    return Err(CliError::Validation(format!(
                        "unknown attack mode `{other}` (expected single or arm)"
                    )))
                }
            };
            write_attack_outcomes_csv(&out, &labels, &report.outcomes)?;
            println!(
                "mode={mode} o={overlap} p={} targets={} solution_rate={:.2}%",
                config.arm_p,
                report.outcomes.len(),
                report.solution_rate_percent
            );
            for label in &labels {
                println!(
                    "  {label}: isr={:.2}% match_rate={:.2}%",
                    report.isr_percent[label], report.match_rate_percent[label]
                );
            }
            Ok(())
        }
        Command::Unlink {
            embeddings,
            format,
            templates_per_subject,
            policy,
            omega,
            overlap,
            m,
            seed,
            strict_quantile,
            out,
        } => {
            check_min_window(m)?;
            if overlap >= m {
                return Err(CliError::Validation(format!(
                    "overlap {overlap} violates o <= m-1 = {}",
                    m - 1
                )));
            }
            if !(strict_quantile > 0.0 && strict_quantile <= 1.0) {
                return Err(CliError::Validation(format!(
                    "strict quantile {strict_quantile} outside (0, 1]"
                )));
            }
            let ds = load_file_dataset(&embeddings, &format)?;
            let naive_policy = ParamPolicy {
                m,
                overlap,
                seed: derive_seed(seed, &format!("unlink-naive-o{overlap}")),
                ..ParamPolicy::default()
            };
            let (selected_policy, strict_cap) = match policy.as_str() {
                "naive" => (naive_policy.clone(), None),
                "strict" => {
                    let calibration = ParamPolicy {
                        seed: derive_seed(seed, &format!("unlink-cal-o{overlap}")),
                        ..naive_policy.clone()
                    };
                    let scores =
                        collect_link_scores(&ds, &calibration, templates_per_subject)
                            .map_err(|e| CliError::Stage(e.into()))?;
                    let cap = score_percentile(&scores.non_mated, strict_quantile).ok_or_else(
                        || CliError::Validation("no non-mated scores to calibrate".to_string()),
                    )?;
                    (
                        ParamPolicy {
                            selection: Selection::Strict,
                            strict_score_range: ScoreRange { lo: -1.0, hi: cap },
                            seed: derive_seed(seed, &format!("unlink-strict-o{overlap}")),
                            ..naive_policy.clone()
                        },
                        Some(cap),
                    )
                }
                other => {
                    return Err(CliError::Validation(format!(
                        "unknown policy `{other}` (expected naive or strict)"
                    )))
                }
            };
            let input = collect_link_scores(&ds, &selected_policy, templates_per_subject)
                .map_err(|e| CliError::Stage(e.into()))?;
            let result = compute_d_sys(&input, BandwidthPolicy::Silverman, omega)
                .map_err(|e| CliError::Stage(e.into()))?;
            let baseline = compute_d_sys(
                &baseline_link_scores(&ds).map_err(|e| CliError::Stage(e.into()))?,
                BandwidthPolicy::Silverman,
                omega,
            )
            .map_err(|e| CliError::Stage(e.into()))?;
            #[derive(serde::Serialize)]
            struct UnlinkOutput {
                policy: String,
                o: usize,
                omega: f64,
                templates_per_subject: usize,
                mated_scores: usize,
                non_mated_scores: usize,
                strict_score_max: Option<f64>,
                baseline_d_sys: f64,
                d_sys: f64,
                result: polyshield_core::LinkabilityResult,
            }
            let output = UnlinkOutput {
                policy,
                o: overlap,
                omega,
                templates_per_subject,
                mated_scores: input.mated.len(),
                non_mated_scores: input.non_mated.len(),
                strict_score_max: strict_cap,
                baseline_d_sys: baseline.d_sys,
                d_sys: result.d_sys,
                result,
            };
            write_json(&output, &out)?;
            println!(
                "d_sys={:.4} (baseline {:.4}) written to {}",
                output.d_sys,
                output.baseline_d_sys,
                out.display()
            );
            Ok(())
        }
        Command::RunPlan { plan, from_manifest, out_dir, set } => {
            let plan = assemble_plan(plan, from_manifest, out_dir, &set)?;
            let manifest = run_plan(&plan).map_err(pipeline_to_cli)?;
            println!("plan complete; reports in {}", plan.out_dir.display());
            for (file, digest) in &manifest.reports {
                println!("  {file}  sha256={digest}");
            }
            Ok(())
        }
        Command::Validate { plan, set } => {
            let plan = assemble_plan(plan, None, None, &set)?;
            let diags = validate_plan(&plan);
            if diags.is_empty() {
                println!("plan ok");
                Ok(())
            } else {
                Err(CliError::Diagnostics(diags))
            }
        }
    }
}

fn parse_overrides(set: &[String]) -> Result<Vec<(String, String)>, CliError> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| {
                    CliError::Validation(format!("--set expects key=value, got `{kv}`"))
                })
        })
        .collect()
}

fn assemble_plan(
    plan_path: Option<PathBuf>,
    from_manifest: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    set: &[String],
) -> Result<polyshield::ExperimentPlan, CliError> {
    let overrides = parse_overrides(set)?;
    let mut plan = match (&plan_path, &from_manifest) {
        (Some(_), Some(_)) => {
            return Err(CliError::Validation(
                "--plan and --from-manifest are mutually exclusive".to_string(),
            ))
        }
        (None, Some(manifest_path)) => {
            let manifest = Manifest::load(manifest_path).map_err(CliError::Stage)?;
            if !overrides.is_empty() {
                return Err(CliError::Validation(
                    "--set cannot be combined with --from-manifest (the manifest pins the plan)"
                        .to_string(),
                ));
            }
            manifest.plan
        }
        (plan_path, None) => {
            let kv = match plan_path {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| CliError::Stage(anyhow::Error::new(e)))?;
                    parse_plan_text(&text)
                        .map_err(|d| CliError::Diagnostics(vec![d]))?
                }
                None => BTreeMap::new(),
            };
            return PlanBuilder::new(kv)
                .with_overrides(&overrides)
                .build()
                .map_err(CliError::Diagnostics)
                .map(|mut plan| {
                    if let Some(dir) = out_dir {
                        plan.out_dir = dir;
                    }
                    plan
                });
        }
    };
    if let Some(dir) = out_dir {
        plan.out_dir = dir;
    }
    Ok(plan)
}

fn pipeline_to_cli(e: PipelineError) -> CliError {
    match e {
        PipelineError::Validation(diags) => CliError::Diagnostics(diags),
        other => CliError::Stage(other.into()),
    }
}

fn write_attack_outcomes_csv(
    path: &PathBuf,
    labels: &[String],
    outcomes: &[AttackOutcome],
) -> Result<(), CliError> {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Stage(anyhow::Error::new(e).context("creating attack report")))?;
    let mut w = std::io::BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        write!(w, "subject,converged,residual,iterations")?;
        for l in labels {
            write!(w, ",match_{l}")?;
        }
        writeln!(w, ",wall_time_ms")?;
        for o in outcomes {
            write!(w, "{},{},{},{}", o.subject_id, o.converged, o.residual_norm, o.iterations)?;
            for l in labels {
                write!(w, ",{}", o.match_flags.get(l).copied().unwrap_or(false))?;
            }
            writeln!(w, ",{:.3}", o.wall_time_ms)?;
        }
        w.flush()
    };
    write().map_err(|e| CliError::Stage(anyhow::Error::new(e)))?;
    Ok(())
}
