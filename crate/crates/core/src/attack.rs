//! Full-disclosure irreversibility evaluation: assemble the polynomial
//! system tying protected templates back to the source embedding, solve it
//! with a damped least-squares iteration started from development-set
//! statistics, and aggregate reconstruction success rates.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Dataset;
use crate::metrics::cosine_similarity;
use crate::transform::{eval_window, integer_power, protect, PolyParams, ProtectedTemplate, TransformError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("system has no equations")]
    EmptySystem,
    #[error("templates and parameter sets must pair up: {templates} vs {params}")]
    BlockCountMismatch { templates: usize, params: usize },
    #[error("template {index} has source_dim {got}, expected {expected}")]
    SourceDimMismatch { index: usize, expected: usize, got: usize },
    #[error("template {index} has {got} values, its parameters imply {expected}")]
    TemplateLengthMismatch { index: usize, expected: usize, got: usize },
    #[error("initial guess has dimension {got}, system has {expected} unknowns")]
    GuessDimMismatch { expected: usize, got: usize },
    #[error("evaluation set has no subjects to attack")]
    NoTargets,
    #[error("no parameters registered for subject {0}")]
    MissingParams(String),
    #[error("record multiplicity must be at least 1")]
    ZeroMultiplicity,
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// Stopping rules for the damped least-squares iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub residual_tolerance: f64,
    pub step_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iterations: 200, residual_tolerance: 1e-10, step_tolerance: 1e-12 }
    }
}

/// Where the solver's starting point comes from. The adversary knows the
/// development set and uses its per-dimension statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GuessSource {
    DevMean,
    DevMedian,
    /// Independent per-dimension draw from the observed dev values.
    PerDimRandom { seed: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub guess: GuessSource,
    pub solver: SolverConfig,
    /// (label, similarity threshold) pairs; a reconstruction matches at a
    /// threshold when its cosine similarity with the true reference reaches it.
    pub match_thresholds: Vec<(String, f64)>,
    /// Number of protected templates combined per target (1 = single-template).
    pub arm_p: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            guess: GuessSource::DevMean,
            solver: SolverConfig::default(),
            match_thresholds: Vec::new(),
            arm_p: 1,
        }
    }
}

/// The stacked residual function R: R^n -> R^(sum of template lengths),
/// R(x) = protect(x, params_b) - template_b over all blocks. R is zero at
/// the embedding that produced the templates.
#[derive(Debug, Clone)]
pub struct PolySystem {
    blocks: Vec<(PolyParams, Vec<f64>)>,
    unknowns: usize,
    rows: usize,
}

impl PolySystem {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn unknowns(&self) -> usize {
        self.unknowns
    }

    /// R(x); entries may be non-finite if x strays far enough to overflow.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.unknowns);
        let mut out = Vec::with_capacity(self.rows);
        for (params, target) in &self.blocks {
            let stride = params.stride();
            for (j, t) in target.iter().enumerate() {
                out.push(eval_window(x, j * stride, params) - t);
            }
        }
        out
    }

    /// Analytic Jacobian as dense rows, mostly for verification against
    /// numerical differentiation; the solver itself consumes the sparse form.
    pub fn jacobian_dense(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.jacobian(x)
            .iter()
            .map(|row| {
                let mut dense = vec![0.0; self.unknowns];
                for (i, &v) in row.vals.iter().enumerate() {
                    dense[row.start + i] = v;
                }
                dense
            })
            .collect()
    }

    /// Analytic Jacobian in sparse row form: row (b, j) holds the window
    /// derivatives c_i * e_i * x_t^(e_i - 1) for the unknowns the window
    /// touches. Padding positions are constants, not unknowns.
    fn jacobian(&self, x: &[f64]) -> Vec<JacRow> {
        let n = self.unknowns;
        let mut rows = Vec::with_capacity(self.rows);
        for (params, target) in &self.blocks {
            let stride = params.stride();
            let coeffs = params.coefficients();
            let exps = params.exponents();
            for j in 0..target.len() {
                let start = j * stride;
                let len = params.m().min(n - start);
                let mut vals = Vec::with_capacity(len);
                for i in 0..len {
                    let c = coeffs[i] as f64;
                    let e = exps[i];
                    let d = if e == 1 {
                        c
                    } else {
                        c * e as f64 * integer_power(x[start + i], e - 1)
                    };
                    vals.push(d);
                }
                rows.push(JacRow { start, vals });
            }
        }
        rows
    }
}

pub fn assemble_system(
    templates: &[ProtectedTemplate],
    params_list: &[PolyParams],
) -> Result<PolySystem, AttackError> {
    if templates.len() != params_list.len() {
        return Err(AttackError::BlockCountMismatch {
            templates: templates.len(),
            params: params_list.len(),
        });
    }
    if templates.is_empty() {
        return Err(AttackError::EmptySystem);
    }
    let unknowns = templates[0].source_dim;
    let mut blocks = Vec::with_capacity(templates.len());
    let mut rows = 0;
    for (index, (t, p)) in templates.iter().zip(params_list).enumerate() {
        if t.source_dim != unknowns {
            return Err(AttackError::SourceDimMismatch {
                index,
                expected: unknowns,
                got: t.source_dim,
            });
        }
        let expected = crate::transform::protected_dim(unknowns, p.m(), p.overlap())?;
        if t.values.len() != expected {
            return Err(AttackError::TemplateLengthMismatch {
                index,
                expected,
                got: t.values.len(),
            });
        }
        rows += t.values.len();
        blocks.push((p.clone(), t.values.clone()));
    }
    Ok(PolySystem { blocks, unknowns, rows })
}

/// One Jacobian row: `vals[i]` is the derivative w.r.t. unknown `start + i`.
struct JacRow {
    start: usize,
    vals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub solution: Vec<f64>,
    pub converged: bool,
    pub residual_norm: f64,
    pub iterations: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Damped least squares (Levenberg-Marquardt): solves
/// (J^T J + lambda D) d = -J^T r each iteration with D the accumulated
/// column-norm scaling, growing lambda on step rejection and shrinking it by
/// the gain ratio on acceptance. Converged when the residual norm reaches
/// `residual_tolerance` or the computed step falls to `step_tolerance`
/// within the iteration budget. Underdetermined systems are solved in
/// residual space through the column-rescaled dual identity.
pub fn solve_least_squares(
    system: &PolySystem,
    x0: &[f64],
    config: &SolverConfig,
) -> Result<SolveOutcome, AttackError> {
    if x0.len() != system.unknowns() {
        return Err(AttackError::GuessDimMismatch {
            expected: system.unknowns(),
            got: x0.len(),
        });
    }
    let n = system.unknowns();
    let mut x = x0.to_vec();
    let mut r = system.residual(&x);
    if r.iter().any(|v| !v.is_finite()) {
        return Ok(SolveOutcome {
            solution: x,
            converged: false,
            residual_norm: f64::INFINITY,
            iterations: 0,
        });
    }
    let mut res_norm = norm(&r);
    if res_norm <= config.residual_tolerance {
        return Ok(SolveOutcome { solution: x, converged: true, residual_norm: res_norm, iterations: 0 });
    }
    let mut lambda = 1e-3;
    let mut growth = 2.0;
    let mut d_accum = vec![0.0f64; n];
    for iter in 1..=config.max_iterations {
        let jac = system.jacobian(&x);
        if jac.iter().any(|row| row.vals.iter().any(|v| !v.is_finite())) {
            return Ok(SolveOutcome {
                solution: x,
                converged: false,
                residual_norm: res_norm,
                iterations: iter,
            });
        }
        // Accumulated Marquardt scaling keeps weakly excited directions from
        // blowing up when their local derivative happens to vanish.
        let mut diag = vec![0.0f64; n];
        for row in &jac {
            for (i, &v) in row.vals.iter().enumerate() {
                diag[row.start + i] += v * v;
            }
        }
        let max_diag = diag.iter().copied().fold(0.0f64, f64::max);
        if !(max_diag > 0.0) || !max_diag.is_finite() {
            return Ok(SolveOutcome {
                solution: x,
                converged: false,
                residual_norm: res_norm,
                iterations: iter,
            });
        }
        let floor = max_diag * 1e-10;
        for (acc, d) in d_accum.iter_mut().zip(&diag) {
            *acc = acc.max(d.max(floor));
        }
        let step = match lm_step(&jac, &r, n, lambda, &d_accum) {
            Some(s) => s,
            None => {
                lambda *= growth;
                growth *= 2.0;
                if lambda > 1e18 {
                    return Ok(SolveOutcome {
                        solution: x,
                        converged: true,
                        residual_norm: res_norm,
                        iterations: iter,
                    });
                }
                continue;
            }
        };
        let step_norm = norm(&step);
        if step_norm <= config.step_tolerance {
            return Ok(SolveOutcome { solution: x, converged: true, residual_norm: res_norm, iterations: iter });
        }
        let mut x_new: Vec<f64> = x.iter().zip(&step).map(|(a, d)| a + d).collect();
        let mut r_new = system.residual(&x_new);
        let mut finite = r_new.iter().all(|v| v.is_finite());
        let mut new_norm = if finite { norm(&r_new) } else { f64::INFINITY };
        // Overshoot rescue: probe fractional steps along the same direction
        // before paying for another factorization at higher damping.
        if new_norm >= res_norm {
            for shrink in [0.5, 0.25] {
                let x_try: Vec<f64> =
                    x.iter().zip(&step).map(|(a, d)| a + shrink * d).collect();
                let r_try = system.residual(&x_try);
                let f_try = r_try.iter().all(|v| v.is_finite());
                let n_try = if f_try { norm(&r_try) } else { f64::INFINITY };
                if n_try < res_norm {
                    x_new = x_try;
                    r_new = r_try;
                    finite = f_try;
                    new_norm = n_try;
                    break;
                }
            }
        }
        let _ = finite;
        if new_norm < res_norm {
            // Gain ratio: actual cost reduction over the reduction the local
            // model predicted for this step.
            let mut g = vec![0.0f64; n];
            for (row, &ri) in jac.iter().zip(&r) {
                for (i, &v) in row.vals.iter().enumerate() {
                    g[row.start + i] += v * ri;
                }
            }
            let predicted: f64 = step
                .iter()
                .enumerate()
                .map(|(t, &d)| 0.5 * d * (lambda * d_accum[t] * d - g[t]))
                .sum();
            let actual = 0.5 * (res_norm * res_norm - new_norm * new_norm);
            let rho = if predicted > 0.0 { actual / predicted } else { 1.0 };
            x = x_new;
            r = r_new;
            res_norm = new_norm;
            let shrink = (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
            lambda = (lambda * shrink).max(1e-15);
            growth = 2.0;
            if res_norm <= config.residual_tolerance {
                return Ok(SolveOutcome { solution: x, converged: true, residual_norm: res_norm, iterations: iter });
            }
        } else {
            lambda *= growth;
            growth *= 2.0;
            if lambda > 1e18 {
                // Damping saturated; any further step is below tolerance.
                return Ok(SolveOutcome { solution: x, converged: true, residual_norm: res_norm, iterations: iter });
            }
        }
    }
    Ok(SolveOutcome {
        solution: x,
        converged: false,
        residual_norm: res_norm,
        iterations: config.max_iterations,
    })
}

/// Gauss-Newton step with Marquardt-scaled damping: solves
/// (J^T J + lambda D) d = -J^T r for a given positive diagonal D. The primal
/// or dual normal equations are chosen by whichever Gram matrix is smaller;
/// the dual form works on the column-rescaled system.
fn lm_step(
    jac: &[JacRow],
    r: &[f64],
    unknowns: usize,
    lambda: f64,
    diag: &[f64],
) -> Option<Vec<f64>> {
    let rows = jac.len();
    if rows >= unknowns {
        // A = J^T J + lambda D (unknowns x unknowns), b = -J^T r.
        let mut a = vec![0.0; unknowns * unknowns];
        let mut b = vec![0.0; unknowns];
        for (row, &ri) in jac.iter().zip(r) {
            for (i, &vi) in row.vals.iter().enumerate() {
                let t = row.start + i;
                b[t] -= vi * ri;
                for (j, &vj) in row.vals.iter().enumerate().skip(i) {
                    a[t * unknowns + row.start + j] += vi * vj;
                }
            }
        }
        for t in 0..unknowns {
            for u in (t + 1)..unknowns {
                a[u * unknowns + t] = a[t * unknowns + u];
            }
            a[t * unknowns + t] += lambda * diag[t];
        }
        let mut d = b;
        cholesky_solve(&mut a, unknowns, &mut d)?;
        Some(d)
    } else {
        // Column-rescaled dual: with S = D^-1/2, solving
        // (J^T J + lambda D) d = -J^T r equals d = S (JS)^T ((JS)(JS)^T
        // + lambda I)^-1 (-r). Scale each row's entries by S up front.
        let scale: Vec<f64> = diag.iter().map(|d| 1.0 / d.sqrt()).collect();
        let scaled: Vec<JacRow> = jac
            .iter()
            .map(|row| JacRow {
                start: row.start,
                vals: row
                    .vals
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * scale[row.start + i])
                    .collect(),
            })
            .collect();
        let mut g = vec![0.0; rows * rows];
        for (a_idx, ra) in scaled.iter().enumerate() {
            for (b_off, rb) in scaled[a_idx..].iter().enumerate() {
                let b_idx = a_idx + b_off;
                let lo = ra.start.max(rb.start);
                let hi = (ra.start + ra.vals.len()).min(rb.start + rb.vals.len());
                if lo >= hi {
                    continue;
                }
                let mut acc = 0.0;
                for t in lo..hi {
                    acc += ra.vals[t - ra.start] * rb.vals[t - rb.start];
                }
                g[a_idx * rows + b_idx] = acc;
                g[b_idx * rows + a_idx] = acc;
            }
        }
        for i in 0..rows {
            g[i * rows + i] += lambda;
        }
        let mut y: Vec<f64> = r.iter().map(|v| -v).collect();
        cholesky_solve(&mut g, rows, &mut y)?;
        let mut d = vec![0.0; unknowns];
        for (row, &yi) in scaled.iter().zip(&y) {
            for (i, &vi) in row.vals.iter().enumerate() {
                d[row.start + i] += vi * yi * scale[row.start + i];
            }
        }
        Some(d)
    }
}

/// In-place Cholesky factorization and solve; None if the matrix is not
/// numerically positive definite.
fn cholesky_solve(a: &mut [f64], dim: usize, b: &mut [f64]) -> Option<()> {
    for j in 0..dim {
        let mut d = a[j * dim + j];
        for k in 0..j {
            d -= a[j * dim + k] * a[j * dim + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        a[j * dim + j] = d;
        for i in (j + 1)..dim {
            let mut s = a[i * dim + j];
            for k in 0..j {
                s -= a[i * dim + k] * a[j * dim + k];
            }
            a[i * dim + j] = s / d;
        }
    }
    // Forward substitution L z = b.
    for i in 0..dim {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * dim + k] * b[k];
        }
        b[i] = s / a[i * dim + i];
    }
    // Back substitution L^T d = z.
    for i in (0..dim).rev() {
        let mut s = b[i];
        for k in (i + 1)..dim {
            s -= a[k * dim + i] * b[k];
        }
        b[i] = s / a[i * dim + i];
    }
    Some(())
}

/// Per-target reconstruction result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub subject_id: String,
    pub converged: bool,
    pub reconstructed: Option<Vec<f64>>,
    /// Present only for converged solves.
    pub match_flags: BTreeMap<String, bool>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub wall_time_ms: f64,
}

/// Aggregated attack results. The inversion success rate per threshold is
/// solution rate x match rate: the fraction of targets whose solve converged
/// and whose reconstruction matches the true reference at that threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub solution_rate_percent: f64,
    pub match_rate_percent: BTreeMap<String, f64>,
    pub isr_percent: BTreeMap<String, f64>,
    pub outcomes: Vec<AttackOutcome>,
}

/// Initial solver guess from development-set statistics.
pub fn initial_guess(dev: &Dataset, source: &GuessSource) -> Vec<f64> {
    match source {
        GuessSource::DevMean => dev.per_dim_mean(),
        GuessSource::DevMedian => dev.per_dim_median(),
        GuessSource::PerDimRandom { seed } => {
            let mut rng = ChaCha12Rng::seed_from_u64(*seed);
            let all = dev.embeddings();
            (0..dev.dim())
                .map(|d| all[rng.random_range(0..all.len())].values[d])
                .collect()
        }
    }
}

fn attack_target(
    subject: &str,
    reference: &[f64],
    param_sets: &[PolyParams],
    x0: &[f64],
    config: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    let started = std::time::Instant::now();
    let templates: Vec<ProtectedTemplate> = param_sets
        .iter()
        .map(|p| protect(reference, p))
        .collect::<Result<_, _>>()?;
    let system = assemble_system(&templates, param_sets)?;
    let solve = solve_least_squares(&system, x0, &config.solver)?;
    let mut match_flags = BTreeMap::new();
    if solve.converged {
        for (label, threshold) in &config.match_thresholds {
            let similar = cosine_similarity(&solve.solution, reference)
                .map(|s| s >= *threshold)
                .unwrap_or(false);
            match_flags.insert(label.clone(), similar);
        }
    }
    Ok(AttackOutcome {
        subject_id: subject.to_string(),
        converged: solve.converged,
        reconstructed: solve.converged.then_some(solve.solution),
        match_flags,
        residual_norm: solve.residual_norm,
        iterations: solve.iterations,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

fn aggregate(outcomes: Vec<AttackOutcome>, thresholds: &[(String, f64)]) -> AttackReport {
    let total = outcomes.len() as f64;
    let converged = outcomes.iter().filter(|o| o.converged).count();
    let mut match_rate = BTreeMap::new();
    let mut isr = BTreeMap::new();
    for (label, _) in thresholds {
        let hits = outcomes
            .iter()
            .filter(|o| o.converged && o.match_flags.get(label).copied().unwrap_or(false))
            .count();
        let mr = if converged == 0 { 0.0 } else { hits as f64 / converged as f64 * 100.0 };
        match_rate.insert(label.clone(), mr);
        isr.insert(label.clone(), hits as f64 / total * 100.0);
    }
    AttackReport {
        solution_rate_percent: converged as f64 / total * 100.0,
        match_rate_percent: match_rate,
        isr_percent: isr,
        outcomes,
    }
}

/// Single-template attack: for every evaluation subject, reconstruct their
/// reference embedding from the protected template under their enrolled
/// parameters, starting from the dev-derived guess.
pub fn run_inversion_attack(
    eval: &Dataset,
    params: &BTreeMap<String, PolyParams>,
    dev: &Dataset,
    config: &AttackConfig,
) -> Result<AttackReport, AttackError> {
    let by_subject = eval.by_subject();
    if by_subject.is_empty() {
        return Err(AttackError::NoTargets);
    }
    let x0 = initial_guess(dev, &config.guess);
    let targets: Vec<(&str, &[f64], Vec<PolyParams>)> = by_subject
        .iter()
        .map(|(subject, samples)| {
            let p = params
                .get(*subject)
                .ok_or_else(|| AttackError::MissingParams(subject.to_string()))?;
            Ok((*subject, samples[0].values.as_slice(), vec![p.clone()]))
        })
        .collect::<Result<_, AttackError>>()?;
    let outcomes: Vec<AttackOutcome> = targets
        .par_iter()
        .map(|(subject, reference, param_sets)| {
            attack_target(subject, reference, param_sets, &x0, config)
        })
        .collect::<Result<_, _>>()?;
    Ok(aggregate(outcomes, &config.match_thresholds))
}

/// Record-multiplicity attack: each target's reference is protected under
/// `p` independent parameter sets produced by `params_for`, and the solver
/// sees all k*p equations at once. The ladder over `p_values` is warm
/// started per target: each rung reuses the previous rung's reconstruction,
/// which already satisfies the shared blocks, as its starting point. The
/// first rung starts from the dev-derived guess, so a ladder of [1] is
/// exactly the single-template attack. Returns one report per requested p.
pub fn run_arm_attack<F>(
    eval: &Dataset,
    dev: &Dataset,
    config: &AttackConfig,
    p_values: &[usize],
    params_for: F,
) -> Result<Vec<(usize, AttackReport)>, AttackError>
where
    F: Fn(&str, usize) -> PolyParams + Sync,
{
    let by_subject = eval.by_subject();
    if by_subject.is_empty() {
        return Err(AttackError::NoTargets);
    }
    if p_values.iter().any(|&p| p == 0) {
        return Err(AttackError::ZeroMultiplicity);
    }
    let x0 = initial_guess(dev, &config.guess);
    let targets: Vec<(&str, &[f64])> = by_subject
        .iter()
        .map(|(subject, samples)| (*subject, samples[0].values.as_slice()))
        .collect();
    let per_target: Vec<Vec<AttackOutcome>> = targets
        .par_iter()
        .map(|(subject, reference)| {
            let mut start = x0.clone();
            let mut outs = Vec::with_capacity(p_values.len());
            for &p in p_values {
                let param_sets: Vec<PolyParams> =
                    (0..p).map(|j| params_for(subject, j)).collect();
                let outcome = attack_target(subject, reference, &param_sets, &start, config)?;
                if let Some(sol) = &outcome.reconstructed {
                    start = sol.clone();
                }
                outs.push(outcome);
            }
            Ok(outs)
        })
        .collect::<Result<_, AttackError>>()?;
    let mut reports = Vec::with_capacity(p_values.len());
    for (idx, &p) in p_values.iter().enumerate() {
        let outcomes: Vec<AttackOutcome> =
            per_target.iter().map(|outs| outs[idx].clone()).collect();
        reports.push((p, aggregate(outcomes, &config.match_thresholds)));
    }
    Ok(reports)
}
