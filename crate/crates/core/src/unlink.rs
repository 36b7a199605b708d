//! Global linkability measure over multiply-protected templates: mated and
//! non-mated cross-template score collection, kernel-density estimation of
//! both distributions, and the likelihood-ratio-based system measure in
//! [0, 1] (0 = fully unlinkable).

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Dataset;
use crate::metrics::{cosine_similarity, MetricError};
use crate::params::{generate_naive, generate_strict, ParamError, ParamPolicy, Selection};
use crate::transform::{protect, TransformError};

#[derive(Debug, Error)]
pub enum UnlinkError {
    #[error("need at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("need at least 2 templates per subject, got {0}")]
    TooFewTemplates(usize),
    #[error("{0} score list is empty")]
    EmptyScores(&'static str),
    #[error("omega must be positive and finite, got {0}")]
    BadOmega(f64),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Cross-template comparison scores feeding the linkability measure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkabilityInput {
    /// Same-subject scores across parameter sets.
    pub mated: Vec<f64>,
    /// Cross-subject scores across all template pairs.
    pub non_mated: Vec<f64>,
    pub templates_per_subject: usize,
}

/// Global measure plus the sampled local curve for plotting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkabilityResult {
    pub d_sys: f64,
    pub grid: Vec<f64>,
    pub local: Vec<f64>,
    pub omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandwidthPolicy {
    Silverman,
    Fixed(f64),
}

const GRID_POINTS: usize = 1000;
const KDE_BINS: usize = 8192;
const HIST_FALLBACK_BINS: usize = 64;

/// Protect each subject's first sample under `templates_per_subject`
/// parameter sets drawn per the policy, then score every same-subject
/// template pair (mated) and every cross-subject template pair (non-mated).
pub fn collect_link_scores(
    dataset: &Dataset,
    policy: &ParamPolicy,
    templates_per_subject: usize,
) -> Result<LinkabilityInput, UnlinkError> {
    let by_subject = dataset.by_subject();
    if by_subject.len() < 2 {
        return Err(UnlinkError::TooFewSubjects(by_subject.len()));
    }
    if templates_per_subject < 2 {
        return Err(UnlinkError::TooFewTemplates(templates_per_subject));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(policy.seed);
    let mut per_subject_templates: Vec<Vec<Vec<f64>>> = Vec::with_capacity(by_subject.len());
    for (subject, samples) in &by_subject {
        let values = &samples[0].values;
        let mut accepted = Vec::with_capacity(templates_per_subject);
        let mut templates = Vec::with_capacity(templates_per_subject);
        for j in 0..templates_per_subject {
            let id = format!("{subject}#{j}");
            let p = match policy.selection {
                Selection::Naive => generate_naive(policy, id, &mut rng)?,
                Selection::Strict => generate_strict(policy, values, &accepted, id, &mut rng)?,
            };
            templates.push(protect(values, &p)?.values);
            accepted.push(p);
        }
        per_subject_templates.push(templates);
    }
    scores_from_template_sets(&per_subject_templates, templates_per_subject)
}

/// Linkability scores of the unprotected system: the subject's raw samples
/// play the role of their multiple templates.
pub fn baseline_link_scores(dataset: &Dataset) -> Result<LinkabilityInput, UnlinkError> {
    let by_subject = dataset.by_subject();
    if by_subject.len() < 2 {
        return Err(UnlinkError::TooFewSubjects(by_subject.len()));
    }
    let sets: Vec<Vec<Vec<f64>>> = by_subject
        .values()
        .map(|samples| samples.iter().map(|e| e.values.clone()).collect())
        .collect();
    let t = sets.iter().map(Vec::len).min().unwrap_or(0);
    if t < 2 {
        return Err(UnlinkError::TooFewTemplates(t));
    }
    scores_from_template_sets(&sets, t)
}

fn scores_from_template_sets(
    sets: &[Vec<Vec<f64>>],
    templates_per_subject: usize,
) -> Result<LinkabilityInput, UnlinkError> {
    let mut mated = Vec::new();
    let mut non_mated = Vec::new();
    for templates in sets {
        for i in 0..templates.len() {
            for j in (i + 1)..templates.len() {
                mated.push(cosine_similarity(&templates[i], &templates[j])?);
            }
        }
    }
    for a in 0..sets.len() {
        for b in (a + 1)..sets.len() {
            for ta in &sets[a] {
                for tb in &sets[b] {
                    non_mated.push(cosine_similarity(ta, tb)?);
                }
            }
        }
    }
    Ok(LinkabilityInput { mated, non_mated, templates_per_subject })
}

/// Kernel-density estimate of both score distributions on a shared grid,
/// then D(s) = 2*omega*LR/(1 + omega*LR) - 1 clamped to [0, 1] where the
/// likelihood ratio exceeds 1 (0 elsewhere), integrated against the mated
/// density.
pub fn compute_d_sys(
    input: &LinkabilityInput,
    bandwidth: BandwidthPolicy,
    omega: f64,
) -> Result<LinkabilityResult, UnlinkError> {
    if input.mated.is_empty() {
        return Err(UnlinkError::EmptyScores("mated"));
    }
    if input.non_mated.is_empty() {
        return Err(UnlinkError::EmptyScores("non-mated"));
    }
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(UnlinkError::BadOmega(omega));
    }
    let h_m = resolve_bandwidth(&input.mated, bandwidth);
    let h_nm = resolve_bandwidth(&input.non_mated, bandwidth);
    match (h_m, h_nm) {
        (Some(h_m), Some(h_nm)) => Ok(kde_d_sys(input, h_m, h_nm, omega)),
        // Degenerate variance on either side: fall back to a shared histogram.
        _ => Ok(histogram_d_sys(input, omega)),
    }
}

fn resolve_bandwidth(scores: &[f64], policy: BandwidthPolicy) -> Option<f64> {
    match policy {
        BandwidthPolicy::Fixed(h) => (h > 0.0 && h.is_finite()).then_some(h),
        BandwidthPolicy::Silverman => {
            let n = scores.len() as f64;
            let mean = scores.iter().sum::<f64>() / n;
            let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
                / (n - 1.0).max(1.0);
            let sigma = var.sqrt();
            let iqr = quantile(scores, 0.75) - quantile(scores, 0.25);
            // Accumulated rounding can leave a spread of a few ulps on a
            // constant list; treat that as degenerate.
            let eps = 1e-12 * mean.abs().max(1.0);
            let spread = match (sigma > eps, iqr > eps) {
                (true, true) => sigma.min(iqr / 1.34),
                (true, false) => sigma,
                (false, true) => iqr / 1.34,
                (false, false) => return None,
            };
            let h = 0.9 * spread * n.powf(-0.2);
            (h > 0.0 && h.is_finite()).then_some(h)
        }
    }
}

fn quantile(scores: &[f64], q: f64) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    s[lo] + (s[hi] - s[lo]) * frac
}

fn kde_d_sys(input: &LinkabilityInput, h_m: f64, h_nm: f64, omega: f64) -> LinkabilityResult {
    let pad = 3.0 * h_m.max(h_nm);
    let min = input
        .mated
        .iter()
        .chain(&input.non_mated)
        .copied()
        .fold(f64::INFINITY, f64::min);
    let max = input
        .mated
        .iter()
        .chain(&input.non_mated)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (min - pad, max + pad);
    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64)
        .collect();
    let p_m = binned_gaussian_kde(&input.mated, h_m, lo, hi, &grid);
    let p_nm = binned_gaussian_kde(&input.non_mated, h_nm, lo, hi, &grid);
    let local: Vec<f64> = p_m
        .iter()
        .zip(&p_nm)
        .map(|(&pm, &pnm)| local_d(pm, pnm, omega))
        .collect();
    // Trapezoid quadrature of D * p_mated, normalized by the mated mass on
    // the grid to correct for tail truncation.
    let dx = (hi - lo) / (GRID_POINTS - 1) as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..GRID_POINTS - 1 {
        num += 0.5 * (local[i] * p_m[i] + local[i + 1] * p_m[i + 1]) * dx;
        den += 0.5 * (p_m[i] + p_m[i + 1]) * dx;
    }
    let d_sys = if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.0 };
    LinkabilityResult { d_sys, grid, local, omega }
}

fn local_d(p_m: f64, p_nm: f64, omega: f64) -> f64 {
    const TINY: f64 = 1e-300;
    if p_m <= TINY {
        return 0.0;
    }
    if p_nm <= TINY {
        return 1.0;
    }
    let lr = p_m / p_nm;
    if lr > 1.0 {
        (2.0 * omega * lr / (1.0 + omega * lr) - 1.0).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Gaussian KDE evaluated through a fine pre-binning of the samples; the bin
/// width sits far below any data-driven bandwidth, so the approximation error
/// is negligible while evaluation stays linear in grid size.
fn binned_gaussian_kde(scores: &[f64], h: f64, lo: f64, hi: f64, grid: &[f64]) -> Vec<f64> {
    let bins = KDE_BINS;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0f64; bins];
    for &s in scores {
        let idx = (((s - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1.0;
    }
    let norm = 1.0 / (scores.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let cutoff = 8.0 * h;
    let cutoff_bins = (cutoff / width).ceil() as usize + 1;
    grid.iter()
        .map(|&g| {
            let g_bin = ((g - lo) / width) as usize;
            let b_lo = g_bin.saturating_sub(cutoff_bins);
            let b_hi = (g_bin + cutoff_bins).min(bins - 1);
            let mut acc = 0.0;
            for b in b_lo..=b_hi {
                let c = counts[b];
                if c == 0.0 {
                    continue;
                }
                let center = lo + (b as f64 + 0.5) * width;
                let z = (g - center) / h;
                acc += c * (-0.5 * z * z).exp();
            }
            acc * norm
        })
        .collect()
}

/// Shared-bin histogram route for degenerate score lists.
fn histogram_d_sys(input: &LinkabilityInput, omega: f64) -> LinkabilityResult {
    let min = input
        .mated
        .iter()
        .chain(&input.non_mated)
        .copied()
        .fold(f64::INFINITY, f64::min);
    let max = input
        .mated
        .iter()
        .chain(&input.non_mated)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 0.0 {
        // Every score identical on both sides: indistinguishable.
        return LinkabilityResult { d_sys: 0.0, grid: vec![min], local: vec![0.0], omega };
    }
    let bins = HIST_FALLBACK_BINS;
    let width = (max - min) / bins as f64;
    let mass = |scores: &[f64]| {
        let mut m = vec![0.0f64; bins];
        for &s in scores {
            let idx = (((s - min) / width) as usize).min(bins - 1);
            m[idx] += 1.0;
        }
        let total = scores.len() as f64;
        m.iter_mut().for_each(|v| *v /= total);
        m
    };
    let m_m = mass(&input.mated);
    let m_nm = mass(&input.non_mated);
    let grid: Vec<f64> = (0..bins).map(|i| min + (i as f64 + 0.5) * width).collect();
    let local: Vec<f64> = m_m
        .iter()
        .zip(&m_nm)
        .map(|(&pm, &pnm)| local_d(pm, pnm, omega))
        .collect();
    let d_sys = local
        .iter()
        .zip(&m_m)
        .map(|(&d, &pm)| d * pm)
        .sum::<f64>()
        .clamp(0.0, 1.0);
    LinkabilityResult { d_sys, grid, local, omega }
}

/// Side-by-side linkability of the unprotected baseline and the naive and
/// strict parameter-selection policies on the same data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyComparison {
    pub baseline: LinkabilityResult,
    pub naive: LinkabilityResult,
    pub strict: LinkabilityResult,
}

pub fn compare_policies(
    dataset: &Dataset,
    naive_policy: &ParamPolicy,
    strict_policy: &ParamPolicy,
    templates_per_subject: usize,
    omega: f64,
) -> Result<PolicyComparison, UnlinkError> {
    let baseline = compute_d_sys(&baseline_link_scores(dataset)?, BandwidthPolicy::Silverman, omega)?;
    let naive_scores = collect_link_scores(dataset, naive_policy, templates_per_subject)?;
    let naive = compute_d_sys(&naive_scores, BandwidthPolicy::Silverman, omega)?;
    let strict_scores = collect_link_scores(dataset, strict_policy, templates_per_subject)?;
    let strict = compute_d_sys(&strict_scores, BandwidthPolicy::Silverman, omega)?;
    Ok(PolicyComparison { baseline, naive, strict })
}
