//! Cosine comparison, verification scoring for the normal and
//! stolen-secrets scenarios, closed-set identification with parameter
//! fan-out, and the accuracy metrics derived from score sets.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Dataset;
use crate::transform::{protect, PolyParams, ProtectedTemplate, TransformError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero-norm vector cannot be compared")]
    ZeroNorm,
    #[error("subject {0} has {1} samples, verification needs exactly 2 (reference + query)")]
    NeedTwoSamples(String, usize),
    #[error("no parameters registered for subject {0}")]
    MissingParams(String),
    #[error("score set has an empty {0} list")]
    EmptyScores(&'static str),
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("rank {rank} exceeds gallery size {gallery}")]
    RankExceedsGallery { rank: usize, gallery: usize },
    #[error("query subject {0} is not enrolled (closed-set protocol)")]
    NotEnrolled(String),
    #[error("fmr level {0} must lie in (0, 100]")]
    BadFmrLevel(f64),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// Evaluation scenario for verification scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Raw embeddings, no protection.
    Baseline,
    /// Normal operation: every subject uses their own secret parameters.
    Normal,
    /// Stolen coefficients and exponents: impostor queries are transformed
    /// with the claimed target's parameters.
    StolenParams,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Baseline => write!(f, "baseline"),
            Scenario::Normal => write!(f, "N"),
            Scenario::StolenParams => write!(f, "SCE"),
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Scenario::Baseline),
            "N" => Ok(Scenario::Normal),
            "SCE" => Ok(Scenario::StolenParams),
            other => Err(format!("unknown scenario `{other}` (expected baseline, N or SCE)")),
        }
    }
}

/// Mated and non-mated similarity scores for one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreSet {
    pub mated: Vec<f64>,
    pub non_mated: Vec<f64>,
    pub scenario: Scenario,
}

/// Cosine similarity in [-1, 1]; higher means more similar.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

fn reference_and_query(
    eval: &Dataset,
) -> Result<Vec<(&str, &[f64], &[f64])>, MetricError> {
    let mut out = Vec::new();
    for (subject, samples) in eval.by_subject() {
        if samples.len() != 2 {
            return Err(MetricError::NeedTwoSamples(subject.to_string(), samples.len()));
        }
        out.push((subject, samples[0].values.as_slice(), samples[1].values.as_slice()));
    }
    Ok(out)
}

/// Verification scoring over an evaluation set where every subject has one
/// reference and one query sample.
///
/// Mated pairs compare a subject's reference with their own query. Non-mated
/// pairs model every cross-subject claim: in the normal scenario the
/// impostor's query is protected with the impostor's own parameters (they do
/// not know the target's secret), in the stolen-secrets scenario with the
/// claimed target's parameters.
pub fn score_verification(
    eval: &Dataset,
    params: &BTreeMap<String, PolyParams>,
    scenario: Scenario,
) -> Result<ScoreSet, MetricError> {
    let subjects = reference_and_query(eval)?;
    let mut mated = Vec::with_capacity(subjects.len());
    let mut non_mated = Vec::with_capacity(subjects.len() * subjects.len().saturating_sub(1));

    match scenario {
        Scenario::Baseline => {
            for &(_, reference, query) in &subjects {
                mated.push(cosine_similarity(reference, query)?);
            }
            for &(target, reference, _) in &subjects {
                for &(claimant, _, query) in &subjects {
                    if claimant != target {
                        non_mated.push(cosine_similarity(reference, query)?);
                    }
                }
            }
        }
        Scenario::Normal | Scenario::StolenParams => {
            let param_of = |subject: &str| {
                params
                    .get(subject)
                    .ok_or_else(|| MetricError::MissingParams(subject.to_string()))
            };
            let mut protected_refs = Vec::with_capacity(subjects.len());
            let mut own_queries = Vec::with_capacity(subjects.len());
            for &(subject, reference, query) in &subjects {
                let p = param_of(subject)?;
                protected_refs.push(protect(reference, p)?);
                own_queries.push(protect(query, p)?);
            }
            for (r, q) in protected_refs.iter().zip(&own_queries) {
                mated.push(cosine_similarity(&r.values, &q.values)?);
            }
            // Impostor claims are independent; parallelize per target and
            // flatten in target order so the result is schedule-independent.
            let per_target: Vec<Vec<f64>> = subjects
                .par_iter()
                .enumerate()
                .map(|(t, &(target, _, _))| {
                    let mut scores = Vec::with_capacity(subjects.len() - 1);
                    for (c, &(claimant, _, query)) in subjects.iter().enumerate() {
                        if claimant == target {
                            continue;
                        }
                        let score = match scenario {
                            Scenario::Normal => cosine_similarity(
                                &protected_refs[t].values,
                                &own_queries[c].values,
                            )?,
                            Scenario::StolenParams => {
                                let stolen = protect(query, param_of(target)?)?;
                                cosine_similarity(&protected_refs[t].values, &stolen.values)?
                            }
                            Scenario::Baseline => unreachable!(),
                        };
                        scores.push(score);
                    }
                    Ok(scores)
                })
                .collect::<Result<_, MetricError>>()?;
            non_mated.extend(per_target.into_iter().flatten());
        }
    }
    Ok(ScoreSet { mated, non_mated, scenario })
}

/// Closed-set identification: the query is transformed under every enrolled
/// subject's parameters and compared against that subject's gallery entry.
/// Returns subjects sorted by descending similarity, ties broken by
/// ascending subject id.
pub fn identify(
    query: &[f64],
    gallery: &[(String, ProtectedTemplate)],
    params_store: &BTreeMap<String, PolyParams>,
) -> Result<Vec<(String, f64)>, MetricError> {
    if gallery.is_empty() {
        return Err(MetricError::EmptyGallery);
    }
    let mut scored = Vec::with_capacity(gallery.len());
    for (subject, template) in gallery {
        let p = params_store
            .get(subject)
            .ok_or_else(|| MetricError::MissingParams(subject.clone()))?;
        let protected_query = protect(query, p)?;
        scored.push((subject.clone(), cosine_similarity(&protected_query.values, &template.values)?));
    }
    sort_ranked(&mut scored);
    Ok(scored)
}

/// Baseline identification over raw embeddings, same ranking contract.
pub fn identify_baseline(
    query: &[f64],
    gallery: &[(String, Vec<f64>)],
) -> Result<Vec<(String, f64)>, MetricError> {
    if gallery.is_empty() {
        return Err(MetricError::EmptyGallery);
    }
    let mut scored = Vec::with_capacity(gallery.len());
    for (subject, reference) in gallery {
        scored.push((subject.clone(), cosine_similarity(query, reference)?));
    }
    sort_ranked(&mut scored);
    Ok(scored)
}

fn sort_ranked(scored: &mut [(String, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// Equal error rate operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub eer_percent: f64,
    pub threshold: f64,
}

/// Threshold sweep over all observed scores; the reported rate is
/// (FMR + FNMR) / 2 at the sweep point minimizing |FMR - FNMR|.
pub fn compute_eer(scores: &ScoreSet) -> Result<EerPoint, MetricError> {
    if scores.mated.is_empty() {
        return Err(MetricError::EmptyScores("mated"));
    }
    if scores.non_mated.is_empty() {
        return Err(MetricError::EmptyScores("non-mated"));
    }
    let mated = sorted(&scores.mated);
    let non_mated = sorted(&scores.non_mated);
    let mut candidates: Vec<f64> = Vec::with_capacity(mated.len() + non_mated.len() + 1);
    candidates.extend_from_slice(&mated);
    candidates.extend_from_slice(&non_mated);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    // Sentinel above every score: reject-all operating point.
    candidates.push(candidates[candidates.len() - 1] + 1.0);

    let mut best = EerPoint { eer_percent: f64::INFINITY, threshold: f64::NAN };
    let mut best_gap = f64::INFINITY;
    for &t in &candidates {
        let fmr = frac_at_least(&non_mated, t);
        let fnmr = frac_below(&mated, t);
        let gap = (fmr - fnmr).abs();
        if gap < best_gap {
            best_gap = gap;
            best = EerPoint { eer_percent: (fmr + fnmr) / 2.0 * 100.0, threshold: t };
        }
    }
    Ok(best)
}

/// One operating point of the true-match-rate table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TmrAtFmr {
    pub fmr_percent: f64,
    pub tmr_percent: f64,
    pub threshold: f64,
    /// False when the non-mated list is too small to resolve this level
    /// (needs at least 100/level scores).
    pub reliable: bool,
}

/// For each level, the threshold is the smallest observed score whose
/// empirical false-match rate does not exceed the level.
pub fn compute_tmr_at_fmr(
    scores: &ScoreSet,
    fmr_levels_percent: &[f64],
) -> Result<Vec<TmrAtFmr>, MetricError> {
    if scores.mated.is_empty() {
        return Err(MetricError::EmptyScores("mated"));
    }
    if scores.non_mated.is_empty() {
        return Err(MetricError::EmptyScores("non-mated"));
    }
    for &level in fmr_levels_percent {
        if !(level > 0.0 && level <= 100.0) {
            return Err(MetricError::BadFmrLevel(level));
        }
    }
    let mated = sorted(&scores.mated);
    let non_mated = sorted(&scores.non_mated);
    let mut candidates: Vec<f64> = Vec::with_capacity(mated.len() + non_mated.len() + 1);
    candidates.extend_from_slice(&mated);
    candidates.extend_from_slice(&non_mated);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.push(candidates[candidates.len() - 1] + 1.0);

    let mut out = Vec::with_capacity(fmr_levels_percent.len());
    for &level in fmr_levels_percent {
        let target = level / 100.0;
        // FMR is non-increasing in the threshold, so the first candidate
        // meeting the budget is the smallest.
        let idx = candidates.partition_point(|&t| frac_at_least(&non_mated, t) > target);
        let threshold = candidates[idx];
        let tmr_percent = frac_at_least(&mated, threshold) * 100.0;
        out.push(TmrAtFmr {
            fmr_percent: level,
            tmr_percent,
            threshold,
            reliable: non_mated.len() as f64 >= 100.0 / level,
        });
    }
    Ok(out)
}

/// True-positive identification rates at the requested ranks.
///
/// `rankings` pairs each query's true subject with the ranked candidate list
/// returned by identification.
pub fn compute_tpir(
    rankings: &[(String, Vec<(String, f64)>)],
    ranks: &[usize],
) -> Result<BTreeMap<usize, f64>, MetricError> {
    if rankings.is_empty() {
        return Err(MetricError::EmptyScores("rankings"));
    }
    let gallery = rankings[0].1.len();
    for &n in ranks {
        if n == 0 || n > gallery {
            return Err(MetricError::RankExceedsGallery { rank: n, gallery });
        }
    }
    let mut positions = Vec::with_capacity(rankings.len());
    for (truth, ranked) in rankings {
        let pos = ranked
            .iter()
            .position(|(s, _)| s == truth)
            .ok_or_else(|| MetricError::NotEnrolled(truth.clone()))?;
        positions.push(pos + 1);
    }
    let total = positions.len() as f64;
    Ok(ranks
        .iter()
        .map(|&n| {
            let hits = positions.iter().filter(|&&p| p <= n).count() as f64;
            (n, hits / total * 100.0)
        })
        .collect())
}

/// Per-operating-point accuracy summary for one scenario and overlap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scenario: Scenario,
    pub overlap: Option<usize>,
    pub tmr_at_fmr: Vec<TmrAtFmr>,
    pub eer: Option<EerPoint>,
    pub tpir: BTreeMap<usize, f64>,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn frac_at_least(sorted_scores: &[f64], t: f64) -> f64 {
    let below = sorted_scores.partition_point(|&s| s < t);
    (sorted_scores.len() - below) as f64 / sorted_scores.len() as f64
}

fn frac_below(sorted_scores: &[f64], t: f64) -> f64 {
    sorted_scores.partition_point(|&s| s < t) as f64 / sorted_scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{generate_synthetic, SyntheticSpec};
    use crate::params::{assign_params, ParamPolicy};

    #[test]
    fn cosine_basics() {
        let x = vec![0.3, -0.7, 2.0];
        assert!((cosine_similarity(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(MetricError::ZeroNorm)
        ));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(MetricError::LengthMismatch(1, 2))
        ));
    }

    fn tiny_setup(noise: f64, subjects: usize) -> (Dataset, BTreeMap<String, PolyParams>) {
        let ds = generate_synthetic(&SyntheticSpec::new(subjects, 16, noise, 5))
        .unwrap();
        let policy = ParamPolicy { m: 5, overlap: 1, seed: 3, ..ParamPolicy::default() };
        let params = assign_params(&ds, &policy).unwrap();
        (ds, params)
    }

    #[test]
    fn zero_noise_normal_scenario_has_unit_mated_scores() {
        let (ds, params) = tiny_setup(0.0, 6);
        let scores = score_verification(&ds, &params, Scenario::Normal).unwrap();
        assert!(scores.mated.iter().all(|&s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn verification_score_counts_are_combinatorial() {
        let (ds, params) = tiny_setup(0.1, 20);
        for scenario in [Scenario::Baseline, Scenario::Normal, Scenario::StolenParams] {
            let scores = score_verification(&ds, &params, scenario).unwrap();
            assert_eq!(scores.mated.len(), 20);
            assert_eq!(scores.non_mated.len(), 20 * 19);
        }
    }

    #[test]
    fn stolen_params_self_claim_equals_mated_comparison() {
        let (ds, params) = tiny_setup(0.1, 4);
        let by_subject = ds.by_subject();
        let (subject, samples) = by_subject.iter().next().unwrap();
        let p = &params[*subject];
        let reference = protect(&samples[0].values, p).unwrap();
        let stolen_self = protect(&samples[1].values, p).unwrap();
        let score = cosine_similarity(&reference.values, &stolen_self.values).unwrap();
        let mated = score_verification(&ds, &params, Scenario::Normal).unwrap().mated[0];
        assert!((score - mated).abs() < 1e-15);
    }

    #[test]
    fn eer_is_zero_for_separated_and_fifty_for_identical() {
        let separated = ScoreSet {
            mated: vec![0.9, 0.95, 0.99],
            non_mated: vec![0.1, 0.2, 0.3],
            scenario: Scenario::Baseline,
        };
        assert_eq!(compute_eer(&separated).unwrap().eer_percent, 0.0);
        let identical = ScoreSet {
            mated: vec![0.5; 40],
            non_mated: vec![0.5; 40],
            scenario: Scenario::Baseline,
        };
        assert_eq!(compute_eer(&identical).unwrap().eer_percent, 50.0);
    }

    #[test]
    fn eer_matches_analytic_crossover_of_overlapping_uniforms() {
        // Mated ~ U[0.3, 1.0], non-mated ~ U[0.0, 0.5], realized as exact
        // mid-point quantile grids so the empirical CDFs track the analytic
        // ones to within 1/N. Crossover: (0.5-t)/0.5 = (t-0.3)/0.7 at
        // t = 5/12, giving EER = 1/6.
        let n = 2100;
        let mated: Vec<f64> = (0..n).map(|i| 0.3 + (i as f64 + 0.5) / n as f64 * 0.7).collect();
        let non_mated: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64 * 0.5).collect();
        let eer = compute_eer(&ScoreSet { mated, non_mated, scenario: Scenario::Baseline })
            .unwrap()
            .eer_percent;
        let analytic = 100.0 / 6.0;
        assert!(
            (eer - analytic).abs() <= 100.0 / n as f64,
            "eer {eer} vs analytic {analytic}"
        );
    }

    #[test]
    fn tmr_at_full_fmr_accepts_everything() {
        let scores = ScoreSet {
            mated: vec![0.2, 0.4, 0.9],
            non_mated: vec![0.1, 0.5, 0.8],
            scenario: Scenario::Baseline,
        };
        let report = compute_tmr_at_fmr(&scores, &[100.0]).unwrap();
        assert_eq!(report[0].tmr_percent, 100.0);
    }

    #[test]
    fn tmr_is_full_at_all_levels_when_separated() {
        let scores = ScoreSet {
            mated: vec![0.8, 0.85, 0.9, 0.95],
            non_mated: vec![0.1, 0.2, 0.3, 0.4],
            scenario: Scenario::Baseline,
        };
        for point in compute_tmr_at_fmr(&scores, &[0.1, 1.0, 10.0]).unwrap() {
            assert_eq!(point.tmr_percent, 100.0);
        }
    }

    #[test]
    fn tmr_threshold_matches_brute_force_scan() {
        // Independent route: scan every observed score ascending and take
        // the first with direct-count FMR within budget.
        let scores = ScoreSet {
            mated: (0..400).map(|i| 0.3 + 0.6 * (i as f64 / 399.0)).collect(),
            non_mated: (0..900).map(|i| 0.7 * (i as f64 / 899.0)).collect(),
            scenario: Scenario::Baseline,
        };
        for &level in &[0.5, 2.0, 10.0, 50.0] {
            let got = compute_tmr_at_fmr(&scores, &[level]).unwrap()[0];
            let mut pooled: Vec<f64> =
                scores.mated.iter().chain(&scores.non_mated).copied().collect();
            pooled.sort_by(f64::total_cmp);
            pooled.dedup();
            pooled.push(pooled[pooled.len() - 1] + 1.0);
            let expected_t = pooled
                .iter()
                .copied()
                .find(|&t| {
                    let fm = scores.non_mated.iter().filter(|&&s| s >= t).count() as f64
                        / scores.non_mated.len() as f64;
                    fm <= level / 100.0
                })
                .unwrap();
            assert_eq!(got.threshold, expected_t);
            let expected_tmr = scores.mated.iter().filter(|&&s| s >= expected_t).count() as f64
                / scores.mated.len() as f64
                * 100.0;
            assert_eq!(got.tmr_percent, expected_tmr);
        }
    }

    #[test]
    fn tmr_reliability_flag_tracks_sample_count() {
        let scores = ScoreSet {
            mated: vec![0.9; 10],
            non_mated: (0..500).map(|i| i as f64 / 500.0).collect(),
            scenario: Scenario::Baseline,
        };
        let report = compute_tmr_at_fmr(&scores, &[0.1, 1.0]).unwrap();
        assert!(!report[0].reliable); // needs 1000 non-mated
        assert!(report[1].reliable); // needs 100
    }

    #[test]
    fn identification_singleton_and_exact_match() {
        let (ds, params) = tiny_setup(0.0, 4);
        let by_subject = ds.by_subject();
        let gallery: Vec<(String, ProtectedTemplate)> = by_subject
            .iter()
            .map(|(s, samples)| {
                (s.to_string(), protect(&samples[0].values, &params[*s]).unwrap())
            })
            .collect();
        let (first_subject, samples) = by_subject.iter().next().unwrap();
        let ranked = identify(&samples[1].values, &gallery[..1], &params).unwrap();
        assert_eq!(ranked.len(), 1);
        assert_eq!(ranked[0].0, first_subject.to_string());
        let ranked = identify(&samples[1].values, &gallery, &params).unwrap();
        assert_eq!(ranked[0].0, first_subject.to_string());
        assert!((ranked[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identification_matches_exhaustive_recomputation() {
        let (ds, params) = tiny_setup(0.2, 50);
        let by_subject = ds.by_subject();
        let gallery: Vec<(String, ProtectedTemplate)> = by_subject
            .iter()
            .map(|(s, samples)| {
                (s.to_string(), protect(&samples[0].values, &params[*s]).unwrap())
            })
            .collect();
        for samples in by_subject.values() {
            let query = &samples[1].values;
            let ranked = identify(query, &gallery, &params).unwrap();
            let mut expected: Vec<(String, f64)> = gallery
                .iter()
                .map(|(s, t)| {
                    let pq = protect(query, &params[s]).unwrap();
                    (s.clone(), cosine_similarity(&pq.values, &t.values).unwrap())
                })
                .collect();
            expected.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            assert_eq!(ranked, expected);
        }
    }

    #[test]
    fn tpir_ranks_and_errors() {
        let rankings = vec![
            ("a".to_string(), vec![("a".into(), 0.9), ("b".into(), 0.5), ("c".into(), 0.1)]),
            ("b".to_string(), vec![("c".into(), 0.8), ("b".into(), 0.7), ("a".into(), 0.2)]),
            ("c".to_string(), vec![("a".into(), 0.9), ("b".into(), 0.5), ("c".into(), 0.4)]),
        ];
        let tpir = compute_tpir(&rankings, &[1, 2, 3]).unwrap();
        assert!((tpir[&1] - 100.0 / 3.0).abs() < 1e-9);
        assert!((tpir[&2] - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(tpir[&3], 100.0);
        assert!(matches!(
            compute_tpir(&rankings, &[4]),
            Err(MetricError::RankExceedsGallery { rank: 4, gallery: 3 })
        ));
    }

    #[test]
    fn tpir_is_monotone_in_rank() {
        let (ds, params) = tiny_setup(0.25, 30);
        let by_subject = ds.by_subject();
        let gallery: Vec<(String, ProtectedTemplate)> = by_subject
            .iter()
            .map(|(s, samples)| {
                (s.to_string(), protect(&samples[0].values, &params[*s]).unwrap())
            })
            .collect();
        let rankings: Vec<(String, Vec<(String, f64)>)> = by_subject
            .iter()
            .map(|(s, samples)| {
                (s.to_string(), identify(&samples[1].values, &gallery, &params).unwrap())
            })
            .collect();
        let ranks: Vec<usize> = (1..=30).collect();
        let tpir = compute_tpir(&rankings, &ranks).unwrap();
        for w in ranks.windows(2) {
            assert!(tpir[&w[0]] <= tpir[&w[1]]);
        }
        assert_eq!(tpir[&30], 100.0);
    }
}
