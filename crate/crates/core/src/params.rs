//! Subject-specific secret generation: naive random selection, the strict
//! linkability-aware selection, per-dataset assignment with exponent
//! uniqueness, and the plaintext parameter store format.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Dataset;
use crate::metrics::{cosine_similarity, MetricError};
use crate::transform::{protect, PolyParams, ProtectedTemplate, TransformError};

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("coefficient range [{lo}, {hi}] holds {available} non-zero integers, policy needs at least {need}")]
    CoeffRangeTooSmall { lo: i64, hi: i64, available: usize, need: usize },
    #[error("strict score range [{lo}, {hi}] is not a sub-interval of the comparator range [-1, 1]")]
    BadScoreRange { lo: f64, hi: f64 },
    #[error("{subjects} subjects exceed the {capacity} distinct exponent permutations available at m={m}")]
    CapacityExceeded { subjects: usize, capacity: u128, m: usize },
    #[error("exhausted {retries} retries searching for strict parameters; last out-of-range score: {last_score:?}")]
    RetriesExhausted { retries: usize, last_score: Option<f64> },
    #[error("could not find an unused exponent permutation after {0} attempts")]
    ExponentSpaceExhausted(usize),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("params store line {line}: {msg}")]
    ParseStore { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    Naive,
    Strict,
}

/// Closed interval on the similarity-score axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub lo: f64,
    pub hi: f64,
}

impl ScoreRange {
    /// The comparator's full range; makes the strict constraint vacuous.
    pub fn full() -> Self {
        Self { lo: -1.0, hi: 1.0 }
    }

    pub fn contains(&self, s: f64) -> bool {
        s >= self.lo && s <= self.hi
    }
}

/// Policy governing secret-parameter generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPolicy {
    pub m: usize,
    pub overlap: usize,
    pub coeff_lo: i64,
    pub coeff_hi: i64,
    pub selection: Selection,
    pub strict_score_range: ScoreRange,
    pub max_retries: usize,
    pub seed: u64,
    pub enforce_unique_exponents: bool,
}

impl Default for ParamPolicy {
    fn default() -> Self {
        Self {
            m: 7,
            overlap: 0,
            coeff_lo: -100,
            coeff_hi: 100,
            selection: Selection::Naive,
            strict_score_range: ScoreRange::full(),
            max_retries: 1000,
            seed: 0,
            enforce_unique_exponents: true,
        }
    }
}

impl ParamPolicy {
    fn non_zero_ints_in_range(&self) -> usize {
        if self.coeff_hi < self.coeff_lo {
            return 0;
        }
        let span = (self.coeff_hi - self.coeff_lo + 1) as usize;
        if self.coeff_lo <= 0 && self.coeff_hi >= 0 {
            span - 1
        } else {
            span
        }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        let available = self.non_zero_ints_in_range();
        // The range must span at least 2m non-zero integers so that m unique
        // values exist with both signs available.
        if available < 2 * self.m {
            return Err(ParamError::CoeffRangeTooSmall {
                lo: self.coeff_lo,
                hi: self.coeff_hi,
                available,
                need: 2 * self.m,
            });
        }
        let r = self.strict_score_range;
        if !(r.lo <= r.hi && r.lo >= -1.0 && r.hi <= 1.0) {
            return Err(ParamError::BadScoreRange { lo: r.lo, hi: r.hi });
        }
        Ok(())
    }

    /// Number of distinct exponent permutations (m!), saturating.
    pub fn exponent_capacity(&self) -> u128 {
        let mut acc: u128 = 1;
        for i in 2..=self.m as u128 {
            acc = acc.saturating_mul(i);
        }
        acc
    }
}

fn draw_coefficients(policy: &ParamPolicy, rng: &mut ChaCha12Rng) -> Vec<i64> {
    let mut coeffs: Vec<i64> = Vec::with_capacity(policy.m);
    while coeffs.len() < policy.m {
        let c = rng.random_range(policy.coeff_lo..=policy.coeff_hi);
        if c != 0 && !coeffs.contains(&c) {
            coeffs.push(c);
        }
    }
    coeffs
}

fn draw_exponents(m: usize, rng: &mut ChaCha12Rng) -> Vec<u32> {
    let mut exps: Vec<u32> = (1..=m as u32).collect();
    for i in (1..m).rev() {
        let j = rng.random_range(0..=i);
        exps.swap(i, j);
    }
    exps
}

/// Uniform draw: m unique non-zero coefficients from the policy range and a
/// random permutation of 1..=m as exponents.
pub fn generate_naive(
    policy: &ParamPolicy,
    params_id: impl Into<String>,
    rng: &mut ChaCha12Rng,
) -> Result<PolyParams, ParamError> {
    policy.validate()?;
    let coefficients = draw_coefficients(policy, rng);
    let exponents = draw_exponents(policy.m, rng);
    Ok(PolyParams::new(policy.m, policy.overlap, coefficients, exponents, params_id)?)
}

/// Redraws naive parameters until the protected template of `values` under
/// the candidate scores inside the policy's range against the templates
/// under every existing parameter set.
pub fn generate_strict(
    policy: &ParamPolicy,
    values: &[f64],
    existing: &[PolyParams],
    params_id: impl Into<String>,
    rng: &mut ChaCha12Rng,
) -> Result<PolyParams, ParamError> {
    policy.validate()?;
    let params_id = params_id.into();
    let existing_templates: Vec<ProtectedTemplate> = existing
        .iter()
        .map(|q| protect(values, q))
        .collect::<Result<_, _>>()?;
    let range = policy.strict_score_range;
    let mut last_score = None;
    for _ in 0..policy.max_retries.max(1) {
        let candidate = generate_naive(policy, params_id.clone(), rng)?;
        let template = protect(values, &candidate)?;
        let mut ok = true;
        for other in &existing_templates {
            let score = cosine_similarity(&template.values, &other.values)?;
            if !range.contains(score) {
                last_score = Some(score);
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(candidate);
        }
    }
    Err(ParamError::RetriesExhausted { retries: policy.max_retries.max(1), last_score })
}

/// One parameter set per subject, drawn naively in sorted subject order from
/// a generator seeded by the policy. With exponent uniqueness on, subjects
/// receive pairwise-distinct permutations and the subject count must not
/// exceed m!.
pub fn assign_params(
    dataset: &Dataset,
    policy: &ParamPolicy,
) -> Result<BTreeMap<String, PolyParams>, ParamError> {
    policy.validate()?;
    let subjects = dataset.subjects();
    if policy.enforce_unique_exponents {
        let capacity = policy.exponent_capacity();
        if subjects.len() as u128 > capacity {
            return Err(ParamError::CapacityExceeded {
                subjects: subjects.len(),
                capacity,
                m: policy.m,
            });
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(policy.seed);
    let mut used_exponents: BTreeSet<Vec<u32>> = BTreeSet::new();
    let mut out = BTreeMap::new();
    const EXPONENT_ATTEMPTS: usize = 1_000_000;
    for subject in subjects {
        let coefficients = draw_coefficients(policy, &mut rng);
        let exponents = if policy.enforce_unique_exponents {
            let mut found = None;
            for _ in 0..EXPONENT_ATTEMPTS {
                let e = draw_exponents(policy.m, &mut rng);
                if used_exponents.insert(e.clone()) {
                    found = Some(e);
                    break;
                }
            }
            found.ok_or(ParamError::ExponentSpaceExhausted(EXPONENT_ATTEMPTS))?
        } else {
            draw_exponents(policy.m, &mut rng)
        };
        let params =
            PolyParams::new(policy.m, policy.overlap, coefficients, exponents, subject)?;
        out.insert(subject.to_string(), params);
    }
    Ok(out)
}

/// Nearest-rank percentile of a score list; `q` in (0, 1].
pub fn score_percentile(scores: &[f64], q: f64) -> Option<f64> {
    if scores.is_empty() || !(q > 0.0 && q <= 1.0) {
        return None;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    Some(sorted[idx])
}

/// Writes the secret parameter store: one tab-separated record per subject.
/// The file is secret material under a full-disclosure threat model and must
/// be handled accordingly by callers.
pub fn save_params_store(
    store: &BTreeMap<String, PolyParams>,
    path: impl AsRef<Path>,
) -> Result<(), ParamError> {
    let path = path.as_ref();
    let io_err = |source| ParamError::Io { path: path.display().to_string(), source };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for (subject, p) in store {
        let c: Vec<String> = p.coefficients().iter().map(|v| v.to_string()).collect();
        let e: Vec<String> = p.exponents().iter().map(|v| v.to_string()).collect();
        writeln!(
            w,
            "{subject}\t{}\t{}\tC={}\tE={}",
            p.m(),
            p.overlap(),
            c.join(","),
            e.join(",")
        )
        .map_err(io_err)?;
    }
    Ok(())
}

pub fn load_params_store(path: impl AsRef<Path>) -> Result<BTreeMap<String, PolyParams>, ParamError> {
    let path = path.as_ref();
    let io_err = |source| ParamError::Io { path: path.display().to_string(), source };
    let file = File::open(path).map_err(io_err)?;
    let mut out = BTreeMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(ParamError::ParseStore {
                line: lineno,
                msg: format!("expected 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_err = |msg: String| ParamError::ParseStore { line: lineno, msg };
        let subject = fields[0].to_string();
        let m: usize = fields[1].parse().map_err(|_| parse_err("bad m".into()))?;
        let overlap: usize = fields[2].parse().map_err(|_| parse_err("bad overlap".into()))?;
        let coeffs = fields[3]
            .strip_prefix("C=")
            .ok_or_else(|| parse_err("missing C= field".into()))?
            .split(',')
            .map(|t| t.parse::<i64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| parse_err(format!("bad coefficient: {e}")))?;
        let exps = fields[4]
            .strip_prefix("E=")
            .ok_or_else(|| parse_err("missing E= field".into()))?
            .split(',')
            .map(|t| t.parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| parse_err(format!("bad exponent: {e}")))?;
        let params = PolyParams::new(m, overlap, coeffs, exps, subject.clone())?;
        if out.insert(subject.clone(), params).is_some() {
            return Err(parse_err(format!("duplicate subject {subject}")));
        }
    }
    Ok(out)
}
