//! The polynomial protection transform: maps an n-dimensional embedding to a
//! k-dimensional protected template through subject-specific multivariate
//! polynomials over sliding windows of the input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("window size m must be at least 1, got {0}")]
    ZeroWindow(usize),
    #[error("overlap {overlap} out of range for window size {m} (need overlap <= m-1)")]
    OverlapTooLarge { m: usize, overlap: usize },
    #[error("expected {expected} coefficients, got {got}")]
    CoefficientCount { expected: usize, got: usize },
    #[error("coefficient at position {0} is zero")]
    ZeroCoefficient(usize),
    #[error("duplicate coefficient {0}")]
    DuplicateCoefficient(i64),
    #[error("exponents {0:?} are not a permutation of 1..={1}")]
    ExponentsNotPermutation(Vec<u32>, usize),
    #[error("input dimension {n} is smaller than window size {m}")]
    InputTooShort { n: usize, m: usize },
    #[error("input element {0} is not finite")]
    NonFiniteInput(usize),
    #[error("protected element {0} is not finite")]
    NonFiniteOutput(usize),
}

/// Subject-specific secret: window size `m`, window overlap, `m` unique
/// non-zero integer coefficients and a permutation of `1..=m` as exponents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyParams {
    m: usize,
    overlap: usize,
    coefficients: Vec<i64>,
    exponents: Vec<u32>,
    params_id: String,
}

impl PolyParams {
    pub fn new(
        m: usize,
        overlap: usize,
        coefficients: Vec<i64>,
        exponents: Vec<u32>,
        params_id: impl Into<String>,
    ) -> Result<Self, TransformError> {
        if m == 0 {
            return Err(TransformError::ZeroWindow(m));
        }
        if overlap >= m {
            return Err(TransformError::OverlapTooLarge { m, overlap });
        }
        if coefficients.len() != m {
            return Err(TransformError::CoefficientCount {
                expected: m,
                got: coefficients.len(),
            });
        }
        for (i, &c) in coefficients.iter().enumerate() {
            if c == 0 {
                return Err(TransformError::ZeroCoefficient(i));
            }
            if coefficients[..i].contains(&c) {
                return Err(TransformError::DuplicateCoefficient(c));
            }
        }
        let mut seen = vec![false; m];
        let is_perm = exponents.len() == m
            && exponents.iter().all(|&e| {
                let ok = e >= 1 && (e as usize) <= m && !seen[e as usize - 1];
                if ok {
                    seen[e as usize - 1] = true;
                }
                ok
            });
        if !is_perm {
            return Err(TransformError::ExponentsNotPermutation(exponents, m));
        }
        Ok(Self {
            m,
            overlap,
            coefficients,
            exponents,
            params_id: params_id.into(),
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    /// Window stride between consecutive element sets.
    pub fn stride(&self) -> usize {
        self.m - self.overlap
    }

    pub fn coefficients(&self) -> &[i64] {
        &self.coefficients
    }

    pub fn exponents(&self) -> &[u32] {
        &self.exponents
    }

    pub fn params_id(&self) -> &str {
        &self.params_id
    }

    /// Same secret material under a different identifier.
    pub fn with_id(&self, params_id: impl Into<String>) -> Self {
        Self {
            params_id: params_id.into(),
            ..self.clone()
        }
    }
}

/// Protected template: `k` polynomial outputs bound to the params that
/// produced them and to the source embedding dimensionality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectedTemplate {
    pub values: Vec<f64>,
    pub params_id: String,
    pub source_dim: usize,
}

/// Number of protected elements for an `n`-dimensional input: stride-(m-o)
/// windows of size m until every input element is covered, the last window
/// zero-padded. Closed form: ceil((n-m)/(m-o)) + 1.
pub fn protected_dim(n: usize, m: usize, overlap: usize) -> Result<usize, TransformError> {
    if m == 0 {
        return Err(TransformError::ZeroWindow(m));
    }
    if overlap >= m {
        return Err(TransformError::OverlapTooLarge { m, overlap });
    }
    if n < m {
        return Err(TransformError::InputTooShort { n, m });
    }
    let stride = m - overlap;
    Ok((n - m).div_ceil(stride) + 1)
}

/// `base^exp` by left-associated repeated multiplication. Exact sign for
/// negative bases, bit-reproducible, no transcendental rounding.
pub fn integer_power(base: f64, exp: u32) -> f64 {
    debug_assert!(exp >= 1);
    let mut acc = base;
    for _ in 1..exp {
        acc *= base;
    }
    acc
}

/// Polynomial over one zero-padded window of `values` starting at `start`.
pub(crate) fn eval_window(values: &[f64], start: usize, params: &PolyParams) -> f64 {
    let n = values.len();
    let mut acc = 0.0;
    for i in 0..params.m {
        let v = if start + i < n { values[start + i] } else { 0.0 };
        acc += params.coefficients[i] as f64 * integer_power(v, params.exponents[i]);
    }
    acc
}

/// Apply the polynomial transform to `values` under `params`.
///
/// Element j (0-based) of the output is sum_i c_i * w_i^{e_i} where w is the
/// window of m consecutive inputs starting at j*(m-o), zero-padded past the
/// end of the input.
pub fn protect(values: &[f64], params: &PolyParams) -> Result<ProtectedTemplate, TransformError> {
    let n = values.len();
    let m = params.m;
    if n < m {
        return Err(TransformError::InputTooShort { n, m });
    }
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(TransformError::NonFiniteInput(bad));
    }
    let stride = params.stride();
    let k = (n - m).div_ceil(stride) + 1;
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let start = j * stride;
        debug_assert!(start < n, "window must contain at least one real element");
        let acc = eval_window(values, start, params);
        if !acc.is_finite() {
            return Err(TransformError::NonFiniteOutput(j));
        }
        out.push(acc);
    }
    Ok(ProtectedTemplate {
        values: out,
        params_id: params.params_id.clone(),
        source_dim: n,
    })
}
