//! Dataset model, text/binary embedding file ingestion, deterministic
//! synthetic generation, and subject-disjoint dev/eval splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const BINARY_MAGIC: &[u8; 8] = b"PSEMB1\0\0";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: expected `dim=<n>`, got `{0}`")]
    MalformedHeader(String),
    #[error("row {row}: expected {expected} values, got {got}")]
    RowLength { row: usize, expected: usize, got: usize },
    #[error("row {row}: malformed row (need subject, sample and values separated by tabs)")]
    MalformedRow { row: usize },
    #[error("row {row}: value {col} is not a finite number")]
    NonFiniteValue { row: usize, col: usize },
    #[error("row {row}: cannot parse value `{text}`")]
    BadNumber { row: usize, text: String },
    #[error("duplicate (subject, sample) pair ({0}, {1})")]
    DuplicateSample(String, String),
    #[error("dataset is empty")]
    Empty,
    #[error("embedding dimension must be at least 1")]
    ZeroDim,
    #[error("synthetic spec needs at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("intra-class noise must be non-negative and finite, got {0}")]
    BadNoise(f64),
    #[error("split fraction {fraction} leaves the {side} side empty")]
    EmptySplitSide { fraction: f64, side: &'static str },
    #[error("need at least 2 subjects to split, got {0}")]
    NotEnoughSubjectsToSplit(usize),
    #[error("bad binary file: {0}")]
    BadBinary(&'static str),
}

/// One labelled feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub subject_id: String,
    pub sample_id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Dev,
    Eval,
    All,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitTag::Dev => write!(f, "dev"),
            SplitTag::Eval => write!(f, "eval"),
            SplitTag::All => write!(f, "all"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Text,
    Binary,
}

/// A validated collection of embeddings sharing one dimensionality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    embeddings: Vec<Embedding>,
    dim: usize,
    split_tag: SplitTag,
}

impl Dataset {
    /// Validates dimension consistency, finiteness and (subject, sample)
    /// uniqueness.
    pub fn new(embeddings: Vec<Embedding>, split_tag: SplitTag) -> Result<Self, DatasetError> {
        let dim = embeddings.first().map(|e| e.values.len()).ok_or(DatasetError::Empty)?;
        if dim == 0 {
            return Err(DatasetError::ZeroDim);
        }
        let mut seen = BTreeSet::new();
        for (row, e) in embeddings.iter().enumerate() {
            let row = row + 1;
            if e.values.len() != dim {
                return Err(DatasetError::RowLength {
                    row,
                    expected: dim,
                    got: e.values.len(),
                });
            }
            if let Some(col) = e.values.iter().position(|v| !v.is_finite()) {
                return Err(DatasetError::NonFiniteValue { row, col: col + 1 });
            }
            if !seen.insert((e.subject_id.clone(), e.sample_id.clone())) {
                return Err(DatasetError::DuplicateSample(
                    e.subject_id.clone(),
                    e.sample_id.clone(),
                ));
            }
        }
        Ok(Self { embeddings, dim, split_tag })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split_tag
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.embeddings.iter().map(|e| e.subject_id.as_str()).collect();
        set.into_iter().collect()
    }

    /// Samples of one subject, sorted by sample id.
    pub fn samples_of(&self, subject_id: &str) -> Vec<&Embedding> {
        let mut v: Vec<&Embedding> = self
            .embeddings
            .iter()
            .filter(|e| e.subject_id == subject_id)
            .collect();
        v.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        v
    }

    /// Subject -> sorted samples, for protocol code that walks all subjects.
    pub fn by_subject(&self) -> BTreeMap<&str, Vec<&Embedding>> {
        let mut map: BTreeMap<&str, Vec<&Embedding>> = BTreeMap::new();
        for e in &self.embeddings {
            map.entry(e.subject_id.as_str()).or_default().push(e);
        }
        for v in map.values_mut() {
            v.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        }
        map
    }

    /// Per-dimension mean over all embeddings.
    pub fn per_dim_mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for e in &self.embeddings {
            for (a, v) in acc.iter_mut().zip(&e.values) {
                *a += v;
            }
        }
        let n = self.embeddings.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Per-dimension median over all embeddings.
    pub fn per_dim_median(&self) -> Vec<f64> {
        let n = self.embeddings.len();
        let mut out = Vec::with_capacity(self.dim);
        let mut col = vec![0.0; n];
        for d in 0..self.dim {
            for (slot, e) in col.iter_mut().zip(&self.embeddings) {
                *slot = e.values[d];
            }
            col.sort_by(|a, b| a.total_cmp(b));
            let mid = n / 2;
            out.push(if n % 2 == 1 { col[mid] } else { (col[mid - 1] + col[mid]) / 2.0 });
        }
        out
    }

}

/// Deterministic synthetic dataset: per subject one unit-norm identity
/// center and two noisy re-normalized samples of it.
///
/// Centers mimic the geometry of cosine-trained extractor embeddings: they
/// sit on a cone around one shared direction (cross-subject scores
/// concentrate well above zero) and their identity-specific part lives in a
/// low-rank subspace (`identity_dims`), which widens the cross-subject score
/// distribution so hard impostor pairs exist at low sample noise.
/// `shared_component` 0 with `identity_dims` >= dim gives fully isotropic
/// centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub dim: usize,
    pub intra_class_noise: f64,
    pub seed: u64,
    #[serde(default = "default_shared_component")]
    pub shared_component: f64,
    #[serde(default = "default_identity_dims")]
    pub identity_dims: usize,
}

pub const DEFAULT_SHARED_COMPONENT: f64 = 0.8;
pub const DEFAULT_IDENTITY_DIMS: usize = 32;

fn default_shared_component() -> f64 {
    DEFAULT_SHARED_COMPONENT
}

fn default_identity_dims() -> usize {
    DEFAULT_IDENTITY_DIMS
}

impl SyntheticSpec {
    pub fn new(n_subjects: usize, dim: usize, intra_class_noise: f64, seed: u64) -> Self {
        Self {
            n_subjects,
            dim,
            intra_class_noise,
            seed,
            shared_component: DEFAULT_SHARED_COMPONENT,
            identity_dims: DEFAULT_IDENTITY_DIMS,
        }
    }
}

pub const SAMPLES_PER_SUBJECT: usize = 2;

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DatasetError> {
    if spec.dim < 1 {
        return Err(DatasetError::ZeroDim);
    }
    if spec.n_subjects < 2 {
        return Err(DatasetError::TooFewSubjects(spec.n_subjects));
    }
    if !(spec.intra_class_noise >= 0.0 && spec.intra_class_noise.is_finite()) {
        return Err(DatasetError::BadNoise(spec.intra_class_noise));
    }
    if !(spec.shared_component >= 0.0 && spec.shared_component.is_finite()) {
        return Err(DatasetError::BadNoise(spec.shared_component));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let shared_direction = unit_normal_vector(spec.dim, &mut rng);
    let rank = spec.identity_dims.clamp(1, spec.dim);
    // Fixed basis of the identity subspace; columns are near-orthogonal
    // random directions at realistic dims.
    let basis: Vec<Vec<f64>> = (0..rank).map(|_| unit_normal_vector(spec.dim, &mut rng)).collect();
    let width = (spec.n_subjects - 1).to_string().len().max(4);
    let mut embeddings = Vec::with_capacity(spec.n_subjects * SAMPLES_PER_SUBJECT);
    for s in 0..spec.n_subjects {
        let coeffs: Vec<f64> =
            (0..rank).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut identity = vec![0.0; spec.dim];
        for (c, b) in coeffs.iter().zip(&basis) {
            for (acc, v) in identity.iter_mut().zip(b) {
                *acc += c * v;
            }
        }
        normalize(&mut identity);
        // center = normalize(shared_component * mu + unit identity direction):
        // cross-subject similarity concentrates near s^2 / (s^2 + 1).
        let mut center: Vec<f64> = identity
            .iter()
            .zip(&shared_direction)
            .map(|(id, mu)| spec.shared_component * mu + id)
            .collect();
        normalize(&mut center);
        let subject_id = format!("s{s:0width$}");
        for q in 0..SAMPLES_PER_SUBJECT {
            let values = if spec.intra_class_noise == 0.0 {
                center.clone()
            } else {
                let mut v: Vec<f64> = center
                    .iter()
                    .map(|&c| c + spec.intra_class_noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                normalize(&mut v);
                v
            };
            embeddings.push(Embedding {
                subject_id: subject_id.clone(),
                sample_id: format!("c{q}"),
                values,
            });
        }
    }
    Dataset::new(embeddings, SplitTag::All)
}

fn unit_normal_vector(dim: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Subject-disjoint split: shuffles subjects with a seeded generator and
/// assigns round(fraction * subjects) of them to the dev side.
pub fn split(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DatasetError> {
    let subjects = dataset.subjects();
    if subjects.len() < 2 {
        return Err(DatasetError::NotEnoughSubjectsToSplit(subjects.len()));
    }
    let n_dev = (fraction * subjects.len() as f64).round() as usize;
    if !(fraction > 0.0 && fraction < 1.0) || n_dev == 0 || n_dev >= subjects.len() {
        let side = if n_dev == 0 { "dev" } else { "eval" };
        return Err(DatasetError::EmptySplitSide { fraction, side });
    }
    let mut shuffled: Vec<&str> = subjects;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Fisher-Yates over the sorted subject list.
    for i in (1..shuffled.len()).rev() {
        let j = rng.random_range(0..=i);
        shuffled.swap(i, j);
    }
    let dev_set: BTreeSet<&str> = shuffled[..n_dev].iter().copied().collect();
    let (dev, eval): (Vec<Embedding>, Vec<Embedding>) = dataset
        .embeddings
        .iter()
        .cloned()
        .partition(|e| dev_set.contains(e.subject_id.as_str()));
    Ok((
        Dataset::new(dev, SplitTag::Dev)?,
        Dataset::new(eval, SplitTag::Eval)?,
    ))
}

pub fn load_embeddings(path: impl AsRef<Path>, format: FileFormat) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match format {
        FileFormat::Text => load_text(BufReader::new(file)),
        FileFormat::Binary => load_binary(BufReader::new(file)),
    }
}

pub fn save_embeddings(
    dataset: &Dataset,
    path: impl AsRef<Path>,
    format: FileFormat,
) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let res = match format {
        FileFormat::Text => save_text(dataset, &mut w),
        FileFormat::Binary => save_binary(dataset, &mut w),
    };
    res.map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_text(reader: impl BufRead) -> Result<Dataset, DatasetError> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| DatasetError::MalformedHeader(String::new()))?
        .map_err(|source| DatasetError::Io { path: "<reader>".into(), source })?;
    let dim: usize = header
        .strip_prefix("dim=")
        .and_then(|d| d.trim().parse().ok())
        .filter(|&d| d >= 1)
        .ok_or_else(|| DatasetError::MalformedHeader(header.clone()))?;
    let mut embeddings = Vec::new();
    for (idx, line) in lines.enumerate() {
        let row = idx + 1;
        let line = line.map_err(|source| DatasetError::Io { path: "<reader>".into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (subject, sample, rest) = match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(q), Some(r)) if !s.is_empty() && !q.is_empty() => (s, q, r),
            _ => return Err(DatasetError::MalformedRow { row }),
        };
        let mut values = Vec::with_capacity(dim);
        for (col, tok) in rest.split_whitespace().enumerate() {
            let v: f64 = tok.parse().map_err(|_| DatasetError::BadNumber {
                row,
                text: tok.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DatasetError::NonFiniteValue { row, col: col + 1 });
            }
            values.push(v);
        }
        if values.len() != dim {
            return Err(DatasetError::RowLength { row, expected: dim, got: values.len() });
        }
        embeddings.push(Embedding {
            subject_id: subject.to_string(),
            sample_id: sample.to_string(),
            values,
        });
    }
    Dataset::new(embeddings, SplitTag::All)
}

fn save_text(dataset: &Dataset, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "dim={}", dataset.dim)?;
    for e in &dataset.embeddings {
        write!(w, "{}\t{}\t", e.subject_id, e.sample_id)?;
        for (i, v) in e.values.iter().enumerate() {
            if i > 0 {
                w.write_all(b" ")?;
            }
            // Shortest round-tripping decimal form; reparses to the same bits.
            write!(w, "{v}")?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn save_binary(dataset: &Dataset, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&(dataset.dim as u32).to_le_bytes())?;
    w.write_all(&(dataset.embeddings.len() as u64).to_le_bytes())?;
    for e in &dataset.embeddings {
        for s in [&e.subject_id, &e.sample_id] {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        for v in &e.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn load_binary(mut r: impl Read) -> Result<Dataset, DatasetError> {
    fn io_err(source: std::io::Error) -> DatasetError {
        DatasetError::Io { path: "<reader>".into(), source }
    }
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != BINARY_MAGIC {
        return Err(DatasetError::BadBinary("bad magic"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(io_err)?;
    let dim = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8).map_err(io_err)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut embeddings = Vec::with_capacity(count);
    for row in 1..=count {
        let read_str = |r: &mut dyn Read| -> Result<String, DatasetError> {
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4).map_err(io_err)?;
            let len = u32::from_le_bytes(b4) as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(io_err)?;
            String::from_utf8(buf).map_err(|_| DatasetError::BadBinary("non-utf8 id"))
        };
        let subject_id = read_str(&mut r)?;
        let sample_id = read_str(&mut r)?;
        let mut values = Vec::with_capacity(dim);
        for col in 1..=dim {
            r.read_exact(&mut b8).map_err(io_err)?;
            let v = f64::from_le_bytes(b8);
            if !v.is_finite() {
                return Err(DatasetError::NonFiniteValue { row, col });
            }
            values.push(v);
        }
        embeddings.push(Embedding { subject_id, sample_id, values });
    }
    Dataset::new(embeddings, SplitTag::All)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::cosine_similarity;

    #[test]
    fn loads_three_row_file_with_dim_four() {
        let text = "dim=4\na\t0\t1 2 3 4\na\t1\t1.5 2.5e0 -3 4e-1\nb\t0\t0.1 0.2 0.3 0.4\n";
        let ds = load_text(text.as_bytes()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.embeddings()[1].values, vec![1.5, 2.5, -3.0, 0.4]);
    }

    #[test]
    fn short_row_error_names_row_two() {
        let text = "dim=4\na\t0\t1 2 3 4\na\t1\t1 2 3\n";
        match load_text(text.as_bytes()) {
            Err(DatasetError::RowLength { row: 2, expected: 4, got: 3 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn non_finite_and_garbage_values_are_rejected() {
        let nan = "dim=2\na\t0\t1 NaN\n";
        assert!(matches!(
            load_text(nan.as_bytes()),
            Err(DatasetError::NonFiniteValue { row: 1, col: 2 })
        ));
        let junk = "dim=2\na\t0\t1 x\n";
        assert!(matches!(load_text(junk.as_bytes()), Err(DatasetError::BadNumber { row: 1, .. })));
    }

    #[test]
    fn header_must_declare_dim() {
        assert!(matches!(
            load_text("dims=4\n".as_bytes()),
            Err(DatasetError::MalformedHeader(_))
        ));
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = SyntheticSpec::new(12, 16, 0.1, 7);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn zero_noise_gives_identical_samples_with_unit_mated_similarity() {
        let spec = SyntheticSpec::new(5, 8, 0.0, 3);
        let ds = generate_synthetic(&spec).unwrap();
        for subject in ds.subjects() {
            let samples = ds.samples_of(subject);
            assert_eq!(samples[0].values, samples[1].values);
            let cos = cosine_similarity(&samples[0].values, &samples[1].values).unwrap();
            assert!((cos - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mated_similarity_exceeds_non_mated_on_average() {
        // Brute force over all pairs.
        let spec = SyntheticSpec::new(100, 512, 0.15, 1);
        let ds = generate_synthetic(&spec).unwrap();
        let (mut mated, mut non_mated) = (Vec::new(), Vec::new());
        let all = ds.embeddings();
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                let s = cosine_similarity(&all[i].values, &all[j].values).unwrap();
                if all[i].subject_id == all[j].subject_id {
                    mated.push(s);
                } else {
                    non_mated.push(s);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&mated) > mean(&non_mated));
    }

    #[test]
    fn split_is_subject_disjoint_and_balanced() {
        let spec = SyntheticSpec::new(10, 4, 0.05, 2);
        let ds = generate_synthetic(&spec).unwrap();
        let (dev, eval) = split(&ds, 0.5, 11).unwrap();
        assert_eq!(dev.subjects().len(), 5);
        assert_eq!(eval.subjects().len(), 5);
        assert_eq!(dev.split_tag(), SplitTag::Dev);
        assert_eq!(eval.split_tag(), SplitTag::Eval);
        let dev_subjects: BTreeSet<_> = dev.subjects().into_iter().map(String::from).collect();
        assert!(eval.subjects().iter().all(|s| !dev_subjects.contains(*s)));
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let spec = SyntheticSpec::new(9, 4, 0.05, 2);
        let ds = generate_synthetic(&spec).unwrap();
        let (d1, e1) = split(&ds, 0.4, 5).unwrap();
        let (d2, e2) = split(&ds, 0.4, 5).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(e1, e2);
    }

    #[test]
    fn equal_proportion_split_of_942_subjects() {
        let spec = SyntheticSpec::new(942, 4, 0.05, 0);
        let ds = generate_synthetic(&spec).unwrap();
        let (dev, eval) = split(&ds, 0.5, 1).unwrap();
        assert_eq!(dev.subjects().len(), 471);
        assert_eq!(eval.subjects().len(), 471);
    }

    #[test]
    fn degenerate_fractions_error() {
        let spec = SyntheticSpec::new(4, 4, 0.0, 0);
        let ds = generate_synthetic(&spec).unwrap();
        assert!(matches!(split(&ds, 0.01, 0), Err(DatasetError::EmptySplitSide { .. })));
        assert!(matches!(split(&ds, 0.99, 0), Err(DatasetError::EmptySplitSide { .. })));
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let spec = SyntheticSpec::new(6, 5, 0.2, 9);
        let ds = generate_synthetic(&spec).unwrap();
        let mut buf = Vec::new();
        save_binary(&ds, &mut buf).unwrap();
        let back = load_binary(&buf[..]).unwrap();
        assert_eq!(back.embeddings(), ds.embeddings());
    }

    #[test]
    fn duplicate_sample_pairs_are_rejected() {
        let e = Embedding { subject_id: "a".into(), sample_id: "0".into(), values: vec![1.0] };
        assert!(matches!(
            Dataset::new(vec![e.clone(), e], SplitTag::All),
            Err(DatasetError::DuplicateSample(..))
        ));
    }
}
