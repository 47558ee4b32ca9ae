//! Random matrices with independent standardized entries and a variance profile.
//!
//! An entry is `A_ij = sqrt(sigma2_ij) * xi_ij / d`, where `xi_ij` follows a
//! standardized [`EntryLaw`] and `d` is fixed by the [`Normalization`]. Row `i`
//! is generated from its own ChaCha stream, so matrices are identical regardless
//! of thread count. Symmetric matrices draw the upper triangle row by row and
//! mirror it.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Standardized entry distribution (mean 0, variance 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EntryLaw {
    Gaussian,
    Rademacher,
    /// Uniform on `[-sqrt(3), sqrt(3)]`.
    UniformPm,
    /// `-sqrt((1-p)/p)` with probability `p`, `sqrt(p/(1-p))` otherwise. Skewed.
    ShiftedBernoulli { p: f64 },
}

impl EntryLaw {
    pub fn validate(&self) -> Result<()> {
        if let EntryLaw::ShiftedBernoulli { p } = *self {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::validation("law.p", format!("must lie in (0, 1), got {p}")));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            EntryLaw::Gaussian => rng.sample(StandardNormal),
            EntryLaw::Rademacher => {
                if rng.gen::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            EntryLaw::UniformPm => {
                let s = 3f64.sqrt();
                rng.gen_range(-s..s)
            }
            EntryLaw::ShiftedBernoulli { p } => {
                if rng.gen::<f64>() < p {
                    -((1.0 - p) / p).sqrt()
                } else {
                    (p / (1.0 - p)).sqrt()
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            EntryLaw::Gaussian => "gaussian".into(),
            EntryLaw::Rademacher => "rademacher".into(),
            EntryLaw::UniformPm => "uniform_pm".into(),
            EntryLaw::ShiftedBernoulli { p } => format!("shifted_bernoulli({p})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    InvSqrtN,
    InvSqrtM,
    InvSqrtMPlusN,
}

impl Normalization {
    pub fn denominator(&self, m: usize, n: usize) -> f64 {
        match self {
            Normalization::InvSqrtN => (n as f64).sqrt(),
            Normalization::InvSqrtM => (m as f64).sqrt(),
            Normalization::InvSqrtMPlusN => ((m + n) as f64).sqrt(),
        }
    }
}

/// Shape-free description of a variance profile, as written in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSpec {
    Constant { value: f64 },
    /// `sigma2_ij = (i + 1) / rows`.
    RowLinear,
    /// `a` on the two diagonal blocks (split at half the rows and columns), `b` off them.
    TwoBlock { a: f64, b: f64 },
    Dense { values: Vec<Vec<f64>> },
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec::Constant { value: 1.0 }
    }
}

impl ProfileSpec {
    pub fn materialize(&self, rows: usize, cols: usize) -> Result<VarianceProfile> {
        let p = match self {
            ProfileSpec::Constant { value } => VarianceProfile::constant(rows, cols, *value),
            ProfileSpec::RowLinear => VarianceProfile::dense(Array2::from_shape_fn((rows, cols), |(i, _)| {
                (i + 1) as f64 / rows as f64
            })),
            ProfileSpec::TwoBlock { a, b } => VarianceProfile::dense(Array2::from_shape_fn((rows, cols), |(i, j)| {
                let bi = 2 * i >= rows;
                let bj = 2 * j >= cols;
                if bi == bj {
                    *a
                } else {
                    *b
                }
            })),
            ProfileSpec::Dense { values } => {
                if values.len() != rows || values.iter().any(|r| r.len() != cols) {
                    return Err(Error::Config(format!(
                        "dense profile must be {rows}x{cols}, got {}x{}",
                        values.len(),
                        values.first().map_or(0, |r| r.len())
                    )));
                }
                VarianceProfile::dense(Array2::from_shape_fn((rows, cols), |(i, j)| values[i][j]))
            }
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum ProfileData {
    Constant(f64),
    Dense(Array2<f64>),
}

/// Materialized `rows x cols` table of second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceProfile {
    rows: usize,
    cols: usize,
    data: ProfileData,
}

impl VarianceProfile {
    pub fn constant(rows: usize, cols: usize, value: f64) -> Self {
        VarianceProfile { rows, cols, data: ProfileData::Constant(value) }
    }

    pub fn dense(values: Array2<f64>) -> Self {
        let (rows, cols) = values.dim();
        VarianceProfile { rows, cols, data: ProfileData::Dense(values) }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match &self.data {
            ProfileData::Constant(v) => *v,
            ProfileData::Dense(a) => a[[i, j]],
        }
    }

    /// `Some(v)` when every entry equals `v`.
    pub fn constant_value(&self) -> Option<f64> {
        match &self.data {
            ProfileData::Constant(v) => Some(*v),
            ProfileData::Dense(a) => {
                let v = *a.first()?;
                a.iter().all(|x| *x == v).then_some(v)
            }
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let data = match &self.data {
            ProfileData::Constant(v) => ProfileData::Constant(v * factor),
            ProfileData::Dense(a) => ProfileData::Dense(a * factor),
        };
        VarianceProfile { rows: self.rows, cols: self.cols, data }
    }

    pub fn transposed(&self) -> Self {
        let data = match &self.data {
            ProfileData::Constant(v) => ProfileData::Constant(*v),
            ProfileData::Dense(a) => ProfileData::Dense(a.t().to_owned()),
        };
        VarianceProfile { rows: self.cols, cols: self.rows, data }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.cols), |(i, j)| self.get(i, j))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |v: f64| !(v.is_finite() && v >= 0.0);
        match &self.data {
            ProfileData::Constant(v) if bad(*v) => {
                Err(Error::validation("profile", format!("entries must be finite and nonnegative, got {v}")))
            }
            ProfileData::Dense(a) => match a.indexed_iter().find(|(_, v)| bad(**v)) {
                Some(((i, j), v)) => Err(Error::validation(
                    "profile",
                    format!("entry ({i}, {j}) must be finite and nonnegative, got {v}"),
                )),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        match &self.data {
            ProfileData::Constant(_) => self.rows == self.cols,
            ProfileData::Dense(a) => self.rows == self.cols && a.iter().zip(a.t().iter()).all(|(x, y)| x == y),
        }
    }

    /// Hash of row `i`; rows with equal hashes are treated as equal.
    pub fn row_key(&self, i: usize) -> u64 {
        match &self.data {
            ProfileData::Constant(_) => 0,
            ProfileData::Dense(a) => {
                let mut h = DefaultHasher::new();
                for v in a.row(i) {
                    v.to_bits().hash(&mut h);
                }
                h.finish()
            }
        }
    }

    /// `sum_j sigma2_ij * x_j` for every row.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        match &self.data {
            ProfileData::Constant(v) => {
                let s: f64 = x.iter().sum();
                vec![v * s; self.rows]
            }
            ProfileData::Dense(a) => a.axis_iter(Axis(0)).map(|r| r.iter().zip(x).map(|(w, y)| w * y).sum()).collect(),
        }
    }

    /// `sum_i sigma2_ij * x_i` for every column.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        match &self.data {
            ProfileData::Constant(v) => {
                let s: f64 = x.iter().sum();
                vec![v * s; self.cols]
            }
            ProfileData::Dense(a) => a.axis_iter(Axis(1)).map(|c| c.iter().zip(x).map(|(w, y)| w * y).sum()).collect(),
        }
    }

    /// Mean over rows of each column's weights, `(1/rows) sum_i sigma2_ij`.
    pub fn mean_row(&self) -> Vec<f64> {
        let ones = vec![1.0 / self.rows as f64; self.rows];
        self.apply_transpose(&ones)
    }
}

fn default_true() -> bool {
    true
}

/// Law, profile and normalization of a random matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub law: EntryLaw,
    #[serde(default)]
    pub profile: ProfileSpec,
    pub normalization: Normalization,
    #[serde(default = "default_true")]
    pub symmetric: bool,
    /// Clamp standardized Gaussian draws at `+-C sqrt(log n)`. Off when absent.
    #[serde(default)]
    pub truncation: Option<f64>,
}

impl EnsembleSpec {
    pub fn symmetric(law: EntryLaw) -> Self {
        EnsembleSpec {
            law,
            profile: ProfileSpec::default(),
            normalization: Normalization::InvSqrtN,
            symmetric: true,
            truncation: None,
        }
    }

    pub fn asymmetric(law: EntryLaw, normalization: Normalization) -> Self {
        EnsembleSpec { law, profile: ProfileSpec::default(), normalization, symmetric: false, truncation: None }
    }

    pub fn with_profile(mut self, profile: ProfileSpec) -> Self {
        self.profile = profile;
        self
    }

    /// Replaces the law; truncation is dropped for non-Gaussian laws.
    pub fn with_law(mut self, law: EntryLaw) -> Self {
        self.law = law;
        if law != EntryLaw::Gaussian {
            self.truncation = None;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.law.validate()?;
        match (self.symmetric, self.normalization) {
            (true, Normalization::InvSqrtN) => {}
            (true, _) => return Err(Error::validation("normalization", "symmetric ensembles use inv_sqrt_n")),
            (false, Normalization::InvSqrtN) => {
                return Err(Error::validation(
                    "normalization",
                    "asymmetric ensembles use inv_sqrt_m or inv_sqrt_m_plus_n",
                ))
            }
            _ => {}
        }
        if let Some(c) = self.truncation {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::validation("truncation", format!("must be positive, got {c}")));
            }
            if self.law != EntryLaw::Gaussian {
                return Err(Error::validation("truncation", "only applies to the gaussian law"));
            }
        }
        Ok(())
    }

    /// Normalized second moments `E A_ij^2` for an `m x n` matrix (`m = n` when symmetric).
    pub fn second_moments(&self, m: usize, n: usize) -> Result<VarianceProfile> {
        let d = self.normalization.denominator(m, n);
        Ok(self.profile.materialize(m, n)?.scaled(1.0 / (d * d)))
    }

    fn draw<R: Rng>(&self, rng: &mut R, clamp: Option<f64>) -> f64 {
        let x = self.law.sample(rng);
        match clamp {
            Some(c) => x.clamp(-c, c),
            None => x,
        }
    }

    fn clamp_level(&self, n: usize) -> Option<f64> {
        self.truncation.map(|c| c * (n.max(2) as f64).ln().sqrt())
    }
}

/// Symmetric `n x n` matrix `A0 / sqrt(n)` with independent upper triangle.
pub fn sample_symmetric(spec: &EnsembleSpec, n: usize, seed: u64) -> Result<Array2<f64>> {
    if !spec.symmetric {
        return Err(Error::Config("sample_symmetric needs a symmetric ensemble".into()));
    }
    spec.validate()?;
    if n == 0 {
        return Err(Error::validation("n", "must be positive"));
    }
    let profile = spec.profile.materialize(n, n)?;
    if !profile.is_symmetric() {
        return Err(Error::validation("profile", "symmetric ensembles need a symmetric profile"));
    }
    let d = spec.normalization.denominator(n, n);
    let clamp = spec.clamp_level(n);
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stream_rng(seed, "matrix", i as u64);
            (i..n).map(|j| profile.get(i, j).sqrt() * spec.draw(&mut rng, clamp) / d).collect()
        })
        .collect();
    let mut a = Array2::zeros((n, n));
    for (i, row) in upper.iter().enumerate() {
        for (off, v) in row.iter().enumerate() {
            let j = i + off;
            a[[i, j]] = *v;
            a[[j, i]] = *v;
        }
    }
    Ok(a)
}

/// `m x n` matrix with independent entries.
pub fn sample_asymmetric(spec: &EnsembleSpec, m: usize, n: usize, seed: u64) -> Result<Array2<f64>> {
    if spec.symmetric {
        return Err(Error::Config("sample_asymmetric needs an asymmetric ensemble".into()));
    }
    spec.validate()?;
    if m == 0 || n == 0 {
        return Err(Error::validation("dims", "m and n must be positive"));
    }
    let profile = spec.profile.materialize(m, n)?;
    let d = spec.normalization.denominator(m, n);
    let clamp = spec.clamp_level(n);
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stream_rng(seed, "matrix", i as u64);
            (0..n).map(|j| profile.get(i, j).sqrt() * spec.draw(&mut rng, clamp) / d).collect()
        })
        .collect();
    Ok(Array2::from_shape_fn((m, n), |(i, j)| rows[i][j]))
}

/// Draws from `spec` with either shape; `m` is ignored for symmetric specs.
pub fn sample(spec: &EnsembleSpec, m: usize, n: usize, seed: u64) -> Result<Array2<f64>> {
    if spec.symmetric {
        sample_symmetric(spec, n, seed)
    } else {
        sample_asymmetric(spec, m, n, seed)
    }
}

/// Two matrices with the profile and normalization of `spec_a`, laws `spec_a.law`
/// and `law_b`, and independent seeds derived from `seed`.
pub fn matched_pair(
    spec_a: &EnsembleSpec,
    law_b: EntryLaw,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let spec_b = spec_a.clone().with_law(law_b);
    let a = sample(spec_a, m, n, seed::derive(seed, "pair", 0))?;
    let b = sample(&spec_b, m, n, seed::derive(seed, "pair", 1))?;
    Ok((a, b))
}

/// Row-major dense CSV with 17 significant digits.
pub fn write_matrix_csv(a: &Array2<f64>, path: &std::path::Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in a.rows() {
        w.write_record(row.iter().map(|v| crate::cli_io::fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}
