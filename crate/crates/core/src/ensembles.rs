//! Population ensembles for the column vectors `X_1, ..., X_n`.
//!
//! Every family is normalized so that `E X = 0` and `E ||X||^2 = 1`. The iid
//! families draw entries with variance exactly `1/p`; the sphere family draws
//! unit vectors.
//!
//! Sampling is counter-based: column `j` is generated from its own ChaCha
//! stream seeded by mixing the master seed with `j`, so columns can be drawn
//! in any order (or in parallel) with bit-identical results.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of sub-stream `index` from a master seed.
pub fn sub_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index.wrapping_mul(GOLDEN_GAMMA).rotate_left(17))
}

pub(crate) fn stream(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(master, index))
}

/// Distribution family of the columns.
///
/// The set is closed for now; log-concave families would slot in here as new
/// variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    GaussianIid,
    RademacherIid,
    SphereUniform,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::GaussianIid, Family::RademacherIid, Family::SphereUniform];

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianIid => "gaussian",
            Family::RademacherIid => "rademacher",
            Family::SphereUniform => "sphere",
        }
    }

    /// Whether the coordinates are independent.
    pub fn is_iid(self) -> bool {
        !matches!(self, Family::SphereUniform)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Family::GaussianIid),
            "rademacher" => Ok(Family::RademacherIid),
            "sphere" => Ok(Family::SphereUniform),
            other => Err(Error::invalid(format!(
                "unknown ensemble '{other}' (expected gaussian, rademacher or sphere)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VectorEnsemble {
    pub family: Family,
    pub p: usize,
}

impl VectorEnsemble {
    pub fn new(family: Family, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("dimension p must be at least 1"));
        }
        Ok(Self { family, p })
    }

    /// Fills `out` with one draw of the vector using `rng`.
    pub(crate) fn fill<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let scale = 1.0 / (self.p as f64).sqrt();
        match self.family {
            Family::GaussianIid => {
                for v in out.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = z * scale;
                }
            }
            Family::RademacherIid => {
                for v in out.iter_mut() {
                    *v = if rng.random::<bool>() { scale } else { -scale };
                }
            }
            Family::SphereUniform => loop {
                let mut norm2 = 0.0;
                for v in out.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = z;
                    norm2 += z * z;
                }
                if norm2 > 0.0 {
                    let inv = 1.0 / norm2.sqrt();
                    out.iter_mut().for_each(|v| *v *= inv);
                    break;
                }
            },
        }
    }
}

impl fmt::Display for VectorEnsemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(p={})", self.family, self.p)
    }
}

/// A `p x n` matrix whose columns are the sampled vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    data: DMatrix<f64>,
    ensemble: VectorEnsemble,
    seed: u64,
}

impl SampleMatrix {
    /// Wraps an explicit data matrix; columns are the vectors.
    pub fn from_data(data: DMatrix<f64>, ensemble: VectorEnsemble, seed: u64) -> Result<Self> {
        if data.nrows() != ensemble.p || data.ncols() == 0 {
            return Err(Error::invalid(format!(
                "data is {}x{}, expected p={} rows and at least one column",
                data.nrows(),
                data.ncols(),
                ensemble.p
            )));
        }
        Ok(Self { data, ensemble, seed })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn ensemble(&self) -> VectorEnsemble {
        self.ensemble
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn p(&self) -> usize {
        self.data.nrows()
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    /// Copy of this sample with entry `(row, col)` replaced.
    pub fn with_entry(&self, row: usize, col: usize, value: f64) -> Result<Self> {
        if row >= self.p() || col >= self.n() {
            return Err(Error::invalid(format!(
                "entry ({row}, {col}) out of range for {}x{} sample",
                self.p(),
                self.n()
            )));
        }
        let mut out = self.clone();
        out.data[(row, col)] = value;
        Ok(out)
    }
}

/// Draws `n` independent columns from `ensemble`.
pub fn sample_matrix(ensemble: VectorEnsemble, n: usize, seed: u64) -> Result<SampleMatrix> {
    if ensemble.p == 0 || n == 0 {
        return Err(Error::invalid("sample_matrix needs p >= 1 and n >= 1"));
    }
    let p = ensemble.p;
    let mut buf = vec![0.0; p * n];
    buf.par_chunks_mut(p).enumerate().for_each(|(j, col)| {
        let mut rng = stream(seed, j as u64);
        ensemble.fill(&mut rng, col);
    });
    Ok(SampleMatrix {
        data: DMatrix::from_vec(p, n, buf),
        ensemble,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentReport {
    pub p: usize,
    pub order: u32,
    /// Monte Carlo estimate of `E |sqrt(p) * entry|^order`.
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Estimates the `order`-th absolute moment of the standardized entry `sqrt(p) X_{ij}`.
///
/// `trials` vectors are drawn; all of their coordinates are pooled.
pub fn moment_diagnostic(ensemble: VectorEnsemble, order: u32, trials: usize, seed: u64) -> Result<MomentReport> {
    if order < 2 || !order.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "moment order must be even and >= 2, got {order}"
        )));
    }
    if trials < 100 {
        return Err(Error::invalid(format!(
            "moment_diagnostic needs >= 100 trials, got {trials}"
        )));
    }
    let p = ensemble.p;
    let root_p = (p as f64).sqrt();
    let (sum, sum_sq) = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, t as u64);
            let mut v = vec![0.0; p];
            ensemble.fill(&mut rng, &mut v);
            v.iter().fold((0.0, 0.0), |(s, s2), &x| {
                let m = (root_p * x).abs().powi(order as i32);
                (s + m, s2 + m * m)
            })
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let count = (trials * p) as f64;
    let mean = sum / count;
    let var = ((sum_sq / count) - mean * mean).max(0.0) * count / (count - 1.0).max(1.0);
    Ok(MomentReport {
        p,
        order,
        estimate: mean,
        std_error: (var / count).sqrt(),
        samples: trials * p,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentGrowth {
    pub reports: Vec<MomentReport>,
    /// Set when the estimate at the largest `p` exceeds the one at the smallest
    /// `p` by more than three combined standard errors.
    pub growing: bool,
}

/// Runs [`moment_diagnostic`] over a sequence of dimensions and flags growth in `p`.
pub fn moment_growth(family: Family, order: u32, dims: &[usize], trials: usize, seed: u64) -> Result<MomentGrowth> {
    if dims.is_empty() {
        return Err(Error::invalid("moment_growth needs at least one dimension"));
    }
    let reports = dims
        .iter()
        .enumerate()
        .map(|(k, &p)| moment_diagnostic(VectorEnsemble::new(family, p)?, order, trials, sub_seed(seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let first = reports.first().unwrap();
    let last = reports.last().unwrap();
    let slack = 3.0 * (first.std_error.powi(2) + last.std_error.powi(2)).sqrt();
    Ok(MomentGrowth {
        growing: last.estimate - first.estimate > slack,
        reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcentrationReport {
    /// `max_i | ||X_i||^2 - 1 |`
    pub max_norm_dev: f64,
    /// `max_{i != j} |X_i^T X_j|`
    pub max_inner: f64,
}

pub fn concentration_diagnostic(sample: &SampleMatrix) -> Result<ConcentrationReport> {
    let n = sample.n();
    if n < 2 {
        return Err(Error::invalid(
            "max_inner is undefined for a single column (need n >= 2)",
        ));
    }
    let x = sample.data();
    let (max_norm_dev, max_inner) = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.column(i);
            let norm_dev = (xi.norm_squared() - 1.0).abs();
            let inner = (i + 1..n).map(|j| xi.dot(&x.column(j)).abs()).fold(0.0, f64::max);
            (norm_dev, inner)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    Ok(ConcentrationReport {
        max_norm_dev,
        max_inner,
    })
}
