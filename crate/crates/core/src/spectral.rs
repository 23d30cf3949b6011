//! Eigenvalues, empirical spectral distributions, Stieltjes transforms and
//! distances between spectral laws.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::linalg::SymmetricTridiagonal;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::ensembles::sub_seed;
use crate::error::{Error, Result};
use crate::kernel_matrix::{KernelMatrix, MatrixModel};
use crate::kv::KeyValues;

/// Sorted real spectrum of one kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSample {
    eigenvalues: Vec<f64>,
    pub p: Option<usize>,
    pub seed: Option<u64>,
}

impl SpectralSample {
    /// Wraps raw eigenvalues (sorted here).
    pub fn from_values(mut eigenvalues: Vec<f64>, p: Option<usize>, seed: Option<u64>) -> Result<Self> {
        if eigenvalues.is_empty() || eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("a spectral sample needs at least one finite eigenvalue"));
        }
        eigenvalues.sort_by(f64::total_cmp);
        Ok(Self { eigenvalues, p, seed })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn gamma(&self) -> Option<f64> {
        self.p.map(|p| p as f64 / self.n() as f64)
    }

    pub fn esd(&self) -> Esd {
        Esd {
            points: self.eigenvalues.clone(),
        }
    }

    /// `(1/n) sum_i 1 / (lambda_i - z)`.
    pub fn stieltjes(&self, z: Complex64) -> Result<Complex64> {
        stieltjes_of_points(&self.eigenvalues, z)
    }
}

fn check_upper(z: Complex64) -> Result<()> {
    if z.im > 0.0 && z.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "Stieltjes transform needs Im z > 0, got z = {z}"
        )))
    }
}

fn stieltjes_of_points(points: &[f64], z: Complex64) -> Result<Complex64> {
    check_upper(z)?;
    let sum: Complex64 = points.iter().map(|&l| (Complex64::new(l, 0.0) - z).inv()).sum();
    Ok(sum / points.len() as f64)
}

pub fn empirical_stieltjes(sample: &SpectralSample, z: Complex64) -> Result<Complex64> {
    sample.stieltjes(z)
}

/// Full spectrum of a kernel matrix, ascending.
pub fn eigenvalues(a: &KernelMatrix) -> Result<SpectralSample> {
    let values = symmetric_eigenvalues(a.data()).ok_or_else(|| Error::Eigensolver {
        provenance: a.describe(),
    })?;
    let prov = a.provenance();
    SpectralSample::from_values(values, prov.map(|p| p.ensemble.p), prov.map(|p| p.seed))
}

/// Eigenvalues of a symmetric matrix: Householder tridiagonalization followed by
/// implicit QL with Wilkinson-type shifts. `None` if an eigenvalue fails to
/// converge within 60 sweeps.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Option<Vec<f64>> {
    let n = m.nrows();
    if n == 1 {
        return Some(vec![m[(0, 0)]]);
    }
    let tri = SymmetricTridiagonal::new(m.clone());
    let mut d: Vec<f64> = tri.diagonal().iter().copied().collect();
    let mut e: Vec<f64> = tri.off_diagonal().iter().copied().collect();
    e.push(0.0);
    tridiagonal_ql(&mut d, &mut e)?;
    d.sort_by(f64::total_cmp);
    Some(d)
}

fn tridiagonal_ql(d: &mut [f64], e: &mut [f64]) -> Option<()> {
    let n = d.len();
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return None;
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Some(())
}

/// A spectral law that can be compared against an ESD.
pub trait SpectralLaw {
    /// Right-continuous CDF.
    fn cdf(&self, x: f64) -> f64;

    /// Left limit `F(x-)`; differs from `cdf` only at atoms.
    fn cdf_left(&self, x: f64) -> f64 {
        self.cdf(x)
    }

    /// Atom locations (or every support point, for discrete laws).
    fn jump_points(&self) -> Vec<f64> {
        Vec::new()
    }

    /// An interval holding all of the mass.
    fn support(&self) -> (f64, f64);

    fn stieltjes(&self, z: Complex64) -> Result<Complex64>;
}

/// Empirical spectral distribution: uniform weight on sorted points.
#[derive(Debug, Clone, PartialEq)]
pub struct Esd {
    points: Vec<f64>,
}

impl Esd {
    pub fn new(mut points: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("an ESD needs at least one finite point"));
        }
        points.sort_by(f64::total_cmp);
        Ok(Self { points })
    }

    /// Concatenates the spectra of several samples.
    pub fn pooled<'a>(samples: impl IntoIterator<Item = &'a SpectralSample>) -> Result<Self> {
        Esd::new(
            samples
                .into_iter()
                .flat_map(|s| s.eigenvalues().iter().copied())
                .collect(),
        )
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The ESD pushed forward by `x -> shift + scale * x`.
    pub fn affine(&self, shift: f64, scale: f64) -> Esd {
        let mut points: Vec<f64> = self.points.iter().map(|x| shift + scale * x).collect();
        points.sort_by(f64::total_cmp);
        Esd { points }
    }
}

impl SpectralLaw for Esd {
    fn cdf(&self, x: f64) -> f64 {
        self.points.partition_point(|&v| v <= x) as f64 / self.len() as f64
    }

    fn cdf_left(&self, x: f64) -> f64 {
        self.points.partition_point(|&v| v < x) as f64 / self.len() as f64
    }

    fn jump_points(&self) -> Vec<f64> {
        self.points.clone()
    }

    fn support(&self) -> (f64, f64) {
        (self.points[0], self.points[self.len() - 1])
    }

    fn stieltjes(&self, z: Complex64) -> Result<Complex64> {
        stieltjes_of_points(&self.points, z)
    }
}

/// Kolmogorov-Smirnov distance between an ESD and a law.
///
/// The supremum is taken over the ESD's points and the law's jump points, on
/// both sides of each; that is exact when the law is continuous apart from its
/// listed atoms.
pub fn ks_distance(esd: &Esd, law: &dyn SpectralLaw) -> f64 {
    let mut worst: f64 = 0.0;
    let mut check = |x: f64| {
        let right = (esd.cdf(x) - law.cdf(x)).abs();
        let left = (esd.cdf_left(x) - law.cdf_left(x)).abs();
        worst = worst.max(right).max(left);
    };
    esd.points.iter().for_each(|&x| check(x));
    law.jump_points().into_iter().for_each(check);
    worst.min(1.0)
}

/// 1-Wasserstein distance between two ESDs.
///
/// Equal sizes use the sorted coupling; otherwise the CDF difference is
/// integrated exactly between merged jump points.
pub fn wasserstein1(a: &Esd, b: &Esd) -> f64 {
    if a.len() == b.len() {
        return a.points.iter().zip(&b.points).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let mut merged: Vec<f64> = a.points.iter().chain(&b.points).copied().collect();
    merged.sort_by(f64::total_cmp);
    merged
        .windows(2)
        .map(|w| (a.cdf(w[0]) - b.cdf(w[0])).abs() * (w[1] - w[0]))
        .sum()
}

/// 1-Wasserstein distance between an ESD and a law: `integral |F_esd - F_law| dx`.
///
/// Each gap between consecutive breakpoints (ESD points, atoms, and a uniform
/// grid of `resolution` points over the union of supports) is integrated with
/// Simpson's rule, the ESD CDF being constant there.
pub fn wasserstein1_law(esd: &Esd, law: &dyn SpectralLaw, resolution: usize) -> f64 {
    let (lo, hi) = law.support();
    let lo = lo.min(esd.points[0]);
    let hi = hi.max(esd.points[esd.len() - 1]);
    let steps = resolution.max(2);
    let mut breaks: Vec<f64> = (0..=steps).map(|k| lo + (hi - lo) * k as f64 / steps as f64).collect();
    breaks.extend_from_slice(&esd.points);
    breaks.extend(law.jump_points());
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    breaks
        .windows(2)
        .map(|w| {
            let (x0, x1) = (w[0], w[1]);
            let level = esd.cdf(x0);
            let mid = 0.5 * (x0 + x1);
            let diff = |l: f64| (level - l).abs();
            (x1 - x0) / 6.0 * (diff(law.cdf(x0)) + 4.0 * diff(law.cdf(mid)) + diff(law.cdf_left(x1)))
        })
        .sum()
}

/// `sup_z |m_esd(z) - m_law(z)|` over a grid in the upper half-plane.
pub fn stieltjes_sup_distance(esd: &Esd, law: &dyn SpectralLaw, grid: &[Complex64]) -> Result<f64> {
    grid.iter().try_fold(0.0f64, |acc, &z| {
        Ok(acc.max((esd.stieltjes(z)? - law.stieltjes(z)?).norm()))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRow {
    pub n: usize,
    pub mean: Complex64,
    /// Unbiased sample variance `E|m - E m|^2` across trials.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceDecay {
    pub z: Complex64,
    pub trials: usize,
    pub rows: Vec<VarianceRow>,
    pub strictly_decreasing: bool,
}

/// Fewest trials accepted by [`stieltjes_variance_decay`].
pub const MIN_VARIANCE_TRIALS: usize = 20;

/// Sample variance of `m_A(z)` across independent trials at each matrix size.
pub fn stieltjes_variance_decay(
    model: &MatrixModel,
    z: Complex64,
    trials: usize,
    sizes: &[usize],
    seed: u64,
) -> Result<VarianceDecay> {
    check_upper(z)?;
    if trials < MIN_VARIANCE_TRIALS {
        return Err(Error::invalid(format!(
            "variance decay needs at least {MIN_VARIANCE_TRIALS} trials, got {trials}"
        )));
    }
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sizes must be non-empty and strictly increasing"));
    }
    let rows = sizes
        .iter()
        .map(|&n| {
            let size_seed = sub_seed(seed, n as u64);
            let values = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let a = model.realize(n, sub_seed(size_seed, t as u64))?;
                    eigenvalues(&a)?.stieltjes(z)
                })
                .collect::<Result<Vec<_>>>()?;
            let mean = values.iter().sum::<Complex64>() / trials as f64;
            let variance = values.iter().map(|m| (m - mean).norm_sqr()).sum::<f64>() / (trials - 1) as f64;
            Ok(VarianceRow { n, mean, variance })
        })
        .collect::<Result<Vec<_>>>()?;
    let strictly_decreasing = rows.windows(2).all(|w| w[1].variance < w[0].variance);
    Ok(VarianceDecay {
        z,
        trials,
        rows,
        strictly_decreasing,
    })
}

/// Cauchy interlacing of the spectrum of a principal `(n-1)`-minor: `outer_i <= inner_i <= outer_{i+1}`.
pub fn interlaces(outer: &[f64], inner: &[f64], tol: f64) -> bool {
    inner.len() + 1 == outer.len()
        && inner
            .iter()
            .enumerate()
            .all(|(i, &mu)| outer[i] - tol <= mu && mu <= outer[i + 1] + tol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoffmanWielandt {
    /// `sum_i (lambda_i(A) - lambda_i(B))^2` with both spectra sorted.
    pub spectral: f64,
    /// `sum_ij (A_ij - B_ij)^2`
    pub frobenius: f64,
}

impl HoffmanWielandt {
    pub fn holds(&self, rel_tol: f64) -> bool {
        self.spectral <= self.frobenius * (1.0 + rel_tol) + rel_tol * f64::MIN_POSITIVE.sqrt()
    }
}

pub fn hoffman_wielandt(a: &KernelMatrix, b: &KernelMatrix) -> Result<HoffmanWielandt> {
    if a.n() != b.n() {
        return Err(Error::invalid("Hoffman-Wielandt needs matrices of the same size"));
    }
    let la = eigenvalues(a)?;
    let lb = eigenvalues(b)?;
    let spectral = la
        .eigenvalues()
        .iter()
        .zip(lb.eigenvalues())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let frobenius = (a.data() - b.data()).norm_squared();
    Ok(HoffmanWielandt { spectral, frobenius })
}

/// `|Tr (A - z)^{-1} - Tr (B - z)^{-1}|` for `B` the minor of `A` without row/column `j`.
pub fn resolvent_trace_gap(a: &KernelMatrix, j: usize, z: Complex64) -> Result<f64> {
    let full = eigenvalues(a)?;
    let minor = eigenvalues(&a.principal_minor(j)?)?;
    let tr = |s: &SpectralSample| -> Result<Complex64> { Ok(s.stieltjes(z)? * s.n() as f64) };
    Ok((tr(&full)? - tr(&minor)?).norm())
}

/// Writes an ESD as CSV (`lambda` header) plus a `<path>.meta` key-value sidecar.
pub fn write_esd_csv(path: &Path, sample: &SpectralSample, spec: &str) -> Result<()> {
    let mut out = String::from("lambda\n");
    for l in sample.eigenvalues() {
        out.push_str(&format!("{l}\n"));
    }
    fs::write(path, out)?;
    let mut meta = KeyValues::new();
    meta.set("n", sample.n());
    meta.set("p", sample.p.map_or("unknown".to_string(), |p| p.to_string()));
    meta.set("gamma", sample.gamma().map_or("unknown".to_string(), |g| g.to_string()));
    meta.set("seed", sample.seed.map_or("unknown".to_string(), |s| s.to_string()));
    meta.set("spec", spec);
    meta.write(&crate::kv::sidecar_path(path))
}

/// Reads the `lambda` column of an ESD CSV.
pub fn read_esd_csv(path: &Path) -> Result<Vec<f64>> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let column = header
        .split(',')
        .position(|h| h.trim() == "lambda")
        .ok_or_else(|| Error::invalid(format!("{} has no 'lambda' column", path.display())))?;
    let mut values = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let field = line.split(',').nth(column).unwrap_or("");
        values.push(
            field
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad eigenvalue '{field}' in {}", path.display())))?,
        );
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembles::{sample_matrix, Family, VectorEnsemble};
    use crate::envelope::Envelope;
    use crate::kernel_matrix::{build, Diagonal, KernelKind, KernelSpec};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn scalar_identity_spectrum() {
        let a = KernelMatrix::from_upper(DMatrix::identity(7, 7) * 2.5).unwrap();
        let s = eigenvalues(&a).unwrap();
        assert!(s.eigenvalues().iter().all(|&l| (l - 2.5).abs() < 1e-14));
    }

    #[test]
    fn all_ones_spectrum() {
        let n = 9;
        let a = KernelMatrix::from_upper(DMatrix::from_element(n, n, 1.0)).unwrap();
        let s = eigenvalues(&a).unwrap();
        let ev = s.eigenvalues();
        assert!(ev[..n - 1].iter().all(|l| l.abs() < 1e-12));
        assert!((ev[n - 1] - n as f64).abs() < 1e-12);
    }

    #[test]
    fn matches_reference_eigensolver() {
        let s = sample_matrix(VectorEnsemble::new(Family::GaussianIid, 40).unwrap(), 60, 11).unwrap();
        let spec = KernelSpec::new(KernelKind::InnerProduct, Diagonal::Zero, Envelope::exp(1.0));
        let a = build(&spec, &s).unwrap();
        let ours = eigenvalues(&a).unwrap();
        let mut reference: Vec<f64> = a.data().clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        reference.sort_by(f64::total_cmp);
        let scale = a.data().amax();
        for (x, y) in ours.eigenvalues().iter().zip(&reference) {
            assert!((x - y).abs() < 1e-10 * scale * 60.0);
        }
        let trace: f64 = ours.eigenvalues().iter().sum();
        assert!(trace.abs() < 1e-8 * 60.0 * scale);
    }

    #[test]
    fn stieltjes_examples() {
        let zero = SpectralSample::from_values(vec![0.0; 4], None, None).unwrap();
        let z = c(0.3, 0.8);
        assert!((zero.stieltjes(z).unwrap() + z.inv()).norm() < 1e-15);
        let one = SpectralSample::from_values(vec![1.0], None, None).unwrap();
        assert!((one.stieltjes(c(0.0, 1.0)).unwrap() - c(0.5, 0.5)).norm() < 1e-15);
        assert!(one.stieltjes(c(1.0, 0.0)).is_err());
        assert!(one.stieltjes(c(1.0, -1.0)).is_err());
    }

    #[test]
    fn ks_examples() {
        let a = Esd::new(vec![0.0]).unwrap();
        let b = Esd::new(vec![1.0]).unwrap();
        assert_eq!(ks_distance(&a, &b), 1.0);
        let x = Esd::new(vec![0.3, -1.0, 2.0]).unwrap();
        assert_eq!(ks_distance(&x, &x.clone()), 0.0);
    }

    #[test]
    fn wasserstein_examples() {
        let x = Esd::new(vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        assert_eq!(wasserstein1(&x, &x), 0.0);
        let shifted = x.affine(1.5, 1.0);
        assert!((wasserstein1(&x, &shifted) - 1.5).abs() < 1e-12);
        // unequal sizes go through the CDF integral
        let y = Esd::new(vec![0.0, 1.0]).unwrap();
        let z = Esd::new(vec![0.0, 0.0, 1.0]).unwrap();
        // F_y - F_z = 1/2 - 2/3 on [0, 1)
        assert!((wasserstein1(&y, &z) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn interlacing_detects_violation() {
        assert!(interlaces(&[0.0, 1.0, 2.0], &[0.5, 1.5], 0.0));
        assert!(!interlaces(&[0.0, 1.0, 2.0], &[1.5, 1.8], 0.0));
        assert!(!interlaces(&[0.0, 1.0], &[0.5, 0.7], 0.0));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("esd.csv");
        let s = SpectralSample::from_values(vec![0.25, -1.5, 3.0], Some(6), Some(4)).unwrap();
        write_esd_csv(&path, &s, "inner/keep/identity").unwrap();
        assert_eq!(read_esd_csv(&path).unwrap(), s.eigenvalues());
        let meta = KeyValues::read(&crate::kv::sidecar_path(&path)).unwrap();
        assert_eq!(meta.get("gamma"), Some("2"));
        assert_eq!(meta.get("spec"), Some("inner/keep/identity"));
    }

    #[test]
    fn variance_decay_argument_checks() {
        let spec = KernelSpec::new(KernelKind::InnerProduct, Diagonal::Keep, Envelope::exp(1.0));
        let model = MatrixModel::new(Family::GaussianIid, 0.5, spec).unwrap();
        assert!(stieltjes_variance_decay(&model, c(0.0, 1.0), 1, &[10, 20], 0).is_err());
        assert!(stieltjes_variance_decay(&model, c(0.0, 1.0), 20, &[20, 10], 0).is_err());
    }

    #[test]
    fn deterministic_family_has_zero_variance() {
        let spec = KernelSpec::new(KernelKind::InnerProduct, Diagonal::Keep, Envelope::constant(0.7));
        let model = MatrixModel::new(Family::GaussianIid, 0.5, spec).unwrap();
        let out = stieltjes_variance_decay(&model, c(0.0, 1.0), 20, &[10, 20], 3).unwrap();
        assert!(out.rows.iter().all(|r| r.variance < 1e-28), "{:?}", out.rows);
    }
}
