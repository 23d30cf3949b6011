//! Random kernel matrices `A_ij = f(g(X_i, X_j), p)` and their linearized companions.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::ensembles::{sample_matrix, Family, SampleMatrix, VectorEnsemble};
use crate::envelope::Envelope;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    /// `g(X, Y) = X^T Y`
    InnerProduct,
    /// `g(X, Y) = ||X - Y||^2`
    SquaredDistance,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::InnerProduct => "inner",
            KernelKind::SquaredDistance => "distance",
        }
    }
}

impl FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inner" => Ok(KernelKind::InnerProduct),
            "distance" => Ok(KernelKind::SquaredDistance),
            other => Err(Error::invalid(format!(
                "unknown kernel '{other}' (expected inner or distance)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Diagonal {
    Keep,
    Zero,
}

impl Diagonal {
    pub fn name(self) -> &'static str {
        match self {
            Diagonal::Keep => "keep",
            Diagonal::Zero => "zero",
        }
    }
}

impl FromStr for Diagonal {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "keep" => Ok(Diagonal::Keep),
            "zero" => Ok(Diagonal::Zero),
            other => Err(Error::invalid(format!(
                "unknown diagonal '{other}' (expected keep or zero)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub kernel: KernelKind,
    pub diagonal: Diagonal,
    pub envelope: Envelope,
}

impl KernelSpec {
    pub fn new(kernel: KernelKind, diagonal: Diagonal, envelope: Envelope) -> Self {
        Self {
            kernel,
            diagonal,
            envelope,
        }
    }

    /// `E g(X_i, X_i)`: 1 for the inner product, 0 for the squared distance.
    pub fn diagonal_kernel_value(&self) -> f64 {
        match self.kernel {
            KernelKind::InnerProduct => 1.0,
            KernelKind::SquaredDistance => 0.0,
        }
    }

    pub fn with_diagonal(&self, diagonal: Diagonal) -> Self {
        Self {
            diagonal,
            ..self.clone()
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.kernel.name(), self.diagonal.name(), self.envelope)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub ensemble: VectorEnsemble,
    pub n: usize,
    pub seed: u64,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} n={} seed={}", self.ensemble, self.n, self.seed)
    }
}

/// A real symmetric matrix, exactly symmetric by construction.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    data: DMatrix<f64>,
    spec: Option<KernelSpec>,
    provenance: Option<Provenance>,
}

fn mirror_upper(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in j + 1..n {
            m[(i, j)] = m[(j, i)];
        }
    }
}

impl KernelMatrix {
    /// Wraps a square matrix, copying the upper triangle onto the lower one.
    pub fn from_upper(mut data: DMatrix<f64>) -> Result<Self> {
        if !data.is_square() || data.nrows() == 0 {
            return Err(Error::invalid(format!(
                "kernel matrix must be square and non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        mirror_upper(&mut data);
        Ok(Self {
            data,
            spec: None,
            provenance: None,
        })
    }

    fn tagged(data: DMatrix<f64>, spec: &KernelSpec, sample: &SampleMatrix) -> Self {
        Self {
            data,
            spec: Some(spec.clone()),
            provenance: Some(Provenance {
                ensemble: sample.ensemble(),
                n: sample.n(),
                seed: sample.seed(),
            }),
        }
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn spec(&self) -> Option<&KernelSpec> {
        self.spec.as_ref()
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    /// Human-readable origin for error messages.
    pub fn describe(&self) -> String {
        match (&self.spec, &self.provenance) {
            (Some(s), Some(p)) => format!("{s} [{p}]"),
            (Some(s), None) => s.to_string(),
            _ => format!("{}x{} matrix", self.n(), self.n()),
        }
    }

    /// The matrix with row and column `j` deleted.
    pub fn principal_minor(&self, j: usize) -> Result<KernelMatrix> {
        let n = self.n();
        if j >= n || n < 2 {
            return Err(Error::invalid(format!("cannot delete row {j} of a {n}x{n} matrix")));
        }
        let data = self.data.clone().remove_row(j).remove_column(j);
        Ok(KernelMatrix {
            data,
            spec: None,
            provenance: None,
        })
    }
}

/// `G_ij = X_i^T X_j`.
pub fn gram(sample: &SampleMatrix) -> DMatrix<f64> {
    let x = sample.data();
    let mut g = x.tr_mul(x);
    mirror_upper(&mut g);
    g
}

/// `D_ij = ||X_i - X_j||^2` via `G_ii + G_jj - 2 G_ij`, clamped at 0, with an exact zero diagonal.
pub fn squared_distances(sample: &SampleMatrix) -> DMatrix<f64> {
    distances_from_gram(&gram(sample))
}

fn distances_from_gram(g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (g[(i, i)] + g[(j, j)] - 2.0 * g[(i, j)]).max(0.0)
        }
    })
}

fn kernel_values(kind: KernelKind, sample: &SampleMatrix) -> DMatrix<f64> {
    let g = gram(sample);
    match kind {
        KernelKind::InnerProduct => g,
        KernelKind::SquaredDistance => distances_from_gram(&g),
    }
}

/// Builds `A` from a sample: `A_ij = f(g(X_i, X_j), p)` off the diagonal, diagonal per `spec.diagonal`.
pub fn build(spec: &KernelSpec, sample: &SampleMatrix) -> Result<KernelMatrix> {
    let values = kernel_values(spec.kernel, sample);
    let data = apply_envelope(&values, spec, sample.p())?;
    Ok(KernelMatrix::tagged(data, spec, sample))
}

fn apply_envelope(values: &DMatrix<f64>, spec: &KernelSpec, p: usize) -> Result<DMatrix<f64>> {
    let n = values.nrows();
    let f = &spec.envelope;
    // column j holds the upper-triangle entries (i, j) for i <= j
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            (0..=j)
                .map(|i| {
                    let x = values[(i, j)];
                    let v = if i == j && spec.diagonal == Diagonal::Zero {
                        0.0
                    } else {
                        f.eval(x, p)
                    };
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(Error::Evaluation { i, j, x, value: v })
                    }
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = DMatrix::zeros(n, n);
    for (j, col) in columns.into_iter().enumerate() {
        for (i, v) in col.into_iter().enumerate() {
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Shift and scale of the linear companion `B = shift * I + scale * G`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearization {
    pub shift: f64,
    pub scale: f64,
    /// True when a derivative came from numerical differentiation only.
    pub numeric: bool,
}

impl Linearization {
    /// Coefficients of the linear companion for the kernel and diagonal model of `spec`.
    ///
    /// * inner, keep: `[f(1) - f(0) - f'(0)] I + f'(0) G`
    /// * inner, zero: `[-f(0) - f'(0)] I + f'(0) G`
    /// * distance, keep: `[f(0) - f(2) + 2 f'(2)] I - 2 f'(2) G`
    /// * distance, zero: the keep model shifted by `-f(0)`
    pub fn of(spec: &KernelSpec, p: usize) -> Result<Self> {
        let f = &spec.envelope;
        let f0 = f.eval(0.0, p);
        let (shift, scale, d) = match spec.kernel {
            KernelKind::InnerProduct => {
                let d0 = f.derivative(0.0, p)?;
                let shift = match spec.diagonal {
                    Diagonal::Keep => f.eval(1.0, p) - f0 - d0.value,
                    Diagonal::Zero => -f0 - d0.value,
                };
                (shift, d0.value, d0)
            }
            KernelKind::SquaredDistance => {
                let d2 = f.derivative(2.0, p)?;
                let keep = f0 - f.eval(2.0, p) + 2.0 * d2.value;
                let shift = match spec.diagonal {
                    Diagonal::Keep => keep,
                    Diagonal::Zero => keep - f0,
                };
                (shift, -2.0 * d2.value, d2)
            }
        };
        Ok(Self {
            shift,
            scale,
            numeric: d.is_numeric_only(),
        })
    }

    pub fn apply(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let n = g.nrows();
        let mut b = g * self.scale;
        for i in 0..n {
            b[(i, i)] += self.shift;
        }
        b
    }
}

/// The linearized matrix `B` predicted to share the limiting spectrum of `build(spec, sample)`.
pub fn linearized(spec: &KernelSpec, sample: &SampleMatrix) -> Result<KernelMatrix> {
    let lin = Linearization::of(spec, sample.p())?;
    let data = lin.apply(&gram(sample));
    Ok(KernelMatrix::tagged(data, spec, sample))
}

/// `B = (a f'(a) - f(a)) I + f'(a) K` for a general kernel-value matrix `K` and expansion point `a`.
pub fn transference_linearized(kernel: &DMatrix<f64>, f: &Envelope, a: f64, p: usize) -> Result<KernelMatrix> {
    let d = f.derivative(a, p)?.value;
    let lin = Linearization {
        shift: a * d - f.eval(a, p),
        scale: d,
        numeric: false,
    };
    KernelMatrix::from_upper(lin.apply(kernel))
}

/// Kernel matrices built from `sample` before and after replacing entry `(row, col)`.
///
/// Only row and column `col` of the two matrices can differ.
pub fn single_entry_swap(
    sample: &SampleMatrix,
    row: usize,
    col: usize,
    new_value: f64,
    spec: &KernelSpec,
) -> Result<(KernelMatrix, KernelMatrix)> {
    let swapped = sample.with_entry(row, col, new_value)?;
    Ok((build(spec, sample)?, build(spec, &swapped)?))
}

/// A random kernel-matrix model: population family, aspect ratio `gamma = p/n` and kernel.
#[derive(Debug, Clone)]
pub struct MatrixModel {
    pub family: Family,
    pub gamma: f64,
    pub spec: KernelSpec,
}

impl MatrixModel {
    pub fn new(family: Family, gamma: f64, spec: KernelSpec) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "aspect ratio gamma must be positive, got {gamma}"
            )));
        }
        Ok(Self { family, gamma, spec })
    }

    /// Dimension used for `n` columns: `round(gamma * n)`, at least 1.
    pub fn dimension(&self, n: usize) -> usize {
        ((self.gamma * n as f64).round() as usize).max(1)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleMatrix> {
        sample_matrix(VectorEnsemble::new(self.family, self.dimension(n))?, n, seed)
    }

    pub fn realize(&self, n: usize, seed: u64) -> Result<KernelMatrix> {
        build(&self.spec, &self.sample(n, seed)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn gaussian(p: usize, n: usize, seed: u64) -> SampleMatrix {
        sample_matrix(VectorEnsemble::new(Family::GaussianIid, p).unwrap(), n, seed).unwrap()
    }

    fn orthonormal(p: usize, n: usize) -> SampleMatrix {
        let data = DMatrix::from_fn(p, n, |i, j| if i == j { 1.0 } else { 0.0 });
        SampleMatrix::from_data(data, VectorEnsemble::new(Family::SphereUniform, p).unwrap(), 0).unwrap()
    }

    #[test]
    fn gram_of_orthonormal_is_identity() {
        let g = gram(&orthonormal(6, 4));
        assert_eq!(g, DMatrix::identity(4, 4));
        let d = squared_distances(&orthonormal(6, 4));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(d[(i, j)], if i == j { 0.0 } else { 2.0 });
            }
        }
    }

    #[test]
    fn sphere_gram_has_unit_diagonal() {
        let s = sample_matrix(VectorEnsemble::new(Family::SphereUniform, 30).unwrap(), 12, 5).unwrap();
        let g = gram(&s);
        assert!(g.diagonal().iter().all(|d| (d - 1.0).abs() < 1e-14));
    }

    #[test]
    fn distances_match_direct_subtraction() {
        let s = gaussian(40, 25, 3);
        let d = squared_distances(&s);
        let x = s.data();
        let mut worst: f64 = 0.0;
        for i in 0..25 {
            for j in 0..25 {
                let direct = (x.column(i) - x.column(j)).norm_squared();
                worst = worst.max((d[(i, j)] - direct).abs());
            }
        }
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn duplicate_columns_have_zero_distance() {
        let mut data = gaussian(8, 4, 1).data().clone();
        let c0 = data.column(0).clone_owned();
        data.set_column(2, &c0);
        let s = SampleMatrix::from_data(data, VectorEnsemble::new(Family::GaussianIid, 8).unwrap(), 1).unwrap();
        assert_eq!(squared_distances(&s)[(0, 2)], 0.0);
    }

    #[test]
    fn identity_envelope_reproduces_gram() {
        let s = gaussian(20, 15, 2);
        let spec = KernelSpec::new(KernelKind::InnerProduct, Diagonal::Keep, Envelope::identity());
        assert_eq!(build(&spec, &s).unwrap().data(), &gram(&s));
    }

    #[test]
    fn distance_keep_puts_f0_on_diagonal() {
        let s = gaussian(20, 15, 2);
        let spec = KernelSpec::new(KernelKind::SquaredDistance, Diagonal::Keep, Envelope::exp(1.0));
        let a = build(&spec, &s).unwrap();
        assert!(a.data().diagonal().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn sign_scaled_range() {
        let p = 16;
        let s = gaussian(p, 30, 4);
        let spec = KernelSpec::new(KernelKind::InnerProduct, Diagonal::Zero, Envelope::sign_scaled());
        let a = build(&spec, &s).unwrap();
        let v = 1.0 / (p as f64).sqrt();
        assert!(a.data().iter().all(|&x| x == 0.0 || x == v || x == -v));
        assert_eq!(a.data().trace(), 0.0);
    }

    #[test]
    fn non_finite_envelope_is_reported() {
        let s = gaussian(10, 5, 0);
        let f = Envelope::custom("recip", false, |x, _| 1.0 / x);
        let spec = KernelSpec::new(KernelKind::SquaredDistance, Diagonal::Keep, f);
        match build(&spec, &s) {
            Err(Error::Evaluation { i, j, x, .. }) => {
                assert_eq!((i, j), (0, 0));
                assert_eq!(x, 0.0);
            }
            other => panic!("expected evaluation error, got {other:?}"),
        }
    }

    #[test]
    fn linearized_examples() {
        let s = gaussian(30, 20, 9);
        let g = gram(&s);
        let id = KernelSpec::new(KernelKind::InnerProduct, Diagonal::Keep, Envelope::identity());
        assert!((linearized(&id, &s).unwrap().data() - &g).amax() < 1e-15);

        let ex = KernelSpec::new(KernelKind::InnerProduct, Diagonal::Keep, Envelope::exp(1.0));
        let expected = DMatrix::identity(20, 20) * (E - 2.0) + &g;
        assert!((linearized(&ex, &s).unwrap().data() - expected).amax() < 1e-14);

        let dist = KernelSpec::new(KernelKind::SquaredDistance, Diagonal::Keep, Envelope::exp(-1.0));
        let e2 = (-2.0f64).exp();
        let expected = DMatrix::identity(20, 20) * (1.0 - 3.0 * e2) + &g * (2.0 * e2);
        assert!((linearized(&dist, &s).unwrap().data() - expected).amax() < 1e-14);
    }

    #[test]
    fn linearized_needs_derivative() {
        let s = gaussian(30, 20, 9);
        let spec = KernelSpec::new(KernelKind::InnerProduct, Diagonal::Zero, Envelope::sign_scaled());
        assert!(matches!(linearized(&spec, &s), Err(Error::Capability(_))));
    }

    #[test]
    fn transference_examples() {
        let s = gaussian(30, 20, 1);
        let g = gram(&s);
        let b = transference_linearized(&g, &Envelope::identity(), 0.0, 30).unwrap();
        assert!((b.data() - &g).amax() < 1e-15);

        let c = transference_linearized(&g, &Envelope::constant(2.5), 0.7, 30).unwrap();
        assert_eq!(c.data(), &(DMatrix::identity(20, 20) * -2.5));
    }

    #[test]
    fn transference_at_two_matches_distance_linearization() {
        // f'(2) D = f'(2)(u 1^T + 1 u^T) - 2 f'(2) G off the diagonal, with u = diag(G);
        // the two routes differ by exactly that rank-2 term.
        let s = gaussian(50, 30, 8);
        let f = Envelope::exp(-1.0);
        let b_tr = transference_linearized(&squared_distances(&s), &f, 2.0, 50).unwrap();
        let spec = KernelSpec::new(KernelKind::SquaredDistance, Diagonal::Zero, f.clone());
        let b_lin = linearized(&spec, &s).unwrap();
        let g = gram(&s);
        let d2 = f.exact_derivative(2.0, 50).unwrap();
        let rank2 = DMatrix::from_fn(30, 30, |i, j| d2 * (g[(i, i)] + g[(j, j)]));
        // on the diagonal D_ii + 2 G_ii = 2 u_i as well
        let expected = b_lin.data() + rank2;
        assert!((b_tr.data() - expected).amax() < 1e-12);
    }

    #[test]
    fn swap_only_touches_one_row_and_column() {
        let s = gaussian(12, 9, 6);
        let spec = KernelSpec::new(KernelKind::InnerProduct, Diagonal::Keep, Envelope::exp(1.0));
        let (before, after) = single_entry_swap(&s, 3, 5, 0.9, &spec).unwrap();
        let delta = after.data() - before.data();
        for i in 0..9 {
            for j in 0..9 {
                if i != 5 && j != 5 {
                    assert_eq!(delta[(i, j)], 0.0);
                }
            }
        }
        let old = s.data()[(3, 5)];
        let (b, a) = single_entry_swap(&s, 3, 5, old, &spec).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(single_entry_swap(&s, 12, 0, 1.0, &spec).is_err());
    }

    #[test]
    fn principal_minor_shape() {
        let a = KernelMatrix::from_upper(DMatrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64)).unwrap();
        let m = a.principal_minor(1).unwrap();
        assert_eq!(m.n(), 3);
        assert_eq!(m.data()[(0, 1)], 2.0);
        assert_eq!(m.data()[(1, 0)], 2.0);
    }
}
