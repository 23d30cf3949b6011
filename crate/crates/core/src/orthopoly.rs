//! Moments of `xi_p = sqrt(p) X^T Y`, the orthonormal polynomials of its law,
//! and the expansion coefficients of rescaled envelopes in that basis.

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::ensembles::{stream, Family};
use crate::envelope::Envelope;
use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Highest moment order the exact method handles.
pub const MAX_EXACT_ORDER: usize = 16;
/// Highest polynomial degree used for envelope expansions.
pub const MAX_DEGREE: usize = 8;
/// Default Monte Carlo sample count.
pub const DEFAULT_SAMPLES: usize = 1_000_000;

const BATCH: usize = 1 << 15;
const DEGENERACY_RATIO: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentMethod {
    Exact,
    MonteCarlo { samples: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum MomentSource {
    Exact,
    MonteCarlo {
        samples: usize,
        std_errors: Vec<f64>,
    },
    /// Moments of the standard normal.
    GaussianLimit,
}

/// `m_0, ..., m_K` of some law on the line.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSequence {
    values: Vec<f64>,
    pub source: MomentSource,
    pub family: Option<Family>,
    pub p: Option<usize>,
}

impl MomentSequence {
    pub fn from_values(values: Vec<f64>, source: MomentSource) -> Result<Self> {
        if values.first() != Some(&1.0) {
            return Err(Error::invalid("moment sequences start with m_0 = 1"));
        }
        Ok(Self {
            values,
            source,
            family: None,
            p: None,
        })
    }

    /// `E N^k` for `k <= order`: `(k - 1)!!` for even `k`, 0 for odd.
    pub fn gaussian_limit(order: usize) -> Self {
        let values = (0..=order)
            .map(|k| if k % 2 == 1 { 0.0 } else { double_factorial(k) })
            .collect();
        Self {
            values,
            source: MomentSource::GaussianLimit,
            family: None,
            p: None,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_order(&self) -> usize {
        self.values.len() - 1
    }

    /// Standard error of `m_k`; 0 for exact sources.
    pub fn std_error(&self, k: usize) -> f64 {
        match &self.source {
            MomentSource::MonteCarlo { std_errors, .. } => std_errors.get(k).copied().unwrap_or(f64::NAN),
            _ => 0.0,
        }
    }

    pub fn is_exact(&self) -> bool {
        !matches!(self.source, MomentSource::MonteCarlo { .. })
    }

    /// Hankel matrix `(m_{i+k})_{i,k <= j}`.
    pub fn hankel(&self, j: usize) -> Result<DMatrix<f64>> {
        if 2 * j > self.max_order() {
            return Err(Error::invalid(format!(
                "Hankel matrix of order {j} needs moments up to {}, have {}",
                2 * j,
                self.max_order()
            )));
        }
        Ok(DMatrix::from_fn(j + 1, j + 1, |r, c| self.values[r + c]))
    }
}

/// `(k - 1)!!` for even `k` (with `0!! = 1` convention for `k = 0`).
fn double_factorial(k: usize) -> f64 {
    (1..k).step_by(2).map(|v| v as f64).product()
}

/// `E U^k` of a standardized entry, as an exact rational.
fn entry_moment(family: Family, k: usize) -> BigRational {
    if k % 2 == 1 {
        return BigRational::zero();
    }
    match family {
        Family::GaussianIid => {
            let v: BigInt = (1..k).step_by(2).map(BigInt::from).product();
            BigRational::from_integer(v)
        }
        Family::RademacherIid => BigRational::one(),
        Family::SphereUniform => unreachable!("sphere coordinates are not independent"),
    }
}

fn factorial(k: usize) -> BigInt {
    (1..=k).map(BigInt::from).product()
}

/// Partitions of `k` into parts `>= 2`, each in non-increasing order.
fn partitions(k: usize, max_part: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if k == 0 {
        out.push(prefix.clone());
        return;
    }
    for part in (2..=max_part.min(k)).rev() {
        prefix.push(part);
        partitions(k - part, part, prefix, out);
        prefix.pop();
    }
}

/// Exact `E xi_p^k` for `k <= order` and an iid-entry family.
///
/// Writing `xi_p = p^{-1/2} sum_i W_i` with `W_i = U_i V_i`, the expansion of
/// the `k`-th power groups index patterns by the partition of `k` they induce;
/// parts of size 1 vanish because `E W = 0`.
pub fn exact_xi_moments(family: Family, p: usize, order: usize) -> Result<Vec<BigRational>> {
    if !family.is_iid() {
        return Err(Error::Capability(format!(
            "exact moments need independent coordinates; use Monte Carlo for {family}"
        )));
    }
    if p == 0 {
        return Err(Error::invalid("p must be at least 1"));
    }
    if order > MAX_EXACT_ORDER {
        return Err(Error::invalid(format!(
            "exact moments are limited to order {MAX_EXACT_ORDER}, got {order}"
        )));
    }
    let w_moment: Vec<BigRational> = (0..=order)
        .map(|k| {
            let u = entry_moment(family, k);
            &u * &u
        })
        .collect();
    let pb = BigInt::from(p);
    let mut out = Vec::with_capacity(order + 1);
    for k in 0..=order {
        if k % 2 == 1 {
            out.push(BigRational::zero());
            continue;
        }
        let mut parts = Vec::new();
        partitions(k, k, &mut Vec::new(), &mut parts);
        let mut total = BigRational::zero();
        for lambda in &parts {
            let r = lambda.len();
            if r > p {
                continue;
            }
            let mut denom = BigInt::one();
            for &part in lambda {
                denom *= factorial(part);
            }
            let mut run = 1;
            for w in lambda.windows(2) {
                if w[0] == w[1] {
                    run += 1;
                } else {
                    denom *= factorial(run);
                    run = 1;
                }
            }
            denom *= factorial(run);
            let falling: BigInt = (0..r).map(|i| &pb - BigInt::from(i)).product();
            let mut term = BigRational::new(factorial(k) * falling, denom);
            for &part in lambda {
                term *= &w_moment[part];
            }
            total += term;
        }
        let scale = BigRational::new(BigInt::one(), pb.pow((k / 2) as u32));
        out.push(total * scale);
    }
    Ok(out)
}

/// One draw of `xi_p` for independent `X, Y` from `family`.
///
/// Each family has a closed-form representation of `sqrt(p) X^T Y` that costs O(1):
/// Gaussian `sqrt(chi2_p / p) N`, Rademacher `(2 Bin(p, 1/2) - p) / sqrt(p)`,
/// sphere `sqrt(p) N / sqrt(N^2 + chi2_{p-1})`.
pub(crate) struct XiSampler {
    family: Family,
    p: usize,
    chi: Option<ChiSquared<f64>>,
    binomial: Option<Binomial>,
}

impl XiSampler {
    pub(crate) fn new(family: Family, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("p must be at least 1"));
        }
        let chi_dof = match family {
            Family::GaussianIid => Some(p as f64),
            Family::SphereUniform if p > 1 => Some((p - 1) as f64),
            _ => None,
        };
        let chi = chi_dof.map(|k| ChiSquared::new(k).expect("positive degrees of freedom"));
        let binomial = match family {
            Family::RademacherIid => Some(Binomial::new(p as u64, 0.5).expect("valid binomial")),
            _ => None,
        };
        Ok(Self {
            family,
            p,
            chi,
            binomial,
        })
    }

    pub(crate) fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let pf = self.p as f64;
        match self.family {
            Family::GaussianIid => {
                let n: f64 = rng.sample(StandardNormal);
                let chi = self.chi.as_ref().expect("gaussian sampler").sample(rng);
                (chi / pf).sqrt() * n
            }
            Family::RademacherIid => {
                let b = self.binomial.as_ref().expect("rademacher sampler").sample(rng) as f64;
                (2.0 * b - pf) / pf.sqrt()
            }
            Family::SphereUniform => {
                let n: f64 = rng.sample(StandardNormal);
                match &self.chi {
                    None => n.signum(),
                    Some(chi) => {
                        let rest = chi.sample(rng);
                        pf.sqrt() * n / (n * n + rest).sqrt()
                    }
                }
            }
        }
    }
}

/// Runs `samples` draws of `xi_p` in fixed-size batches, each on its own
/// sub-stream, and sums the per-batch accumulators.
fn monte_carlo<A, F>(family: Family, p: usize, samples: usize, seed: u64, init: A, step: F) -> Result<A>
where
    A: Clone + Send + Sync + std::ops::AddAssign,
    F: Fn(&mut A, f64) + Sync,
{
    let sampler = XiSampler::new(family, p)?;
    let batches = samples.div_ceil(BATCH);
    let partial: Vec<A> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, b as u64);
            let mut acc = init.clone();
            let count = BATCH.min(samples - b * BATCH);
            for _ in 0..count {
                step(&mut acc, sampler.sample(&mut rng));
            }
            acc
        })
        .collect();
    let mut total = init;
    for part in partial {
        total += part;
    }
    Ok(total)
}

/// Vector of sums with elementwise `+=`.
#[derive(Debug, Clone, PartialEq)]
struct Sums(Vec<f64>);

impl std::ops::AddAssign for Sums {
    fn add_assign(&mut self, rhs: Self) {
        self.0.iter_mut().zip(rhs.0).for_each(|(a, b)| *a += b);
    }
}

/// `m_0, ..., m_order` of `xi_p`.
pub fn xi_moments(family: Family, p: usize, order: usize, method: MomentMethod, seed: u64) -> Result<MomentSequence> {
    let (values, source) = match method {
        MomentMethod::Exact => {
            let exact = exact_xi_moments(family, p, order)?;
            let values = exact.iter().map(|m| m.to_f64().unwrap_or(f64::NAN)).collect();
            (values, MomentSource::Exact)
        }
        MomentMethod::MonteCarlo { samples } => {
            if samples < 2 {
                return Err(Error::invalid("Monte Carlo moments need at least 2 samples"));
            }
            // powers 0..=2*order, so that each m_k gets a variance estimate
            let top = 2 * order;
            let sums = monte_carlo(family, p, samples, seed, Sums(vec![0.0; top + 1]), |acc, x| {
                let mut power = 1.0;
                for slot in acc.0.iter_mut() {
                    *slot += power;
                    power *= x;
                }
            })?;
            let nf = samples as f64;
            let raw: Vec<f64> = sums.0.iter().map(|s| s / nf).collect();
            let mut values = raw[..=order].to_vec();
            values[0] = 1.0;
            let std_errors = (0..=order)
                .map(|k| {
                    if k == 0 {
                        0.0
                    } else {
                        ((raw[2 * k] - raw[k] * raw[k]).max(0.0) / nf).sqrt()
                    }
                })
                .collect();
            (values, MomentSource::MonteCarlo { samples, std_errors })
        }
    };
    Ok(MomentSequence {
        values,
        source,
        family: Some(family),
        p: Some(p),
    })
}

/// Monomial coefficients of the orthonormal Hermite polynomial `h_k`
/// (index `i` holds the coefficient of `x^i`).
pub fn hermite(k: usize) -> Vec<f64> {
    let mut prev = vec![1.0];
    if k == 0 {
        return prev;
    }
    let mut cur = vec![0.0, 1.0];
    for j in 1..k {
        // h_{j+1} = (x h_j - sqrt(j) h_{j-1}) / sqrt(j + 1)
        let mut next = vec![0.0; j + 2];
        for (i, c) in cur.iter().enumerate() {
            next[i + 1] += c;
        }
        for (i, c) in prev.iter().enumerate() {
            next[i] -= (j as f64).sqrt() * c;
        }
        let norm = ((j + 1) as f64).sqrt();
        next.iter_mut().for_each(|c| *c /= norm);
        prev = std::mem::replace(&mut cur, next);
    }
    cur
}

/// Evaluates a polynomial given by monomial coefficients.
pub fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn determinant(m: DMatrix<f64>) -> f64 {
    if m.is_empty() {
        1.0
    } else {
        m.lu().determinant()
    }
}

/// `det M_j`, erroring when it falls below the degeneracy threshold relative
/// to the product of its diagonal.
fn checked_hankel_det(m: &MomentSequence, j: usize) -> Result<f64> {
    let h = m.hankel(j)?;
    let scale: f64 = h.diagonal().iter().map(|v| v.abs()).product();
    let det = determinant(h);
    if !(det > DEGENERACY_RATIO * scale) {
        return Err(Error::Degenerate {
            order: j,
            det,
            points: j + 1,
        });
    }
    Ok(det)
}

fn ortho_from_dets(m: &MomentSequence, k: usize, det_prev: f64, det_k: f64) -> Result<Vec<f64>> {
    if k == 0 {
        return Ok(vec![1.0]);
    }
    // Bordered Hankel matrix: rows m_{i..i+k} for i < k, then (1, x, ..., x^k).
    // The coefficient of x^i is the cofactor of the last-row entry i.
    let rows = DMatrix::from_fn(k, k + 1, |r, c| m.values[r + c]);
    let c_k = 1.0 / (det_prev * det_k).sqrt();
    let coeffs = (0..=k)
        .map(|i| {
            let minor = rows.clone().remove_column(i);
            let sign = if (k + i).is_multiple_of(2) { 1.0 } else { -1.0 };
            c_k * sign * determinant(minor)
        })
        .collect();
    Ok(coeffs)
}

/// Monomial coefficients of the `k`-th orthonormal polynomial of the moment
/// functional, with positive leading coefficient.
pub fn orthopoly_from_moments(m: &MomentSequence, k: usize) -> Result<Vec<f64>> {
    let det_prev = if k == 0 { 1.0 } else { checked_hankel_det(m, k - 1)? };
    for j in 0..k.saturating_sub(1) {
        checked_hankel_det(m, j)?;
    }
    let det_k = checked_hankel_det(m, k)?;
    ortho_from_dets(m, k, det_prev, det_k)
}

/// `p_0, ..., p_L` of a moment functional.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoBasis {
    degree: usize,
    coeffs: Vec<Vec<f64>>,
    hankel_dets: Vec<f64>,
    moments: MomentSequence,
}

impl OrthoBasis {
    pub fn new(moments: &MomentSequence, degree: usize) -> Result<Self> {
        let hankel_dets = (0..=degree)
            .map(|j| checked_hankel_det(moments, j))
            .collect::<Result<Vec<_>>>()?;
        let coeffs = (0..=degree)
            .map(|k| {
                let prev = if k == 0 { 1.0 } else { hankel_dets[k - 1] };
                ortho_from_dets(moments, k, prev, hankel_dets[k])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            degree,
            coeffs,
            hankel_dets,
            moments: moments.clone(),
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn coeffs(&self, k: usize) -> &[f64] {
        &self.coeffs[k]
    }

    pub fn hankel_dets(&self) -> &[f64] {
        &self.hankel_dets
    }

    pub fn moments(&self) -> &MomentSequence {
        &self.moments
    }

    pub fn eval(&self, k: usize, x: f64) -> f64 {
        poly_eval(&self.coeffs[k], x)
    }

    /// `<p_j, p_k>` under the moment functional.
    pub fn gram(&self) -> DMatrix<f64> {
        let m = self.moments.values();
        DMatrix::from_fn(self.degree + 1, self.degree + 1, |j, k| {
            let mut s = 0.0;
            for (a, ca) in self.coeffs[j].iter().enumerate() {
                for (b, cb) in self.coeffs[k].iter().enumerate() {
                    s += ca * cb * m[a + b];
                }
            }
            s
        })
    }

    /// `max |<p_j, p_k> - delta_jk|`.
    pub fn gram_residual(&self) -> f64 {
        let g = self.gram();
        let n = g.nrows();
        (g - DMatrix::<f64>::identity(n, n)).amax()
    }
}

/// `max_x |p_k(x) - h_k(x)| / (1 + |x|^k)` over `grid`.
pub fn hermite_deviation(basis: &OrthoBasis, k: usize, grid: &[f64]) -> Result<f64> {
    if k > basis.degree() {
        return Err(Error::invalid(format!(
            "degree {k} exceeds basis degree {}",
            basis.degree()
        )));
    }
    let h = hermite(k);
    Ok(grid
        .iter()
        .map(|&x| (basis.eval(k, x) - poly_eval(&h, x)).abs() / (1.0 + x.abs().powi(k as i32)))
        .fold(0.0, f64::max))
}

/// Expansion of `k(x, p) = sqrt(p) f(x / sqrt(p), p)` in the orthonormal basis of `xi_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibleParams {
    pub family: Family,
    pub p: usize,
    pub degree: usize,
    /// `a_{0,p}, ..., a_{L,p}`.
    pub coeffs: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// `a_{1,p}`.
    pub a: f64,
    /// `max(Var k(xi_p), sum_{1<=k<=L} a_k^2)`, so that `a^2 <= nu`.
    pub nu: f64,
    /// The variance estimate before the floor above.
    pub variance: f64,
    pub variance_std_error: f64,
    /// `max(Var k - sum_{1<=k<=L} a_k^2, 0)`.
    pub tail_mass: f64,
    /// Set when `Var k - sum a_k^2` is more than three standard errors below 0.
    pub inconsistent: bool,
    /// True when every quantity came from exact moments rather than sampling.
    pub exact: bool,
}

impl AdmissibleParams {
    pub fn to_record(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("type", "admissible");
        kv.set("family", self.family);
        kv.set("p", self.p);
        kv.set("degree", self.degree);
        kv.set("a", self.a);
        kv.set("nu", self.nu);
        kv.set("variance", self.variance);
        kv.set("tail_mass", self.tail_mass);
        kv.set("inconsistent", self.inconsistent);
        kv.set("exact", self.exact);
        for (k, (c, se)) in self.coeffs.iter().zip(&self.std_errors).enumerate() {
            kv.set(&format!("a{k}"), c);
            kv.set(&format!("a{k}_stderr"), se);
        }
        kv
    }
}

/// Combination of independent pieces used when sampling `k(xi)` against the basis.
#[derive(Debug, Clone, PartialEq)]
struct ExpansionSums {
    count: f64,
    k: f64,
    k2: f64,
    /// `sum k p_j` and `sum (k p_j)^2` per degree.
    cross: Vec<f64>,
    cross2: Vec<f64>,
}

impl std::ops::AddAssign for ExpansionSums {
    fn add_assign(&mut self, rhs: Self) {
        self.count += rhs.count;
        self.k += rhs.k;
        self.k2 += rhs.k2;
        self.cross.iter_mut().zip(rhs.cross).for_each(|(a, b)| *a += b);
        self.cross2.iter_mut().zip(rhs.cross2).for_each(|(a, b)| *a += b);
    }
}

/// Coefficients `a_{k,p} = E[k(xi_p, p) p_{k,p}(xi_p)]` for `k <= degree`, plus `a` and `nu`.
///
/// The basis comes from exact moments when the family allows it. Polynomial
/// envelopes are expanded exactly through the moment functional; others are
/// sampled with `samples` draws of `xi_p`.
pub fn envelope_coeffs(
    f: &Envelope,
    family: Family,
    p: usize,
    degree: usize,
    samples: usize,
    seed: u64,
) -> Result<AdmissibleParams> {
    if degree == 0 || degree > MAX_DEGREE {
        return Err(Error::invalid(format!(
            "expansion degree must be in 1..={MAX_DEGREE}, got {degree}"
        )));
    }
    if p == 0 {
        return Err(Error::invalid("p must be at least 1"));
    }
    let sqrt_p = (p as f64).sqrt();
    let poly = rescaled_polynomial(f, p);
    let (moments, basis) = expansion_basis(family, p, degree, poly.as_deref(), samples, seed)?;

    let (coeffs, std_errors, variance, variance_std_error, exact) = match (&poly, moments.is_exact()) {
        (Some(kc), true) => {
            let m = moments.values();
            let pair = |u: &[f64], v: &[f64]| -> f64 {
                let mut s = 0.0;
                for (i, a) in u.iter().enumerate() {
                    for (j, b) in v.iter().enumerate() {
                        s += a * b * m[i + j];
                    }
                }
                s
            };
            let coeffs: Vec<f64> = (0..=degree).map(|j| pair(kc, basis.coeffs(j))).collect();
            let mean = pair(kc, &[1.0]);
            let variance = pair(kc, kc) - mean * mean;
            (coeffs, vec![0.0; degree + 1], variance, 0.0, true)
        }
        _ => {
            if samples < 2 {
                return Err(Error::invalid("Monte Carlo expansion needs at least 2 samples"));
            }
            let init = ExpansionSums {
                count: 0.0,
                k: 0.0,
                k2: 0.0,
                cross: vec![0.0; degree + 1],
                cross2: vec![0.0; degree + 1],
            };
            let sums = monte_carlo(family, p, samples, sub_stream_seed(seed), init, |acc, xi| {
                let kv = sqrt_p * f.eval(xi / sqrt_p, p);
                acc.count += 1.0;
                acc.k += kv;
                acc.k2 += kv * kv;
                for j in 0..=degree {
                    let t = kv * basis.eval(j, xi);
                    acc.cross[j] += t;
                    acc.cross2[j] += t * t;
                }
            })?;
            if !sums.k2.is_finite() {
                return Err(Error::invalid(format!("E k(xi)^2 is not finite for envelope '{f}'")));
            }
            let n = sums.count;
            let coeffs: Vec<f64> = sums.cross.iter().map(|s| s / n).collect();
            let std_errors = sums
                .cross2
                .iter()
                .zip(&coeffs)
                .map(|(s2, c)| ((s2 / n - c * c).max(0.0) / n).sqrt())
                .collect();
            let mean = sums.k / n;
            let second = sums.k2 / n;
            let variance = (second - mean * mean) * n / (n - 1.0);
            // delta-method error of the variance, bounded via the second moment
            let variance_std_error = (2.0 * second * second / n).sqrt();
            (coeffs, std_errors, variance, variance_std_error, false)
        }
    };
    let explained: f64 = coeffs[1..].iter().map(|c| c * c).sum();
    let raw_tail = variance - explained;
    let tolerance = 3.0 * (variance_std_error + 1e-12 * variance.abs().max(1.0));
    Ok(AdmissibleParams {
        family,
        p,
        degree,
        a: coeffs[1],
        nu: variance.max(explained),
        variance,
        variance_std_error,
        tail_mass: raw_tail.max(0.0),
        inconsistent: raw_tail < -tolerance,
        coeffs,
        std_errors,
        exact,
    })
}

/// Monomial coefficients of `k(x, p) = sqrt(p) f(x / sqrt(p))` for polynomial envelopes.
fn rescaled_polynomial(f: &Envelope, p: usize) -> Option<Vec<f64>> {
    let sqrt_p = (p as f64).sqrt();
    f.polynomial().map(|c| {
        c.iter()
            .enumerate()
            .map(|(i, ci)| ci * sqrt_p.powf(1.0 - i as f64))
            .collect()
    })
}

/// Moments of `xi_p` (exact when the family allows) and the orthonormal basis up to `degree`.
fn expansion_basis(
    family: Family,
    p: usize,
    degree: usize,
    poly: Option<&[f64]>,
    samples: usize,
    seed: u64,
) -> Result<(MomentSequence, OrthoBasis)> {
    let order = match poly {
        Some(c) => (2 * degree).max(2 * (c.len() - 1)).max(degree + c.len() - 1),
        None => 2 * degree,
    };
    let moments = if family.is_iid() && order <= MAX_EXACT_ORDER {
        xi_moments(family, p, order, MomentMethod::Exact, seed)?
    } else {
        xi_moments(
            family,
            p,
            order.max(2 * degree),
            MomentMethod::MonteCarlo { samples },
            seed,
        )?
    };
    let basis = OrthoBasis::new(&moments, degree)?;
    Ok((moments, basis))
}

/// The envelope whose rescaled form is the degree-`L` truncation
/// `sum_{k<=L} a_{k,p} p_{k,p}` of `k(x, p)`, together with its coefficients.
pub fn truncated_envelope(
    f: &Envelope,
    family: Family,
    p: usize,
    degree: usize,
    samples: usize,
    seed: u64,
) -> Result<(Envelope, AdmissibleParams)> {
    let params = envelope_coeffs(f, family, p, degree, samples, seed)?;
    let poly = rescaled_polynomial(f, p);
    let (_, basis) = expansion_basis(family, p, degree, poly.as_deref(), samples, seed)?;
    let mut k_poly = vec![0.0; degree + 1];
    for (j, a) in params.coeffs.iter().enumerate() {
        for (i, c) in basis.coeffs(j).iter().enumerate() {
            k_poly[i] += a * c;
        }
    }
    let name = format!("truncated:L={degree},of={f}");
    let env = Envelope::custom(name, true, move |x, q| {
        let s = (q as f64).sqrt();
        poly_eval(&k_poly, s * x) / s
    });
    Ok((env, params))
}

/// Keeps the expansion samples independent of the moment samples.
fn sub_stream_seed(seed: u64) -> u64 {
    crate::ensembles::sub_seed(seed, 0x6b5f_7869)
}
