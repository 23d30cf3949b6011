//! The limiting law of p-dependent kernel matrices, defined through its Stieltjes transform
//!
//! `-1/m = z + a (1 - 1/(1 + (a/gamma) m)) + ((nu - a^2)/gamma) m`,
//!
//! and its inversion to a density and CDF on a real grid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kv::{sidecar_path, KeyValues};
use crate::mp_theory::mp_edges;
use crate::spectral::SpectralLaw;

const TOLERANCE: f64 = 1e-13;
const MAX_STEPS: usize = 10_000;
const DAMPING: f64 = 0.5;
const MIN_DAMPING: f64 = 1.0 / 64.0;
/// Accepted residual of the equation, relative to `max(1, |z|)`.
pub const RESIDUAL_BOUND: f64 = 1e-10;
/// Accepted mass deficit of the inverted density.
pub const MASS_TOLERANCE: f64 = 1e-3;
const MAX_WIDENINGS: usize = 10;

/// Parameters `(a, nu, gamma)` of the equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitParams {
    pub a: f64,
    pub nu: f64,
    pub gamma: f64,
}

impl LimitParams {
    pub fn new(a: f64, nu: f64, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma must be positive and finite, got {gamma}"
            )));
        }
        if !a.is_finite() || !nu.is_finite() {
            return Err(Error::invalid("a and nu must be finite"));
        }
        if a * a > nu * (1.0 + 1e-12) + 1e-15 {
            return Err(Error::invalid(format!(
                "admissible parameters need a^2 <= nu, got a = {a}, nu = {nu}"
            )));
        }
        Ok(Self { a, nu, gamma })
    }

    fn excess(&self) -> f64 {
        (self.nu - self.a * self.a).max(0.0) / self.gamma
    }

    /// `z + a (1 - 1/(1 + (a/gamma) m)) + ((nu - a^2)/gamma) m`
    fn right_side(&self, m: Complex64, z: Complex64) -> Complex64 {
        let pole = 1.0 + m * (self.a / self.gamma);
        z + self.a * (1.0 - pole.inv()) + m * self.excess()
    }

    /// `|-1/m - right_side(m, z)|`
    pub fn residual(&self, m: Complex64, z: Complex64) -> f64 {
        (-m.inv() - self.right_side(m, z)).norm()
    }

    /// A real interval containing the support when `nu = a^2`, widened by the
    /// semicircle radius of the remaining variance.
    pub fn support_hint(&self) -> (f64, f64) {
        let (lo, hi) = mp_edges(self.gamma);
        let (e0, e1) = (-self.a + self.a * lo.min(0.0), -self.a + self.a * hi);
        let r = 2.0 * self.excess().sqrt();
        (e0.min(e1) - r, e0.max(e1) + r)
    }

    pub fn to_record(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("type", "functional-equation");
        kv.set("a", self.a);
        kv.set("nu", self.nu);
        kv.set("gamma", self.gamma);
        kv
    }
}

fn check_upper(z: Complex64) -> Result<()> {
    if z.im > 0.0 && z.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("the equation is solved for Im z > 0, got {z}")))
    }
}

/// Damped fixed-point iteration from `init`; `None` when it leaves the upper
/// half-plane, hits the pole, or does not settle.
fn iterate(params: &LimitParams, z: Complex64, init: Complex64, damping: f64) -> Option<(Complex64, bool)> {
    let mut m = init;
    for _ in 0..MAX_STEPS {
        let pole = 1.0 + m * (params.a / params.gamma);
        if pole.norm() < 1e-14 {
            return None;
        }
        let target = -params.right_side(m, z).inv();
        let next = m * (1.0 - damping) + target * damping;
        if !(next.im > 0.0) || !next.is_finite() {
            return None;
        }
        let change = (next - m).norm();
        m = next;
        if change < TOLERANCE {
            return Some((m, true));
        }
    }
    Some((m, false))
}

/// Newton steps on `1/m + right_side(m, z) = 0`, kept only while they lower the
/// residual and stay in the upper half-plane.
fn polish(params: &LimitParams, z: Complex64, mut m: Complex64) -> Complex64 {
    let c = params.a / params.gamma;
    let mut best = params.residual(m, z);
    for _ in 0..8 {
        let pole = 1.0 + m * c;
        let value = m.inv() + params.right_side(m, z);
        let slope = -(m * m).inv() + params.a * c / (pole * pole) + params.excess();
        if slope.norm() == 0.0 {
            break;
        }
        let next = m - value / slope;
        let r = params.residual(next, z);
        if !(next.im > 0.0) || !(r < best) {
            break;
        }
        m = next;
        best = r;
    }
    m
}

/// Solves the equation at `z` starting from `init`.
///
/// Failed passes restart from `-1/z` with halved damping down to 1/64.
pub fn solve_point_from(params: &LimitParams, z: Complex64, init: Complex64) -> Result<Complex64> {
    check_upper(z)?;
    let mut damping = DAMPING;
    let mut start = if init.im > 0.0 && init.is_finite() {
        init
    } else {
        -z.inv()
    };
    let mut last = start;
    while damping >= MIN_DAMPING {
        if let Some((m, _converged)) = iterate(params, z, start, damping) {
            let m = polish(params, z, m);
            if params.residual(m, z) <= RESIDUAL_BOUND * z.norm().max(1.0) && m.im > 0.0 {
                return Ok(m);
            }
            last = m;
        }
        damping *= 0.5;
        start = -z.inv();
    }
    Err(Error::Solver {
        z,
        residual: params.residual(last, z),
    })
}

/// Solves the equation at `z` from the cold start `-1/z`.
pub fn solve_point(params: &LimitParams, z: Complex64) -> Result<Complex64> {
    solve_point_from(params, z, -z.inv())
}

/// A point mass found by its `1/epsilon` growth under Stieltjes inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub location: f64,
    pub mass: f64,
}

/// The limiting law tabulated on a grid at height `epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitLaw {
    pub params: LimitParams,
    pub epsilon: f64,
    x: Vec<f64>,
    m: Vec<Complex64>,
    /// `Im m(x + i epsilon) / pi`, with detected atoms' Cauchy profiles removed.
    density: Vec<f64>,
    /// Trapezoid CDF of `density`, without atoms.
    continuous_cdf: Vec<f64>,
    pub atoms: Vec<Atom>,
    /// Times the initial range was doubled to capture the mass.
    pub widenings: usize,
}

impl LimitLaw {
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn m_values(&self) -> &[Complex64] {
        &self.m
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    /// Continuous mass plus atoms captured by the grid.
    pub fn total_mass(&self) -> f64 {
        self.continuous_cdf.last().copied().unwrap_or(0.0) + self.atoms.iter().map(|a| a.mass).sum::<f64>()
    }

    /// CDF on the grid including atoms.
    pub fn cdf_values(&self) -> Vec<f64> {
        self.x.iter().map(|&x| law_cdf(self, x)).collect()
    }

    fn continuous_at(&self, x: f64) -> f64 {
        let n = self.x.len();
        if x <= self.x[0] {
            return 0.0;
        }
        if x >= self.x[n - 1] {
            return self.continuous_cdf[n - 1];
        }
        let k = self.x.partition_point(|&v| v <= x) - 1;
        let (x0, x1) = (self.x[k], self.x[k + 1]);
        let (d0, d1) = (self.density[k], self.density[k + 1]);
        let t = x - x0;
        // exact integral of the linear interpolant, consistent with the trapezoid table
        let slope = (d1 - d0) / (x1 - x0);
        self.continuous_cdf[k] + d0 * t + 0.5 * slope * t * t
    }

    pub fn to_record(&self) -> KeyValues {
        let mut kv = self.params.to_record();
        kv.set("epsilon", self.epsilon);
        kv.set("n_points", self.x.len());
        kv.set("x_min", self.x[0]);
        kv.set("x_max", self.x[self.x.len() - 1]);
        kv.set("total_mass", self.total_mass());
        kv.set("widenings", self.widenings);
        kv.set("atoms", self.atoms.len());
        for (i, atom) in self.atoms.iter().enumerate() {
            kv.set(&format!("atom{i}_location"), atom.location);
            kv.set(&format!("atom{i}_mass"), atom.mass);
        }
        kv
    }

    /// CSV with columns `x,density,cdf,re_m,im_m` and a key-value sidecar.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("x,density,cdf,re_m,im_m\n");
        for ((x, m), (d, c)) in self
            .x
            .iter()
            .zip(&self.m)
            .zip(self.density.iter().zip(self.cdf_values()))
        {
            let _ = writeln!(out, "{x},{d},{c},{},{}", m.re, m.im);
        }
        fs::write(path, out)?;
        self.to_record().write(&sidecar_path(path))
    }
}

/// CDF of the tabulated law: 0 below the grid, 1 above, linear-trapezoid in between.
pub fn law_cdf(law: &LimitLaw, x: f64) -> f64 {
    if x < law.x[0] {
        return 0.0;
    }
    if x > law.x[law.x.len() - 1] {
        return 1.0;
    }
    let atoms: f64 = law.atoms.iter().filter(|a| a.location <= x).map(|a| a.mass).sum();
    (law.continuous_at(x) + atoms).clamp(0.0, 1.0)
}

impl SpectralLaw for LimitLaw {
    fn cdf(&self, x: f64) -> f64 {
        law_cdf(self, x)
    }

    fn cdf_left(&self, x: f64) -> f64 {
        if x <= self.x[0] {
            return 0.0;
        }
        if x > self.x[self.x.len() - 1] {
            return 1.0;
        }
        let atoms: f64 = self.atoms.iter().filter(|a| a.location < x).map(|a| a.mass).sum();
        (self.continuous_at(x) + atoms).clamp(0.0, 1.0)
    }

    fn jump_points(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.location).collect()
    }

    fn support(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    /// The transform of the limiting law itself, not of its smoothed tabulation.
    fn stieltjes(&self, z: Complex64) -> Result<Complex64> {
        solve_point(&self.params, z)
    }
}

fn solve_line(params: &LimitParams, xs: &[f64], epsilon: f64) -> Result<Vec<Complex64>> {
    let mut out = Vec::with_capacity(xs.len());
    let mut warm = Complex64::new(0.0, 0.0);
    for &x in xs {
        let z = Complex64::new(x, epsilon);
        let m = solve_point_from(params, z, warm)?;
        warm = m;
        out.push(m);
    }
    Ok(out)
}

/// Locates spikes whose height scales like `1/epsilon`: local maxima of
/// `Im m` that nearly double when `epsilon` is halved.
fn detect_atoms(params: &LimitParams, xs: &[f64], m: &[Complex64], epsilon: f64) -> Result<Vec<Atom>> {
    let mut atoms = Vec::new();
    let h = xs[1] - xs[0];
    for k in 1..xs.len() - 1 {
        let v = m[k].im;
        if !(v >= m[k - 1].im && v > m[k + 1].im) || epsilon * v < MASS_TOLERANCE {
            continue;
        }
        // golden-section refinement of the peak location
        let f = |x: f64| solve_point(params, Complex64::new(x, epsilon)).map(|m| m.im);
        let (mut lo, mut hi) = (xs[k] - h, xs[k] + h);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..60 {
            let x1 = hi - g * (hi - lo);
            let x2 = lo + g * (hi - lo);
            if f(x1)? > f(x2)? {
                hi = x2;
            } else {
                lo = x1;
            }
        }
        let location = 0.5 * (lo + hi);
        let peak = f(location)?;
        let half = solve_point(params, Complex64::new(location, 0.5 * epsilon))?.im;
        if half > 1.8 * peak {
            atoms.push(Atom {
                location,
                mass: (0.5 * epsilon * half).min(1.0),
            });
        }
    }
    Ok(atoms)
}

fn tabulate(params: &LimitParams, lo: f64, hi: f64, n_points: usize, epsilon: f64) -> Result<LimitLaw> {
    let step = (hi - lo) / (n_points - 1) as f64;
    let x: Vec<f64> = (0..n_points).map(|i| lo + step * i as f64).collect();
    let m = solve_line(params, &x, epsilon)?;
    let atoms = detect_atoms(params, &x, &m, epsilon)?;
    let density: Vec<f64> = x
        .iter()
        .zip(&m)
        .map(|(&xv, mv)| {
            let cauchy: f64 = atoms
                .iter()
                .map(|a| a.mass * epsilon / ((xv - a.location).powi(2) + epsilon * epsilon))
                .sum();
            ((mv.im - cauchy) / std::f64::consts::PI).max(0.0)
        })
        .collect();
    let mut continuous_cdf = Vec::with_capacity(n_points);
    let mut acc = 0.0;
    continuous_cdf.push(0.0);
    for w in density.windows(2) {
        acc += 0.5 * step * (w[0] + w[1]);
        continuous_cdf.push(acc);
    }
    Ok(LimitLaw {
        params: *params,
        epsilon,
        x,
        m,
        density,
        continuous_cdf,
        atoms,
        widenings: 0,
    })
}

/// Tabulates the law on `n_points` equally spaced points of `x_range` at height `epsilon`.
///
/// While the captured mass falls short of `1 - 1e-3`, the range is doubled
/// about its center (keeping the spacing), up to ten times. Points are solved
/// left to right, each warm-started from its neighbour.
pub fn solve_grid(params: &LimitParams, x_range: (f64, f64), n_points: usize, epsilon: f64) -> Result<LimitLaw> {
    let (lo, hi) = x_range;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if n_points < 3 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid(
            "solve_grid needs at least 3 points on a finite non-empty range",
        ));
    }
    let (mut lo, mut hi, mut n) = (lo, hi, n_points);
    for widenings in 0..=MAX_WIDENINGS {
        let mut law = tabulate(params, lo, hi, n, epsilon)?;
        law.widenings = widenings;
        if law.total_mass() >= 1.0 - MASS_TOLERANCE || widenings == MAX_WIDENINGS {
            return Ok(law);
        }
        let (center, half) = (0.5 * (lo + hi), hi - lo);
        lo = center - half;
        hi = center + half;
        n = 2 * n - 1;
    }
    unreachable!("the final widening returns")
}

/// Grid solved with the default range: the support hint padded by 1.5 on each side.
pub fn solve_default_grid(params: &LimitParams, n_points: usize, epsilon: f64) -> Result<LimitLaw> {
    let (lo, hi) = params.support_hint();
    solve_grid(params, (lo - 1.5, hi + 1.5), n_points, epsilon)
}

/// Change of the tabulation when `epsilon` is halved, on the grid of `law`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub epsilon: f64,
    pub sup_density_change: f64,
    pub sup_cdf_change: f64,
}

pub fn refinement_study(law: &LimitLaw) -> Result<Refinement> {
    let (lo, hi) = law.support();
    let fine = tabulate(&law.params, lo, hi, law.x.len(), 0.5 * law.epsilon)?;
    let coarse_cdf = law.cdf_values();
    let fine_cdf = fine.cdf_values();
    let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(Refinement {
        epsilon: law.epsilon,
        sup_density_change: sup(&law.density, &fine.density),
        sup_cdf_change: sup(&coarse_cdf, &fine_cdf),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mp_theory::AffineMpLaw;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn semicircle(z: Complex64) -> Complex64 {
        let s = (z * z - 4.0).sqrt();
        let m = (-z + s) * 0.5;
        if m.im > 0.0 {
            m
        } else {
            (-z - s) * 0.5
        }
    }

    #[test]
    fn semicircle_at_i() {
        let params = LimitParams::new(0.0, 1.0, 1.0).unwrap();
        let m = solve_point(&params, c(0.0, 1.0)).unwrap();
        let golden = (5f64.sqrt() - 1.0) / 2.0;
        assert!((m - c(0.0, golden)).norm() < 1e-12);
        assert!((m - semicircle(c(0.0, 1.0))).norm() < 1e-12);
    }

    #[test]
    fn matches_affine_mp_when_nu_is_a_squared() {
        for (a, gamma) in [(1.0, 1.0), (0.7, 2.0), (1.3, 0.5), (-0.8, 1.5)] {
            let params = LimitParams::new(a, a * a, gamma).unwrap();
            let law = AffineMpLaw::new(gamma, -a, a).unwrap();
            for k in 0..20 {
                let z = c(-3.0 + 0.4 * k as f64, 0.3);
                let m = solve_point(&params, z).unwrap();
                let mp = law.stieltjes(z).unwrap();
                assert!((m - mp).norm() < 1e-9, "a={a} gamma={gamma} z={z}: {m} vs {mp}");
            }
        }
    }

    #[test]
    fn tail_is_minus_inverse_z() {
        let params = LimitParams::new(0.8, 1.0, 1.0).unwrap();
        for z in [c(0.0, 1e6), c(1e6, 1.0), c(-6e5, 8e5)] {
            let m = solve_point(&params, z).unwrap();
            let tail = -z.inv();
            assert!(((m - tail) / tail).norm() < 1e-6, "{z}");
        }
    }

    #[test]
    fn residual_and_herglotz_on_a_grid() {
        let params = LimitParams::new((2.0 / std::f64::consts::PI).sqrt(), 1.0, 1.0).unwrap();
        for k in 0..60 {
            for eps in [1e-3, 1e-1, 1.0] {
                let z = c(-4.0 + 0.15 * k as f64, eps);
                let m = solve_point(&params, z).unwrap();
                assert!(m.im > 0.0);
                assert!(params.residual(m, z) < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(LimitParams::new(2.0, 1.0, 1.0).is_err());
        assert!(LimitParams::new(0.0, 1.0, 0.0).is_err());
        let params = LimitParams::new(0.0, 1.0, 1.0).unwrap();
        assert!(solve_point(&params, c(1.0, 0.0)).is_err());
        assert!(solve_grid(&params, (-3.0, 3.0), 100, 0.0).is_err());
        assert!(solve_grid(&params, (3.0, -3.0), 100, 1e-3).is_err());
    }

    #[test]
    fn warm_and_cold_starts_agree() {
        let params = LimitParams::new(0.6, 1.0, 0.8).unwrap();
        let law = solve_default_grid(&params, 801, 1e-3).unwrap();
        for (i, (&x, &warm)) in law.x().iter().zip(law.m_values()).enumerate().step_by(7) {
            let cold = solve_point(&params, c(x, law.epsilon)).unwrap();
            assert!((cold - warm).norm() < 1e-10, "point {i} x={x}");
        }
    }

    #[test]
    fn semicircle_grid_is_symmetric() {
        let params = LimitParams::new(0.0, 1.0, 1.0).unwrap();
        let law = solve_grid(&params, (-4.0, 4.0), 1601, 1e-3).unwrap();
        let d = law.density();
        let n = d.len();
        for i in 0..n {
            assert!((d[i] - d[n - 1 - i]).abs() < 1e-6);
        }
        assert!((law_cdf(&law, 0.0) - 0.5).abs() < 1e-3);
        assert_eq!(law_cdf(&law, -100.0), 0.0);
        assert_eq!(law_cdf(&law, 100.0), 1.0);
        assert!(law.atoms.is_empty());
    }

    #[test]
    fn cdf_is_monotone_and_nearly_complete() {
        let params = LimitParams::new((2.0 / std::f64::consts::PI).sqrt(), 1.0, 1.0).unwrap();
        let law = solve_default_grid(&params, 4001, 1e-3).unwrap();
        let cdf = law.cdf_values();
        assert!(cdf.windows(2).all(|w| w[1] >= w[0]));
        assert!((law.total_mass() - 1.0).abs() < 1e-3, "mass {}", law.total_mass());
    }

    #[test]
    fn range_is_widened_to_capture_mass() {
        let params = LimitParams::new(0.0, 1.0, 1.0).unwrap();
        let law = solve_grid(&params, (-1.0, 1.0), 401, 1e-3).unwrap();
        assert!(law.widenings > 0);
        assert!(law.total_mass() >= 1.0 - MASS_TOLERANCE);
    }

    #[test]
    fn atom_is_detected() {
        // nu = a^2 and gamma < 1: an affine MP law with an atom of mass 1 - gamma at -a
        let params = LimitParams::new(1.0, 1.0, 0.5).unwrap();
        let law = solve_default_grid(&params, 3001, 1e-3).unwrap();
        assert_eq!(law.atoms.len(), 1, "{:?}", law.atoms);
        let atom = law.atoms[0];
        assert!((atom.location + 1.0).abs() < 1e-4);
        assert!((atom.mass - 0.5).abs() < 5e-3, "{atom:?}");
        assert!((law.total_mass() - 1.0).abs() < 5e-3);
    }

    #[test]
    fn halving_epsilon_changes_little() {
        // nu > a^2 softens the edges to square-root vanishing, so the CDF is smooth everywhere
        let params = LimitParams::new((2.0 / std::f64::consts::PI).sqrt(), 1.0, 1.0).unwrap();
        let law = solve_default_grid(&params, 4001, 1e-3).unwrap();
        let r = refinement_study(&law).unwrap();
        assert!(r.sup_cdf_change < 1e-3, "{r:?}");
    }

    #[test]
    fn csv_has_expected_columns() {
        let params = LimitParams::new(0.0, 1.0, 1.0).unwrap();
        let law = solve_grid(&params, (-3.0, 3.0), 101, 1e-2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("law.csv");
        law.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x,density,cdf,re_m,im_m\n"));
        assert_eq!(text.lines().count(), law.x().len() + 1);
        let meta = KeyValues::read(&sidecar_path(&path)).unwrap();
        assert_eq!(meta.get("type"), Some("functional-equation"));
    }
}
