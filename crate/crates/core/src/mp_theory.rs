//! The Marčenko–Pastur law of the Gram matrix `(X_i^T X_j)` and its affine images.
//!
//! With `gamma = p/n` the law has density `gamma / (2 pi x) sqrt((b - x)(x - a))`
//! on `[a, b]`, `a = (1 - 1/sqrt(gamma))^2`, `b = (1 + 1/sqrt(gamma))^2`, plus an
//! atom of mass `1 - gamma` at 0 when `gamma < 1`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kernel_matrix::{KernelSpec, Linearization};
use crate::kv::KeyValues;
use crate::quadrature;
use crate::spectral::SpectralLaw;

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "gamma must be positive and finite, got {gamma}"
        )))
    }
}

/// Support edges `(a, b)` of the continuous part.
pub fn mp_edges(gamma: f64) -> (f64, f64) {
    let r = 1.0 / gamma.sqrt();
    ((1.0 - r).powi(2), (1.0 + r).powi(2))
}

/// Mass of the atom at 0: `(1 - gamma) 1{gamma < 1}`.
pub fn mp_atom_mass(gamma: f64) -> f64 {
    (1.0 - gamma).max(0.0)
}

/// Density of the continuous part (the atom is reported by [`mp_atom_mass`]).
pub fn mp_density(gamma: f64, x: f64) -> f64 {
    let (a, b) = mp_edges(gamma);
    if x <= a || x >= b || x <= 0.0 {
        return 0.0;
    }
    gamma / (2.0 * PI * x) * ((b - x) * (x - a)).sqrt()
}

const CELLS: usize = 512;

/// Cumulative mass of the continuous part, tabulated in the angle variable
/// `x = a + (b - a)(1 - cos t)/2`, where the integrand
/// `gamma (b - a)^2 sin^2 t / (8 pi x)` is smooth.
#[derive(Debug)]
struct MpTable {
    gamma: f64,
    a: f64,
    b: f64,
    cumulative: Vec<f64>,
}

impl MpTable {
    fn new(gamma: f64) -> Self {
        let (a, b) = mp_edges(gamma);
        let mut table = Self {
            gamma,
            a,
            b,
            cumulative: Vec::with_capacity(CELLS + 1),
        };
        let step = PI / CELLS as f64;
        let mut acc = 0.0;
        table.cumulative.push(0.0);
        for k in 0..CELLS {
            acc += quadrature::integrate(|t| table.integrand(t), k as f64 * step, (k + 1) as f64 * step);
            table.cumulative.push(acc);
        }
        table
    }

    fn integrand(&self, t: f64) -> f64 {
        let x = self.a + 0.5 * (self.b - self.a) * (1.0 - t.cos());
        let s = t.sin();
        self.gamma * (self.b - self.a).powi(2) * s * s / (8.0 * PI * x)
    }

    /// Continuous mass below `x`.
    fn continuous_cdf(&self, x: f64) -> f64 {
        if x <= self.a {
            return 0.0;
        }
        if x >= self.b {
            return self.cumulative[CELLS];
        }
        let c = (1.0 - 2.0 * (x - self.a) / (self.b - self.a)).clamp(-1.0, 1.0);
        let t = c.acos();
        let step = PI / CELLS as f64;
        let k = ((t / step) as usize).min(CELLS - 1);
        let t0 = k as f64 * step;
        self.cumulative[k] + quadrature::integrate(|s| self.integrand(s), t0, t)
    }
}

fn table(gamma: f64) -> Arc<MpTable> {
    static CACHE: OnceLock<Mutex<HashMap<u64, Arc<MpTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry(gamma.to_bits())
        .or_insert_with(|| Arc::new(MpTable::new(gamma)))
        .clone()
}

/// CDF including the atom at 0.
pub fn mp_cdf(gamma: f64, x: f64) -> f64 {
    let atom = if x >= 0.0 { mp_atom_mass(gamma) } else { 0.0 };
    (table(gamma).continuous_cdf(x) + atom).clamp(0.0, 1.0)
}

/// Stieltjes transform of the law (atom included).
///
/// With `y = 1/gamma` it solves `y z m^2 + (z + y - 1) m + 1 = 0`; of the two
/// roots the one with `Im m > 0` is returned.
pub fn mp_stieltjes(gamma: f64, z: Complex64) -> Result<Complex64> {
    check_gamma(gamma)?;
    if !(z.im > 0.0) || !z.is_finite() {
        return Err(Error::invalid(format!("mp_stieltjes needs Im z > 0, got {z}")));
    }
    let y = 1.0 / gamma;
    let qa = z * y;
    let qb = z + (y - 1.0);
    let disc = (qb * qb - qa * 4.0).sqrt();
    // pick the sign that avoids cancellation, then recover the other root from the product
    let q = if (qb.conj() * disc).re >= 0.0 {
        -(qb + disc) * 0.5
    } else {
        -(qb - disc) * 0.5
    };
    let r1 = q / qa;
    let r2 = q.inv();
    Ok(if r1.im >= r2.im { r1 } else { r2 })
}

/// Law of `shift + scale * X` with `X ~ MP(gamma)`; `scale = 0` is the point mass at `shift`.
#[derive(Debug, Clone)]
pub struct AffineMpLaw {
    pub gamma: f64,
    pub shift: f64,
    pub scale: f64,
    table: Arc<MpTable>,
}

impl PartialEq for AffineMpLaw {
    fn eq(&self, other: &Self) -> bool {
        self.gamma == other.gamma && self.shift == other.shift && self.scale == other.scale
    }
}

impl AffineMpLaw {
    pub fn new(gamma: f64, shift: f64, scale: f64) -> Result<Self> {
        check_gamma(gamma)?;
        if !shift.is_finite() || !scale.is_finite() {
            return Err(Error::invalid("affine MP shift and scale must be finite"));
        }
        Ok(Self {
            gamma,
            shift,
            scale,
            table: table(gamma),
        })
    }

    /// Plain MP law.
    pub fn standard(gamma: f64) -> Result<Self> {
        Self::new(gamma, 0.0, 1.0)
    }

    pub fn is_degenerate(&self) -> bool {
        self.scale == 0.0
    }

    pub fn atom_mass(&self) -> f64 {
        if self.is_degenerate() {
            1.0
        } else {
            mp_atom_mass(self.gamma)
        }
    }

    /// The image `shift + scale * 0` of the MP atom.
    pub fn atom_location(&self) -> f64 {
        self.shift
    }

    /// Support of the continuous part; `None` when degenerate.
    pub fn continuous_support(&self) -> Option<(f64, f64)> {
        if self.is_degenerate() {
            return None;
        }
        let (a, b) = mp_edges(self.gamma);
        let (lo, hi) = (self.shift + self.scale * a, self.shift + self.scale * b);
        Some(if lo <= hi { (lo, hi) } else { (hi, lo) })
    }

    /// Density of the continuous part.
    pub fn density(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            return 0.0;
        }
        mp_density(self.gamma, (x - self.shift) / self.scale) / self.scale.abs()
    }

    fn continuous_below(&self, u: f64) -> f64 {
        self.table.continuous_cdf(u)
    }

    pub fn to_record(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("type", "affine-mp");
        kv.set("gamma", self.gamma);
        kv.set("shift", self.shift);
        kv.set("scale", self.scale);
        kv.set("atom_mass", self.atom_mass());
        kv.set("atom_location", self.atom_location());
        kv
    }

    pub fn from_record(kv: &KeyValues) -> Result<Self> {
        if kv.get("type") != Some("affine-mp") {
            return Err(Error::Config("record is not of type affine-mp".into()));
        }
        let field = |k: &str| -> Result<f64> {
            kv.get_parsed::<f64>(k)?
                .ok_or_else(|| Error::Config(format!("affine-mp record lacks '{k}'")))
        };
        Self::new(field("gamma")?, field("shift")?, field("scale")?)
    }
}

impl SpectralLaw for AffineMpLaw {
    fn cdf(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            return if x >= self.shift { 1.0 } else { 0.0 };
        }
        let u = (x - self.shift) / self.scale;
        let atom = mp_atom_mass(self.gamma);
        let v = if self.scale > 0.0 {
            self.continuous_below(u) + if u >= 0.0 { atom } else { 0.0 }
        } else {
            // P(X >= u) = 1 - P(X < u)
            1.0 - self.continuous_below(u) - if u > 0.0 { atom } else { 0.0 }
        };
        v.clamp(0.0, 1.0)
    }

    fn cdf_left(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            return if x > self.shift { 1.0 } else { 0.0 };
        }
        let u = (x - self.shift) / self.scale;
        let atom = mp_atom_mass(self.gamma);
        let v = if self.scale > 0.0 {
            self.continuous_below(u) + if u > 0.0 { atom } else { 0.0 }
        } else {
            1.0 - self.continuous_below(u) - if u >= 0.0 { atom } else { 0.0 }
        };
        v.clamp(0.0, 1.0)
    }

    fn jump_points(&self) -> Vec<f64> {
        if self.atom_mass() > 0.0 {
            vec![self.atom_location()]
        } else {
            Vec::new()
        }
    }

    fn support(&self) -> (f64, f64) {
        match self.continuous_support() {
            None => (self.shift, self.shift),
            Some((lo, hi)) if self.atom_mass() > 0.0 => (lo.min(self.shift), hi.max(self.shift)),
            Some(s) => s,
        }
    }

    fn stieltjes(&self, z: Complex64) -> Result<Complex64> {
        if !(z.im > 0.0) {
            return Err(Error::invalid(format!("Stieltjes transform needs Im z > 0, got {z}")));
        }
        if self.is_degenerate() {
            return Ok((Complex64::new(self.shift, 0.0) - z).inv());
        }
        let w = (z - self.shift) / self.scale;
        let m = if self.scale > 0.0 {
            mp_stieltjes(self.gamma, w)?
        } else {
            mp_stieltjes(self.gamma, w.conj())?.conj()
        };
        Ok(m / self.scale)
    }
}

/// The affine MP image predicted for `rho_A` by the linearization of `spec`.
///
/// Only p-independent envelopes have such a limit.
pub fn predicted_law(spec: &KernelSpec, gamma: f64) -> Result<AffineMpLaw> {
    check_gamma(gamma)?;
    if spec.envelope.is_p_dependent() {
        return Err(Error::Capability(format!(
            "envelope '{}' depends on p; its limit comes from the functional equation, not an affine MP law",
            spec.envelope
        )));
    }
    let lin = Linearization::of(spec, 1)?;
    AffineMpLaw::new(gamma, lin.shift, lin.scale)
}
