//! Flat key-value experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex64;

use crate::ensembles::Family;
use crate::envelope::Envelope;
use crate::error::{Error, Result};
use crate::kernel_matrix::{Diagonal, KernelKind, KernelSpec};
use crate::kv::KeyValues;

/// Default cap on `n * trials` summed over ensembles.
pub const DEFAULT_MAX_WORK: usize = 60_000;

/// What the pooled ESD is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    AffineMp,
    FunctionalEquation,
    CrossEnsemble,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::AffineMp => "affine-mp",
            Target::FunctionalEquation => "functional-equation",
            Target::CrossEnsemble => "cross-ensemble",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "affine-mp" => Ok(Target::AffineMp),
            "functional-equation" => Ok(Target::FunctionalEquation),
            "cross-ensemble" => Ok(Target::CrossEnsemble),
            other => Err(Error::Config(format!(
                "unknown target '{other}' (expected affine-mp, functional-equation, cross-ensemble)"
            ))),
        }
    }
}

/// Every key a config file may set, with its meaning; printed by the CLI help.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    (
        "ensemble",
        "comma-separated families: gaussian, rademacher, sphere (two for cross-ensemble)",
    ),
    ("kernel", "inner | distance"),
    ("diagonal", "keep | zero"),
    (
        "envelope",
        "identity, linear:c=, exp:a=, power:a=, sign-scaled, nonsmooth-sin, constant:c=, square",
    ),
    ("n", "number of vectors (matrix size)"),
    ("p", "vector dimension"),
    ("trials", "independent matrices per ensemble"),
    ("seed", "master seed"),
    ("target", "affine-mp | functional-equation | cross-ensemble"),
    ("z_re_min", "left end of the real parts of the Stieltjes z-grid"),
    ("z_re_max", "right end of the real parts of the z-grid"),
    ("z_count", "number of z-grid points"),
    ("z_im", "imaginary part of every z-grid point"),
    ("epsilon", "Stieltjes inversion height for the functional-equation law"),
    ("law_points", "grid points of the tabulated law"),
    ("degree", "expansion degree L used to estimate (a, nu)"),
    ("samples", "Monte Carlo samples for the expansion"),
    ("a", "override for the first expansion coefficient"),
    ("nu", "override for the expansion variance"),
    (
        "check_diagonal",
        "true to compare keep and zero diagonal models on trial 0",
    ),
    ("ks_threshold", "optional KS bound reported as pass/fail"),
    ("max_work", "cap on n * trials summed over ensembles"),
    ("output", "output directory"),
];

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub ensembles: Vec<Family>,
    pub kernel: KernelKind,
    pub diagonal: Diagonal,
    pub envelope: Envelope,
    pub n: usize,
    pub p: usize,
    pub trials: usize,
    pub seed: u64,
    pub target: Target,
    pub z_re_min: f64,
    pub z_re_max: f64,
    pub z_count: usize,
    pub z_im: f64,
    pub epsilon: f64,
    pub law_points: usize,
    pub degree: usize,
    pub samples: usize,
    pub a: Option<f64>,
    pub nu: Option<f64>,
    pub check_diagonal: bool,
    pub ks_threshold: Option<f64>,
    pub max_work: usize,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            ensembles: vec![Family::GaussianIid],
            kernel: KernelKind::InnerProduct,
            diagonal: Diagonal::Keep,
            envelope: Envelope::exp(1.0),
            n: 400,
            p: 200,
            trials: 1,
            seed: 0,
            target: Target::AffineMp,
            z_re_min: -2.0,
            z_re_max: 6.0,
            z_count: 20,
            z_im: 1.0,
            epsilon: 1e-3,
            law_points: 4001,
            degree: 4,
            samples: 200_000,
            a: None,
            nu: None,
            check_diagonal: false,
            ks_threshold: None,
            max_work: DEFAULT_MAX_WORK,
            output: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("key '{key}' has invalid value '{value}'")))
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "ensemble" => {
                self.ensembles = v
                    .split(',')
                    .map(|s| s.trim().parse::<Family>().map_err(|e| Error::Config(e.to_string())))
                    .collect::<Result<_>>()?
            }
            "kernel" => self.kernel = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "diagonal" => self.diagonal = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "envelope" => self.envelope = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "n" => self.n = parse(key, v)?,
            "p" => self.p = parse(key, v)?,
            "trials" => self.trials = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "target" => self.target = v.parse()?,
            "z_re_min" => self.z_re_min = parse(key, v)?,
            "z_re_max" => self.z_re_max = parse(key, v)?,
            "z_count" => self.z_count = parse(key, v)?,
            "z_im" => self.z_im = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "law_points" => self.law_points = parse(key, v)?,
            "degree" => self.degree = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "a" => self.a = Some(parse(key, v)?),
            "nu" => self.nu = Some(parse(key, v)?),
            "check_diagonal" => self.check_diagonal = parse(key, v)?,
            "ks_threshold" => self.ks_threshold = Some(parse(key, v)?),
            "max_work" => self.max_work = parse(key, v)?,
            "output" => self.output = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Defaults overridden by every entry of `kv`, then validated.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv.iter() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::read(path)?)
    }

    pub fn gamma(&self) -> f64 {
        self.p as f64 / self.n as f64
    }

    pub fn spec(&self) -> KernelSpec {
        KernelSpec::new(self.kernel, self.diagonal, self.envelope.clone())
    }

    /// `z_re_min + k (z_re_max - z_re_min)/(z_count - 1) + i z_im`.
    pub fn z_grid(&self) -> Vec<Complex64> {
        let steps = self.z_count.saturating_sub(1).max(1) as f64;
        (0..self.z_count)
            .map(|k| {
                Complex64::new(
                    self.z_re_min + (self.z_re_max - self.z_re_min) * k as f64 / steps,
                    self.z_im,
                )
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n < 2 || self.p < 1 {
            return fail(format!("need n >= 2 and p >= 1, got n = {}, p = {}", self.n, self.p));
        }
        if self.trials < 1 {
            return fail("trials must be at least 1".into());
        }
        if self.ensembles.is_empty() {
            return fail("at least one ensemble is required".into());
        }
        match (self.target, self.ensembles.len()) {
            (Target::CrossEnsemble, 2) => {}
            (Target::CrossEnsemble, k) => return fail(format!("cross-ensemble needs exactly 2 ensembles, got {k}")),
            (_, 1) => {}
            (t, k) => return fail(format!("target {t} takes one ensemble, got {k}")),
        }
        if self.z_count < 1 || !(self.z_im > 0.0) || !(self.z_re_min <= self.z_re_max) {
            return fail("z-grid needs z_count >= 1, z_im > 0 and z_re_min <= z_re_max".into());
        }
        if !(self.epsilon > 0.0) || self.law_points < 3 {
            return fail("need epsilon > 0 and law_points >= 3".into());
        }
        let work = self.n * self.trials * self.ensembles.len();
        if work > self.max_work {
            return fail(format!(
                "n * trials * ensembles = {work} exceeds max_work = {}; raise max_work to run it",
                self.max_work
            ));
        }
        if self.target == Target::AffineMp && self.envelope.is_p_dependent() {
            return fail(format!(
                "envelope '{}' depends on p; use target functional-equation",
                self.envelope
            ));
        }
        Ok(())
    }

    /// Every field, in `CONFIG_KEYS` order, plus the derived aspect ratio.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let names: Vec<&str> = self.ensembles.iter().map(|f| f.name()).collect();
        kv.set("ensemble", names.join(","));
        kv.set("kernel", self.kernel.name());
        kv.set("diagonal", self.diagonal.name());
        kv.set("envelope", &self.envelope);
        kv.set("n", self.n);
        kv.set("p", self.p);
        kv.set("trials", self.trials);
        kv.set("seed", self.seed);
        kv.set("target", self.target);
        kv.set("z_re_min", self.z_re_min);
        kv.set("z_re_max", self.z_re_max);
        kv.set("z_count", self.z_count);
        kv.set("z_im", self.z_im);
        kv.set("epsilon", self.epsilon);
        kv.set("law_points", self.law_points);
        kv.set("degree", self.degree);
        kv.set("samples", self.samples);
        if let Some(a) = self.a {
            kv.set("a", a);
        }
        if let Some(nu) = self.nu {
            kv.set("nu", nu);
        }
        kv.set("check_diagonal", self.check_diagonal);
        if let Some(t) = self.ks_threshold {
            kv.set("ks_threshold", t);
        }
        kv.set("max_work", self.max_work);
        if let Some(out) = &self.output {
            kv.set("output", out.display());
        }
        kv
    }

    /// [`to_kv`](Self::to_kv) with the derived `gamma`, as written next to results.
    pub fn resolved(&self) -> KeyValues {
        let mut kv = self.to_kv();
        kv.set("gamma", self.gamma());
        kv
    }
}
