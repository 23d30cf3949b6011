//! Config-driven experiments: sample, build, diagonalize, compare with a
//! predicted law, and write CSV tables plus an SVG report.

pub mod config;
pub mod svg;

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;

pub use config::{ExperimentConfig, Target, CONFIG_KEYS, DEFAULT_MAX_WORK};

use crate::ensembles::{
    concentration_diagnostic, sample_matrix, stream, sub_seed, ConcentrationReport, Family, VectorEnsemble,
};
use crate::envelope::Envelope;
use crate::error::{Error, Result};
use crate::kernel_matrix::{build, Diagonal, KernelKind, KernelSpec, MatrixModel};
use crate::kv::{sidecar_path, KeyValues};
use crate::limit_solver::{solve_default_grid, LimitLaw, LimitParams};
use crate::mp_theory::{predicted_law, AffineMpLaw};
use crate::orthopoly::{envelope_coeffs, AdmissibleParams};
use crate::spectral::{
    eigenvalues, ks_distance, stieltjes_sup_distance, stieltjes_variance_decay, wasserstein1, wasserstein1_law, Esd,
    SpectralLaw, SpectralSample, VarianceDecay,
};

/// Grid resolution of the law-side W1 integral.
const W1_RESOLUTION: usize = 2000;

/// Rows on each side of the continuous support in affine-MP law tables.
pub const TABLE_PAD: usize = 16;

/// The law the pooled ESD is compared with.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum PredictedLaw {
    AffineMp(AffineMpLaw),
    Limit {
        law: LimitLaw,
        expansion: Option<AdmissibleParams>,
    },
}

impl PredictedLaw {
    pub fn as_law(&self) -> &dyn SpectralLaw {
        match self {
            PredictedLaw::AffineMp(l) => l,
            PredictedLaw::Limit { law, .. } => law,
        }
    }

    pub fn to_record(&self) -> KeyValues {
        match self {
            PredictedLaw::AffineMp(l) => l.to_record(),
            PredictedLaw::Limit { law, expansion } => {
                let mut kv = law.to_record();
                if let Some(e) = expansion {
                    kv.set("expansion_degree", e.degree);
                    kv.set("expansion_tail_mass", e.tail_mass);
                    kv.set("expansion_inconsistent", e.inconsistent);
                }
                kv
            }
        }
    }

    /// `(x, density, cdf)` rows on `points` grid points.
    ///
    /// For affine MP laws the continuous support carries Chebyshev nodes
    /// `x_k = c - r cos((k + 1/2) pi / N)`, so edge singularities stay off the
    /// grid and the rows can be integrated by Gauss-Chebyshev quadrature;
    /// `TABLE_PAD` uniformly spaced rows on each side cover the margins.
    pub fn table(&self, points: usize) -> Vec<(f64, f64, f64)> {
        match self {
            PredictedLaw::AffineMp(l) => {
                let (lo, hi) = l.support();
                let pad = 0.1 * (hi - lo).max(1.0);
                let row = |x: f64| (x, l.density(x), l.cdf(x));
                let uniform = |a: f64, b: f64, k: usize, count: usize| a + (b - a) * k as f64 / (count - 1) as f64;
                let Some((clo, chi)) = l.continuous_support().filter(|_| points > 2 * TABLE_PAD + 1) else {
                    return (0..points)
                        .map(|k| row(uniform(lo - pad, hi + pad, k, points)))
                        .collect();
                };
                let inner = points - 2 * TABLE_PAD;
                let (c, r) = (0.5 * (clo + chi), 0.5 * (chi - clo));
                let left = (0..TABLE_PAD).map(|k| uniform(lo - pad, clo, k, TABLE_PAD + 1));
                let middle = (0..inner).map(|k| c - r * (PI * (k as f64 + 0.5) / inner as f64).cos());
                let right = (1..=TABLE_PAD).map(|k| uniform(chi, hi + pad, k, TABLE_PAD + 1));
                left.chain(middle).chain(right).map(row).collect()
            }
            PredictedLaw::Limit { law, .. } => law
                .x()
                .iter()
                .zip(law.density())
                .zip(law.cdf_values())
                .map(|((&x, &d), c)| (x, d, c))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distances {
    pub ks: f64,
    pub w1: f64,
    pub stieltjes_sup: f64,
}

impl Distances {
    fn between(esd: &Esd, law: &dyn SpectralLaw, grid: &[Complex64]) -> Result<Self> {
        Ok(Self {
            ks: ks_distance(esd, law),
            w1: wasserstein1_law(esd, law, W1_RESOLUTION),
            stieltjes_sup: stieltjes_sup_distance(esd, law, grid)?,
        })
    }

    fn between_esds(a: &Esd, b: &Esd, grid: &[Complex64]) -> Result<Self> {
        Ok(Self {
            ks: ks_distance(a, b),
            w1: wasserstein1(a, b),
            stieltjes_sup: stieltjes_sup_distance(a, b, grid)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrialData {
    pub sample: SpectralSample,
    pub concentration: ConcentrationReport,
    pub distances: Distances,
    pub seconds: f64,
}

/// One trial; failures are kept as their error message.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    /// `ensemble_index * trials + trial`.
    pub index: usize,
    pub family: Family,
    pub outcome: std::result::Result<TrialData, String>,
}

#[derive(Debug, Clone)]
pub struct PooledRow {
    pub label: String,
    pub family: Option<Family>,
    pub distances: Distances,
}

/// Keep-diagonal versus zero-diagonal spectra of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagonalCheck {
    /// `f(b)` with `b` the concentration point of `g(X_i, X_i)`.
    pub shift: f64,
    /// `max_z |m_keep(z + f(b)) - m_zero(z)|` over the z-grid.
    pub stieltjes_gap: f64,
    /// `max_i |lambda_keep_i - f(b) - lambda_zero_i|`.
    pub eigenvalue_gap: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub law: PredictedLaw,
    pub trials: Vec<TrialRecord>,
    pub pooled: Vec<(Family, Esd)>,
    pub pooled_rows: Vec<PooledRow>,
    pub diagonal: Option<DiagonalCheck>,
    /// Set when any trial failed.
    pub incomplete: bool,
    pub seconds: f64,
}

impl ExperimentResult {
    pub fn pooled_esd(&self, family: Family) -> Option<&Esd> {
        self.pooled.iter().find(|(f, _)| *f == family).map(|(_, e)| e)
    }

    pub fn pooled_row(&self, label: &str) -> Option<&PooledRow> {
        self.pooled_rows.iter().find(|r| r.label == label)
    }

    /// KS of the first pooled row against the predicted law.
    pub fn pooled_ks(&self) -> f64 {
        self.pooled_rows[0].distances.ks
    }

    /// `Some(pass)` when the config sets `ks_threshold`; every pooled-vs-law row must pass.
    pub fn threshold_passed(&self) -> Option<bool> {
        self.config.ks_threshold.map(|t| {
            !self.incomplete
                && self
                    .pooled_rows
                    .iter()
                    .filter(|r| r.family.is_some())
                    .all(|r| r.distances.ks < t)
        })
    }

    pub fn errors(&self) -> Vec<(usize, &str)> {
        self.trials
            .iter()
            .filter_map(|t| t.outcome.as_ref().err().map(|e| (t.index, e.as_str())))
            .collect()
    }
}

/// Seed of trial `trial` of ensemble slot `slot`.
pub fn trial_seed(master: u64, slot: usize, trial: usize) -> u64 {
    sub_seed(sub_seed(master, slot as u64), trial as u64)
}

fn expansion_seed(master: u64) -> u64 {
    sub_seed(master, u64::MAX)
}

/// The law for the configured target: affine MP for p-independent envelopes,
/// the functional-equation law otherwise.
pub fn predict(cfg: &ExperimentConfig) -> Result<PredictedLaw> {
    let use_fe = match cfg.target {
        Target::AffineMp => false,
        Target::FunctionalEquation => true,
        Target::CrossEnsemble => cfg.envelope.is_p_dependent(),
    };
    if !use_fe {
        return Ok(PredictedLaw::AffineMp(predicted_law(&cfg.spec(), cfg.gamma())?));
    }
    let (a, nu, expansion) = match (cfg.a, cfg.nu) {
        (Some(a), Some(nu)) => (a, nu, None),
        _ => {
            let e = envelope_coeffs(
                &cfg.envelope,
                cfg.ensembles[0],
                cfg.p,
                cfg.degree,
                cfg.samples,
                expansion_seed(cfg.seed),
            )?;
            (cfg.a.unwrap_or(e.a), cfg.nu.unwrap_or(e.nu), Some(e))
        }
    };
    let params = LimitParams::new(a, nu, cfg.gamma())?;
    let law = solve_default_grid(&params, cfg.law_points, cfg.epsilon)?;
    Ok(PredictedLaw::Limit { law, expansion })
}

fn run_trial(
    cfg: &ExperimentConfig,
    spec: &KernelSpec,
    family: Family,
    seed: u64,
    law: &dyn SpectralLaw,
    grid: &[Complex64],
) -> Result<TrialData> {
    let start = Instant::now();
    let sample = sample_matrix(VectorEnsemble::new(family, cfg.p)?, cfg.n, seed)?;
    let concentration = concentration_diagnostic(&sample)?;
    let spectrum = eigenvalues(&build(spec, &sample)?)?;
    let distances = Distances::between(&spectrum.esd(), law, grid)?;
    Ok(TrialData {
        sample: spectrum,
        concentration,
        distances,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn diagonal_check(cfg: &ExperimentConfig, grid: &[Complex64]) -> Result<DiagonalCheck> {
    let spec = cfg.spec();
    let sample = sample_matrix(
        VectorEnsemble::new(cfg.ensembles[0], cfg.p)?,
        cfg.n,
        trial_seed(cfg.seed, 0, 0),
    )?;
    let keep = eigenvalues(&build(&spec.with_diagonal(Diagonal::Keep), &sample)?)?;
    let zero = eigenvalues(&build(&spec.with_diagonal(Diagonal::Zero), &sample)?)?;
    let shift = cfg.envelope.eval(spec.diagonal_kernel_value(), cfg.p);
    let stieltjes_gap = grid.iter().try_fold(0.0f64, |acc, &z| -> Result<f64> {
        Ok(acc.max((keep.stieltjes(z + shift)? - zero.stieltjes(z)?).norm()))
    })?;
    let eigenvalue_gap = keep
        .eigenvalues()
        .iter()
        .zip(zero.eigenvalues())
        .map(|(k, z)| (k - shift - z).abs())
        .fold(0.0, f64::max);
    Ok(DiagonalCheck {
        shift,
        stieltjes_gap,
        eigenvalue_gap,
    })
}

/// Runs every trial of every configured ensemble and compares with the target.
///
/// A failed trial is recorded and the run continues; the result is then
/// flagged incomplete. Errors in setting up the predicted law abort the run.
pub fn run_universality(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let spec = cfg.spec();
    let grid = cfg.z_grid();
    let law = predict(cfg)?;
    let jobs: Vec<(usize, Family, usize)> = cfg
        .ensembles
        .iter()
        .enumerate()
        .flat_map(|(slot, &f)| (0..cfg.trials).map(move |t| (slot, f, t)))
        .collect();
    let trials: Vec<TrialRecord> = jobs
        .par_iter()
        .map(|&(slot, family, t)| TrialRecord {
            index: slot * cfg.trials + t,
            family,
            outcome: run_trial(cfg, &spec, family, trial_seed(cfg.seed, slot, t), law.as_law(), &grid)
                .map_err(|e| e.to_string()),
        })
        .collect();
    let incomplete = trials.iter().any(|t| t.outcome.is_err());

    let mut pooled = Vec::new();
    let mut pooled_rows = Vec::new();
    for &family in &cfg.ensembles {
        let samples: Vec<&SpectralSample> = trials
            .iter()
            .filter(|t| t.family == family)
            .filter_map(|t| t.outcome.as_ref().ok().map(|d| &d.sample))
            .collect();
        if samples.is_empty() {
            continue;
        }
        let esd = Esd::pooled(samples)?;
        let label = if cfg.ensembles.len() == 1 {
            "pooled".to_string()
        } else {
            format!("pooled-{family}")
        };
        pooled_rows.push(PooledRow {
            label,
            family: Some(family),
            distances: Distances::between(&esd, law.as_law(), &grid)?,
        });
        pooled.push((family, esd));
    }
    if pooled.is_empty() {
        return Err(Error::invalid(format!(
            "every trial failed; first error: {}",
            trials
                .iter()
                .find_map(|t| t.outcome.as_ref().err())
                .map_or("none", |s| s.as_str())
        )));
    }
    if cfg.target == Target::CrossEnsemble && pooled.len() == 2 {
        pooled_rows.push(PooledRow {
            label: "cross".into(),
            family: None,
            distances: Distances::between_esds(&pooled[0].1, &pooled[1].1, &grid)?,
        });
    }
    let diagonal = if cfg.check_diagonal {
        Some(diagonal_check(cfg, &grid)?)
    } else {
        None
    };
    Ok(ExperimentResult {
        config: cfg.clone(),
        law,
        trials,
        pooled,
        pooled_rows,
        diagonal,
        incomplete,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn write_with_meta(path: &Path, body: &str, meta: &KeyValues) -> Result<()> {
    fs::write(path, body)?;
    meta.write(&sidecar_path(path))
}

/// Writes [`PredictedLaw::table`] as `x,density,cdf` with the law record and
/// `extra` in the sidecar.
pub fn write_law_csv(law: &PredictedLaw, points: usize, path: &Path, extra: &KeyValues) -> Result<()> {
    let mut body = String::from("x,density,cdf\n");
    for (x, d, c) in law.table(points) {
        let _ = writeln!(body, "{x},{d},{c}");
    }
    let mut meta = law.to_record();
    for (k, v) in extra.iter() {
        meta.set(k, v);
    }
    write_with_meta(path, &body, &meta)
}

fn report_svg(result: &ExperimentResult) -> String {
    use svg::{histogram_outline, render, Panel, Series};
    const COLORS: [&str; 2] = ["#1f77b4", "#d62728"];
    let table = result.law.table(result.config.law_points.min(2001));
    let (mut lo, mut hi) = (table[0].0, table[table.len() - 1].0);
    for (_, esd) in &result.pooled {
        lo = lo.min(esd.points()[0]);
        hi = hi.max(esd.points()[esd.len() - 1]);
    }
    let mut density = vec![Series {
        label: "predicted law".into(),
        color: "black",
        points: table.iter().map(|r| (r.0, r.1)).collect(),
    }];
    let mut cdf = vec![Series {
        label: "predicted law".into(),
        color: "black",
        points: table.iter().map(|r| (r.0, r.2)).collect(),
    }];
    for (i, (family, esd)) in result.pooled.iter().enumerate() {
        density.push(Series {
            label: format!("ESD {family}"),
            color: COLORS[i % 2],
            points: histogram_outline(esd.points(), 80, lo, hi),
        });
        let n = esd.len() as f64;
        let mut steps = Vec::with_capacity(2 * esd.len());
        for (k, &x) in esd.points().iter().enumerate().step_by((esd.len() / 1000).max(1)) {
            steps.push((x, k as f64 / n));
            steps.push((x, (k + 1) as f64 / n));
        }
        cdf.push(Series {
            label: format!("ESD {family}"),
            color: COLORS[i % 2],
            points: steps,
        });
    }
    let description: String = result
        .config
        .resolved()
        .iter()
        .map(|(k, v)| format!("{k}={v}; "))
        .collect();
    render(
        &[
            Panel {
                title: format!("density: {}", result.config.spec()),
                series: density,
            },
            Panel {
                title: "cumulative distribution".into(),
                series: cdf,
            },
        ],
        &description,
    )
}

fn summary(result: &ExperimentResult) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("status", if result.incomplete { "incomplete" } else { "complete" });
    kv.set("failed_trials", result.errors().len());
    for (index, message) in result.errors() {
        kv.set(&format!("trial{index}_error"), message);
    }
    for row in &result.pooled_rows {
        kv.set(&format!("{}_ks", row.label), row.distances.ks);
        kv.set(&format!("{}_w1", row.label), row.distances.w1);
        kv.set(&format!("{}_stieltjes_sup", row.label), row.distances.stieltjes_sup);
    }
    if let Some(pass) = result.threshold_passed() {
        kv.set("ks_threshold_passed", pass);
    }
    let ok: Vec<&TrialData> = result.trials.iter().filter_map(|t| t.outcome.as_ref().ok()).collect();
    kv.set(
        "max_norm_dev",
        ok.iter().map(|d| d.concentration.max_norm_dev).fold(0.0, f64::max),
    );
    kv.set(
        "max_inner",
        ok.iter().map(|d| d.concentration.max_inner).fold(0.0, f64::max),
    );
    if let Some(d) = result.diagonal {
        kv.set("diagonal_shift", d.shift);
        kv.set("diagonal_stieltjes_gap", d.stieltjes_gap);
        kv.set("diagonal_eigenvalue_gap", d.eigenvalue_gap);
    }
    kv
}

/// Writes `config.resolved`, `esd.csv`, `law.csv`, `distances.csv` (each with a
/// `.meta` sidecar echoing the config), `summary.txt`, `timings.txt` and `report.svg`.
///
/// Everything except `timings.txt` is a deterministic function of the config.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let resolved = result.config.resolved();
    resolved.write(&dir.join("config.resolved"))?;

    let mut esd = String::from("trial,lambda\n");
    let mut distances = String::from("trial,ks,w1,stieltjes_sup\n");
    let mut timings = KeyValues::new();
    for t in &result.trials {
        if let Ok(d) = &t.outcome {
            for l in d.sample.eigenvalues() {
                let _ = writeln!(esd, "{},{l}", t.index);
            }
            let _ = writeln!(
                distances,
                "{},{},{},{}",
                t.index, d.distances.ks, d.distances.w1, d.distances.stieltjes_sup
            );
            timings.set(&format!("trial{}_seconds", t.index), d.seconds);
        }
    }
    for row in &result.pooled_rows {
        let d = row.distances;
        let _ = writeln!(distances, "{},{},{},{}", row.label, d.ks, d.w1, d.stieltjes_sup);
    }
    timings.set("total_seconds", result.seconds);

    let mut law_meta = KeyValues::new();
    for (k, v) in resolved.iter() {
        law_meta.set(&format!("config.{k}"), v);
    }

    write_with_meta(&dir.join("esd.csv"), &esd, &resolved)?;
    write_with_meta(&dir.join("distances.csv"), &distances, &resolved)?;
    write_law_csv(&result.law, result.config.law_points, &dir.join("law.csv"), &law_meta)?;
    summary(result).write(&dir.join("summary.txt"))?;
    timings.write(&dir.join("timings.txt"))?;
    fs::write(dir.join("report.svg"), report_svg(result))?;
    Ok(())
}

/// Outcome of an L^2 perturbation run.
#[derive(Debug, Clone, PartialEq)]
pub struct L2Report {
    pub z: Complex64,
    pub pairs: usize,
    /// `p E|f1(g) - f2(g)|^2` over independent pairs.
    pub eps_sq: f64,
    pub eps_sq_std_error: f64,
    /// `|m_{A1}(z) - m_{A2}(z)|` per trial.
    pub deltas: Vec<f64>,
    pub mean_delta: f64,
    /// `mean_delta / eps`, when `eps > 0`.
    pub ratio: Option<f64>,
}

/// Sums of `d^2` and `d^4` over sampled pairs.
#[derive(Clone, Copy)]
struct PairSums(f64, f64);

/// Compares `A1 = f1(g)` with `A2 = f2(g)` built from the same samples.
///
/// The L^2 gap `eps^2 = p E|f1(g(Y, Y')) - f2(g(Y, Y'))|^2` is estimated from
/// `config.samples` independent pairs; `|m_{A1}(z) - m_{A2}(z)|` is measured at
/// `z = i z_im` over `config.trials` trials of the first ensemble.
pub fn run_l2_perturbation(cfg: &ExperimentConfig, f1: &Envelope, f2: &Envelope) -> Result<L2Report> {
    let mut base = cfg.clone();
    base.target = Target::FunctionalEquation;
    base.ensembles.truncate(1);
    base.validate()?;
    let family = cfg.ensembles[0];
    let ens = VectorEnsemble::new(family, cfg.p)?;
    let z = Complex64::new(0.0, cfg.z_im);
    let pairs = cfg.samples.max(2);
    const BATCH: usize = 4096;
    let batches = pairs.div_ceil(BATCH);
    let sums = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(sub_seed(cfg.seed, u64::MAX - 1), b as u64);
            let (mut x, mut y) = (vec![0.0; cfg.p], vec![0.0; cfg.p]);
            let mut acc = PairSums(0.0, 0.0);
            for _ in 0..BATCH.min(pairs - b * BATCH) {
                ens.fill(&mut rng, &mut x);
                ens.fill(&mut rng, &mut y);
                let g = match cfg.kernel {
                    KernelKind::InnerProduct => x.iter().zip(&y).map(|(u, v)| u * v).sum::<f64>(),
                    KernelKind::SquaredDistance => x.iter().zip(&y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>(),
                };
                let d2 = (f1.eval(g, cfg.p) - f2.eval(g, cfg.p)).powi(2);
                acc.0 += d2;
                acc.1 += d2 * d2;
            }
            acc
        })
        .reduce(|| PairSums(0.0, 0.0), |a, b| PairSums(a.0 + b.0, a.1 + b.1));
    let nf = pairs as f64;
    let pf = cfg.p as f64;
    let mean = sums.0 / nf;
    let eps_sq = pf * mean;
    let eps_sq_std_error = pf * ((sums.1 / nf - mean * mean).max(0.0) / nf).sqrt();

    let spec1 = KernelSpec::new(cfg.kernel, cfg.diagonal, f1.clone());
    let spec2 = KernelSpec::new(cfg.kernel, cfg.diagonal, f2.clone());
    let deltas = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<f64> {
            let sample = sample_matrix(ens, cfg.n, trial_seed(cfg.seed, 0, t))?;
            let m1 = eigenvalues(&build(&spec1, &sample)?)?.stieltjes(z)?;
            let m2 = eigenvalues(&build(&spec2, &sample)?)?.stieltjes(z)?;
            Ok((m1 - m2).norm())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let ratio = if eps_sq > 0.0 {
        Some(mean_delta / eps_sq.sqrt())
    } else {
        None
    };
    Ok(L2Report {
        z,
        pairs,
        eps_sq,
        eps_sq_std_error,
        deltas,
        mean_delta,
        ratio,
    })
}

/// Variance of `m_A(i z_im)` across `config.trials` trials at each size, for the
/// first ensemble with `gamma = p/n` held fixed.
pub fn run_variance_decay(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<VarianceDecay> {
    let model = MatrixModel::new(cfg.ensembles[0], cfg.gamma(), cfg.spec())?;
    stieltjes_variance_decay(&model, Complex64::new(0.0, cfg.z_im), cfg.trials, sizes, cfg.seed)
}

/// CSV `n,variance,mean_re,mean_im` for a variance-decay table.
pub fn write_variance_report(decay: &VarianceDecay, path: &Path) -> Result<()> {
    let mut out = String::from("n,variance,mean_re,mean_im\n");
    for row in &decay.rows {
        let _ = writeln!(out, "{},{},{},{}", row.n, row.variance, row.mean.re, row.mean.im);
    }
    let mut meta = KeyValues::new();
    meta.set("z", decay.z);
    meta.set("trials", decay.trials);
    meta.set("strictly_decreasing", decay.strictly_decreasing);
    write_with_meta(path, &out, &meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(target: Target) -> ExperimentConfig {
        ExperimentConfig {
            n: 60,
            p: 40,
            trials: 2,
            seed: 11,
            target,
            law_points: 801,
            samples: 20_000,
            ..Default::default()
        }
    }

    #[test]
    fn affine_table_integrates_by_gauss_chebyshev() {
        for (gamma, scale) in [(1.0, 1.0), (0.5, -2.0), (3.0, 0.5)] {
            let law = AffineMpLaw::new(gamma, 0.3, scale).unwrap();
            let (lo, hi) = law.continuous_support().unwrap();
            let rows = PredictedLaw::AffineMp(law.clone()).table(1001);
            let (c, r) = (0.5 * (lo + hi), 0.5 * (hi - lo));
            let inner = &rows[TABLE_PAD..rows.len() - TABLE_PAD];
            let mass: f64 = inner
                .iter()
                .map(|&(x, d, _)| d * (1.0 - ((x - c) / r).powi(2)).sqrt() * r * PI / inner.len() as f64)
                .sum();
            assert!((mass + law.atom_mass() - 1.0).abs() < 1e-6, "gamma {gamma}: {mass}");
            assert!(rows.windows(2).all(|w| w[0].0 < w[1].0));
            assert!(rows[..TABLE_PAD]
                .iter()
                .chain(&rows[rows.len() - TABLE_PAD..])
                .all(|r| r.1 == 0.0));
        }
    }

    #[test]
    fn outputs_are_deterministic() {
        let cfg = small(Target::AffineMp);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        write_outputs(&run_universality(&cfg).unwrap(), &a).unwrap();
        write_outputs(&run_universality(&cfg).unwrap(), &b).unwrap();
        for name in [
            "esd.csv",
            "law.csv",
            "distances.csv",
            "config.resolved",
            "summary.txt",
            "report.svg",
        ] {
            assert_eq!(
                fs::read(a.join(name)).unwrap(),
                fs::read(b.join(name)).unwrap(),
                "{name}"
            );
        }
        let esd = fs::read_to_string(a.join("esd.csv")).unwrap();
        assert!(esd.starts_with("trial,lambda\n"));
        assert_eq!(esd.lines().count(), 1 + 2 * 60);
        let dist = fs::read_to_string(a.join("distances.csv")).unwrap();
        assert!(dist.starts_with("trial,ks,w1,stieltjes_sup\n"));
        assert!(dist.lines().last().unwrap().starts_with("pooled,"));
        assert!(fs::read_to_string(a.join("law.csv"))
            .unwrap()
            .starts_with("x,density,cdf\n"));
        assert!(a.join("esd.csv.meta").exists());
    }

    #[test]
    fn distances_are_recomputable_from_files() {
        let cfg = small(Target::AffineMp);
        let result = run_universality(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&result, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("esd.csv")).unwrap();
        let points: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        let law = AffineMpLaw::from_record(&KeyValues::read(&dir.path().join("law.csv.meta")).unwrap()).unwrap();
        let ks = ks_distance(&Esd::new(points).unwrap(), &law);
        assert_eq!(ks, result.pooled_ks());
    }

    #[test]
    fn cross_ensemble_reports_inter_ensemble_distance() {
        let mut cfg = small(Target::CrossEnsemble);
        cfg.ensembles = vec![Family::GaussianIid, Family::RademacherIid];
        cfg.envelope = Envelope::sign_scaled();
        cfg.diagonal = Diagonal::Zero;
        cfg.p = 60;
        let result = run_universality(&cfg).unwrap();
        assert!(matches!(result.law, PredictedLaw::Limit { .. }));
        assert!(result.pooled_row("cross").is_some());
        assert!(result.pooled_row("pooled-gaussian").is_some());
        assert!(result.pooled_row("pooled-rademacher").is_some());
    }

    #[test]
    fn sphere_diagonal_shift_is_exact() {
        let mut cfg = small(Target::AffineMp);
        cfg.ensembles = vec![Family::SphereUniform];
        cfg.check_diagonal = true;
        let d = run_universality(&cfg).unwrap().diagonal.unwrap();
        assert_eq!(d.shift, 1f64.exp());
        assert!(d.eigenvalue_gap < 1e-10, "{d:?}");
        assert!(d.stieltjes_gap < 1e-10);
    }

    #[test]
    fn distance_kernel_diagonal_shift_is_f0() {
        let mut cfg = small(Target::AffineMp);
        cfg.kernel = KernelKind::SquaredDistance;
        cfg.envelope = Envelope::exp(-1.0);
        cfg.check_diagonal = true;
        let d = run_universality(&cfg).unwrap().diagonal.unwrap();
        assert_eq!(d.shift, 1.0);
        assert!(d.eigenvalue_gap < 1e-10, "{d:?}");
    }

    #[test]
    fn failed_trials_are_recorded() {
        let mut cfg = small(Target::FunctionalEquation);
        cfg.diagonal = Diagonal::Zero;
        cfg.a = Some(1.0);
        cfg.nu = Some(1.0);
        cfg.trials = 8;
        // NaN on a narrow window of kernel values: some samples hit it, some do not
        cfg.envelope = Envelope::custom(
            "holey",
            true,
            |x, _| if (0.0..1.6e-4).contains(&x) { f64::NAN } else { x },
        );
        let result = run_universality(&cfg).unwrap();
        let failed = result.errors().len();
        assert!(failed > 0 && failed < 8, "{failed} failures");
        assert!(result.incomplete);
        assert!(result.errors()[0].1.contains("non-finite"));
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&result, dir.path()).unwrap();
        let summary = KeyValues::read(&dir.path().join("summary.txt")).unwrap();
        assert_eq!(summary.get("status"), Some("incomplete"));

        cfg.envelope = Envelope::custom("nan", true, |_, _| f64::NAN);
        assert!(run_universality(&cfg).is_err());
    }

    #[test]
    fn identical_envelopes_have_zero_l2_gap() {
        let cfg = small(Target::AffineMp);
        let f = Envelope::exp(1.0);
        let r = run_l2_perturbation(&cfg, &f, &f).unwrap();
        assert_eq!(r.eps_sq, 0.0);
        assert!(r.deltas.iter().all(|&d| d == 0.0));
        assert_eq!(r.ratio, None);
    }
}
