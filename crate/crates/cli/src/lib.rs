//! Command-line driver: `rkm <subcommand> [--config FILE] [overrides]`.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on numerical failure.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use rkm_core::ensembles::{concentration_diagnostic, moment_diagnostic, sample_matrix, VectorEnsemble};
use rkm_core::experiments::{
    predict, run_universality, trial_seed, write_law_csv, write_outputs, ExperimentConfig, PredictedLaw, Target,
    CONFIG_KEYS,
};
use rkm_core::kernel_matrix::{build, single_entry_swap};
use rkm_core::limit_solver::{solve_default_grid, LimitParams};
use rkm_core::orthopoly::{envelope_coeffs, xi_moments, MomentMethod, MomentSequence, MAX_DEGREE};
use rkm_core::spectral::{eigenvalues, symmetric_eigenvalues};
use rkm_core::{predicted_law, AffineMpLaw, Error, KeyValues};

/// Exit code for usage and validation errors.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for numerical failures.
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "rkm",
    version,
    about = "Random kernel matrices: spectra and their limiting laws"
)]
#[command(after_long_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Eigenvalues of the configured kernel matrices, as `trial,lambda` rows.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulates a limiting law as `x,density,cdf` rows.
    Predict {
        #[command(flatten)]
        common: Common,
        /// `mp` is the standard law of ratio gamma; `affine` and `fe` follow the configured kernel.
        #[arg(long, value_enum)]
        law: Option<LawChoice>,
        /// Aspect ratio; defaults to p/n.
        #[arg(long, allow_negative_numbers = true)]
        gamma: Option<f64>,
        /// Rows in the table; defaults to `law_points`.
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Orthogonal-polynomial coefficients of the envelope for the first ensemble.
    Expand {
        #[command(flatten)]
        common: Common,
    },
    /// Full universality run writing esd.csv, law.csv, distances.csv and report.svg.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Result directory; defaults to the `output` key.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entry moments, xi moments and norm concentration of the ensembles.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Even moment order of the standardized entries.
        #[arg(long, default_value_t = 4)]
        order: u32,
        /// Vectors drawn for the entry moment.
        #[arg(long, default_value_t = 2000)]
        draws: usize,
    },
    /// Checks that changing one sample entry perturbs the kernel matrix by rank at most 2.
    SwapCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        row: usize,
        #[arg(long, default_value_t = 0)]
        col: usize,
        /// Replacement value of the entry.
        #[arg(long, default_value_t = 0.5)]
        value: f64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum LawChoice {
    Mp,
    Affine,
    Fe,
}

/// Config file plus overrides, applied in the order: defaults, file, `--set`, flags.
#[derive(Args, Debug)]
struct Common {
    /// Key-value config file (`key = value` per line).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Comma-separated ensemble names.
    #[arg(long)]
    ensemble: Option<String>,
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long = "diag")]
    diagonal: Option<String>,
    #[arg(long)]
    envelope: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
}

fn config_help() -> String {
    let mut s = String::from("Config keys (file lines `key = value`, or --set key=value):\n");
    for (k, d) in CONFIG_KEYS {
        let _ = writeln!(s, "  {k:<15} {d}");
    }
    s
}

impl Common {
    /// The merged configuration, not yet validated.
    fn merged(&self) -> rkm_core::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            for (k, v) in KeyValues::read(path)?.iter() {
                cfg.set(k, v)?;
            }
        }
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{item}'")))?;
            cfg.set(k.trim(), v)?;
        }
        let flags: [(&str, Option<String>); 13] = [
            ("ensemble", self.ensemble.clone()),
            ("kernel", self.kernel.clone()),
            ("diagonal", self.diagonal.clone()),
            ("envelope", self.envelope.clone()),
            ("n", self.n.map(|v| v.to_string())),
            ("p", self.p.map(|v| v.to_string())),
            ("trials", self.trials.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("target", self.target.clone()),
            ("a", self.a.map(|v| v.to_string())),
            ("nu", self.nu.map(|v| v.to_string())),
            ("degree", self.degree.map(|v| v.to_string())),
            ("samples", self.samples.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        Ok(cfg)
    }

    /// The merged configuration, validated as given.
    fn config(&self) -> rkm_core::Result<ExperimentConfig> {
        let cfg = self.merged()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The merged configuration for subcommands that do not compare with a law:
    /// the target only needs to be consistent with the ensemble count.
    fn sampling_config(&self) -> rkm_core::Result<ExperimentConfig> {
        let mut cfg = self.merged()?;
        if cfg.target == Target::AffineMp && cfg.envelope.is_p_dependent() {
            cfg.target = Target::FunctionalEquation;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn cli_main(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_USAGE
            } else {
                EXIT_NUMERICAL
            }
        }
    }
}

fn run(command: Command) -> rkm_core::Result<i32> {
    match command {
        Command::Simulate { common, out } => simulate(&common.sampling_config()?, out.as_deref()).map(|_| 0),
        Command::Predict {
            common,
            law,
            gamma,
            points,
            out,
        } => run_predict(&common, law, gamma, points, out.as_deref()).map(|_| 0),
        Command::Expand { common } => expand(&common.sampling_config()?).map(|_| 0),
        Command::Compare { common, out } => compare(&common.config()?, out),
        Command::Diagnose { common, order, draws } => diagnose(&common.sampling_config()?, order, draws).map(|_| 0),
        Command::SwapCheck {
            common,
            row,
            col,
            value,
        } => swap_check(&common.sampling_config()?, row, col, value),
    }
}

fn emit(out: Option<&Path>, body: &str, meta: &KeyValues) -> rkm_core::Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, body)?;
            meta.write(&rkm_core::kv::sidecar_path(path))
        }
        None => {
            std::io::stdout().write_all(body.as_bytes())?;
            Ok(())
        }
    }
}

fn simulate(cfg: &ExperimentConfig, out: Option<&Path>) -> rkm_core::Result<()> {
    let spec = cfg.spec();
    let mut body = String::from("trial,lambda\n");
    for (slot, &family) in cfg.ensembles.iter().enumerate() {
        let ens = VectorEnsemble::new(family, cfg.p)?;
        for t in 0..cfg.trials {
            let sample = sample_matrix(ens, cfg.n, trial_seed(cfg.seed, slot, t))?;
            let spectrum = eigenvalues(&build(&spec, &sample)?)?;
            let values = spectrum.eigenvalues();
            let index = slot * cfg.trials + t;
            for l in values {
                let _ = writeln!(body, "{index},{l}");
            }
            eprintln!(
                "trial {index} ({family}): n = {}, trace = {:.6}, min = {:.6}, max = {:.6}",
                values.len(),
                values.iter().sum::<f64>(),
                values[0],
                values[values.len() - 1]
            );
        }
    }
    emit(out, &body, &cfg.resolved())
}

fn run_predict(
    common: &Common,
    choice: Option<LawChoice>,
    gamma: Option<f64>,
    points: Option<usize>,
    out: Option<&Path>,
) -> rkm_core::Result<()> {
    let mut cfg = common.merged()?;
    let choice = choice.unwrap_or(
        if cfg.envelope.is_p_dependent() || cfg.target == Target::FunctionalEquation {
            LawChoice::Fe
        } else {
            LawChoice::Affine
        },
    );
    if let Some(g) = gamma {
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive and finite, got {g}")));
        }
    }
    let points = points.unwrap_or(cfg.law_points);
    if points < 3 {
        return Err(Error::Config(format!("need at least 3 points, got {points}")));
    }
    let gamma_value = gamma.unwrap_or_else(|| cfg.gamma());
    let law = match choice {
        LawChoice::Mp => PredictedLaw::AffineMp(AffineMpLaw::standard(gamma_value)?),
        LawChoice::Affine => PredictedLaw::AffineMp(predicted_law(&cfg.spec(), gamma_value)?),
        LawChoice::Fe => {
            cfg.target = Target::FunctionalEquation;
            cfg.ensembles.truncate(1);
            cfg.law_points = points;
            match (gamma, cfg.a, cfg.nu) {
                (Some(g), Some(a), Some(nu)) => PredictedLaw::Limit {
                    law: solve_default_grid(&LimitParams::new(a, nu, g)?, points, cfg.epsilon)?,
                    expansion: None,
                },
                (Some(_), _, _) => {
                    return Err(Error::Config(
                        "--gamma with --law fe needs --a and --nu; otherwise gamma is p/n".into(),
                    ))
                }
                _ => {
                    cfg.validate()?;
                    predict(&cfg)?
                }
            }
        }
    };
    let mut meta = KeyValues::new();
    meta.set("gamma", gamma_value);
    meta.set("points", points);
    match out {
        Some(path) => write_law_csv(&law, points, path, &meta)?,
        None => {
            let mut body = String::from("x,density,cdf\n");
            for (x, d, c) in law.table(points) {
                let _ = writeln!(body, "{x},{d},{c}");
            }
            emit(None, &body, &meta)?;
        }
    }
    let record = law.to_record();
    eprintln!("{}", record.render().trim_end());
    Ok(())
}

fn expand(cfg: &ExperimentConfig) -> rkm_core::Result<()> {
    if cfg.degree > MAX_DEGREE {
        return Err(Error::Config(format!(
            "degree {} exceeds the cap {MAX_DEGREE}",
            cfg.degree
        )));
    }
    let family = cfg.ensembles[0];
    let params = envelope_coeffs(&cfg.envelope, family, cfg.p, cfg.degree, cfg.samples, cfg.seed)?;
    let mut body = String::from("k,a_k,std_error\n");
    for (k, (a, se)) in params.coeffs.iter().zip(&params.std_errors).enumerate() {
        let _ = writeln!(body, "{k},{a},{se}");
    }
    print!("{body}");
    eprintln!("{}", params.to_record().render().trim_end());
    Ok(())
}

/// Partial results are written before a failed trial turns the exit code numerical.
fn compare(cfg: &ExperimentConfig, out: Option<PathBuf>) -> rkm_core::Result<i32> {
    let dir = out
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| Error::Config("compare needs --out or the 'output' key".into()))?;
    let result = run_universality(cfg)?;
    write_outputs(&result, &dir)?;
    for row in &result.pooled_rows {
        let d = row.distances;
        println!(
            "{}: ks = {:.6}, w1 = {:.6}, stieltjes_sup = {:.6}",
            row.label, d.ks, d.w1, d.stieltjes_sup
        );
    }
    if let Some(pass) = result.threshold_passed() {
        println!("ks_threshold: {}", if pass { "pass" } else { "fail" });
    }
    for (index, message) in result.errors() {
        eprintln!("trial {index} failed: {message}");
    }
    println!("results written to {}", dir.display());
    if result.incomplete {
        eprintln!(
            "error: {} of {} trials failed",
            result.errors().len(),
            result.trials.len()
        );
        return Ok(EXIT_NUMERICAL);
    }
    Ok(0)
}

fn diagnose(cfg: &ExperimentConfig, order: u32, draws: usize) -> rkm_core::Result<()> {
    let gaussian = MomentSequence::gaussian_limit(8);
    for (slot, &family) in cfg.ensembles.iter().enumerate() {
        let ens = VectorEnsemble::new(family, cfg.p)?;
        println!("[{family}, p = {}]", cfg.p);
        let report = moment_diagnostic(ens, order, draws, trial_seed(cfg.seed, slot, 0))?;
        println!(
            "E|sqrt(p) X|^{order} = {:.6} +- {:.6} ({} entries)",
            report.estimate, report.std_error, report.samples
        );
        let method = if family.is_iid() {
            MomentMethod::Exact
        } else {
            MomentMethod::MonteCarlo { samples: cfg.samples }
        };
        let xi = xi_moments(family, cfg.p, 8, method, cfg.seed)?;
        println!("k,xi_moment,gaussian_moment");
        for k in 0..=8 {
            println!("{k},{},{}", xi.values()[k], gaussian.values()[k]);
        }
        let sample = sample_matrix(ens, cfg.n, trial_seed(cfg.seed, slot, 1))?;
        let c = concentration_diagnostic(&sample)?;
        println!(
            "max_norm_dev = {:.6}, max_inner = {:.6} (n = {})",
            c.max_norm_dev, c.max_inner, cfg.n
        );
    }
    Ok(())
}

/// Relative size below which an eigenvalue of the difference counts as zero.
const RANK_TOLERANCE: f64 = 1e-9;

fn swap_check(cfg: &ExperimentConfig, row: usize, col: usize, value: f64) -> rkm_core::Result<i32> {
    let sample = sample_matrix(
        VectorEnsemble::new(cfg.ensembles[0], cfg.p)?,
        cfg.n,
        trial_seed(cfg.seed, 0, 0),
    )?;
    let (before, after) = single_entry_swap(&sample, row, col, value, &cfg.spec())?;
    let delta = after.data() - before.data();
    let ev = symmetric_eigenvalues(&delta).ok_or_else(|| Error::Eigensolver {
        provenance: "swap difference".into(),
    })?;
    let largest = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rank = ev
        .iter()
        .filter(|v| v.abs() > RANK_TOLERANCE * largest.max(f64::MIN_POSITIVE))
        .count();
    let outside = (0..cfg.n)
        .flat_map(|i| (0..cfg.n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != col && j != col)
        .map(|(i, j)| delta[(i, j)].abs())
        .fold(0.0, f64::max);
    println!("swapped entry ({row}, {col}) -> {value}");
    println!("rank = {rank}, largest |eigenvalue| = {largest:.6e}, max change outside row/column {col} = {outside:e}");
    if rank > 2 || outside != 0.0 {
        eprintln!("error: rank-2 property violated");
        return Ok(EXIT_NUMERICAL);
    }
    println!("rank-2 property holds");
    Ok(0)
}
