//! End-to-end runs of `cli_main`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rkm_cli::{cli_main, EXIT_NUMERICAL, EXIT_USAGE};
use rkm_core::experiments::TABLE_PAD;
use rkm_core::KeyValues;

fn run(args: &[&str]) -> i32 {
    let argv = std::iter::once("rkm")
        .chain(args.iter().copied())
        .map(String::from)
        .collect();
    cli_main(argv)
}

fn read_rows(path: &Path) -> (String, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    (
        header,
        lines.map(|l| l.split(',').map(String::from).collect()).collect(),
    )
}

#[test]
fn predicted_mp_density_integrates_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mp.csv");
    assert_eq!(
        run(&["predict", "--law", "mp", "--gamma", "1", "--out", out.to_str().unwrap()]),
        0
    );
    let (header, rows) = read_rows(&out);
    assert_eq!(header, "x,density,cdf");
    let rows: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap()))
        .collect();
    let meta = KeyValues::read(&out.with_extension("csv.meta")).unwrap();
    assert_eq!(meta.get("type"), Some("affine-mp"));
    // support [0, 4] carries Chebyshev nodes; Gauss-Chebyshev quadrature of the emitted density
    let inner = &rows[TABLE_PAD..rows.len() - TABLE_PAD];
    let (c, r) = (2.0, 2.0);
    let mass: f64 = inner
        .iter()
        .map(|&(x, d)| d * (1.0 - ((x - c) / r).powi(2)).sqrt() * r * PI / inner.len() as f64)
        .sum();
    assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
    assert!(rows[..TABLE_PAD]
        .iter()
        .chain(&rows[rows.len() - TABLE_PAD..])
        .all(|&(_, d)| d == 0.0));
}

#[test]
fn simulated_sphere_identity_has_unit_trace_per_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("esd.csv");
    let code = run(&[
        "simulate",
        "--n",
        "10",
        "--p",
        "5",
        "--ensemble",
        "sphere",
        "--envelope",
        "identity",
        "--kernel",
        "inner",
        "--diag",
        "keep",
        "--trials",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let (header, rows) = read_rows(&out);
    assert_eq!(header, "trial,lambda");
    let lambdas: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(lambdas.len(), 10);
    assert!(lambdas.iter().all(|l| l.is_finite()));
    assert!((lambdas.iter().sum::<f64>() - 10.0).abs() < 1e-10);
    // rank p Gram matrix: n - p zero eigenvalues
    assert_eq!(lambdas.iter().filter(|l| l.abs() < 1e-10).count(), 5);
}

#[test]
fn compare_writes_the_result_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("uni.cfg");
    let out = dir.path().join("result");
    fs::write(
        &cfg,
        format!(
            "ensemble = gaussian\nkernel = inner\ndiagonal = zero\nenvelope = exp:a=1\nn = 80\np = 40\ntrials = 2\nseed = 3\noutput = {}\n",
            out.display()
        ),
    )
    .unwrap();
    assert_eq!(run(&["compare", "--config", cfg.to_str().unwrap()]), 0);
    for name in ["esd.csv", "law.csv", "distances.csv", "report.svg", "config.resolved"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let resolved = KeyValues::read(&out.join("config.resolved")).unwrap();
    assert_eq!(resolved.get("gamma"), Some("0.5"));
    assert_eq!(read_rows(&out.join("distances.csv")).0, "trial,ks,w1,stieltjes_sup");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("base.cfg");
    fs::write(&cfg, "n = 30\np = 10\nensemble = rademacher\ntrials = 1\n").unwrap();
    let out = dir.path().join("esd.csv");
    assert_eq!(
        run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--n",
            "12",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    assert_eq!(read_rows(&out).1.len(), 12);
    let meta = KeyValues::read(&out.with_extension("csv.meta")).unwrap();
    assert_eq!(meta.get("ensemble"), Some("rademacher"));
    assert_eq!(meta.get("n"), Some("12"));
}

#[test]
fn usage_and_validation_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(run(&["simulate", "--no-such-flag"]), EXIT_USAGE);
    assert_eq!(run(&["simulate", "--trials", "0"]), EXIT_USAGE);
    assert_eq!(run(&["simulate", "--set", "bogus=1"]), EXIT_USAGE);
    assert_eq!(run(&["simulate", "--envelope", "exp:b=2"]), EXIT_USAGE);
    assert_eq!(
        run(&[
            "compare",
            "--envelope",
            "sign-scaled",
            "--target",
            "affine-mp",
            "--out",
            "unused"
        ]),
        EXIT_USAGE
    );
    assert_eq!(run(&["predict", "--law", "mp", "--gamma", "-1"]), EXIT_USAGE);
    assert_eq!(
        run(&[
            "expand",
            "--ensemble",
            "sphere",
            "--envelope",
            "exp:a=1",
            "--degree",
            "9"
        ]),
        EXIT_USAGE
    );
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn numerical_failures_exit_two() {
    // Rademacher with p = 1 has a two-point xi law: the order-2 Hankel determinant vanishes
    assert_eq!(
        run(&[
            "expand",
            "--ensemble",
            "rademacher",
            "--p",
            "1",
            "--envelope",
            "exp:a=1",
            "--degree",
            "2"
        ]),
        EXIT_NUMERICAL
    );
}

#[test]
fn other_subcommands_succeed() {
    assert_eq!(
        run(&[
            "expand",
            "--ensemble",
            "rademacher",
            "--p",
            "50",
            "--envelope",
            "sign-scaled",
            "--samples",
            "20000"
        ]),
        0
    );
    assert_eq!(
        run(&[
            "diagnose",
            "--ensemble",
            "gaussian,rademacher",
            "--target",
            "cross-ensemble",
            "--n",
            "50",
            "--p",
            "30"
        ]),
        0
    );
    assert_eq!(
        run(&["swap-check", "--n", "20", "--p", "10", "--row", "3", "--col", "7"]),
        0
    );
    assert_eq!(
        run(&["predict", "--law", "fe", "--gamma", "1", "--a", "0", "--nu", "1", "--points", "401"]),
        0
    );
}
