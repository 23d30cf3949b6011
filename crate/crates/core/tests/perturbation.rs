//! Concentration of the ensembles and the L^2 perturbation bounds on Stieltjes transforms.

use rkm_core::ensembles::{concentration_diagnostic, sample_matrix, sub_seed, Family, VectorEnsemble};
use rkm_core::experiments::{run_l2_perturbation, ExperimentConfig};
use rkm_core::orthopoly::truncated_envelope;
use rkm_core::{Diagonal, Envelope, KernelKind};

#[test]
fn norms_concentrate_for_almost_every_seed() {
    for family in [Family::GaussianIid, Family::RademacherIid] {
        let ens = VectorEnsemble::new(family, 1000).unwrap();
        let good = (0..100)
            .filter(|&s| {
                let sample = sample_matrix(ens, 500, sub_seed(99, s)).unwrap();
                concentration_diagnostic(&sample).unwrap().max_norm_dev < 0.25
            })
            .count();
        assert!(good >= 99, "{family}: only {good}/100 seeds concentrate");
    }
}

#[test]
fn sphere_norms_are_exactly_one() {
    let sample = sample_matrix(VectorEnsemble::new(Family::SphereUniform, 300).unwrap(), 200, 5).unwrap();
    assert!(concentration_diagnostic(&sample).unwrap().max_norm_dev < 1e-12);
}

fn base(n: usize, p: usize) -> ExperimentConfig {
    ExperimentConfig {
        kernel: KernelKind::InnerProduct,
        diagonal: Diagonal::Keep,
        n,
        p,
        trials: 4,
        seed: 21,
        samples: 20_000,
        ..Default::default()
    }
}

#[test]
fn rank_one_perturbation_gap_shrinks_with_n() {
    // f + c adds c times the all-ones matrix: eps^2 = p c^2 stays fixed while
    // the Stieltjes gap is at most 1/(n Im z)
    let f = Envelope::exp(1.0);
    let mut previous = f64::INFINITY;
    for n in [250usize, 500, 1000] {
        let p = n / 2;
        let g = f.plus_constant(1.0 / (p as f64).sqrt());
        let report = run_l2_perturbation(&base(n, p), &f, &g).unwrap();
        assert!((report.eps_sq - 1.0).abs() < 1e-9, "eps^2 = {}", report.eps_sq);
        assert!(
            report.mean_delta <= 1.0 / n as f64 + 1e-12,
            "n = {n}: {}",
            report.mean_delta
        );
        assert!(report.mean_delta < previous);
        previous = report.mean_delta;
    }
}

#[test]
fn truncation_gap_matches_tail_mass() {
    let p = 400;
    let f = Envelope::sign_scaled();
    let (truncated, params) = truncated_envelope(&f, Family::GaussianIid, p, 4, 400_000, 8).unwrap();
    let cfg = ExperimentConfig {
        samples: 200_000,
        trials: 3,
        diagonal: Diagonal::Zero,
        ..base(400, p)
    };
    let report = run_l2_perturbation(&cfg, &f, &truncated).unwrap();
    // p E|f - f_L|^2 = E|k - k_L|^2 = Var k - sum a_k^2 in the orthonormal basis
    let bound = 5.0 * (report.eps_sq_std_error + params.variance_std_error) + 0.01;
    assert!(
        (report.eps_sq - params.tail_mass).abs() < bound,
        "eps^2 = {} vs tail mass {} (bound {bound})",
        report.eps_sq,
        params.tail_mass
    );
    // |m1 - m2| <= ||A1 - A2||_F / (sqrt(n) Im z^2), and E||A1 - A2||_F^2 / n = eps^2 / gamma
    let gamma = p as f64 / cfg.n as f64;
    assert!(report.ratio.unwrap() < 1.0 / gamma.sqrt(), "ratio {:?}", report.ratio);
}
