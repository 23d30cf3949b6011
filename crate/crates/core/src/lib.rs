//! Random kernel matrices `A_ij = f(g(X_i, X_j), p)`: sampling, spectra, and
//! the limiting spectral laws they converge to.

pub mod ensembles;
pub mod envelope;
pub mod error;
pub mod experiments;
pub mod kernel_matrix;
pub mod kv;
pub mod limit_solver;
pub mod mp_theory;
pub mod orthopoly;
mod quadrature;
pub mod spectral;

pub use ensembles::{sample_matrix, Family, SampleMatrix, VectorEnsemble};
pub use envelope::{AnalyticValues, Envelope};
pub use error::{Error, Result};
pub use experiments::{run_l2_perturbation, run_universality, ExperimentConfig, ExperimentResult, Target};
pub use kernel_matrix::{build, Diagonal, KernelKind, KernelMatrix, KernelSpec, Linearization, MatrixModel};
pub use kv::KeyValues;
pub use limit_solver::{solve_grid, solve_point, LimitLaw, LimitParams};
pub use mp_theory::{mp_cdf, mp_density, mp_stieltjes, predicted_law, AffineMpLaw};
pub use orthopoly::{envelope_coeffs, hermite, xi_moments, AdmissibleParams, MomentSequence, OrthoBasis};
pub use spectral::{eigenvalues, ks_distance, Esd, SpectralLaw, SpectralSample};
