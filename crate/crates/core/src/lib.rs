//! Approximate message passing for non-symmetric random matrices with
//! variance and correlation profiles, together with its density evolution,
//! statistical verification and small-n exact oracles.

pub mod activations;
pub mod amp;
pub mod density_evolution;
pub mod error;
pub mod gaussian;
pub mod lotka_volterra;
pub mod profiles;
pub mod sampler;
pub mod tree_oracle;
pub mod verification;

pub use error::{AmpError, Result};
pub use activations::{make_activation, Activation, ActivationSpec, EtaMode, PolynomialFamily};
pub use amp::{amp_run, amp_run_noncentered, OnsagerVariant, Trajectory};
pub use density_evolution::{
    de_run, de_run_asymptotic, de_run_noncentered, DEState, GaussianExpectationConfig, MuSchedule,
};
pub use lotka_volterra::{lv_equilibrium, EquilibriumResult};
pub use profiles::{
    make_block_profiles, make_dense_profile, make_dregular_profile, CorrelationProfile, VarianceProfile,
};
pub use sampler::{
    add_rank_one, compute_v, estimate_spectral_norm, sample_t_correlated, EntryDistribution, LinearOperator,
    ProfileMatrix, SampledMatrix, SpikedMatrix,
};
pub use tree_oracle::{MarkedPolynomial, NbIterates};
pub use verification::{convergence_gap, GapReport, TestFunction};
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
