//! Fractional-posterior inference for generalized reduced-rank regression.
//!
//! Responses follow a natural exponential family with natural parameter
//! `θ_ij = θ(x_iᵀ β_j)`, the p×q coefficient matrix `B` gets a spectral
//! scaled Student prior, and inference targets the fractional posterior
//! `π_{n,α}(B) ∝ L_n(B)^α π(B)`, explored with Langevin samplers.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the
//! experiment harness and the reference oracles work in `f64`. Aliases for
//! the common `f64` instantiations live at the crate root.

pub mod divergence;
pub mod error;
pub mod experiments;
pub mod io;
pub mod model;
pub mod oracle;
pub mod posterior;
pub mod prior;
pub mod scalar;
pub mod simulate;

pub use divergence::{
    c_alpha, divergence_report, kl_per_entry, kl_total, lemma_bounds, rate_formulas, renyi_per_entry, renyi_total,
    DivergenceReport, LemmaBounds, RateFormulas, RateInputs,
};
pub use error::{Error, ErrorCategory, Result};
pub use model::{linear_predictor, Bound, Dataset, FamilyBounds, FamilyId, FamilySpec};
pub use posterior::{
    likelihood_mode, posterior_mean, run_sampler, Algorithm, Chain, FractionalConfig, FractionalPosterior, Init,
};
pub use prior::{PriorConfig, TauPreset};
pub use scalar::Real;
pub use simulate::{DesignMode, SyntheticTruth};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Dense matrix of the default scalar type.
pub type Mat = nalgebra::DMatrix<f64>;
pub type MatF32 = nalgebra::DMatrix<f32>;

pub type FamilySpecF64 = FamilySpec<f64>;
pub type FamilySpecF32 = FamilySpec<f32>;
pub type DatasetF64 = Dataset<f64>;
pub type DatasetF32 = Dataset<f32>;
pub type PriorConfigF64 = PriorConfig<f64>;
pub type PriorConfigF32 = PriorConfig<f32>;
pub type ChainF64 = Chain<f64>;
pub type ChainF32 = Chain<f32>;
pub type FractionalConfigF64 = FractionalConfig<f64>;
pub type FractionalConfigF32 = FractionalConfig<f32>;
pub type SyntheticTruthF64 = SyntheticTruth<f64>;
