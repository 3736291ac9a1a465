//! Bayesian non-homogeneous hidden Markov models (NHMMs) for multi-station
//! daily time series, with covariate-driven multinomial-logistic transitions
//! sampled by Polya-Gamma augmentation and covariate-driven zero-inflated
//! exponential-mixture emissions sampled by ordered-probit augmentation.
//!
//! The crate provides:
//!
//! - [`pg`]: exact PG(1, z) variate generation and a gamma-sum test oracle;
//! - [`transition`]: covariate-dependent transition matrices and the
//!   Polya-Gamma Gibbs update of the logistic coefficients;
//! - [`emission`]: the zero-inflated two-exponential emission model and its
//!   latent-variable Gibbs updates;
//! - [`states`]: direct Gibbs sampling of the hidden chain;
//! - [`engine`]: the full MCMC sweep, missing-data imputation, posterior
//!   storage and persistence;
//! - [`simulate`]: predictive conditional chains, forecasting, and synthetic
//!   data generation;
//! - [`score`]: marginal likelihood, BIC, predictive log score, and spatial
//!   diagnostics;
//! - [`data`]: observation panels, covariates, CSV ingestion.
//!
//! State labeling note: the first day of the series is pinned to state 1,
//! so "state 1" is whichever regime covers day one of the training data.

pub mod data;
pub mod emission;
pub mod engine;
pub mod error;
pub mod pg;
pub mod rng;
pub mod score;
pub mod simulate;
pub mod states;
pub mod stats;
pub mod transition;

pub use data::{CovariateSet, ObservationPanel};
pub use emission::{EmissionParams, MixingWeights, ProbitLatents};
pub use engine::{McmcConfig, PosteriorStore, Priors, Sampler};
pub use error::{NhmmError, Result};
pub use states::StateChain;
pub use transition::{DesignMatrices, TransitionCoefficients, TransitionMatrix};
