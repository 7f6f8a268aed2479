//! Surrogate-assisted calibration of a synthetic estuary model.
//!
//! The crate covers the whole loop: a cheap closed-form forward model,
//! Latin hypercube designs, kriging surrogates of per-station errors,
//! Sobol sensitivity, principal component diagnostics, single- and
//! multi-objective optimizers, and a reproducible on-disk workbench.

pub mod diagnostics;
mod digest;
pub mod doe;
pub mod error;
pub mod estuary;
pub mod kriging;
pub mod metrics;
pub mod optimize;
mod parallel;
pub mod scenario;
mod simplex;
pub mod sobol;
pub mod workbench;

pub use digest::{derive_seed, sha256_file, sha256_hex};
pub use error::{Error, Result};
pub use estuary::{
    BoundaryConfig, Estuary, ForwardModel, ParameterBounds, ParameterVector, StationConfig,
    TideConstituent, TimeGrid, TimeSeries, N_PARAMS, PARAM_NAMES,
};
pub use kriging::{KrigingConfig, KrigingModel, SurrogateSet};
pub use parallel::with_workers;
pub use scenario::Scenario;
