//! Deformable image registration with linear-elastic regularization.
//!
//! The crate covers the variational core (local NCC similarity, diffusion
//! and linear-elastic regularizers with closed-form gradients), per-pair
//! instance optimization, a toy hypernetwork that amortizes registration
//! over the elasticity parameters, evaluation metrics, and the grid-search
//! protocol that picks data-specific parameters at test time.

pub mod energy;
pub mod error;
pub mod grid;

pub use energy::{ElasticityParams, EnergyValue, Objective, RawElasticity};
pub use error::{Error, Result};
pub use grid::{DisplacementField, GridDomain, ScalarGrid};
pub mod amortizer;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod registration;
pub mod sweep;
