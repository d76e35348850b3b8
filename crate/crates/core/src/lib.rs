//! Simulation and coefficient identification for scalar Ito diffusions
//! `dX_t = b(X_t) dt + sigma(X_t) dW_t`.
//!
//! The crate simulates sample paths, solves the associated backward
//! Kolmogorov equation, materializes moment observation sets on small
//! time/space windows, reconstructs the drift and diffusion coefficients
//! from them, and runs distinguishability experiments.
//!
//! Core math is generic over the scalar type through [`scalar::Real`];
//! `f64` aliases are exported at the crate root.

// `!(a > b)` guards are deliberate: they reject NaN along with the ordered
// failure case. The stencil/linear-algebra loops index several arrays in
// lockstep, where explicit indices read better than zipped iterators.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]
#![allow(clippy::type_complexity)]

pub mod cli;
pub mod coefficients;
pub mod error;
pub mod fk_pde;
pub mod gallery;
pub mod identify;
pub mod linalg;
pub mod observable;
pub mod observe;
pub mod rng;
pub mod scalar;
pub mod sde_sim;

pub use error::{Error, Result};
pub use scalar::Real;

/// `f64` aliases for the main domain types.
pub type PiecewiseFn = coefficients::PiecewiseAnalyticFn<f64>;
pub type Model = coefficients::SdeModel<f64>;
pub type Observable64 = observable::Observable<f64>;
pub type Grid = fk_pde::Grid1D<f64>;
pub type Field = fk_pde::SolutionField<f64>;
pub type Paths = sde_sim::PathBatch<f64>;
pub type Moments = Vec<sde_sim::MomentEstimate<f64>>;
pub type Observations = observe::ObservationSet<f64>;
pub type Reconstruction = identify::ReconstructionResult<f64>;
