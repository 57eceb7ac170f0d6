//! Numerical large-deviation theory for products of i.i.d. random matrices.
//!
//! The crate is organised bottom-up:
//!
//! * [`ensemble`]: finitely supported matrix laws and heuristic condition checks.
//! * [`projective`]: the projective action, metrics and the norm cocycle.
//! * [`spectral`]: grid discretization of the transfer operators `P_s`, `P_s*`
//!   and the perturbed operators `R_{s,z}`.
//! * [`cumulant`]: `Λ = log κ`, its Legendre transform, Cramér series and saddle points.
//! * [`smoothing`]: the compact-Fourier smoothing density and `ψ^±` envelopes.
//! * [`montecarlo`]: exact enumeration, crude and exponentially tilted estimators.
//! * [`predict`]: closed-form asymptotic predictors with factor breakdowns.
//!
//! Data-parallel loops go through [`par`], which falls back to sequential
//! iteration when the `parallel` feature is disabled or a single worker is requested.

pub mod cumulant;
pub mod ensemble;
pub mod error;
pub mod montecarlo;
pub mod numeric;
pub mod par;
pub mod predict;
pub mod projective;
pub mod smoothing;
pub mod spectral;

pub use error::{Error, Result};
