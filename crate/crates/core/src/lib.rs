//! Simulation of coupled predator-prey reaction-diffusion systems with
//! Neumann boundary conditions, and order-by-order recovery of the
//! interaction terms' Taylor coefficients from boundary traces and terminal
//! snapshots.
//!
//! Modules:
//! - [`taylor`]: interaction terms in rational-Taylor form, exact
//!   differentiation at a base point, admissibility checks, model presets.
//! - [`spectral`]: interval grid, Neumann cosine eigenbasis, projection
//!   quadrature, separated and adjoint solutions.
//! - [`modal`]: closed-form solutions of the linear variation systems in
//!   the cosine basis.
//! - [`forward`]: IMEX time stepping of the coupled system and the
//!   measurement map.
//! - [`variation`]: epsilon families, finite-difference extraction of
//!   variation fields, source assembly, direct variation solves.
//! - [`recovery`]: projection identities as least-squares systems,
//!   order-by-order coefficient recovery, uniqueness falsification,
//!   structural parameter fits.
//! - [`harness`]: config-driven end-to-end pipeline and report emission.

pub mod error;
pub mod forward;
pub mod harness;
pub mod modal;
pub mod recovery;
pub mod spectral;
pub mod taylor;
pub mod variation;

pub use error::{LvError, Result};
