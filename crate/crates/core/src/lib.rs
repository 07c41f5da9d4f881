//! Desk-scale alternating convex integration for the forced SQG equation in
//! momentum form on the torus `[-π, π)²`.
//!
//! The crate builds every object of one iteration of the scheme: the parameter
//! calculus ([`params`]), exact rational direction sets ([`geometry`]),
//! band-limited fields and Fourier multipliers ([`spectral`]), time grids,
//! mollifiers, partitions of unity and flow maps ([`flowtime`]), Beltrami
//! perturbations ([`perturb`]), the new Reynolds stress ([`stress`]) and the
//! iteration driver ([`scheme`]). [`cli_io`] holds file formats and the command
//! implementations used by the `sqgforge` binary.

pub mod cli_io;
pub mod error;
pub mod flowtime;
pub mod geometry;
pub mod par;
pub mod params;
pub mod perturb;
pub mod scheme;
pub mod spectral;
pub mod stress;

pub use error::{Error, Result};
