//! Constrained stochastic linearized Bregman imaging with a weak deep prior.
//!
//! The crate is organized bottom-up:
//!
//! * [`grid`] and [`linops`]: rasters and matrix-free operators with exact adjoints.
//! * [`projections`]: Euclidean projections onto box, ℓ1, ℓ2 and TV balls and
//!   their intersections (Dykstra).
//! * [`net`]: a small upsampling convolutional generator with hand-written
//!   reverse-mode gradients.
//! * [`bregman`]: stochastic linearized Bregman iterations, plain and
//!   augmented with the deep-prior penalty.
//! * [`sgld`]: Langevin sampling of latent codes.
//! * [`em`]: the expectation-maximization training loop.
//! * [`testbed`]: synthetic experiment banks with calibrated noise and
//!   linearization error.
//! * [`stats`]: posterior sampling statistics and file formats.

pub mod bregman;
pub mod check;
pub mod em;
pub mod error;
pub mod grid;
pub mod io;
pub mod linops;
pub mod net;
pub mod projections;
pub mod rng;
pub mod sgld;
pub mod stats;
pub mod testbed;

pub use error::{Error, Result};
pub use grid::{Grid, Shape};
