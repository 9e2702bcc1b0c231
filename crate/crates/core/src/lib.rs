//! Monte Carlo laboratory for homogenization of the heat equation with a
//! smoothed space-time Gaussian potential.

pub mod chain;
pub mod error;
pub mod field;
pub mod fk;
pub mod intersection;
pub mod mollifier;
pub mod path;
pub mod pde;
pub mod quadrature;
pub mod report;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use rng::{Stream, Streams, Tag};
pub use stats::Estimate;
