pub mod cohomology;
pub mod cones;
pub mod error;
pub mod fourier;
pub mod homogeneous;
pub mod jet;
pub mod nbody;
pub mod ode;
pub mod parametrization;

pub use error::{ParabolicError, Result};
