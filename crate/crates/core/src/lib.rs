//! Numerical toolkit for nonautonomous linear delay differential equations
//! `x'(t) = L(t) x_t`: evolution operators on a spectral segment space,
//! exponential dichotomy detection, Perron-type shadowing and an explicit
//! unbounded-coefficient counterexample.

pub mod coefficients;
pub mod counterexample;
pub mod dichotomy;
pub mod error;
pub mod evolution;
pub mod integrator;
pub mod oracle;
pub mod perron_shadow;
pub mod segment;
pub mod trajectory;

pub use error::{Error, Result};
