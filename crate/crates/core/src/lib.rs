//! Deterministic, VIB and CEB classifiers together with a graded white-box
//! L∞ attack suite and gradient-obfuscation diagnostics.

pub mod attacks;
pub mod datasets;
pub mod diagnostics;
pub mod error;
pub mod ibmodels;
pub mod ndtape;
pub mod rng;
pub mod toyexp;

pub use error::{Error, Result};
pub use ndtape::{Tape, Tensor, Var};
