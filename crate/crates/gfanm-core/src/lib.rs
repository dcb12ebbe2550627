//! Line spectral estimation by atomic norm minimization over the atoms of a
//! G-filter bank.

pub mod anm;
pub mod baselines;
pub mod cfdecomp;
pub mod conic;
pub mod covariance;
pub mod error;
pub mod experiment;
pub mod gfilter;
pub mod numerics;
pub mod signal;

pub use error::{Error, Result};
