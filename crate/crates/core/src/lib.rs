//! Gaussian-process surrogate ABC.
//!
//! The discrepancy between simulated and observed data is modelled with a
//! zero-mean GP. From the GP we get pointwise moments, cdf and quantiles of
//! the unnormalised ABC posterior, and acquisition rules that pick the next
//! simulation location by minimising the expected integrated variance of
//! that posterior (or by one of several baseline rules).

pub mod acquisition;
pub mod domain;
pub mod error;
pub mod gp;
pub mod optim;
pub mod oracle;
pub mod posterior;
pub mod quadrature;
pub mod rng;
pub mod samplers;
pub mod special;

pub use domain::{Bounds, Prior};
pub use error::{DomainError, Error, Result};
pub use gp::{FittedGp, Hyper, HyperPrior, TrainingSet};
pub use posterior::{Moments, Threshold};
