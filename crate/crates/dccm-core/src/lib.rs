//! Discrete-time contraction-based control with learned metrics.
//!
//! The pipeline: sweep a model family over a lattice of parameters, states
//! and inputs ([`dataset`]); train a Siamese network whose outputs decode
//! into a state-dependent metric `M(x)` and differential feedback gain
//! `K(x)` under a Sylvester-minor hinge loss ([`trainer`]); drive the plant
//! by integrating the gain along discrete geodesics of the learned metric
//! ([`geodesic`], [`controller`]); estimate uncertain model parameters
//! online from closed-loop data ([`estimator`]); and certify a contraction
//! rate over a region from finitely many samples ([`certifier`]).

pub mod certifier;
pub mod config;
pub mod controller;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod geodesic;
pub mod linalg;
pub mod mlp;
pub mod model;
pub mod reference;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
