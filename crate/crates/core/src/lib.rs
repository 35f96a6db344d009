//! Prototype-sharing federated learning with local differential privacy.
//!
//! Clients embed their data with a frozen backbone and a trainable adapter,
//! summarize each class by clipped prototypes and release them through an
//! isotropic or a variance-partitioned Gaussian mechanism. The server
//! aggregates released prototypes into global ones that regularize the next
//! round of local training.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod localtrain;
pub mod numerics;
pub mod privacy;
pub mod prototypes;
pub mod scoring;
pub mod selftest;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngStream, Scalar};

pub type MatrixF64 = numerics::Matrix<f64>;
pub type MatrixF32 = numerics::Matrix<f32>;
