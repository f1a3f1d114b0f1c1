//! Predictor feedback for diagonal boundary control systems under
//! time-varying input delay, with ISS certification.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod expint;
pub mod lemma2;
pub mod linalg;
pub mod spectral_model;
pub mod synthesis;
pub mod controller;
pub mod pipeline;
pub mod iss_certifier;
pub mod signals;
pub mod sim_engine;

pub use error::{Error, Result};
