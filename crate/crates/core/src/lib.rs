//! Desk-scale siamese self-supervised pretraining lab.
//!
//! Implements negative-cosine siamese pretraining with two-view, K-view
//! neighbor-paired, and averaged-ensemble-target losses over a small
//! convolutional encoder, plus a gradient-variance probe that measures why
//! the averaged target helps. Everything runs on the CPU in f64 with fixed
//! arithmetic order: a (seed, config) pair reproduces every number bitwise.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod variance_probe;

pub use error::{Error, Result};
