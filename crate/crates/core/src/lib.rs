//! Simulator for multi-party fuzzy vertical federated learning.
//!
//! A primary party holding labels trains jointly with secondary parties
//! whose records are linked to its own only through noisy identifiers. The
//! crate provides a tape-based autodiff engine, a federated transformer
//! over the `K` nearest linked records per party, SplitAvg aggregation with
//! secret-shared summation and distributed Gaussian noise, a privacy
//! accountant, and the experiment harness used to compare models.

pub mod accountant;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod linkage;
pub mod model;
pub mod mpc;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod splitavg;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
