//! Simulator for multi-party learning by contrastive knowledge sharing.
//!
//! Clients train an encoder, a conditional generator and a classifier on
//! private data and upload only the generator. The server samples per-class
//! embeddings from it, keeps a table of representative Gaussians, gates
//! integration by covariance trace and trains a central classifier that it
//! broadcasts back together with the table.

pub mod checkpoint;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod server;
pub mod settings;
pub mod sim;

pub use error::{Error, Result};
