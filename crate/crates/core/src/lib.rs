//! Quantum-circuit Born machine latent sources for Wasserstein GANs.
//!
//! A QCBM is simulated exactly on a statevector, sampled into bitstrings, and
//! those bitstrings feed the generator of a WGAN-GP trained on 5-channel
//! EBSD-style images. The circuit parameters are tuned against the generator
//! loss with finite differences or SPSA, and image quality is scored with a
//! linear-kernel MMD.

pub mod backend;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod qcbm_train;
pub mod quantum_sim;
pub mod transpile;

pub use error::{Error, Result};
