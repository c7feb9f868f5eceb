//! Multi-user MIMO downlink beamforming simulator.
//!
//! The simulator covers the full limited-feedback beamforming loop at desk
//! scale: sparse mmWave channel generation, per-user latent compression and
//! feedback with errors, neural beamformer and channel decoders trained with
//! knowledge distillation and unrolled gradient-ascent refinement, closed-form
//! MMSE baselines, and far-/near-field hybrid beamforming. Every analytical
//! gradient in the crate is verifiable against the finite-difference oracle in
//! [`numerics`].
//!
//! The accompanying guide (`book/` in the repository root) walks through the
//! concepts chapter by chapter; its code snippets are doc-tested from the
//! `beamsim-guide` crate.

pub mod channel;
pub mod error;
pub mod feedback;
pub mod harness;
pub mod hybrid;
pub mod nets;
pub mod numerics;
pub mod rate;
pub mod training;

pub use error::{Error, Result};
