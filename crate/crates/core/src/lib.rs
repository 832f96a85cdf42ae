//! Speaker-attributed streaming multi-talker transduction at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`gradcore`]: a small reverse-mode differentiation tape and optimizer.
//! * [`lattices`]: exact CTC, RNN-T, HAT and auxiliary speaker HAT losses.
//! * [`heat`]: channel assignment of overlapping references.
//! * [`mixsim`]: synthetic corpus, mixture and session simulation.
//! * [`model`]: the two-branch unmixing + transducer network.
//! * [`train`]: training loops for the sequential and joint strategies.
//! * [`decode`]: greedy joint decoding and speaker-prefix reconciliation.
//! * [`metrics`]: ORC-WER, cpWER, WDER, speaker counting and entropy.

pub mod config;
pub mod decode;
pub mod error;
pub mod fsutil;
pub mod gradcheck;
pub mod gradcore;
pub mod heat;
pub mod lattices;
pub mod metrics;
pub mod mixsim;
pub mod model;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use error::{Result, SurtError};
pub use tensor::Tensor;
