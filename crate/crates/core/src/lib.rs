//! Face anti-spoofing workbench.
//!
//! A frozen random backbone with a trainable eight-head attribute classifier,
//! reduced focal loss fine-tuning, temperature-weighted distillation into a
//! smaller student, and the biometric error-rate protocol (FAR/FRR, EER,
//! HTER, APCER/BPCER/ACER) evaluated on synthetic multi-domain sessions.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
