//! Few-shot EEG emotion recognition with evolvable test-time adaptation.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`autograd`], [`optim`], [`gradcheck`]: dense `f64` tensors with a
//!   reverse-mode tape, SGD and finite-difference verification.
//! * [`data`]: feature-file ingestion, a synthetic drifting-EEG generator, and the
//!   intra/inter-subject split protocols.
//! * [`backbone`]: the G2G + ConvNet encoder, the two-layer adapter and the
//!   few-shot heads.
//! * [`fsl`]: episode sampling, losses, classification and episodic meta-training.
//! * [`mmd`]: multi-kernel maximum mean discrepancy.
//! * [`adapt`]: snapshot sampling and the inner/outer adapter alignment loop run
//!   before each test episode.
//! * [`harness`]: experiment configs, checkpoints, protocol runs and reports.

pub mod adapt;
pub mod autograd;
pub mod data;
pub mod error;
pub mod fsl;
pub mod backbone;
pub mod gradcheck;
pub mod harness;
pub mod mmd;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{GroupTag, ParamGroup, Tensor};
