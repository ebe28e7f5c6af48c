//! Blind face inpainting trained with a joint pixel and feature level loss.
//!
//! The crate contains a small dense-tensor engine with hand-written
//! backward passes ([`ops`], [`optim`]), the encoder–decoder inpainter
//! ([`fcn`]), the landmark-driven spatial transformer ([`stn`]), the frozen
//! feature network ([`featnet`]), the losses ([`losses`]), a synthetic
//! face/mesh dataset generator ([`facegen`]), the verification protocol
//! ([`verifier`]) and the training driver ([`trainer`]).

pub mod checkpoint;
pub mod fcn;
pub mod featnet;
pub mod error;
pub mod facegen;
pub mod gradcheck;
pub mod losses;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod selfcheck;
pub mod stn;
pub mod tensor;
pub mod trainer;
pub mod verifier;

pub use error::{DemeshError, Result};
pub use tensor::Tensor;
