//! Bit-exact reference model of a binarized Transformer encoder, a
//! cycle-level simulator of its streaming accelerator, and the joint
//! algorithm/hardware design-space exploration that ties them together.

pub mod bitengine;
pub mod checkpoint;
pub mod config;
pub mod dse;
pub mod error;
pub mod f16;
pub mod formats;
pub mod quantize;
pub mod refmodel;
pub mod rng;
pub mod simulator;
pub mod tensor;
pub mod wtws;

pub use error::{Error, Result};
pub use f16::{f16_round, F16};
pub use rng::Rng;
pub use tensor::{BinWeight, QTensor, SignMatrix, Signedness};
