//! Adaptive passage encoding: a learned, budgeted scheduler that decides
//! which retrieved passage receives the next encoder layer, on top of a
//! frozen transformer encoder and an answerability head.

pub mod answerability;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod policy_training;
pub mod scheduler;

pub use error::{ApeError, Result};
