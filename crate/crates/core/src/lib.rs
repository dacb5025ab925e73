//! Simulated data-mixture ablations through modular training and
//! parameter averaging.
//!
//! One small model is trained per base unit of a corpus and cached. Any
//! candidate mixture of units is then scored by evaluating parameter
//! averages of the cached component models instead of training a new model
//! on the mixture.

pub mod corpus;
pub mod decontam;
pub mod error;
pub mod lm;
pub mod merge;
pub mod optim;
pub mod par;
pub mod registry;
pub mod study;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
