//! Autoregressive chunk generation with diffusion correction, plus the VP-SDE
//! numerics and toy experiments around it.

pub mod arm;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod memory;
pub mod pipeline;
pub mod score;
pub mod sde;
pub mod tokenizer;
pub mod seed;
pub mod theory;
pub mod vecops;

pub use error::{Error, Result};
