//! Simulation of optical wireless ether networks: ceiling amplifiers that
//! relay light through diffuse floor reflections under a shared feedback loop.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod circuit;
pub mod error;
pub mod ether;
pub mod experiments;
pub mod layout;
pub mod optimizer;
pub mod protocol;
pub mod radiometry;
pub mod report;
pub mod scenario;

pub use error::{OweError, Result};
