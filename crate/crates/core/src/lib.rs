//! Models, controller synthesis, digital feedback-chain emulation and
//! stochastic simulation for all-electrical 3D feedback cooling of an
//! optically levitated nanoparticle.
//!
//! The crate is `no_std` and only needs `alloc`. Spectral estimation from
//! raw traces, file formats and the command-line front end live in the
//! companion `levcool` crate.
//!
//! Units are strict SI throughout: angular frequencies in rad/s, pressures
//! in Pa, masses in kg. Conversions from lab units happen at the I/O
//! boundary only.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod calib;
pub mod constants;
pub mod dsp;
pub mod error;
pub mod linalg;
pub mod model;
pub mod riccati;
pub mod sim;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
