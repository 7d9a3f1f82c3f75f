//! Std companion to `levcool-core`: file formats, parallel ensembles,
//! calibration pipelines and scenario execution for the `levcool` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod calibration;
pub mod config;
pub mod ensemble;
pub mod io;
pub mod scenario;
pub mod spectral;
pub mod units;
