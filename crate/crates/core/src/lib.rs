//! Simulation and analysis of a dual-spin NV rotation sensor.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod control;
pub mod environment;
pub mod estimation;
pub mod protocol;
pub mod spinmodel;
