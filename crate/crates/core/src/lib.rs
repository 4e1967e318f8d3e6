//! Linear concept directions across training checkpoints.
//!
//! The pipeline collects paired hidden states ([`store`]), builds contrastive
//! stimuli ([`stimulus`]), extracts per-layer concept vectors ([`extract`]),
//! scores them into checkpoint-by-layer ID matrices with emergence cues
//! ([`metrics`]), and applies them as activation additions ([`steer`]).
//! [`toylm`] and [`synthgen`] provide end-to-end testbeds.

// `!(x > 0.0)` is used on purpose so NaN takes the failure branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod extract;
pub mod metrics;
pub mod plot;
pub mod steer;
pub mod stimulus;
pub mod store;
pub mod synthgen;
pub mod toylm;

pub use error::{Error, Result};
