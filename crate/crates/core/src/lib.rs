//! Continuous-time smoothed sign descent on quadratically parameterized
//! (diagonal linear network) regression.
//!
//! The crate integrates the weight flow `dw/dt = -∇L / (|∇L| + ε)` for the
//! loss `L(w) = ¼‖X(w⁺⊙w⁺ − w⁻⊙w⁻) − y‖²`, maps the trajectory into the dual
//! space through the time-varying potential `Φ_t`, locates the warm-up and
//! sign-descent stage transitions, and measures how far the limit point is
//! from a KKT point of the constrained problem `min E(β, β₀) s.t. Xβ = y`.
//!
//! Everything here is `no_std` + `alloc`; file formats, the CLI and the worker
//! pool live in the `signflow-cli` crate.

#![cfg_attr(not(test), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod mirror;
pub mod ode;
pub mod problem;
pub mod rng;

pub use error::{Error, Result};
