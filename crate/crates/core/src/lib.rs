//! Frequency dynamics of Kron-reduced power networks with inverter-based
//! primary control.
//!
//! Inverters run one of four modes: constant power, droop, virtual inertia,
//! or iDroop (a first-order dynamic droop driven by frequency and its
//! derivative). The crate builds the closed-loop linear model, computes the
//! synchronous steady state and its optimality, evaluates H2 performance
//! (including the frequency-weighted case where derivative measurements are
//! noisy), certifies decentralized stability, and simulates step and noise
//! responses.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod control;
pub mod document;
pub mod dynamics;
pub mod grid;
pub mod sim;
pub mod sweep;

pub use control::{InverterConfig, InverterMode, NoiseGains};
pub use dynamics::{StateSpaceModel, SteadyState};
pub use grid::{Bus, Line, PowerNetwork};

#[cfg(test)]
mod testing;
