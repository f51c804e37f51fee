//! Graybox modeling and control of a reconfigurable coupled-waveguide chip.
//!
//! A GRU blackbox maps electrode voltages to the interaction Hamiltonian,
//! fixed physics layers evolve and measure the light, and a second recurrent
//! network inverts the frozen model to synthesize voltage schedules.

pub mod assets;
pub mod autodiff;
pub mod controller;
pub mod dataset;
pub mod error;
pub mod graybox;
pub mod linalg;
pub mod metrics;
pub mod simulator;

pub use error::{Error, Result};
