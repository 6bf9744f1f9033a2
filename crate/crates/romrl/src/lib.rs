//! Adaptive reduced-order-model-based reinforcement learning toolkit.
//!
//! The crate identifies linear reduced models from plant data (POD bases or
//! sparse sensing, operator inference, ERA), corrects them with a trainable
//! continuous-time residual network, and optimizes feedback controllers by
//! reverse-mode differentiation through a fixed-step RK4 simulation.  Two
//! built-in synthetic plants (a convectively unstable advection-diffusion
//! channel and a self-excited wake oscillator) stand in for full CFD
//! environments.

pub mod control;
pub mod error;
pub mod io;
mod linalg;
pub mod metrics;
pub mod plants;
pub mod reduction;
pub mod romcore;
pub mod sysid;
pub mod trainer;

pub use error::{Error, Result};
