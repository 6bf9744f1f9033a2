//! Synthetic full-order environments standing in for the CFD cases: a
//! convectively amplifying 1-D plant and a nonlinear wake oscillator with
//! a drag proxy, plus the shared episode runner.

mod convective;
mod episode;
mod wake;

pub use convective::{impulse_response, ConvectivePlant, ConvectivePlantConfig, ImpulseChannel};
pub use episode::{run_episode, EpisodeRecord, NoiseSpec, PlantModel, Schedule};
pub use wake::{WakePlant, WakePlantConfig};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full-order plant state at a point in time.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub q: DVector<f64>,
    pub t: f64,
}

/// A steppable full-order environment whose feedback and performance
/// sensors are linear readouts of its snapshot vector.
pub trait Plant {
    fn dt(&self) -> f64;
    fn initial_state(&self) -> PlantState;
    fn step(&self, state: &PlantState, action: f64, noise: f64) -> Result<PlantState>;
    /// Full-order observation used for ROM construction.
    fn snapshot(&self, state: &PlantState) -> DVector<f64>;
    fn snapshot_dim(&self) -> usize;
    fn sensor_names(&self) -> Vec<String>;
    fn sensors(&self, state: &PlantState) -> Vec<f64>;
    /// Signals seen by the feedback controller.
    fn feedback(&self, state: &PlantState) -> Vec<f64>;
    /// Rows over the snapshot realizing the feedback readouts.
    fn feedback_rows(&self) -> DMatrix<f64>;
    /// Rows over the snapshot realizing the performance readouts.
    fn performance_rows(&self) -> DMatrix<f64>;
    /// Steady offset subtracted from the performance readouts so the cost
    /// acts on fluctuations.
    fn performance_offset(&self) -> DVector<f64> {
        DVector::zeros(self.performance_rows().nrows())
    }
    /// Names of the performance sensors within [`Plant::sensor_names`].
    fn performance_names(&self) -> Vec<String>;
    /// Name of the drag sensor column, when the plant has one.
    fn drag_sensor(&self) -> Option<&'static str> {
        None
    }
}

/// Gaussian forcing envelope `A exp(-(x-x0)^2/sx^2 - (y-y0)^2/sy^2)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ForcingShape {
    pub amplitude: f64,
    pub x0: f64,
    pub y0: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

/// Discretize the forcing envelope on a rectangular grid (flattened in
/// the `ix * ny + iy` layout; pass a single-entry `ys` for 1-D plants).
pub fn forcing_vector(shape: &ForcingShape, xs: &[f64], ys: &[f64]) -> Result<DVector<f64>> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::config("forcing grid is empty"));
    }
    if shape.sigma_x <= 0.0 || shape.sigma_y <= 0.0 {
        return Err(Error::config("forcing widths must be positive"));
    }
    let (xlo, xhi) = (xs[0], xs[xs.len() - 1]);
    let (ylo, yhi) = (ys[0], ys[ys.len() - 1]);
    if shape.x0 < xlo || shape.x0 > xhi || (ys.len() > 1 && (shape.y0 < ylo || shape.y0 > yhi)) {
        return Err(Error::config(format!(
            "forcing center ({}, {}) outside grid [{xlo}, {xhi}] x [{ylo}, {yhi}]",
            shape.x0, shape.y0
        )));
    }
    let ny = ys.len();
    let mut out = DVector::zeros(xs.len() * ny);
    for (ix, &x) in xs.iter().enumerate() {
        let gx = ((x - shape.x0) / shape.sigma_x).powi(2);
        for (iy, &y) in ys.iter().enumerate() {
            let gy = if ny > 1 {
                ((y - shape.y0) / shape.sigma_y).powi(2)
            } else {
                0.0
            };
            out[ix * ny + iy] = shape.amplitude * (-gx - gy).exp();
        }
    }
    Ok(out)
}
