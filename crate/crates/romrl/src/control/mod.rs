//! Controller parameterizations, bilinear resampling, cost functions,
//! differentiable sensor reads, stabilization penalties, and the
//! pressure-sensor surrogate mapping.

mod bilinear;
mod controller;
mod cost;
mod pressure;
mod repulsion;
mod sensor;

pub use bilinear::bilinear_resample;
pub use controller::{
    controller_eval, Controller, CtrlCache, CtrlRegisters, DiscreteTf, NeuralPolicy,
};
pub use cost::{cost_j1, cost_j1_with_grad, cost_j2, cost_j2_with_grad, cost_total,
    penalty_slope, wake_cost, wake_cost_with_grad, CostSpec, CostWindow};
pub use pressure::{pressure_map_eval, pressure_map_fit, PressureMap, PressureMapConfig,
    PRESSURE_MIN_SAMPLES, PRESSURE_OUTPUTS};
pub use repulsion::{policy_distance, policy_distance_with_grad, repulsive_penalty,
    repulsive_penalty_with_grad, SampleGrid, SAMPLE_GRID_SIDE};
pub use sensor::{gaussian_sensor_read, gaussian_sensor_read_with_grad, optimize_sensor_placement,
    sensor_weight_row, GaussianSensor, PlacementConfig, PlacementOutcome};
