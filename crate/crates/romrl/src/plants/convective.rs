//! 1-D advection-diffusion plant with a localized growth pocket between
//! the actuator and the performance sensor: disturbances entering at the
//! upstream noise source are amplified while advecting downstream and
//! leave through the outflow boundary, so the plant is globally stable
//! but convectively amplifying.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plants::{forcing_vector, ForcingShape, Plant, PlantState};
use crate::romcore::rk4_step;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvectivePlantConfig {
    /// Interior grid points (Dirichlet zero outside).
    pub n: usize,
    /// Domain length.
    pub length: f64,
    /// Advection speed.
    pub advection: f64,
    /// Diffusion coefficient.
    pub gamma: f64,
    /// Growth pocket `mu(x) = mu_amp * exp(-((x - mu_center)/mu_width)^2)`.
    pub mu_amp: f64,
    pub mu_center: f64,
    pub mu_width: f64,
    pub noise_shape: ForcingShape,
    pub actuator_shape: ForcingShape,
    /// Feedback sensor position (upstream of the pocket).
    pub x_fb: f64,
    /// Performance sensor position (downstream of the pocket).
    pub x_p: f64,
    pub dt: f64,
}

impl Default for ConvectivePlantConfig {
    fn default() -> Self {
        ConvectivePlantConfig {
            n: 220,
            length: 100.0,
            advection: 1.0,
            gamma: 0.2,
            mu_amp: 0.35,
            mu_center: 55.0,
            mu_width: 10.0,
            noise_shape: ForcingShape {
                amplitude: 1.0,
                x0: 10.0,
                y0: 0.0,
                sigma_x: 1.5,
                sigma_y: 1.0,
            },
            actuator_shape: ForcingShape {
                amplitude: 1.0,
                x0: 30.0,
                y0: 0.0,
                sigma_x: 1.5,
                sigma_y: 1.0,
            },
            x_fb: 40.0,
            x_p: 80.0,
            dt: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvectivePlant {
    pub cfg: ConvectivePlantConfig,
    pub xs: Vec<f64>,
    /// Linear operator of the discretized dynamics.
    pub a: DMatrix<f64>,
    pub b_w: DVector<f64>,
    pub b_a: DVector<f64>,
    pub idx_fb: usize,
    pub idx_p: usize,
}

fn nearest(xs: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (i, &xi) in xs.iter().enumerate() {
        if (xi - x).abs() < (xs[best] - x).abs() {
            best = i;
        }
    }
    best
}

impl ConvectivePlant {
    pub fn new(cfg: ConvectivePlantConfig) -> Result<Self> {
        if cfg.n < 7 {
            return Err(Error::config("convective plant needs at least 7 grid points"));
        }
        if cfg.dt <= 0.0 || cfg.gamma < 0.0 {
            return Err(Error::config("dt must be positive and gamma non-negative"));
        }
        if !(cfg.x_fb > 0.0 && cfg.x_fb < cfg.length && cfg.x_p > 0.0 && cfg.x_p < cfg.length) {
            return Err(Error::config("sensor positions must lie inside the grid"));
        }
        let dx = cfg.length / (cfg.n + 1) as f64;
        let xs: Vec<f64> = (0..cfg.n).map(|i| (i + 1) as f64 * dx).collect();
        // second-order central stencils, Dirichlet zero at both ends
        let adv = cfg.advection / (2.0 * dx);
        let dif = cfg.gamma / (dx * dx);
        let mut a = DMatrix::zeros(cfg.n, cfg.n);
        for i in 0..cfg.n {
            let x = xs[i];
            let mu = cfg.mu_amp * (-((x - cfg.mu_center) / cfg.mu_width).powi(2)).exp();
            a[(i, i)] = mu - 2.0 * dif;
            if i > 0 {
                a[(i, i - 1)] = adv + dif;
            }
            if i + 1 < cfg.n {
                a[(i, i + 1)] = -adv + dif;
            }
        }
        let b_w = forcing_vector(&cfg.noise_shape, &xs, &[0.0])?;
        let b_a = forcing_vector(&cfg.actuator_shape, &xs, &[0.0])?;
        let idx_fb = nearest(&xs, cfg.x_fb);
        let idx_p = nearest(&xs, cfg.x_p);
        Ok(ConvectivePlant {
            cfg,
            xs,
            a,
            b_w,
            b_a,
            idx_fb,
            idx_p,
        })
    }

    pub fn dim(&self) -> usize {
        self.cfg.n
    }

    pub fn zero_state(&self) -> PlantState {
        PlantState {
            q: DVector::zeros(self.dim()),
            t: 0.0,
        }
    }

    /// One RK4 step with the action and noise held over the step.
    pub fn step(&self, state: &PlantState, action: f64, noise: f64) -> Result<PlantState> {
        if !action.is_finite() || !noise.is_finite() {
            return Err(Error::config("non-finite plant inputs"));
        }
        let rhs = |q: &DVector<f64>, _t: f64| {
            let mut d = &self.a * q;
            d.axpy(action, &self.b_a, 1.0);
            d.axpy(noise, &self.b_w, 1.0);
            d
        };
        let q = rk4_step(rhs, &state.q, state.t, self.cfg.dt)?;
        Ok(PlantState {
            q,
            t: state.t + self.cfg.dt,
        })
    }

    pub fn sensor_names(&self) -> Vec<String> {
        vec!["y_fb".into(), "z_p".into()]
    }

    /// All sensor readings: feedback sensor first, performance sensor last.
    pub fn sensors(&self, state: &PlantState) -> Vec<f64> {
        vec![state.q[self.idx_fb], state.q[self.idx_p]]
    }

    /// Feedback inputs seen by the controller.
    pub fn feedback(&self, state: &PlantState) -> Vec<f64> {
        vec![state.q[self.idx_fb]]
    }
}

impl Plant for ConvectivePlant {
    fn dt(&self) -> f64 {
        self.cfg.dt
    }

    fn initial_state(&self) -> PlantState {
        self.zero_state()
    }

    fn step(&self, state: &PlantState, action: f64, noise: f64) -> Result<PlantState> {
        ConvectivePlant::step(self, state, action, noise)
    }

    fn snapshot(&self, state: &PlantState) -> DVector<f64> {
        state.q.clone()
    }

    fn snapshot_dim(&self) -> usize {
        self.dim()
    }

    fn sensor_names(&self) -> Vec<String> {
        ConvectivePlant::sensor_names(self)
    }

    fn sensors(&self, state: &PlantState) -> Vec<f64> {
        ConvectivePlant::sensors(self, state)
    }

    fn feedback(&self, state: &PlantState) -> Vec<f64> {
        ConvectivePlant::feedback(self, state)
    }

    fn feedback_rows(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(1, self.dim());
        c[(0, self.idx_fb)] = 1.0;
        c
    }

    fn performance_rows(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(1, self.dim());
        c[(0, self.idx_p)] = 1.0;
        c
    }

    fn performance_names(&self) -> Vec<String> {
        vec!["z_p".into()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImpulseChannel {
    Noise,
    Actuator,
}

/// Discrete unit-impulse response: the input is 1 over the first step and
/// 0 afterwards; `h[k]` is the sensor block at step `k` (so `h[0]` is the
/// direct feedthrough, zero for this plant).
pub fn impulse_response(
    plant: &ConvectivePlant,
    channel: ImpulseChannel,
    horizon: usize,
) -> Result<Vec<DMatrix<f64>>> {
    if horizon < 1 {
        return Err(Error::config("impulse horizon must be at least 1"));
    }
    let mut h = Vec::with_capacity(horizon);
    let mut state = plant.zero_state();
    for k in 0..horizon {
        let y = plant.sensors(&state);
        h.push(DMatrix::from_column_slice(y.len(), 1, &y));
        if k + 1 == horizon {
            break;
        }
        let u = if k == 0 { 1.0 } else { 0.0 };
        state = match channel {
            ImpulseChannel::Noise => plant.step(&state, 0.0, u)?,
            ImpulseChannel::Actuator => plant.step(&state, u, 0.0)?,
        };
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plant() -> ConvectivePlant {
        ConvectivePlant::new(ConvectivePlantConfig::default()).unwrap()
    }

    #[test]
    fn zero_state_zero_inputs_stay_at_equilibrium() {
        let p = plant();
        let s = p.step(&p.zero_state(), 0.0, 0.0).unwrap();
        assert_eq!(s.q, DVector::zeros(p.dim()));
        assert!((s.t - p.cfg.dt).abs() < 1e-15);
    }

    #[test]
    fn scalar_decay_mode_matches_rk4_polynomial() {
        // mu = -1 constant, no transport, one interior point
        let mut cfg = ConvectivePlantConfig {
            n: 7,
            advection: 0.0,
            gamma: 0.0,
            mu_amp: -1.0,
            mu_width: 1e12, // flat profile
            dt: 0.1,
            ..Default::default()
        };
        // keep forcing and sensors inside the coarse 7-point grid
        cfg.noise_shape.x0 = 25.0;
        cfg.actuator_shape.x0 = 37.5;
        cfg.x_fb = 50.0;
        cfg.x_p = 75.0;
        let p = ConvectivePlant::new(cfg).unwrap();
        let mut s = p.zero_state();
        s.q.fill(1.0);
        let s1 = p.step(&s, 0.0, 0.0).unwrap();
        for &v in s1.q.iter() {
            assert!((v - 0.9048375).abs() < 1e-10, "value {v}");
        }
    }

    #[test]
    fn plant_is_linear_in_the_inputs() {
        let p = plant();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q0 = DVector::from_fn(p.dim(), |_, _| rng.gen::<f64>() - 0.5);
        let run = |scale_a: f64, scale_w: f64, q0: &DVector<f64>| -> DVector<f64> {
            let mut s = PlantState { q: q0.clone(), t: 0.0 };
            for k in 0..50 {
                let a = scale_a * ((k as f64) * 0.3).sin();
                let w = scale_w * ((k as f64) * 0.41).cos();
                s = p.step(&s, a, w).unwrap();
            }
            s.q
        };
        let free = run(0.0, 0.0, &q0);
        let resp_a = run(1.0, 0.0, &q0) - &free;
        let resp_w = run(0.0, 1.0, &DVector::zeros(p.dim()));
        let explicit = run(2.0, 3.0, &q0);
        let superposed = &free + resp_a * 2.0 + resp_w * 3.0;
        let rel = (&explicit - &superposed).norm() / explicit.norm();
        assert!(rel < 1e-10, "rel {rel}");
    }

    #[test]
    fn uncontrolled_plant_is_globally_stable() {
        // random initial state decays below 1e-6 of its norm by t = 400
        let p = plant();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q0 = DVector::from_fn(p.dim(), |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let norm0 = q0.norm();
        let mut s = PlantState { q: q0, t: 0.0 };
        for _ in 0..2000 {
            s = p.step(&s, 0.0, 0.0).unwrap();
        }
        assert!(s.q.norm() < 1e-6 * norm0, "residual {}", s.q.norm() / norm0);
    }

    #[test]
    fn impulse_amplifies_between_feedback_and_performance_sensors() {
        let p = plant();
        let h = impulse_response(&p, ImpulseChannel::Actuator, 2500).unwrap();
        assert_eq!(h[0], DMatrix::zeros(2, 1));
        let peak_fb = h.iter().map(|b| b[(0, 0)].abs()).fold(0.0, f64::max);
        let peak_p = h.iter().map(|b| b[(1, 0)].abs()).fold(0.0, f64::max);
        assert!(
            peak_p > 10.0 * peak_fb,
            "no convective amplification: fb {peak_fb}, perf {peak_p}"
        );
        // decays below 1e-8 of peak within the horizon
        let tail = h.last().unwrap()[(1, 0)].abs();
        assert!(tail < 1e-8 * peak_p);
    }

    #[test]
    fn doubling_the_impulse_doubles_the_response() {
        let p = plant();
        let s1 = p.step(&p.zero_state(), 2.0, 0.0).unwrap();
        let s2 = p.step(&p.zero_state(), 1.0, 0.0).unwrap();
        assert!((s1.q - &s2.q * 2.0).norm() < 1e-12);
    }
}
