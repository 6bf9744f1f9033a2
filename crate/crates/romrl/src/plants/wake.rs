//! Mean-field wake oscillator with a drag proxy, embedded into a 2-D
//! synthetic velocity field so POD bases and sparse sensor grids are
//! meaningful.
//!
//! Dynamic state (x1, x2, x3): a self-excited oscillator pair saturated by
//! the shift mode x3, which tracks the squared amplitude.  Uncontrolled,
//! the state converges to a limit cycle of amplitude sqrt(mu_w) with
//! x3 -> mu_w; suppressing the oscillation lowers x3 and with it the drag
//! proxy c_d = c0 + c1 x3 + c2 x1.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plants::{Plant, PlantState};
use crate::reduction::SparseMeasurement;
use crate::romcore::rk4_step;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WakePlantConfig {
    /// Linear growth rate of the oscillator pair.
    pub mu_w: f64,
    /// Shedding angular frequency.
    pub omega_w: f64,
    /// Relaxation rate of the shift mode.
    pub lambda_w: f64,
    /// Actuator coupling into (x1, x2, x3).
    pub g: [f64; 3],
    /// Noise coupling into (x1, x2, x3).
    pub g_w: [f64; 3],
    /// Drag proxy coefficients: c_d = c0 + c1 x3 + c2 x1.
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// Spatial wavenumber and cross-stream width of the embedding modes.
    pub k_wave: f64,
    pub mode_width: f64,
    pub dt: f64,
}

impl Default for WakePlantConfig {
    fn default() -> Self {
        WakePlantConfig {
            mu_w: 0.2,
            omega_w: 1.0,
            lambda_w: 1.0,
            g: [1.0, 0.0, 0.0],
            g_w: [0.0, 1.0, 0.0],
            c0: 1.0,
            c1: 2.0,
            c2: 0.05,
            k_wave: 2.0 * std::f64::consts::PI,
            mode_width: 0.6,
            dt: 0.05,
        }
    }
}

/// Sensor grid layout: 10 streamwise x 5 cross-stream stations.
pub const WAKE_NX: usize = 10;
pub const WAKE_NY: usize = 5;
pub const WAKE_X0: f64 = 0.45;
pub const WAKE_DX: f64 = 0.228;
pub const WAKE_Y0: f64 = -0.75;
pub const WAKE_DY: f64 = 0.375;

#[derive(Debug, Clone)]
pub struct WakePlant {
    pub cfg: WakePlantConfig,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Embedding: field = mean + x1 phi1 + x2 phi2 + x3 phi3, flattened
    /// in the `ix * ny + iy` layout.
    mean: DVector<f64>,
    phi1: DVector<f64>,
    phi2: DVector<f64>,
    phi3: DVector<f64>,
}

/// Grid indices of the labeled sensors (ix, iy).
const U1: (usize, usize) = (2, 4);
const U2: (usize, usize) = (2, 0);
const U3: (usize, usize) = (4, 4);
const U4: (usize, usize) = (4, 0);
const UP1: (usize, usize) = (9, 4);
const UP2: (usize, usize) = (9, 0);

fn flat(ix: usize, iy: usize) -> usize {
    ix * WAKE_NY + iy
}

impl WakePlant {
    pub fn new(cfg: WakePlantConfig) -> Result<Self> {
        if cfg.dt <= 0.0 || cfg.mu_w <= 0.0 || cfg.lambda_w <= 0.0 {
            return Err(Error::config(
                "wake plant needs positive dt, mu_w, lambda_w",
            ));
        }
        let xs: Vec<f64> = (0..WAKE_NX).map(|i| WAKE_X0 + WAKE_DX * i as f64).collect();
        let ys: Vec<f64> = (0..WAKE_NY).map(|j| WAKE_Y0 + WAKE_DY * j as f64).collect();
        let n = WAKE_NX * WAKE_NY;
        let w2 = cfg.mode_width * cfg.mode_width;
        let mut mean = DVector::zeros(n);
        let mut phi1 = DVector::zeros(n);
        let mut phi2 = DVector::zeros(n);
        let mut phi3 = DVector::zeros(n);
        for (ix, &x) in xs.iter().enumerate() {
            for (iy, &y) in ys.iter().enumerate() {
                let i = flat(ix, iy);
                let env = (-y * y / w2).exp();
                // antisymmetric traveling-wave pair
                phi1[i] = (cfg.k_wave * x).sin() * y * env;
                phi2[i] = (cfg.k_wave * x).cos() * y * env;
                // symmetric shift mode and base flow
                phi3[i] = (0.5 * cfg.k_wave * x).cos() * env;
                mean[i] = 1.0 - 0.5 * (-((x - 0.5) / 0.6).powi(2)).exp() * (-y * y).exp();
            }
        }
        Ok(WakePlant {
            cfg,
            xs,
            ys,
            mean,
            phi1,
            phi2,
            phi3,
        })
    }

    /// Dynamic (oscillator) state dimension.
    pub fn dim(&self) -> usize {
        3
    }

    /// Embedded field dimension.
    pub fn embed_dim(&self) -> usize {
        WAKE_NX * WAKE_NY
    }

    /// Small symmetric perturbation off the fixed point.
    pub fn default_initial_state(&self) -> PlantState {
        PlantState {
            q: DVector::from_vec(vec![0.1, 0.0, 0.0]),
            t: 0.0,
        }
    }

    fn rhs(&self, q: &DVector<f64>, action: f64, noise: f64) -> DVector<f64> {
        let (x1, x2, x3) = (q[0], q[1], q[2]);
        let growth = self.cfg.mu_w - x3;
        DVector::from_vec(vec![
            growth * x1 - self.cfg.omega_w * x2
                + self.cfg.g[0] * action
                + self.cfg.g_w[0] * noise,
            self.cfg.omega_w * x1 + growth * x2
                + self.cfg.g[1] * action
                + self.cfg.g_w[1] * noise,
            -self.cfg.lambda_w * (x3 - (x1 * x1 + x2 * x2))
                + self.cfg.g[2] * action
                + self.cfg.g_w[2] * noise,
        ])
    }

    pub fn step(&self, state: &PlantState, action: f64, noise: f64) -> Result<PlantState> {
        if !action.is_finite() || !noise.is_finite() {
            return Err(Error::config("non-finite plant inputs"));
        }
        let q = rk4_step(
            |q, _| self.rhs(q, action, noise),
            &state.q,
            state.t,
            self.cfg.dt,
        )?;
        Ok(PlantState {
            q,
            t: state.t + self.cfg.dt,
        })
    }

    /// Field embedding of the oscillator state on the sensor grid.
    pub fn embed(&self, state: &PlantState) -> DVector<f64> {
        &self.mean
            + &self.phi1 * state.q[0]
            + &self.phi2 * state.q[1]
            + &self.phi3 * state.q[2]
    }

    pub fn drag(&self, state: &PlantState) -> f64 {
        self.cfg.c0 + self.cfg.c1 * state.q[2] + self.cfg.c2 * state.q[0]
    }

    pub fn sensor_names(&self) -> Vec<String> {
        vec![
            "u1".into(),
            "u2".into(),
            "u3".into(),
            "u4".into(),
            "u_p1".into(),
            "u_p2".into(),
            "c_d".into(),
        ]
    }

    pub fn sensors(&self, state: &PlantState) -> Vec<f64> {
        let f = self.embed(state);
        vec![
            f[flat(U1.0, U1.1)],
            f[flat(U2.0, U2.1)],
            f[flat(U3.0, U3.1)],
            f[flat(U4.0, U4.1)],
            f[flat(UP1.0, UP1.1)],
            f[flat(UP2.0, UP2.1)],
            self.drag(state),
        ]
    }

    /// Antisymmetric feedback signals (u1 - u2, u3 - u4).
    pub fn feedback(&self, state: &PlantState) -> Vec<f64> {
        let s = self.sensors(state);
        vec![s[0] - s[1], s[2] - s[3]]
    }

    /// The 47-sensor layout: the full 10x5 station grid minus the three
    /// points nearest the body (smallest x, y nearest the centerline).
    pub fn sensor_layout_47(&self) -> SparseMeasurement {
        let excluded = [flat(0, 1), flat(0, 2), flat(0, 3)];
        let mut indices = Vec::with_capacity(47);
        let mut labels = Vec::with_capacity(47);
        for ix in 0..WAKE_NX {
            for iy in 0..WAKE_NY {
                let i = flat(ix, iy);
                if excluded.contains(&i) {
                    continue;
                }
                indices.push(i);
                labels.push(format!("s{ix}_{iy}"));
            }
        }
        SparseMeasurement::selection(&indices, labels, self.embed_dim()).unwrap()
    }
}

impl Plant for WakePlant {
    fn dt(&self) -> f64 {
        self.cfg.dt
    }

    fn initial_state(&self) -> PlantState {
        self.default_initial_state()
    }

    fn step(&self, state: &PlantState, action: f64, noise: f64) -> Result<PlantState> {
        WakePlant::step(self, state, action, noise)
    }

    fn snapshot(&self, state: &PlantState) -> DVector<f64> {
        self.embed(state)
    }

    fn snapshot_dim(&self) -> usize {
        self.embed_dim()
    }

    fn sensor_names(&self) -> Vec<String> {
        WakePlant::sensor_names(self)
    }

    fn sensors(&self, state: &PlantState) -> Vec<f64> {
        WakePlant::sensors(self, state)
    }

    fn feedback(&self, state: &PlantState) -> Vec<f64> {
        WakePlant::feedback(self, state)
    }

    fn feedback_rows(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(2, self.embed_dim());
        c[(0, flat(U1.0, U1.1))] = 1.0;
        c[(0, flat(U2.0, U2.1))] = -1.0;
        c[(1, flat(U3.0, U3.1))] = 1.0;
        c[(1, flat(U4.0, U4.1))] = -1.0;
        c
    }

    fn performance_rows(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(2, self.embed_dim());
        c[(0, flat(UP1.0, UP1.1))] = 1.0;
        c[(1, flat(UP2.0, UP2.1))] = 1.0;
        c
    }

    fn performance_offset(&self) -> DVector<f64> {
        DVector::from_vec(vec![
            self.mean[flat(UP1.0, UP1.1)],
            self.mean[flat(UP2.0, UP2.1)],
        ])
    }

    fn performance_names(&self) -> Vec<String> {
        vec!["u_p1".into(), "u_p2".into()]
    }

    fn drag_sensor(&self) -> Option<&'static str> {
        Some("c_d")
    }
}
