//! NODE-corrected reduced-order model: right-hand side assembly, fixed-step
//! RK4 simulation, trajectory loss, and a reverse-mode gradient engine
//! through the discrete integrator.

mod adam;
mod mlp;
mod sim;
mod train;

pub use adam::{adam_update, AdamState};
pub use mlp::{Activation, Mlp, MlpCache, MlpGrad, OutputMap};
pub use sim::{
    backward_closed_loop, backward_open_loop, simulate_closed_loop, simulate_open_loop,
    ClosedLoopGrads, ClosedLoopTape, OpenLoopGrads, OpenLoopTape, Readout,
};
pub use train::{train_residual, TrainDataset, TrainMode, TrainReport};

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sysid::LinearRom;

/// A reduced-coordinate trajectory on a uniform (or episode-supplied) grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReducedTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl ReducedTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Linear interpolation at `t`; clamps outside the range.
    pub fn interp(&self, t: f64) -> DVector<f64> {
        interp_states(&self.times, &self.states, t)
    }
}

pub(crate) fn interp_states(times: &[f64], states: &[DVector<f64>], t: f64) -> DVector<f64> {
    let n = times.len();
    if t <= times[0] {
        return states[0].clone();
    }
    if t >= times[n - 1] {
        return states[n - 1].clone();
    }
    let idx = match times.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
        Ok(i) => return states[i].clone(),
        Err(i) => i,
    };
    let (t0, t1) = (times[idx - 1], times[idx]);
    let w = (t - t0) / (t1 - t0);
    &states[idx - 1] * (1.0 - w) + &states[idx] * w
}

/// Recorded control samples, interpolated piecewise-linearly when queried
/// between samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl ActionSeries {
    pub fn interp(&self, t: f64) -> f64 {
        let n = self.times.len();
        if n == 0 {
            return 0.0;
        }
        if t <= self.times[0] {
            return self.values[0];
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1];
        }
        let idx = match self
            .times
            .binary_search_by(|x| x.partial_cmp(&t).unwrap())
        {
            Ok(i) => return self.values[i],
            Err(i) => i,
        };
        let (t0, t1) = (self.times[idx - 1], self.times[idx]);
        let w = (t - t0) / (t1 - t0);
        self.values[idx - 1] * (1.0 - w) + self.values[idx] * w
    }

    pub fn covers(&self, t0: f64, t1: f64) -> bool {
        !self.times.is_empty()
            && self.times[0] <= t0 + 1e-9
            && self.times[self.times.len() - 1] >= t1 - 1e-9
    }
}

/// Trainable continuous-time residual `F_omega(q_r, a)`, a fully connected
/// network whose output is bounded componentwise by the scaling
/// coefficient `k` through `k * tanh(.)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualNet {
    pub net: Mlp,
}

pub const RESIDUAL_HIDDEN: [usize; 3] = [128, 128, 128];
pub const RESIDUAL_SCALE_DEFAULT: f64 = 3e-4;

impl ResidualNet {
    /// Default architecture: three hidden layers of 128 rectified-linear
    /// units, final layer zero-initialized so the initial ROM is exactly
    /// the linear model.
    pub fn new<R: Rng>(r: usize, k: f64, rng: &mut R) -> Self {
        Self::with_hidden(r, &RESIDUAL_HIDDEN, k, rng)
    }

    pub fn with_hidden<R: Rng>(r: usize, hidden: &[usize], k: f64, rng: &mut R) -> Self {
        let mut sizes = vec![r + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(r);
        let mut net = Mlp::new(&sizes, Activation::Relu, OutputMap::ScaledTanh(k), rng);
        net.zero_last_layer();
        ResidualNet { net }
    }

    pub fn state_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn eval(&self, q: &DVector<f64>, a: f64) -> DVector<f64> {
        self.net.forward(&stack_input(q, a))
    }
}

pub(crate) fn stack_input(q: &DVector<f64>, a: f64) -> DVector<f64> {
    let mut x = DVector::zeros(q.len() + 1);
    x.rows_mut(0, q.len()).copy_from(q);
    x[q.len()] = a;
    x
}

/// The NODE-corrected ROM: linear operators plus an optional residual
/// network, integrated at a fixed step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeRom {
    pub linear: LinearRom,
    pub residual: Option<ResidualNet>,
    pub dt: f64,
}

impl NodeRom {
    pub fn linear_only(linear: LinearRom, dt: f64) -> Self {
        NodeRom {
            linear,
            residual: None,
            dt,
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.dim()
    }

    /// `dq/dt = A q + B a (+ F(q, a))`.
    pub fn rhs(&self, q: &DVector<f64>, a: f64) -> DVector<f64> {
        let mut d = &self.linear.a * q;
        d.axpy(a, &self.linear.b, 1.0);
        if let Some(res) = &self.residual {
            d += res.eval(q, a);
        }
        d
    }
}

/// One standard four-stage explicit RK4 update.
pub fn rk4_step<F>(rhs: F, q: &DVector<f64>, t: f64, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>, f64) -> DVector<f64>,
{
    if dt <= 0.0 {
        return Err(Error::config("rk4 step size must be positive"));
    }
    let k1 = rhs(q, t);
    let k2 = rhs(&(q + (dt / 2.0) * &k1), t + dt / 2.0);
    let k3 = rhs(&(q + (dt / 2.0) * &k2), t + dt / 2.0);
    let k4 = rhs(&(q + dt * &k3), t + dt);
    for (i, k) in [&k1, &k2, &k3, &k4].iter().enumerate() {
        if !k.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                time: t,
                context: format!("non-finite RK4 stage {}", i + 1),
            });
        }
    }
    let next = q + (dt / 6.0) * (&k1 + 2.0 * &k2 + 2.0 * &k3 + &k4);
    if !next.iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence {
            time: t,
            context: "non-finite RK4 update".into(),
        });
    }
    Ok(next)
}

/// Time-integrated squared error between two trajectories by trapezoidal
/// quadrature on the predicted grid.  The reference is resampled by linear
/// interpolation.
pub fn rom_loss(predicted: &ReducedTrajectory, reference: &ReducedTrajectory) -> Result<f64> {
    Ok(rom_loss_with_grad(predicted, reference)?.0)
}

/// Loss plus its gradient with respect to each predicted sample.
pub fn rom_loss_with_grad(
    predicted: &ReducedTrajectory,
    reference: &ReducedTrajectory,
) -> Result<(f64, Vec<DVector<f64>>)> {
    if predicted.is_empty() || reference.is_empty() {
        return Err(Error::config("empty trajectory in loss"));
    }
    let (p0, p1) = (predicted.times[0], predicted.times[predicted.len() - 1]);
    let (r0, r1) = (reference.times[0], reference.times[reference.len() - 1]);
    if p1 < r0 || r1 < p0 {
        return Err(Error::config(format!(
            "disjoint time ranges: predicted [{p0}, {p1}] vs reference [{r0}, {r1}]"
        )));
    }
    let n = predicted.len();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(n);
    for k in 0..n {
        let w = trapezoid_weight(&predicted.times, k);
        let refk = reference.interp(predicted.times[k]);
        let err = &predicted.states[k] - refk;
        loss += w * err.norm_squared();
        grads.push(2.0 * w * err);
    }
    Ok((loss, grads))
}

pub(crate) fn trapezoid_weight(times: &[f64], k: usize) -> f64 {
    let n = times.len();
    if n < 2 {
        return 0.0;
    }
    if k == 0 {
        (times[1] - times[0]) / 2.0
    } else if k == n - 1 {
        (times[n - 1] - times[n - 2]) / 2.0
    } else {
        (times[k + 1] - times[k - 1]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn scalar_rom(a: f64, b: f64) -> NodeRom {
        NodeRom::linear_only(
            LinearRom {
                a: DMatrix::from_element(1, 1, a),
                b: DVector::from_element(1, b),
                lambda: 0.0,
                provenance: vec![],
            },
            0.1,
        )
    }

    #[test]
    fn rk4_zero_rhs_is_identity() {
        let q = DVector::from_vec(vec![1.0, -2.0]);
        let next = rk4_step(|_, _| DVector::zeros(2), &q, 0.0, 0.5).unwrap();
        assert_eq!(next, q);
    }

    #[test]
    fn rk4_decay_single_step_value() {
        // dq/dt = -q, q0 = 1, dt = 0.1: stability polynomial
        // 1 - h + h^2/2 - h^3/6 + h^4/24 = 0.9048375.
        let q = DVector::from_element(1, 1.0);
        let next = rk4_step(|q, _| -q.clone(), &q, 0.0, 0.1).unwrap();
        assert!((next[0] - 0.9048375).abs() < 1e-12);
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        let run = |dt: f64| -> f64 {
            let mut q = DVector::from_element(1, 1.0);
            let n = (1.0 / dt).round() as usize;
            for k in 0..n {
                q = rk4_step(|q, _| -q.clone(), &q, k as f64 * dt, dt).unwrap();
            }
            (q[0] - (-1.0f64).exp()).abs()
        };
        let ratio = run(0.05) / run(0.025);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rhs_linear_only_matches_operators() {
        let rom = scalar_rom(-2.0, 3.0);
        let q = DVector::from_element(1, 0.5);
        let d = rom.rhs(&q, 2.0);
        assert!((d[0] - (-2.0 * 0.5 + 3.0 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn residual_output_bounded_by_k() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let k = 3e-4;
        let mut res = ResidualNet::with_hidden(2, &[16, 16], k, &mut rng);
        // un-zero the last layer to get nonzero outputs
        res.net.weights.last_mut().unwrap().fill(10.0);
        let out = res.eval(&DVector::from_vec(vec![1e8, -1e8]), 1e8);
        assert!(out.amax() <= k);
    }

    #[test]
    fn zero_initialized_residual_keeps_dynamics_linear() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut rom = scalar_rom(-1.0, 1.0);
        rom.residual = Some(ResidualNet::with_hidden(1, &[8], 1e-3, &mut rng));
        let q = DVector::from_element(1, 0.7);
        assert!((rom.rhs(&q, 0.3)[0] - (-0.7 + 0.3)).abs() < 1e-15);
    }

    #[test]
    fn loss_zero_for_identical_trajectories() {
        let traj = ReducedTrajectory {
            times: vec![0.0, 0.1, 0.2],
            states: vec![
                DVector::from_element(1, 1.0),
                DVector::from_element(1, 2.0),
                DVector::from_element(1, 3.0),
            ],
        };
        assert_eq!(rom_loss(&traj, &traj).unwrap(), 0.0);
    }

    #[test]
    fn loss_constant_offset_is_c_squared_t() {
        let n = 101;
        let dt = 0.01;
        let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let a = ReducedTrajectory {
            times: times.clone(),
            states: (0..n).map(|_| DVector::from_element(1, 0.0)).collect(),
        };
        let b = ReducedTrajectory {
            times,
            states: (0..n).map(|_| DVector::from_element(1, 3.0)).collect(),
        };
        let loss = rom_loss(&a, &b).unwrap();
        assert!((loss - 9.0 * 1.0).abs() < 1e-12);
        // symmetry
        assert!((rom_loss(&b, &a).unwrap() - loss).abs() < 1e-15);
    }

    #[test]
    fn loss_rejects_disjoint_ranges() {
        let a = ReducedTrajectory {
            times: vec![0.0, 1.0],
            states: vec![DVector::zeros(1), DVector::zeros(1)],
        };
        let b = ReducedTrajectory {
            times: vec![5.0, 6.0],
            states: vec![DVector::zeros(1), DVector::zeros(1)],
        };
        assert!(rom_loss(&a, &b).is_err());
    }

    #[test]
    fn action_series_interpolation_hits_nodes() {
        let s = ActionSeries {
            times: vec![0.0, 1.0, 2.0],
            values: vec![1.0, -1.0, 5.0],
        };
        assert_eq!(s.interp(1.0), -1.0);
        assert!((s.interp(0.5) - 0.0).abs() < 1e-15);
        assert!((s.interp(1.5) - 2.0).abs() < 1e-15);
    }
}
