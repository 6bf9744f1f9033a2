//! Open- and closed-loop simulation of the NODE ROM with gradient tapes.
//!
//! The tape stores the primal value of every RK4 stage, every residual
//! network activation, and every controller evaluation; the adjoint pass
//! walks the records in exact reverse order.  The action is interpolated
//! piecewise-linearly in open loop and held over the four stages of a step
//! in closed loop.

use nalgebra::{DMatrix, DVector};

use crate::control::{Controller, CtrlCache};
use crate::error::{Error, Result};
use crate::romcore::{
    stack_input, ActionSeries, MlpCache, MlpGrad, NodeRom, ReducedTrajectory,
};

/// Linear map from the reduced state to controller (or sensor) inputs:
/// `y = C q + offset`.
#[derive(Debug, Clone)]
pub struct Readout {
    pub c: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl Readout {
    pub fn new(c: DMatrix<f64>) -> Self {
        let offset = DVector::zeros(c.nrows());
        Readout { c, offset }
    }

    /// Selection of reduced-state entries (SS-ROM style feedback).
    pub fn selection(indices: &[usize], dim: usize) -> Self {
        let mut c = DMatrix::zeros(indices.len(), dim);
        for (row, &i) in indices.iter().enumerate() {
            c[(row, i)] = 1.0;
        }
        Readout::new(c)
    }

    pub fn apply(&self, q: &DVector<f64>) -> DVector<f64> {
        &self.c * q + &self.offset
    }
}

/// Primal record of one RK4 step: the residual network caches per stage
/// (absent for a linear-only ROM; the linear part's adjoint is
/// state-independent, so nothing else needs recording).
struct StepTape {
    res: Option<[MlpCache; 4]>,
}

pub struct OpenLoopTape {
    steps: Vec<StepTape>,
    /// Stage times, for scattering action adjoints back onto the sample
    /// grid if ever needed; retained for replay checks.
    t0: f64,
    dt: f64,
}

pub struct ClosedLoopTape {
    steps: Vec<StepTape>,
    pub inputs: Vec<DVector<f64>>,
    pub actions: Vec<f64>,
    ctrl: Vec<CtrlCache>,
}

/// Gradients of a scalar loss through an open-loop simulation.
pub struct OpenLoopGrads {
    pub residual: Option<MlpGrad>,
    pub q0: DVector<f64>,
}

/// Gradients of a scalar loss through a closed-loop simulation.
pub struct ClosedLoopGrads {
    pub residual: Option<MlpGrad>,
    /// Flat gradient in the controller's parameter layout.
    pub controller: DVector<f64>,
    pub q0: DVector<f64>,
    /// dL/d(controller inputs) per step; feeds sensor-placement gradients.
    pub input_adjoints: Vec<DVector<f64>>,
}

fn rhs_cached(
    rom: &NodeRom,
    q: &DVector<f64>,
    a: f64,
) -> (DVector<f64>, Option<MlpCache>) {
    let mut d = &rom.linear.a * q;
    d.axpy(a, &rom.linear.b, 1.0);
    match &rom.residual {
        Some(res) => {
            let (out, cache) = res.net.forward_cached(&stack_input(q, a));
            d += out;
            (d, Some(cache))
        }
        None => (d, None),
    }
}

fn check_finite(q: &DVector<f64>, t: f64, context: &str) -> Result<()> {
    if q.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            time: t,
            context: context.to_string(),
        })
    }
}

/// One taped RK4 step; the action per stage is supplied by `action_at`.
fn rk4_step_taped(
    rom: &NodeRom,
    q: &DVector<f64>,
    t: f64,
    action_at: impl Fn(usize, f64) -> f64,
) -> Result<(DVector<f64>, StepTape)> {
    let h = rom.dt;
    let a1 = action_at(0, t);
    let (k1, c1) = rhs_cached(rom, q, a1);
    let a2 = action_at(1, t + h / 2.0);
    let q2 = q + (h / 2.0) * &k1;
    let (k2, c2) = rhs_cached(rom, &q2, a2);
    let a3 = action_at(2, t + h / 2.0);
    let q3 = q + (h / 2.0) * &k2;
    let (k3, c3) = rhs_cached(rom, &q3, a3);
    let a4 = action_at(3, t + h);
    let q4 = q + h * &k3;
    let (k4, c4) = rhs_cached(rom, &q4, a4);
    for (i, k) in [&k1, &k2, &k3, &k4].iter().enumerate() {
        check_finite(k, t, &format!("non-finite RK4 stage {}", i + 1))?;
    }
    let next = q + (h / 6.0) * (&k1 + 2.0 * &k2 + 2.0 * &k3 + &k4);
    check_finite(&next, t, "non-finite RK4 update")?;
    let res = match (c1, c2, c3, c4) {
        (Some(c1), Some(c2), Some(c3), Some(c4)) => Some([c1, c2, c3, c4]),
        _ => None,
    };
    Ok((next, StepTape { res }))
}

/// Adjoint of one RK4 step.  `next_adjoint` is dL/d(q_{k+1}); returns
/// dL/d(q_k) and the per-stage action adjoints, accumulating residual
/// parameter gradients into `res_grad`.
fn rk4_step_backward(
    rom: &NodeRom,
    tape: &StepTape,
    next_adjoint: &DVector<f64>,
    res_grad: Option<&mut MlpGrad>,
) -> (DVector<f64>, [f64; 4]) {
    let h = rom.dt;
    let r = rom.dim();
    let mut res_grad = res_grad;

    // Adjoint of a single rhs evaluation: v -> (A^T v + dF/dq^T v, B^T v + dF/da^T v)
    let mut rhs_vjp = |stage: usize, v: &DVector<f64>| -> (DVector<f64>, f64) {
        let mut qbar = rom.linear.a.tr_mul(v);
        let mut abar = rom.linear.b.dot(v);
        if let Some(res) = &rom.residual {
            let caches = tape.res.as_ref().expect("residual tape missing");
            let grad = res_grad.as_deref_mut().expect("residual grad buffer missing");
            let gin = res.net.backward(&caches[stage], v, grad);
            qbar += gin.rows(0, r);
            abar += gin[r];
        }
        (qbar, abar)
    };

    let mut kbar = [
        (h / 6.0) * next_adjoint,
        (h / 3.0) * next_adjoint,
        (h / 3.0) * next_adjoint,
        (h / 6.0) * next_adjoint,
    ];
    let mut qbar = next_adjoint.clone();
    let mut abar = [0.0; 4];

    // Stage 4: evaluated at q + h k3.
    let (x4, a4) = rhs_vjp(3, &kbar[3]);
    qbar += &x4;
    kbar[2] += h * &x4;
    abar[3] = a4;
    // Stage 3: evaluated at q + h/2 k2.
    let (x3, a3) = rhs_vjp(2, &kbar[2]);
    qbar += &x3;
    kbar[1] += (h / 2.0) * &x3;
    abar[2] = a3;
    // Stage 2: evaluated at q + h/2 k1.
    let (x2, a2) = rhs_vjp(1, &kbar[1]);
    qbar += &x2;
    kbar[0] += (h / 2.0) * &x2;
    abar[1] = a2;
    // Stage 1: evaluated at q.
    let (x1, a1) = rhs_vjp(0, &kbar[0]);
    qbar += &x1;
    abar[0] = a1;

    (qbar, abar)
}

/// Open-loop simulation over `horizon` steps: actions come from the
/// recorded series by piecewise-linear interpolation at the stage times.
pub fn simulate_open_loop(
    rom: &NodeRom,
    q0: &DVector<f64>,
    actions: &ActionSeries,
    t0: f64,
    horizon: usize,
) -> Result<(ReducedTrajectory, OpenLoopTape)> {
    if !actions.covers(t0, t0 + horizon as f64 * rom.dt) {
        return Err(Error::config(
            "action series does not cover the simulation horizon",
        ));
    }
    let mut times = Vec::with_capacity(horizon + 1);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut steps = Vec::with_capacity(horizon);
    let mut q = q0.clone();
    times.push(t0);
    states.push(q.clone());
    for k in 0..horizon {
        let t = t0 + k as f64 * rom.dt;
        let (next, tape) = rk4_step_taped(rom, &q, t, |_, ts| actions.interp(ts))?;
        q = next;
        steps.push(tape);
        times.push(t0 + (k + 1) as f64 * rom.dt);
        states.push(q.clone());
    }
    Ok((
        ReducedTrajectory { times, states },
        OpenLoopTape { steps, t0, dt: rom.dt },
    ))
}

/// Reverse pass through an open-loop simulation.  `traj_grad[k]` is
/// dL/d(q_k) for every trajectory sample (length `horizon + 1`).
pub fn backward_open_loop(
    rom: &NodeRom,
    tape: &OpenLoopTape,
    traj_grad: &[DVector<f64>],
) -> Result<OpenLoopGrads> {
    let n = tape.steps.len();
    if traj_grad.len() != n + 1 {
        return Err(Error::dimension(format!(
            "trajectory gradient length {} != {}",
            traj_grad.len(),
            n + 1
        )));
    }
    let _ = (tape.t0, tape.dt);
    let mut res_grad = rom.residual.as_ref().map(|r| r.net.zero_grad());
    let mut qbar = traj_grad[n].clone();
    for k in (0..n).rev() {
        let (prev, _abar) =
            rk4_step_backward(rom, &tape.steps[k], &qbar, res_grad.as_mut());
        qbar = prev + &traj_grad[k];
    }
    Ok(OpenLoopGrads {
        residual: res_grad,
        q0: qbar,
    })
}

/// Closed-loop simulation: at each step the controller input
/// `y_k = C q_k + offset` is evaluated and the action is held over the
/// four RK4 stages of that step.
pub fn simulate_closed_loop(
    rom: &NodeRom,
    q0: &DVector<f64>,
    controller: &Controller,
    readout: &Readout,
    t0: f64,
    horizon: usize,
) -> Result<(ReducedTrajectory, ClosedLoopTape)> {
    if readout.c.ncols() != rom.dim() {
        return Err(Error::dimension(format!(
            "readout expects state dim {}, rom has {}",
            readout.c.ncols(),
            rom.dim()
        )));
    }
    if readout.c.nrows() != controller.n_inputs() {
        return Err(Error::dimension(format!(
            "controller expects {} inputs, readout provides {}",
            controller.n_inputs(),
            readout.c.nrows()
        )));
    }
    let mut times = Vec::with_capacity(horizon + 1);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut steps = Vec::with_capacity(horizon);
    let mut inputs: Vec<DVector<f64>> = Vec::with_capacity(horizon);
    let mut actions: Vec<f64> = Vec::with_capacity(horizon);
    let mut ctrl = Vec::with_capacity(horizon);
    let mut q = q0.clone();
    times.push(t0);
    states.push(q.clone());
    for k in 0..horizon {
        let t = t0 + k as f64 * rom.dt;
        inputs.push(readout.apply(&q));
        let (a, cache) = controller.eval_in_rollout(k, &inputs, &actions);
        if !a.is_finite() {
            return Err(Error::Divergence {
                time: t,
                context: "non-finite controller output".into(),
            });
        }
        actions.push(a);
        ctrl.push(cache);
        let (next, tape) = rk4_step_taped(rom, &q, t, |_, _| a)?;
        q = next;
        steps.push(tape);
        times.push(t0 + (k + 1) as f64 * rom.dt);
        states.push(q.clone());
    }
    Ok((
        ReducedTrajectory { times, states },
        ClosedLoopTape {
            steps,
            inputs,
            actions,
            ctrl,
        },
    ))
}

/// Reverse pass through a closed-loop simulation.
///
/// `traj_grad[k]` is dL/d(q_k); `action_grad`, when given, adds direct
/// dL/d(action_k) terms (e.g. an action penalty in the cost).
pub fn backward_closed_loop(
    rom: &NodeRom,
    controller: &Controller,
    readout: &Readout,
    tape: &ClosedLoopTape,
    traj_grad: &[DVector<f64>],
    action_grad: Option<&[f64]>,
) -> Result<ClosedLoopGrads> {
    let n = tape.steps.len();
    if traj_grad.len() != n + 1 {
        return Err(Error::dimension(format!(
            "trajectory gradient length {} != {}",
            traj_grad.len(),
            n + 1
        )));
    }
    let mut res_grad = rom.residual.as_ref().map(|r| r.net.zero_grad());
    let mut theta_grad = DVector::zeros(controller.param_count());
    let mut neural_grad = match controller {
        Controller::Neural(p) => Some(p.net.zero_grad()),
        _ => None,
    };
    let mut input_adjoints: Vec<DVector<f64>> = tape
        .inputs
        .iter()
        .map(|y| DVector::zeros(y.len()))
        .collect();
    let mut action_adjoints: Vec<f64> = match action_grad {
        Some(g) => {
            if g.len() != n {
                return Err(Error::dimension("action gradient length mismatch"));
            }
            g.to_vec()
        }
        None => vec![0.0; n],
    };

    let mut qbar = traj_grad[n].clone();
    for k in (0..n).rev() {
        let (prev, stage_abar) =
            rk4_step_backward(rom, &tape.steps[k], &qbar, res_grad.as_mut());
        // Zero-order hold: all four stages saw the same action.
        action_adjoints[k] += stage_abar.iter().sum::<f64>();
        controller.backward_in_rollout(
            k,
            action_adjoints[k],
            &tape.inputs,
            &tape.actions,
            &tape.ctrl[k],
            &mut theta_grad,
            neural_grad.as_mut(),
            &mut input_adjoints,
            &mut action_adjoints,
        );
        qbar = prev + &traj_grad[k] + readout.c.tr_mul(&input_adjoints[k]);
    }

    if let Some(g) = neural_grad {
        theta_grad = g.flatten();
    }
    Ok(ClosedLoopGrads {
        residual: res_grad,
        controller: theta_grad,
        q0: qbar,
        input_adjoints,
    })
}
