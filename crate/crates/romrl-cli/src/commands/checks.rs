//! `grad-check` and `step-check`: numerical self-verification commands.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use romrl::control::{Controller, NeuralPolicy};
use romrl::romcore::{
    backward_closed_loop, rom_loss_with_grad, simulate_closed_loop, simulate_open_loop,
    ActionSeries, NodeRom, Readout, ReducedTrajectory, ResidualNet,
};
use romrl::sysid::LinearRom;
use romrl::{Error, Result};

/// One randomized closed-loop gradient-check instance.
struct GradInstance {
    rom: NodeRom,
    controller: Controller,
    readout: Readout,
    q0: DVector<f64>,
    reference: ReducedTrajectory,
    horizon: usize,
}

fn random_instance(seed: u64) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.gen_range(1..=4usize);
    let dt = 0.05;
    let horizon = 15;
    let m = DMatrix::from_fn(r, r, |_, _| rng.gen_range(-1.0..1.0));
    let a = &m - DMatrix::identity(r, r) * (m.norm() + 0.5);
    let b = DVector::from_fn(r, |_, _| rng.gen_range(-1.0..1.0));
    let linear = LinearRom { a, b, lambda: 0.0, provenance: vec![] };
    let residual = ResidualNet::with_hidden(r, &[8, 8], 0.05, &mut rng);
    let rom = NodeRom { linear, residual: Some(residual), dt };
    let readout = Readout::new(DMatrix::from_fn(1, r, |_, _| rng.gen_range(-1.0..1.0)));
    let controller = if seed % 2 == 0 {
        Controller::Proportional { gain: rng.gen_range(-0.5..0.5) }
    } else {
        Controller::Neural(NeuralPolicy::with_hidden(1, &[6, 6], 0.3, &mut rng))
    };
    let q0 = DVector::from_fn(r, |_, _| rng.gen_range(-0.5..0.5));
    let times: Vec<f64> = (0..=horizon).map(|k| k as f64 * dt).collect();
    let states = times
        .iter()
        .map(|_| DVector::from_fn(r, |_, _| rng.gen_range(-0.5..0.5)))
        .collect();
    let reference = ReducedTrajectory { times, states };
    GradInstance { rom, controller, readout, q0, reference, horizon }
}

fn loss_of(inst: &GradInstance, rom: &NodeRom, ctrl: &Controller, q0: &DVector<f64>) -> Result<f64> {
    let (traj, _) = simulate_closed_loop(rom, q0, ctrl, &inst.readout, 0.0, inst.horizon)?;
    Ok(rom_loss_with_grad(&traj, &inst.reference)?.0)
}

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8)
}

/// Check reverse-mode gradients of the rollout loss with respect to the
/// residual parameters, the controller parameters, and the initial
/// reduced state against central finite differences.  Returns the worst
/// relative error observed.
pub fn grad_check_worst(instances: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    let h = 1e-5;
    for i in 0..instances {
        let inst = random_instance(seed.wrapping_mul(1000).wrapping_add(i as u64));
        let (traj, tape) = simulate_closed_loop(
            &inst.rom,
            &inst.q0,
            &inst.controller,
            &inst.readout,
            0.0,
            inst.horizon,
        )?;
        let (_, traj_grad) = rom_loss_with_grad(&traj, &inst.reference)?;
        let grads = backward_closed_loop(
            &inst.rom,
            &inst.controller,
            &inst.readout,
            &tape,
            &traj_grad,
            None,
        )?;

        // initial state
        for k in 0..inst.q0.len() {
            let mut qp = inst.q0.clone();
            let mut qm = inst.q0.clone();
            qp[k] += h;
            qm[k] -= h;
            let fd = (loss_of(&inst, &inst.rom, &inst.controller, &qp)?
                - loss_of(&inst, &inst.rom, &inst.controller, &qm)?)
                / (2.0 * h);
            worst = worst.max(rel_err(grads.q0[k], fd));
        }

        // controller parameters (a spread-out sample for neural policies)
        let theta = inst.controller.flatten();
        let n_theta = theta.len();
        let theta_picks: Vec<usize> = if n_theta <= 8 {
            (0..n_theta).collect()
        } else {
            (0..8).map(|j| j * (n_theta - 1) / 7).collect()
        };
        for &k in &theta_picks {
            let mut ctrl_p = inst.controller.clone();
            let mut ctrl_m = inst.controller.clone();
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            ctrl_p.unflatten_into(&tp)?;
            ctrl_m.unflatten_into(&tm)?;
            let fd = (loss_of(&inst, &inst.rom, &ctrl_p, &inst.q0)?
                - loss_of(&inst, &inst.rom, &ctrl_m, &inst.q0)?)
                / (2.0 * h);
            worst = worst.max(rel_err(grads.controller[k], fd));
        }

        // residual parameters
        let res_grad = grads
            .residual
            .as_ref()
            .ok_or_else(|| Error::Numerical("missing residual gradient".into()))?
            .flatten();
        let omega = inst.rom.residual.as_ref().unwrap().net.flatten();
        let n_omega = omega.len();
        let omega_picks: Vec<usize> = (0..8).map(|j| j * (n_omega - 1) / 7).collect();
        for &k in &omega_picks {
            let mut rom_p = inst.rom.clone();
            let mut rom_m = inst.rom.clone();
            let mut wp = omega.clone();
            let mut wm = omega.clone();
            wp[k] += h;
            wm[k] -= h;
            rom_p.residual.as_mut().unwrap().net.unflatten_into(&wp)?;
            rom_m.residual.as_mut().unwrap().net.unflatten_into(&wm)?;
            let fd = (loss_of(&inst, &rom_p, &inst.controller, &inst.q0)?
                - loss_of(&inst, &rom_m, &inst.controller, &inst.q0)?)
                / (2.0 * h);
            worst = worst.max(rel_err(res_grad[k], fd));
        }
    }
    Ok(worst)
}

pub fn grad_check(instances: usize, tolerance: f64, seed: u64) -> Result<()> {
    let worst = grad_check_worst(instances, seed)?;
    println!("grad-check: {instances} instances, worst relative error {worst}");
    if worst > tolerance {
        return Err(Error::Numerical(format!(
            "gradient mismatch: worst relative error {worst} exceeds {tolerance}"
        )));
    }
    println!("grad-check: PASS (tolerance {tolerance})");
    Ok(())
}

/// Integrate the ROM at dt, dt/2, and dt/4 under a smooth forcing and
/// report the successive trajectory differences; an RK4 integrator whose
/// step error matters should contract by roughly 16x per halving.
pub fn step_check(rom_path: &Path, horizon: usize) -> Result<()> {
    let rom: NodeRom = crate::artifacts::read_model::<NodeRom>(rom_path)?.value;
    let r = rom.dim();
    let q0 = DVector::from_element(r, 0.1);
    let t_end = horizon as f64 * rom.dt;
    // constant forcing: piecewise-linear action interpolation would add
    // kinks of its own and mask the integrator's order
    let actions = ActionSeries { times: vec![0.0, t_end], values: vec![0.05, 0.05] };
    let mut diffs = Vec::new();
    let mut prev: Option<ReducedTrajectory> = None;
    for level in 0..3u32 {
        let factor = 2usize.pow(level);
        let mut rom_l = rom.clone();
        rom_l.dt = rom.dt / factor as f64;
        let (traj, _) = simulate_open_loop(&rom_l, &q0, &actions, 0.0, horizon * factor)?;
        if let Some(p) = &prev {
            // the refined run has two samples per coarse sample
            let mut max_diff = 0.0f64;
            for (k, qp) in p.states.iter().enumerate() {
                let qf = &traj.states[2 * k];
                max_diff = max_diff.max((qp - qf).norm());
            }
            diffs.push(max_diff);
        }
        prev = Some(traj);
    }
    println!(
        "step-check: dt = {}, |x(dt) - x(dt/2)| = {}, |x(dt/2) - x(dt/4)| = {}",
        rom.dt, diffs[0], diffs[1]
    );
    if diffs[1] > 1e-12 {
        println!("step-check: contraction ratio per halving = {}", diffs[0] / diffs[1]);
    } else {
        println!("step-check: refinement differences at roundoff; dt is conservative");
    }
    Ok(())
}
