//! Differentiable Gaussian sensor reads and joint optimization of
//! controller parameters and sensor position.

use nalgebra::{DMatrix, DVector};

use crate::control::{
    cost_j1_with_grad, cost_j2_with_grad, cost_total, penalty_slope, Controller, CostSpec,
};
use crate::error::{Error, Result};
use crate::romcore::{
    adam_update, backward_closed_loop, simulate_closed_loop, AdamState, NodeRom, Readout,
};

/// Gaussian-weighted point sensor at `(x0, y0)`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianSensor {
    pub x0: f64,
    pub y0: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

fn weights(
    xs: &[f64],
    ys: &[f64],
    sensor: &GaussianSensor,
) -> Result<(DMatrix<f64>, f64)> {
    if sensor.sigma_x <= 0.0 || sensor.sigma_y <= 0.0 {
        return Err(Error::config("sensor widths must be positive"));
    }
    let w = DMatrix::from_fn(ys.len(), xs.len(), |iy, ix| {
        let dx = (xs[ix] - sensor.x0) / sensor.sigma_x;
        let dy = (ys[iy] - sensor.y0) / sensor.sigma_y;
        (-dx * dx - dy * dy).exp()
    });
    let total: f64 = w.sum();
    if !(total > 1e-300) {
        return Err(Error::Numerical(
            "sensor weights underflow: position out of domain".into(),
        ));
    }
    Ok((w, total))
}

/// Normalized Gaussian-weighted sum of the grid values.  `field[(iy, ix)]`
/// is the value at `(xs[ix], ys[iy])`.
pub fn gaussian_sensor_read(
    xs: &[f64],
    ys: &[f64],
    field: &DMatrix<f64>,
    sensor: &GaussianSensor,
) -> Result<f64> {
    Ok(gaussian_sensor_read_with_grad(xs, ys, field, sensor)?.0)
}

/// Reading plus its derivatives with respect to the sensor position.
pub fn gaussian_sensor_read_with_grad(
    xs: &[f64],
    ys: &[f64],
    field: &DMatrix<f64>,
    sensor: &GaussianSensor,
) -> Result<(f64, f64, f64)> {
    if field.nrows() != ys.len() || field.ncols() != xs.len() {
        return Err(Error::dimension(format!(
            "field is {}x{}, grid is {}x{}",
            field.nrows(),
            field.ncols(),
            ys.len(),
            xs.len()
        )));
    }
    let (w, total) = weights(xs, ys, sensor)?;
    let reading = w.dot(field) / total;
    // d(reading)/dx0 = (1/total) sum w'_ij (f_ij - reading), with
    // dw/dx0 = w * 2 (x - x0) / sigma_x^2 (similarly in y).
    let mut dx0 = 0.0;
    let mut dy0 = 0.0;
    for ix in 0..xs.len() {
        for iy in 0..ys.len() {
            let wij = w[(iy, ix)];
            let excess = field[(iy, ix)] - reading;
            dx0 += wij * 2.0 * (xs[ix] - sensor.x0) / (sensor.sigma_x * sensor.sigma_x)
                * excess
                / total;
            dy0 += wij * 2.0 * (ys[iy] - sensor.y0) / (sensor.sigma_y * sensor.sigma_y)
                * excess
                / total;
        }
    }
    Ok((reading, dx0, dy0))
}

/// Normalized weight row over the flattened grid (column-major in `ix`,
/// i.e. index `ix * ny + iy`), for building readout matrices.
pub fn sensor_weight_row(
    xs: &[f64],
    ys: &[f64],
    sensor: &GaussianSensor,
) -> Result<DVector<f64>> {
    let (w, total) = weights(xs, ys, sensor)?;
    let ny = ys.len();
    let mut row = DVector::zeros(xs.len() * ny);
    for ix in 0..xs.len() {
        for iy in 0..ny {
            row[ix * ny + iy] = w[(iy, ix)] / total;
        }
    }
    Ok(row)
}

/// Setup for the joint controller/sensor-placement optimization on a bank
/// of ROMs.  The feedback sensor reads the field reconstructed from the
/// reduced state through `modes` (rows in the `ix * ny + iy` layout); the
/// performance output is a fixed readout row.
#[derive(Debug, Clone)]
pub struct PlacementConfig {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `(nx * ny) x r`: reduced state to field values.
    pub modes: DMatrix<f64>,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub q0: DVector<f64>,
    pub horizon: usize,
    pub cost: CostSpec,
    /// Performance readout (1 row) producing the `u_p` series.
    pub performance: Readout,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Keep-out margin from the domain edges, in grid units.
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct PlacementOutcome {
    pub controller: Controller,
    pub x0: f64,
    pub y0: f64,
    pub best_cost: f64,
    pub cost_history: Vec<f64>,
    /// True if the position ever had to be clamped back into the domain.
    pub clamped: bool,
}

const DIVERGED_J2: f64 = 1e6;

fn feedback_readout(cfg: &PlacementConfig, sensor: &GaussianSensor) -> Result<Readout> {
    let row = sensor_weight_row(&cfg.xs, &cfg.ys, sensor)?;
    Ok(Readout::new(DMatrix::from_rows(&[
        (cfg.modes.tr_mul(&row)).transpose()
    ])))
}

/// Evaluate cost and gradients of one candidate on the whole bank.
/// Returns (total cost, d/d theta, d/d x0, d/d y0).
fn evaluate_candidate(
    roms: &[NodeRom],
    controller: &Controller,
    sensor: &GaussianSensor,
    cfg: &PlacementConfig,
) -> Result<(f64, DVector<f64>, f64, f64)> {
    let readout = feedback_readout(cfg, sensor)?;
    let mut theta_grad = DVector::zeros(controller.param_count());
    let mut gx0 = 0.0;
    let mut gy0 = 0.0;
    let mut j1s = Vec::with_capacity(roms.len());
    let mut j2s = Vec::with_capacity(roms.len());
    for rom in roms {
        let t0 = 0.0;
        let sim = simulate_closed_loop(rom, &cfg.q0, controller, &readout, t0, cfg.horizon);
        let (traj, tape) = match sim {
            Ok(v) => v,
            Err(Error::Divergence { .. }) => {
                // destabilized rollout: large stability surrogate, no
                // gradient contribution from this bank entry
                j1s.push(0.0);
                j2s.push(DIVERGED_J2);
                continue;
            }
            Err(e) => return Err(e),
        };
        let up: Vec<f64> = traj
            .states
            .iter()
            .map(|q| cfg.performance.apply(q)[0])
            .collect();
        let (j1, g1) = cost_j1_with_grad(&traj.times, &up, &cfg.cost)?;
        let (j2, g2) = cost_j2_with_grad(&traj.times, &up, &cfg.cost)?;
        let slope = penalty_slope(j2, &cfg.cost);
        let traj_grad: Vec<DVector<f64>> = g1
            .iter()
            .zip(&g2)
            .map(|(&a, &b)| cfg.performance.c.row(0).transpose() * (a + slope * b))
            .collect();
        let grads =
            backward_closed_loop(rom, controller, &readout, &tape, &traj_grad, None)?;
        theta_grad += &grads.controller;
        // position gradient: the sensor weights only enter through the
        // per-step controller inputs
        for (k, ybar) in grads.input_adjoints.iter().enumerate() {
            if ybar[0] == 0.0 {
                continue;
            }
            let field_flat = &cfg.modes * &tape_state(&traj, k);
            let field = DMatrix::from_fn(cfg.ys.len(), cfg.xs.len(), |iy, ix| {
                field_flat[ix * cfg.ys.len() + iy]
            });
            let (_, dx, dy) =
                gaussian_sensor_read_with_grad(&cfg.xs, &cfg.ys, &field, sensor)?;
            gx0 += ybar[0] * dx;
            gy0 += ybar[0] * dy;
        }
        j1s.push(j1);
        j2s.push(j2);
    }
    let total = cost_total(&j1s, &j2s, &cfg.cost)?;
    Ok((total, theta_grad, gx0, gy0))
}

fn tape_state(traj: &crate::romcore::ReducedTrajectory, k: usize) -> DVector<f64> {
    traj.states[k].clone()
}

/// Jointly optimize the controller parameters and the feedback sensor
/// position with Adam; returns the best iterate encountered.
pub fn optimize_sensor_placement(
    roms: &[NodeRom],
    controller: &Controller,
    x0: f64,
    y0: f64,
    cfg: &PlacementConfig,
) -> Result<PlacementOutcome> {
    if roms.is_empty() {
        return Err(Error::config("empty rom bank"));
    }
    cfg.cost.validate()?;
    let (xlo, xhi) = (cfg.xs[0] + cfg.margin, cfg.xs[cfg.xs.len() - 1] - cfg.margin);
    let (ylo, yhi) = (cfg.ys[0] + cfg.margin, cfg.ys[cfg.ys.len() - 1] - cfg.margin);
    if x0 < xlo || x0 > xhi || y0 < ylo || y0 > yhi {
        return Err(Error::config("initial sensor position outside domain margin"));
    }
    let n_theta = controller.param_count();
    let mut params = DVector::zeros(n_theta + 2);
    params.rows_mut(0, n_theta).copy_from(&controller.flatten());
    params[n_theta] = x0;
    params[n_theta + 1] = y0;
    let mut adam = AdamState::new(n_theta + 2, cfg.learning_rate);
    let mut current = controller.clone();
    let mut clamped = false;
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    let mut best: Option<(f64, Controller, f64, f64)> = None;

    for _iter in 0..=cfg.iterations {
        let sensor = GaussianSensor {
            x0: params[n_theta],
            y0: params[n_theta + 1],
            sigma_x: cfg.sigma_x,
            sigma_y: cfg.sigma_y,
        };
        let (cost, tg, gx, gy) = evaluate_candidate(roms, &current, &sensor, cfg)?;
        history.push(cost);
        if best.as_ref().map_or(true, |(c, ..)| cost < *c) {
            best = Some((cost, current.clone(), sensor.x0, sensor.y0));
        }
        if _iter == cfg.iterations {
            break;
        }
        let mut grad = DVector::zeros(n_theta + 2);
        grad.rows_mut(0, n_theta).copy_from(&tg);
        grad[n_theta] = gx;
        grad[n_theta + 1] = gy;
        adam_update(&mut params, &grad, &mut adam);
        if params[n_theta] < xlo || params[n_theta] > xhi {
            params[n_theta] = params[n_theta].clamp(xlo, xhi);
            clamped = true;
        }
        if params[n_theta + 1] < ylo || params[n_theta + 1] > yhi {
            params[n_theta + 1] = params[n_theta + 1].clamp(ylo, yhi);
            clamped = true;
        }
        let theta = params.rows(0, n_theta).into_owned();
        current.unflatten_into(&theta)?;
    }
    let (best_cost, controller, bx, by) = best.unwrap();
    Ok(PlacementOutcome {
        controller,
        x0: bx,
        y0: by,
        best_cost,
        cost_history: history,
        clamped,
    })
}
