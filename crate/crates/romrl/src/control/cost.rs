//! Performance and stability cost functions over sampled sensor series.
//!
//! All integrals are trapezoidal over the samples that fall inside the
//! evaluation window; windows are expected to align with the simulation
//! grid (shipped configurations guarantee this).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evaluation window, either explicit bounds or the trailing `count`
/// periods ending at `t1`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum CostWindow {
    Range { t0: f64, t_end: f64 },
    Periods { t1: f64, period: f64, count: usize },
}

impl CostWindow {
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            CostWindow::Range { t0, t_end } => (t0, t_end),
            CostWindow::Periods { t1, period, count } => (t1 - count as f64 * period, t1),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostSpec {
    pub window: CostWindow,
    /// Stability threshold on J2.
    pub j2_threshold: f64,
    /// Penalty weight on the J2 excess.
    pub alpha: f64,
    /// Width of the repulsive potential in policy-distance units.
    pub tau: f64,
    /// Magnitude of one repulsive potential.
    pub lambda_rep: f64,
    /// Critical drag-reduction threshold classifying dangerous datasets.
    pub gamma_crit: f64,
    /// Optional quadratic action penalty weight (zero disables it).
    pub action_weight: f64,
}

impl CostSpec {
    /// Evaluation over the trailing four periods ending at `t1`, with the
    /// default stability penalty and stabilization constants.
    pub fn trailing_periods(t1: f64, period: f64) -> Self {
        CostSpec {
            window: CostWindow::Periods {
                t1,
                period,
                count: 4,
            },
            j2_threshold: 1e-5,
            alpha: 1e3,
            tau: 1.0,
            lambda_rep: 1.0,
            gamma_crit: 0.05,
            action_weight: 0.0,
        }
    }

    pub fn range(t0: f64, t_end: f64) -> Self {
        CostSpec {
            window: CostWindow::Range { t0, t_end },
            ..CostSpec::trailing_periods(0.0, 1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w0, w1) = self.window.bounds();
        if !(w1 > w0) {
            return Err(Error::config("cost window is empty"));
        }
        if self.alpha <= 0.0 || self.tau <= 0.0 || self.lambda_rep <= 0.0 {
            return Err(Error::config(
                "alpha, tau, lambda_rep must be positive",
            ));
        }
        if self.j2_threshold <= 0.0 || self.gamma_crit <= 0.0 {
            return Err(Error::config("cost thresholds must be positive"));
        }
        Ok(())
    }
}

const WINDOW_TOL: f64 = 1e-9;

/// Index range (inclusive) of samples inside the window, after checking
/// the series covers it.
fn window_indices(times: &[f64], window: &CostWindow) -> Result<(usize, usize)> {
    let (w0, w1) = window.bounds();
    if times.len() < 2 {
        return Err(Error::config("cost series needs at least two samples"));
    }
    if times[0] > w0 + WINDOW_TOL || times[times.len() - 1] < w1 - WINDOW_TOL {
        return Err(Error::config(format!(
            "series [{}, {}] does not cover cost window [{w0}, {w1}]",
            times[0],
            times[times.len() - 1]
        )));
    }
    let i0 = times.partition_point(|&t| t < w0 - WINDOW_TOL);
    let i1 = times.partition_point(|&t| t <= w1 + WINDOW_TOL) - 1;
    if i1 <= i0 {
        return Err(Error::config("cost window contains fewer than two samples"));
    }
    Ok((i0, i1))
}

fn trap_weights(times: &[f64], i0: usize, i1: usize) -> Vec<f64> {
    let n = i1 - i0 + 1;
    let mut w = vec![0.0; n];
    for k in 0..n - 1 {
        let h = times[i0 + k + 1] - times[i0 + k];
        w[k] += h / 2.0;
        w[k + 1] += h / 2.0;
    }
    w
}

/// `J1 = integral of u_p^2 over the window`.
pub fn cost_j1(times: &[f64], values: &[f64], spec: &CostSpec) -> Result<f64> {
    Ok(cost_j1_with_grad(times, values, spec)?.0)
}

/// J1 and its gradient with respect to every sample of the series
/// (zero outside the window).
pub fn cost_j1_with_grad(
    times: &[f64],
    values: &[f64],
    spec: &CostSpec,
) -> Result<(f64, Vec<f64>)> {
    check_lengths(times, values)?;
    let (i0, i1) = window_indices(times, &spec.window)?;
    let w = trap_weights(times, i0, i1);
    let mut j1 = 0.0;
    let mut grad = vec![0.0; values.len()];
    for (k, &wk) in w.iter().enumerate() {
        let v = values[i0 + k];
        j1 += wk * v * v;
        grad[i0 + k] = 2.0 * wk * v;
    }
    Ok((j1, grad))
}

/// `J2 = (integral of u_p over the window)^2`.
pub fn cost_j2(times: &[f64], values: &[f64], spec: &CostSpec) -> Result<f64> {
    Ok(cost_j2_with_grad(times, values, spec)?.0)
}

pub fn cost_j2_with_grad(
    times: &[f64],
    values: &[f64],
    spec: &CostSpec,
) -> Result<(f64, Vec<f64>)> {
    check_lengths(times, values)?;
    let (i0, i1) = window_indices(times, &spec.window)?;
    let w = trap_weights(times, i0, i1);
    let integral: f64 = w.iter().enumerate().map(|(k, &wk)| wk * values[i0 + k]).sum();
    let mut grad = vec![0.0; values.len()];
    for (k, &wk) in w.iter().enumerate() {
        grad[i0 + k] = 2.0 * integral * wk;
    }
    Ok((integral * integral, grad))
}

fn check_lengths(times: &[f64], values: &[f64]) -> Result<()> {
    if times.len() != values.len() {
        return Err(Error::dimension(format!(
            "series lengths differ: {} times vs {} values",
            times.len(),
            values.len()
        )));
    }
    Ok(())
}

/// `sum_i [J1_i + alpha * relu(J2_i - J2_th)]`.  The subgradient of the
/// penalty at the threshold is zero, so `penalty_slope` reports exactly 0
/// below or at the threshold and `alpha` above it.
pub fn cost_total(j1: &[f64], j2: &[f64], spec: &CostSpec) -> Result<f64> {
    if j1.len() != j2.len() || j1.is_empty() {
        return Err(Error::dimension(
            "J1 and J2 lists must be nonempty and equal-length",
        ));
    }
    Ok(j1
        .iter()
        .zip(j2)
        .map(|(&a, &b)| a + spec.alpha * (b - spec.j2_threshold).max(0.0))
        .sum())
}

/// dJ_total/dJ2_i for one entry.
pub fn penalty_slope(j2: f64, spec: &CostSpec) -> f64 {
    if j2 > spec.j2_threshold {
        spec.alpha
    } else {
        0.0
    }
}

///// Wake cost: `integral of (u_p1^2 + u_p2^2)` over the window.
pub fn wake_cost(
    times: &[f64],
    up1: &[f64],
    up2: &[f64],
    spec: &CostSpec,
) -> Result<f64> {
    Ok(wake_cost_with_grad(times, up1, up2, spec)?.0)
}

pub fn wake_cost_with_grad(
    times: &[f64],
    up1: &[f64],
    up2: &[f64],
    spec: &CostSpec,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (j1, g1) = cost_j1_with_grad(times, up1, spec)?;
    let (j2, g2) = cost_j1_with_grad(times, up2, spec)?;
    Ok((j1 + j2, g1, g2))
}
