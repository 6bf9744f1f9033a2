//! Linear system identification from data: sixth-order finite-difference
//! derivative estimation, operator-inference ridge regression, and the
//! eigensystem realization algorithm.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::romcore::ReducedTrajectory;

/// Continuous-time reduced linear operators `dq/dt = A q + B a`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearRom {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lambda: f64,
    /// Hashes of the episode data the fit was computed from.
    pub provenance: Vec<String>,
}

impl LinearRom {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

/// Discrete-time realization `q(k+1) = A q(k) + B u(k)`, `y(k) = C q(k)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteLti {
    pub dt: f64,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub order: usize,
    /// Set when the impulse data was identically zero.
    pub degenerate: bool,
    /// Set when the requested order exceeded the numerical rank.
    pub truncated: bool,
}

impl DiscreteLti {
    /// Markov parameter `Y(k) = C A^{k-1} B` for `k >= 1`.
    pub fn markov(&self, count: usize) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(count);
        let mut ak_b = self.b.clone();
        for _ in 0..count {
            out.push(&self.c * &ak_b);
            ak_b = &self.a * ak_b;
        }
        out
    }
}

/// Fornberg finite-difference weights for the `m`-th derivative at `x0`
/// given stencil nodes `x`.
fn fd_weights(x0: f64, x: &[f64], m: usize) -> Vec<f64> {
    let n = x.len();
    let mut c = vec![vec![0.0; m + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = x[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - x0;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.iter().map(|row| row[m]).collect()
}

/// Sixth-order finite-difference time derivatives of a uniformly sampled
/// trajectory.  Interior points use the 7-point central stencil; the first
/// and last three points use one-sided 7-point stencils.
pub fn estimate_derivatives(traj: &ReducedTrajectory, dt: f64) -> Result<Vec<DVector<f64>>> {
    let n = traj.states.len();
    if n < 7 {
        return Err(Error::config(format!(
            "derivative estimation needs at least 7 samples, got {n}"
        )));
    }
    if traj.times.len() != n {
        return Err(Error::dimension("trajectory times/states length mismatch"));
    }
    for k in 1..n {
        let step = traj.times[k] - traj.times[k - 1];
        if (step - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(Error::config(format!(
                "nonuniform time grid at sample {k}: step {step} != {dt}"
            )));
        }
    }
    let nodes: Vec<f64> = (0..7).map(|i| i as f64).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (base, at) = if i < 3 {
            (0, i as f64)
        } else if i + 3 >= n {
            (n - 7, (i + 7 - n) as f64)
        } else {
            (i - 3, 3.0)
        };
        let w = fd_weights(at, &nodes, 1);
        let mut d = DVector::zeros(traj.states[0].len());
        for (j, wj) in w.iter().enumerate() {
            d.axpy(wj / dt, &traj.states[base + j], 1.0);
        }
        out.push(d);
    }
    Ok(out)
}

/// Greedy row orthogonalization; returns the rows of `z` that are (nearly)
/// linearly dependent on the others, or `None` when `z` has full row rank.
fn deficient_rows(z: &DMatrix<f64>) -> Option<Vec<usize>> {
    let p = z.nrows();
    let mut residuals: Vec<DVector<f64>> = (0..p).map(|i| z.row(i).transpose()).collect();
    let scale = residuals
        .iter()
        .map(|r| r.norm())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let tol = scale * 1e-10;
    let mut remaining: Vec<usize> = (0..p).collect();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    loop {
        let best = remaining
            .iter()
            .copied()
            .max_by(|&a, &b| residuals[a].norm().partial_cmp(&residuals[b].norm()).unwrap());
        match best {
            Some(i) if residuals[i].norm() > tol => {
                let q = residuals[i].normalize();
                remaining.retain(|&j| j != i);
                for &j in &remaining {
                    let proj = q.dot(&residuals[j]);
                    residuals[j] -= proj * &q;
                }
                basis.push(q);
            }
            _ => break,
        }
    }
    if remaining.is_empty() {
        None
    } else {
        remaining.sort_unstable();
        Some(remaining)
    }
}

/// Operator-inference ridge regression: `[A B] = dQ Z^T (Z Z^T + lambda I)^-1`
/// with `Z = [Q; U]`, solved through an augmented least-squares
/// factorization rather than an explicit inverse.
pub fn opinf_fit(
    q_r: &DMatrix<f64>,
    dq_r: &DMatrix<f64>,
    u: &DMatrix<f64>,
    lambda: f64,
) -> Result<LinearRom> {
    let r = q_r.nrows();
    let n = q_r.ncols();
    if dq_r.nrows() != r || dq_r.ncols() != n {
        return Err(Error::dimension("dQ shape must match Q"));
    }
    if u.nrows() != 1 || u.ncols() != n {
        return Err(Error::dimension("U must be 1 x N"));
    }
    if n <= r + 1 {
        return Err(Error::config(format!(
            "need more than r+1 = {} samples, got {n}",
            r + 1
        )));
    }
    if lambda < 0.0 {
        return Err(Error::config("ridge parameter must be nonnegative"));
    }

    let p = r + 1;
    let mut z = DMatrix::zeros(p, n);
    z.view_mut((0, 0), (r, n)).copy_from(q_r);
    z.view_mut((r, 0), (1, n)).copy_from(u);

    if lambda == 0.0 {
        if let Some(rows) = deficient_rows(&z) {
            return Err(Error::RankDeficient { rows });
        }
    }

    // Augmented system: minimize ||Z^T X^T - dQ^T||^2 + lambda ||X^T||^2.
    let rows = n + if lambda > 0.0 { p } else { 0 };
    let mut a_mat = DMatrix::zeros(rows, p);
    a_mat.view_mut((0, 0), (n, p)).copy_from(&z.transpose());
    if lambda > 0.0 {
        let s = lambda.sqrt();
        for i in 0..p {
            a_mat[(n + i, i)] = s;
        }
    }
    let mut rhs = DMatrix::zeros(rows, r);
    rhs.view_mut((0, 0), (n, r)).copy_from(&dq_r.transpose());

    let svd = crate::linalg::thin_svd(&a_mat);
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    // min-norm least squares via the pseudo-inverse
    let mut ut_rhs = svd.u.tr_mul(&rhs);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        let inv = if s > 1e-14 * smax.max(1e-300) { 1.0 / s } else { 0.0 };
        ut_rhs.row_mut(i).scale_mut(inv);
    }
    let xt = &svd.v * ut_rhs;
    let x = xt.transpose(); // r x (r+1)

    let a = x.view((0, 0), (r, r)).into_owned();
    let b = DVector::from_column_slice(x.column(r).as_slice());
    Ok(LinearRom {
        a,
        b,
        lambda,
        provenance: Vec::new(),
    })
}

/// Eigensystem realization from Markov parameters `markov[k] = Y(k+1)`.
///
/// `p` is the block shift between Hankel entries and `n_blocks` the block
/// count `N`; the Hankel matrices have `N + 1` block rows and columns.
pub fn era_fit(
    markov: &[DMatrix<f64>],
    p: usize,
    n_blocks: usize,
    order: usize,
    dt: f64,
) -> Result<DiscreteLti> {
    if markov.is_empty() {
        return Err(Error::config("empty Markov sequence"));
    }
    if p == 0 {
        return Err(Error::config("block shift p must be positive"));
    }
    let ny = markov[0].nrows();
    let nu = markov[0].ncols();
    let needed = 2 * n_blocks * p + 2;
    if markov.len() < needed {
        return Err(Error::config(format!(
            "need at least {needed} Markov samples to fill the Hankel matrices, got {}",
            markov.len()
        )));
    }

    let blocks = n_blocks + 1;
    let build = |offset: usize| -> DMatrix<f64> {
        let mut h = DMatrix::zeros(blocks * ny, blocks * nu);
        for i in 0..blocks {
            for j in 0..blocks {
                // markov[k] = Y(k+1), entry Y(offset + (i+j) p).
                let k = offset + (i + j) * p - 1;
                h.view_mut((i * ny, j * nu), (ny, nu)).copy_from(&markov[k]);
            }
        }
        h
    };
    let h1 = build(1);
    let h2 = build(2);

    let peak = markov.iter().map(|m| m.amax()).fold(0.0f64, f64::max);
    if peak == 0.0 {
        return Ok(DiscreteLti {
            dt,
            a: DMatrix::zeros(order.max(1), order.max(1)),
            b: DMatrix::zeros(order.max(1), nu),
            c: DMatrix::zeros(ny, order.max(1)),
            order: order.max(1),
            degenerate: true,
            truncated: false,
        });
    }

    let svd = crate::linalg::thin_svd(&h1);
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let tol = smax * 1e-12;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let truncated = order > rank;
    let r = order.min(rank);

    let ur = svd.u.columns(0, r).into_owned();
    let vr = svd.v.columns(0, r).into_owned(); // cols x r
    let s_half: Vec<f64> = (0..r).map(|i| svd.singular_values[i].sqrt()).collect();
    let s_half_inv: Vec<f64> = s_half.iter().map(|s| 1.0 / s).collect();

    // A = S^-1/2 U^T H2 V S^-1/2
    let mut a = ur.transpose() * &h2 * &vr;
    for i in 0..r {
        for j in 0..r {
            a[(i, j)] *= s_half_inv[i] * s_half_inv[j];
        }
    }
    // B = first nu columns of S^1/2 V^T
    let mut b = vr.rows(0, nu).transpose(); // r x nu
    for i in 0..r {
        for j in 0..nu {
            b[(i, j)] *= s_half[i];
        }
    }
    // C = first ny rows of U S^1/2
    let mut c = ur.rows(0, ny).into_owned(); // ny x r
    for i in 0..ny {
        for j in 0..r {
            c[(i, j)] *= s_half[j];
        }
    }

    Ok(DiscreteLti {
        dt,
        a,
        b,
        c,
        order: r,
        degenerate: false,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj_from_fn(f: impl Fn(f64) -> f64, n: usize, dt: f64) -> ReducedTrajectory {
        let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let states = times.iter().map(|&t| DVector::from_vec(vec![f(t)])).collect();
        ReducedTrajectory { times, states }
    }

    #[test]
    fn constant_trajectory_has_zero_derivative() {
        let traj = traj_from_fn(|_| 2.5, 12, 0.1);
        let d = estimate_derivatives(&traj, 0.1).unwrap();
        for dk in &d {
            assert!(dk[0].abs() < 1e-12);
        }
    }

    #[test]
    fn degree_five_polynomial_is_exact() {
        let dt = 0.3;
        let traj = traj_from_fn(|t| t.powi(5), 15, dt);
        let d = estimate_derivatives(&traj, dt).unwrap();
        for (k, dk) in d.iter().enumerate() {
            let t = k as f64 * dt;
            let exact = 5.0 * t.powi(4);
            assert!(
                (dk[0] - exact).abs() <= 1e-9 * exact.abs().max(1.0),
                "k={k}: {} vs {exact}",
                dk[0]
            );
        }
    }

    #[test]
    fn sixth_order_convergence_on_sine() {
        let err = |dt: f64| -> f64 {
            let n = (2.0 / dt) as usize + 1;
            let traj = traj_from_fn(f64::sin, n, dt);
            let d = estimate_derivatives(&traj, dt).unwrap();
            (3..n - 3)
                .map(|k| (d[k][0] - (k as f64 * dt).cos()).abs())
                .fold(0.0, f64::max)
        };
        // steps large enough that truncation error dominates roundoff
        let e1 = err(0.2);
        let e2 = err(0.1);
        assert!(e1 / e2 >= 40.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn nonuniform_grid_rejected() {
        let mut traj = traj_from_fn(|t| t, 10, 0.1);
        traj.times[5] += 0.03;
        assert!(estimate_derivatives(&traj, 0.1).is_err());
    }

    #[test]
    fn opinf_zero_data_gives_zero_operators() {
        let q = DMatrix::zeros(2, 10);
        let dq = DMatrix::zeros(2, 10);
        let u = DMatrix::zeros(1, 10);
        let rom = opinf_fit(&q, &dq, &u, 1.0).unwrap();
        assert!(rom.a.amax() == 0.0 && rom.b.amax() == 0.0);
    }

    #[test]
    fn opinf_recovers_exact_linear_system() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let b = DVector::from_vec(vec![0.0, 1.0]);
        let n = 200;
        let mut q = DMatrix::zeros(2, n);
        let mut dq = DMatrix::zeros(2, n);
        let mut u = DMatrix::zeros(1, n);
        let mut state = DVector::from_vec(vec![1.0, 0.5]);
        let dt = 0.01;
        for k in 0..n {
            let uk = (0.7 * k as f64).sin() + 0.3 * (1.3 * k as f64).cos();
            let d = &a * &state + &b * uk;
            q.set_column(k, &state);
            dq.set_column(k, &d);
            u[(0, k)] = uk;
            // exact derivatives by construction; step state forward crudely
            state += dt * d;
        }
        let rom = opinf_fit(&q, &dq, &u, 0.0).unwrap();
        assert!((rom.a.clone() - &a).norm() / a.norm() < 1e-10);
        assert!((rom.b.clone() - &b).norm() / b.norm() < 1e-10);
    }

    #[test]
    fn ridge_shrinks_operator_norm() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let b = DVector::from_vec(vec![0.0, 1.0]);
        let n = 100;
        let mut q = DMatrix::zeros(2, n);
        let mut dq = DMatrix::zeros(2, n);
        let mut u = DMatrix::zeros(1, n);
        let mut state = DVector::from_vec(vec![1.0, 0.5]);
        for k in 0..n {
            let uk = (0.7 * k as f64).sin();
            let d = &a * &state + &b * uk;
            q.set_column(k, &state);
            dq.set_column(k, &d);
            u[(0, k)] = uk;
            state += 0.01 * d;
        }
        let r0 = opinf_fit(&q, &dq, &u, 0.0).unwrap();
        let r1 = opinf_fit(&q, &dq, &u, 1e6).unwrap();
        assert!(r1.a.norm() < r0.a.norm());
    }

    #[test]
    fn opinf_rank_deficiency_detected() {
        // State row 1 identically zero with lambda = 0.
        let mut q = DMatrix::zeros(2, 20);
        let mut dq = DMatrix::zeros(2, 20);
        let mut u = DMatrix::zeros(1, 20);
        for k in 0..20 {
            q[(0, k)] = (k as f64 * 0.3).sin();
            dq[(0, k)] = (k as f64 * 0.3).cos();
            u[(0, k)] = (k as f64 * 0.9).cos();
        }
        match opinf_fit(&q, &dq, &u, 0.0) {
            Err(Error::RankDeficient { rows }) => assert!(rows.contains(&1)),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn opinf_invariant_to_sample_permutation() {
        let n = 60;
        let mut q = DMatrix::zeros(2, n);
        let mut dq = DMatrix::zeros(2, n);
        let mut u = DMatrix::zeros(1, n);
        for k in 0..n {
            q[(0, k)] = (k as f64 * 0.3).sin();
            q[(1, k)] = (k as f64 * 0.11).cos();
            dq[(0, k)] = (k as f64 * 0.5).cos();
            dq[(1, k)] = (k as f64 * 0.7).sin();
            u[(0, k)] = (k as f64 * 0.9).cos();
        }
        let rom = opinf_fit(&q, &dq, &u, 1e-8).unwrap();
        // reverse the sample order
        let perm: Vec<usize> = (0..n).rev().collect();
        let qp = DMatrix::from_fn(2, n, |i, j| q[(i, perm[j])]);
        let dqp = DMatrix::from_fn(2, n, |i, j| dq[(i, perm[j])]);
        let up = DMatrix::from_fn(1, n, |i, j| u[(i, perm[j])]);
        let rom_p = opinf_fit(&qp, &dqp, &up, 1e-8).unwrap();
        assert!((rom.a - rom_p.a).amax() < 1e-10);
        assert!((rom.b - rom_p.b).amax() < 1e-10);
    }

    #[test]
    fn era_scalar_geometric_markov() {
        // a = 0.9, b = c = 1: Y(k) = 0.9^{k-1}
        let markov: Vec<DMatrix<f64>> = (0..80)
            .map(|k| DMatrix::from_element(1, 1, 0.9f64.powi(k)))
            .collect();
        let lti = era_fit(&markov, 1, 30, 1, 1.0).unwrap();
        let rec = lti.markov(200);
        for (k, m) in rec.iter().enumerate() {
            let truth = 0.9f64.powi(k as i32);
            assert!((m[(0, 0)] - truth).abs() < 1e-10, "k={k}: {} vs {truth}", m[(0, 0)]);
        }
    }

    #[test]
    fn era_zero_data_flagged_degenerate() {
        let markov: Vec<DMatrix<f64>> = (0..40).map(|_| DMatrix::zeros(1, 1)).collect();
        let lti = era_fit(&markov, 1, 15, 2, 1.0).unwrap();
        assert!(lti.degenerate);
        assert!(lti.a.amax() == 0.0);
    }

    #[test]
    fn era_recovers_damped_rotation_poles() {
        let a = DMatrix::from_row_slice(2, 2, &[0.95, 0.2, -0.2, 0.95]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let mut markov = Vec::new();
        let mut akb = b.clone();
        for _ in 0..120 {
            markov.push(&c * &akb);
            akb = &a * akb;
        }
        let lti = era_fit(&markov, 1, 40, 2, 1.0).unwrap();
        let eig = lti.a.complex_eigenvalues();
        let mut got: Vec<(f64, f64)> = eig.iter().map(|z| (z.re, z.im)).collect();
        got.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap());
        let truth = [(0.95, -0.2), (0.95, 0.2)];
        for (g, t) in got.iter().zip(truth.iter()) {
            assert!((g.0 - t.0).abs() < 1e-8 && (g.1 - t.1).abs() < 1e-8);
        }
    }
}
