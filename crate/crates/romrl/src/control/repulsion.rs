//! Repulsive potentials keeping the policy away from previously
//! destabilizing parameterizations, measured by functional proximity on a
//! sample grid of the recorded feedback-signal ranges.

use nalgebra::DVector;

use crate::control::{CostSpec, NeuralPolicy};
use crate::error::{Error, Result};

/// Uniform grid of policy-input samples over the recorded [y1, y2]
/// bounding box of stable datasets.
#[derive(Debug, Clone)]
pub struct SampleGrid {
    pub points: Vec<DVector<f64>>,
}

pub const SAMPLE_GRID_SIDE: usize = 32;

impl SampleGrid {
    /// `side x side` uniform grid over `[lo1, hi1] x [lo2, hi2]`.
    pub fn from_bounds(lo: [f64; 2], hi: [f64; 2], side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::config("sample grid needs at least one point"));
        }
        if !(lo[0].is_finite() && lo[1].is_finite() && hi[0].is_finite() && hi[1].is_finite()) {
            return Err(Error::config("non-finite sample grid bounds"));
        }
        if hi[0] < lo[0] || hi[1] < lo[1] {
            return Err(Error::config("empty stable-range record"));
        }
        let coord = |lo: f64, hi: f64, i: usize| {
            if side == 1 {
                (lo + hi) / 2.0
            } else {
                lo + (hi - lo) * i as f64 / (side - 1) as f64
            }
        };
        let mut points = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                points.push(DVector::from_vec(vec![
                    coord(lo[0], hi[0], i),
                    coord(lo[1], hi[1], j),
                ]));
            }
        }
        Ok(SampleGrid { points })
    }
}

/// Mean squared output difference of two policies over the grid.
pub fn policy_distance(a: &NeuralPolicy, b: &NeuralPolicy, grid: &SampleGrid) -> Result<f64> {
    Ok(policy_distance_with_grad(a, b, grid)?.0)
}

/// Distance plus its gradient with respect to the parameters of `a`.
pub fn policy_distance_with_grad(
    a: &NeuralPolicy,
    b: &NeuralPolicy,
    grid: &SampleGrid,
) -> Result<(f64, DVector<f64>)> {
    if grid.points.is_empty() {
        return Err(Error::config("empty sample grid"));
    }
    let n = grid.points.len() as f64;
    let mut d = 0.0;
    let mut grad = a.net.zero_grad();
    for x in &grid.points {
        let (ya, cache) = a.net.forward_cached(x);
        let yb = b.net.forward(x);
        let diff = ya[0] - yb[0];
        d += diff * diff / n;
        let out = DVector::from_element(1, 2.0 * diff / n);
        a.net.backward(&cache, &out, &mut grad);
    }
    Ok((d, grad.flatten()))
}

/// `sum_j lambda_rep * exp(-(d_j / tau)^2)` over the recorded bad policies.
pub fn repulsive_penalty(
    policy: &NeuralPolicy,
    bad: &[NeuralPolicy],
    grid: &SampleGrid,
    spec: &CostSpec,
) -> Result<f64> {
    Ok(repulsive_penalty_with_grad(policy, bad, grid, spec)?.0)
}

pub fn repulsive_penalty_with_grad(
    policy: &NeuralPolicy,
    bad: &[NeuralPolicy],
    grid: &SampleGrid,
    spec: &CostSpec,
) -> Result<(f64, DVector<f64>)> {
    let mut penalty = 0.0;
    let mut grad = DVector::zeros(policy.net.param_count());
    for other in bad {
        let (d, dgrad) = policy_distance_with_grad(policy, other, grid)?;
        let s = d / spec.tau;
        let pot = spec.lambda_rep * (-s * s).exp();
        penalty += pot;
        // d(pot)/d(theta) = pot * (-2 d / tau^2) * d(d)/d(theta)
        grad.axpy(pot * (-2.0 * d / (spec.tau * spec.tau)), &dgrad, 1.0);
    }
    Ok((penalty, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(seed: u64) -> NeuralPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NeuralPolicy::with_hidden(2, &[8, 8], 1.0, &mut rng);
        // nonzero last layer so outputs differ between seeds
        p.net.weights.last_mut().unwrap().fill(0.3);
        p
    }

    fn grid() -> SampleGrid {
        SampleGrid::from_bounds([-1.0, -1.0], [1.0, 1.0], 8).unwrap()
    }

    #[test]
    fn identical_policies_have_zero_distance_and_full_potential() {
        let p = policy(1);
        let g = grid();
        let d = policy_distance(&p, &p, &g).unwrap();
        assert_eq!(d, 0.0);
        let spec = CostSpec::range(0.0, 1.0);
        let pen = repulsive_penalty(&p, &[p.clone()], &g, &spec).unwrap();
        assert!((pen - spec.lambda_rep).abs() < 1e-15);
    }

    #[test]
    fn distant_policies_contribute_negligibly() {
        // d = 5 tau -> exp(-25) < 2e-11
        let spec = CostSpec {
            tau: 1.0,
            ..CostSpec::range(0.0, 1.0)
        };
        let contribution = spec.lambda_rep * (-(5.0f64 / spec.tau).powi(2)).exp();
        assert!(contribution < 2e-11 * spec.lambda_rep);
    }

    #[test]
    fn empty_bad_set_gives_zero_penalty() {
        let p = policy(2);
        let spec = CostSpec::range(0.0, 1.0);
        assert_eq!(repulsive_penalty(&p, &[], &grid(), &spec).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_grid_bounds_rejected() {
        assert!(SampleGrid::from_bounds([1.0, 0.0], [0.0, 1.0], 4).is_err());
        assert!(SampleGrid::from_bounds([0.0, 0.0], [1.0, 1.0], 0).is_err());
    }

    #[test]
    fn distance_gradient_matches_finite_differences() {
        let a = policy(3);
        let b = policy(4);
        let g = grid();
        let (_, grad) = policy_distance_with_grad(&a, &b, &g).unwrap();
        let params = a.net.flatten();
        let h = 1e-6;
        for idx in [0usize, 9, params.len() - 1] {
            let mut ap = a.clone();
            let mut pp = params.clone();
            pp[idx] += h;
            ap.net.unflatten_into(&pp).unwrap();
            let fp = policy_distance(&ap, &b, &g).unwrap();
            pp[idx] -= 2.0 * h;
            ap.net.unflatten_into(&pp).unwrap();
            let fm = policy_distance(&ap, &b, &g).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - grad[idx]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {idx}: fd={fd} ad={}",
                grad[idx]
            );
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let p = policy(5);
        let bad = vec![policy(6), policy(7)];
        let g = grid();
        let spec = CostSpec {
            tau: 0.05,
            lambda_rep: 2.0,
            ..CostSpec::range(0.0, 1.0)
        };
        let (_, grad) = repulsive_penalty_with_grad(&p, &bad, &g, &spec).unwrap();
        let params = p.net.flatten();
        let h = 1e-6;
        for idx in [1usize, 20, params.len() - 2] {
            let mut pp2 = p.clone();
            let mut pv = params.clone();
            pv[idx] += h;
            pp2.net.unflatten_into(&pv).unwrap();
            let fp = repulsive_penalty(&pp2, &bad, &g, &spec).unwrap();
            pv[idx] -= 2.0 * h;
            pp2.net.unflatten_into(&pv).unwrap();
            let fm = repulsive_penalty(&pp2, &bad, &g, &spec).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - grad[idx]).abs() <= 1e-5 * (1.0 + fd.abs()),
                "param {idx}: fd={fd} ad={}",
                grad[idx]
            );
        }
    }
}
