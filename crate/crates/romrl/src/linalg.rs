//! Thin SVD by one-sided Jacobi (Hestenes) rotations.  nalgebra's
//! Golub–Kahan implementation can mis-converge on rank-deficient Hankel
//! and snapshot matrices, producing factors that do not reconstruct the
//! input; the Jacobi sweep is slower but gives high relative accuracy on
//! exactly the low-rank matrices POD and ERA feed it.

use nalgebra::DMatrix;

pub(crate) struct ThinSvd {
    /// `m x k` orthonormal columns (zero columns for exact-zero singular
    /// values).
    pub u: DMatrix<f64>,
    /// Descending.
    pub singular_values: Vec<f64>,
    /// `n x k` orthonormal columns.
    pub v: DMatrix<f64>,
}

fn jacobi_tall(a: &DMatrix<f64>) -> ThinSvd {
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = DMatrix::identity(n, n);
    let eps = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    w[(i, p)] = c * wp - s * wq;
                    w[(i, q)] = s * wp + c * wq;
                }
                for i in 0..n {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap());
    let mut u = DMatrix::zeros(m, n);
    let mut vs = DMatrix::zeros(n, n);
    let mut s_sorted = Vec::with_capacity(n);
    for (col, &src) in order.iter().enumerate() {
        if sigma[src] > 0.0 {
            u.set_column(col, &(w.column(src) / sigma[src]));
        }
        vs.set_column(col, &v.column(src));
        s_sorted.push(sigma[src]);
    }
    sigma = s_sorted;
    ThinSvd {
        u,
        singular_values: sigma,
        v: vs,
    }
}

/// Thin SVD `a = U diag(sigma) V^T` with `k = min(m, n)` columns.
pub(crate) fn thin_svd(a: &DMatrix<f64>) -> ThinSvd {
    if a.ncols() <= a.nrows() {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose());
        ThinSvd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reconstruct(svd: &ThinSvd) -> DMatrix<f64> {
        let k = svd.singular_values.len();
        let mut us = svd.u.clone();
        for j in 0..k {
            us.column_mut(j).scale_mut(svd.singular_values[j]);
        }
        us * svd.v.transpose()
    }

    #[test]
    fn random_matrix_reconstructs_and_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(m, n) in &[(7usize, 4usize), (4, 7), (6, 6)] {
            let a = DMatrix::from_fn(m, n, |_, _| rng.gen::<f64>() - 0.5);
            let svd = thin_svd(&a);
            assert!((reconstruct(&svd) - &a).amax() < 1e-12);
            let k = m.min(n);
            let eye = DMatrix::identity(k, k);
            assert!((svd.u.tr_mul(&svd.u) - &eye).amax() < 1e-12);
            assert!((svd.v.tr_mul(&svd.v) - &eye).amax() < 1e-12);
            assert!(svd
                .singular_values
                .windows(2)
                .all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_one_hankel_is_exact() {
        // the matrix that defeats Golub-Kahan: H[i][j] = 0.9^(i+j)
        let n = 31;
        let h = DMatrix::from_fn(n, n, |i, j| 0.9f64.powi((i + j) as i32));
        let svd = thin_svd(&h);
        assert!((reconstruct(&svd) - &h).amax() < 1e-13);
        let expected: f64 = (0..n).map(|i| 0.81f64.powi(i as i32)).sum();
        assert!((svd.singular_values[0] - expected).abs() < 1e-12);
        assert!(svd.singular_values[1] < 1e-13);
    }

    #[test]
    fn exact_low_rank_leaves_tiny_trailing_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = DMatrix::from_fn(20, 2, |_, _| rng.gen::<f64>() - 0.5);
        let v = DMatrix::from_fn(8, 2, |_, _| rng.gen::<f64>() - 0.5);
        let a = &u * v.transpose();
        let svd = thin_svd(&a);
        assert!(svd.singular_values[2] < 1e-12 * svd.singular_values[0]);
        assert!((reconstruct(&svd) - &a).amax() < 1e-12);
    }
}
