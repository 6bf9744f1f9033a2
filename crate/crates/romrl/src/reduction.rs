//! Low-dimensional coordinates: single- and two-stage POD bases and sparse
//! measurement operators, with projection and reconstruction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::SnapshotSet;
use crate::romcore::ReducedTrajectory;

/// Singular values below this fraction of the leading value are treated
/// as numerically zero.
pub const RANK_TOL: f64 = 1e-12;

/// Mean convention for the snapshot matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeanMode {
    /// Arithmetic mean of the snapshots being factorized.
    Arithmetic,
    /// Time-mean of the uncontrolled set, applied to both stages (wake
    /// POD convention).
    UncontrolledMean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReducedBasis {
    pub mean: DVector<f64>,
    /// `[V_{r,a} V_{r,c}]`, orthonormal columns.
    pub modes: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// Per-mode energy fraction within its own stage's spectrum.
    pub energy_fractions: Vec<f64>,
    pub r_a: usize,
    pub r_c: usize,
    /// True when the requested rank exceeded the numerical rank.
    pub truncated: bool,
    /// True when the control-induced stage carried near-zero energy.
    pub degenerate: bool,
}

impl ReducedBasis {
    pub fn r(&self) -> usize {
        self.r_a + self.r_c
    }

    pub fn full_dim(&self) -> usize {
        self.modes.nrows()
    }
}

fn mean_of(states: &[DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(states[0].len());
    for s in states {
        m += s;
    }
    m / states.len() as f64
}

fn centered_matrix(states: &[DVector<f64>], mean: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(mean.len(), states.len(), |i, j| states[j][i] - mean[i])
}

struct Stage {
    modes: DMatrix<f64>,
    singular_values: Vec<f64>,
    energy_fractions: Vec<f64>,
    truncated: bool,
}

fn pod_stage(centered: &DMatrix<f64>, r: usize) -> Result<Stage> {
    let svd = crate::linalg::thin_svd(centered);
    let sigma = svd.singular_values;
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let lead = sigma.first().copied().unwrap_or(0.0);
    let rank = sigma.iter().filter(|&&s| s > RANK_TOL * lead).count();
    let keep = r.min(rank.max(1)).min(sigma.len());
    let modes = svd.u.columns(0, keep).into_owned();
    let energy_fractions = sigma
        .iter()
        .take(keep)
        .map(|s| if total > 0.0 { s * s / total } else { 0.0 })
        .collect();
    Ok(Stage {
        modes,
        singular_values: sigma[..keep].to_vec(),
        energy_fractions,
        truncated: keep < r,
    })
}

/// Single-stage POD of mean-subtracted snapshots.
pub fn pod(snapshots: &SnapshotSet, r: usize) -> Result<ReducedBasis> {
    if r == 0 {
        return Err(Error::config("pod rank must be at least 1"));
    }
    if snapshots.len() < r {
        return Err(Error::config(format!(
            "need at least {r} snapshots, got {}",
            snapshots.len()
        )));
    }
    let mean = mean_of(&snapshots.states);
    let centered = centered_matrix(&snapshots.states, &mean);
    let stage = pod_stage(&centered, r)?;
    Ok(ReducedBasis {
        mean,
        r_a: stage.modes.ncols(),
        r_c: 0,
        modes: stage.modes,
        singular_values: stage.singular_values,
        energy_fractions: stage.energy_fractions,
        truncated: stage.truncated,
        degenerate: false,
    })
}

/// Two-stage POD: uncontrolled modes first, then modes of the
/// control-induced residual after removing their projections.
pub fn two_stage_pod(
    uncontrolled: &SnapshotSet,
    controlled: &SnapshotSet,
    r_a: usize,
    r_c: usize,
    mean_mode: MeanMode,
) -> Result<ReducedBasis> {
    if uncontrolled.is_empty() || controlled.is_empty() {
        return Err(Error::config("both snapshot sets must be nonempty"));
    }
    if r_a == 0 || r_c == 0 {
        return Err(Error::config("both stage ranks must be at least 1"));
    }
    if uncontrolled.dim() != controlled.dim() {
        return Err(Error::dimension("snapshot dimensions differ across sets"));
    }
    let mean = mean_of(&uncontrolled.states);
    let stage1 = pod_stage(&centered_matrix(&uncontrolled.states, &mean), r_a)?;

    let controlled_mean = match mean_mode {
        MeanMode::Arithmetic => mean_of(&controlled.states),
        MeanMode::UncontrolledMean => mean.clone(),
    };
    let mut resid = centered_matrix(&controlled.states, &controlled_mean);
    // Q_res = Q - V_a V_a^T Q
    let proj = &stage1.modes * (stage1.modes.tr_mul(&resid));
    resid -= proj;
    let stage2 = pod_stage(&resid, r_c)?;
    // guard against numerical leakage across stages
    let mut v_c = stage2.modes;
    let cross = stage1.modes.tr_mul(&v_c);
    v_c -= &stage1.modes * cross;
    for mut col in v_c.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
    let degenerate = match (stage1.singular_values.first(), stage2.singular_values.first()) {
        (Some(&s1), Some(&s2)) => s2 < 1e-8 * s1,
        _ => true,
    };

    let n = uncontrolled.dim();
    let ra = stage1.modes.ncols();
    let rc = v_c.ncols();
    let mut modes = DMatrix::zeros(n, ra + rc);
    modes.columns_mut(0, ra).copy_from(&stage1.modes);
    modes.columns_mut(ra, rc).copy_from(&v_c);
    let mut singular_values = stage1.singular_values.clone();
    singular_values.extend_from_slice(&stage2.singular_values);
    let mut energy_fractions = stage1.energy_fractions.clone();
    energy_fractions.extend_from_slice(&stage2.energy_fractions);
    Ok(ReducedBasis {
        mean,
        modes,
        singular_values,
        energy_fractions,
        r_a: ra,
        r_c: rc,
        truncated: stage1.truncated || stage2.truncated,
        degenerate,
    })
}

/// `q_r = V_r^T (q - mean)`.
pub fn project(q: &DVector<f64>, basis: &ReducedBasis) -> Result<DVector<f64>> {
    if q.len() != basis.full_dim() {
        return Err(Error::dimension(format!(
            "state length {} != basis dimension {}",
            q.len(),
            basis.full_dim()
        )));
    }
    Ok(basis.modes.tr_mul(&(q - &basis.mean)))
}

/// `q = mean + V_r q_r`.
pub fn reconstruct(q_r: &DVector<f64>, basis: &ReducedBasis) -> Result<DVector<f64>> {
    if q_r.len() != basis.r() {
        return Err(Error::dimension(format!(
            "reduced length {} != basis rank {}",
            q_r.len(),
            basis.r()
        )));
    }
    Ok(&basis.mean + &basis.modes * q_r)
}

/// Project a whole snapshot set onto the basis.
pub fn project_set(set: &SnapshotSet, basis: &ReducedBasis) -> Result<ReducedTrajectory> {
    let states = set
        .states
        .iter()
        .map(|q| project(q, basis))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReducedTrajectory {
        times: set.times.clone(),
        states,
    })
}

/// Sparse measurement operator: each row selects (or interpolates) full
/// state entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseMeasurement {
    /// Row entries as (full-state index, weight) pairs.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub labels: Vec<String>,
    /// Full-order state length.
    pub n: usize,
}

impl SparseMeasurement {
    /// Pure selection rows from indices.
    pub fn selection(indices: &[usize], labels: Vec<String>, n: usize) -> Result<Self> {
        if indices.len() != labels.len() {
            return Err(Error::dimension("label count != index count"));
        }
        for &i in indices {
            if i >= n {
                return Err(Error::config(format!("sensor index {i} out of bounds (n={n})")));
            }
        }
        Ok(SparseMeasurement {
            rows: indices.iter().map(|&i| vec![(i, 1.0)]).collect(),
            labels,
            n,
        })
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }
}

/// `q_r = C q`.
pub fn sparse_measure(q: &DVector<f64>, c: &SparseMeasurement) -> Result<DVector<f64>> {
    if q.len() != c.n {
        return Err(Error::dimension(format!(
            "state length {} != operator width {}",
            q.len(),
            c.n
        )));
    }
    let mut out = DVector::zeros(c.m());
    for (row, entries) in c.rows.iter().enumerate() {
        for &(i, w) in entries {
            if i >= c.n {
                return Err(Error::config(format!("sensor index {i} out of bounds")));
            }
            out[row] += w * q[i];
        }
    }
    Ok(out)
}

/// Measure a whole snapshot set.
pub fn measure_set(set: &SnapshotSet, c: &SparseMeasurement) -> Result<ReducedTrajectory> {
    let states = set
        .states
        .iter()
        .map(|q| sparse_measure(q, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReducedTrajectory {
        times: set.times.clone(),
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set_from(states: Vec<DVector<f64>>) -> SnapshotSet {
        let times = (0..states.len()).map(|k| k as f64 * 0.1).collect();
        SnapshotSet { times, states }
    }

    #[test]
    fn rank_one_snapshots_have_unit_energy_in_first_mode() {
        let profile = DVector::from_fn(30, |i, _| ((i as f64) * 0.3).sin());
        let states: Vec<DVector<f64>> =
            (0..10).map(|k| &profile * ((k as f64) - 4.5)).collect();
        let basis = pod(&set_from(states), 1).unwrap();
        assert!((basis.energy_fractions[0] - 1.0).abs() < 1e-12);
        assert!(!basis.truncated);
    }

    #[test]
    fn two_orthogonal_profiles_split_energy_four_to_one() {
        // amplitudes 2 and 1 alternating: sigma^2 ratio 4:1 -> 0.8 / 0.2
        let n = 40;
        let p1 = DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { 0.0 });
        let p2 = DVector::from_fn(n, |i, _| if i % 2 == 1 { 1.0 } else { 0.0 });
        let mut states = Vec::new();
        for k in 0..32 {
            let phase = k as f64 * std::f64::consts::PI / 4.0;
            states.push(&p1 * (2.0 * phase.cos()) + &p2 * phase.sin());
        }
        let basis = pod(&set_from(states), 2).unwrap();
        assert!((basis.energy_fractions[0] - 0.8).abs() < 1e-10);
        assert!((basis.energy_fractions[1] - 0.2).abs() < 1e-10);
    }

    #[test]
    fn full_rank_basis_reconstructs_snapshots() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let states: Vec<DVector<f64>> = (0..6)
            .map(|_| DVector::from_fn(9, |_, _| rng.gen::<f64>() - 0.5))
            .collect();
        let set = set_from(states.clone());
        let basis = pod(&set, 6).unwrap();
        for q in &states {
            let rec = reconstruct(&project(q, &basis).unwrap(), &basis).unwrap();
            let rel = (q - &rec).norm() / q.norm();
            assert!(rel < 1e-10, "rel {rel}");
        }
    }

    #[test]
    fn rank_request_above_numerical_rank_truncates_with_flag() {
        let profile = DVector::from_fn(12, |i, _| i as f64);
        let states: Vec<DVector<f64>> = (1..=5).map(|k| &profile * k as f64).collect();
        let basis = pod(&set_from(states), 4).unwrap();
        assert!(basis.truncated);
        assert_eq!(basis.r(), 1);
    }

    #[test]
    fn projection_of_mean_is_zero_and_modes_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let states: Vec<DVector<f64>> = (0..12)
            .map(|_| DVector::from_fn(15, |_, _| rng.gen::<f64>()))
            .collect();
        let basis = pod(&set_from(states), 4).unwrap();
        let qr = project(&basis.mean, &basis).unwrap();
        assert!(qr.norm() < 1e-12);
        // mean + 3 * column 2 -> unit vector scaled by 3 in slot 2
        let q = &basis.mean + 3.0 * basis.modes.column(2);
        let qr = project(&q, &basis).unwrap();
        for i in 0..basis.r() {
            let expect = if i == 2 { 3.0 } else { 0.0 };
            assert!((qr[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn projection_is_a_contraction_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states: Vec<DVector<f64>> = (0..10)
            .map(|_| DVector::from_fn(20, |_, _| rng.gen::<f64>()))
            .collect();
        let basis = pod(&set_from(states), 3).unwrap();
        let q = DVector::from_fn(20, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let rec = reconstruct(&project(&q, &basis).unwrap(), &basis).unwrap();
        assert!((&q - &rec).norm() <= (&q - &basis.mean).norm() + 1e-12);
        let rec2 = reconstruct(&project(&rec, &basis).unwrap(), &basis).unwrap();
        assert!((rec - rec2).norm() < 1e-12);
    }

    fn random_sets(seed: u64) -> (SnapshotSet, SnapshotSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 25;
        // uncontrolled: 3 smooth modes; controlled: those plus 2 extra
        let modes: Vec<DVector<f64>> = (0..5)
            .map(|m| DVector::from_fn(n, |i, _| ((i as f64 + 1.0) * (m as f64 + 0.7)).sin()))
            .collect();
        let unc: Vec<DVector<f64>> = (0..20)
            .map(|_| {
                let mut q = DVector::zeros(n);
                for m in modes.iter().take(3) {
                    q += m * (rng.gen::<f64>() - 0.5);
                }
                q
            })
            .collect();
        let con: Vec<DVector<f64>> = (0..20)
            .map(|_| {
                let mut q = DVector::zeros(n);
                for m in &modes {
                    q += m * (rng.gen::<f64>() - 0.5);
                }
                q
            })
            .collect();
        (set_from(unc), set_from(con))
    }

    #[test]
    fn two_stage_basis_is_orthonormal_with_orthogonal_stages() {
        let (unc, con) = random_sets(4);
        let basis = two_stage_pod(&unc, &con, 3, 2, MeanMode::Arithmetic).unwrap();
        let gram = basis.modes.tr_mul(&basis.modes);
        let eye = DMatrix::identity(basis.r(), basis.r());
        assert!((gram - eye).amax() < 1e-10);
        let va = basis.modes.columns(0, basis.r_a);
        let vc = basis.modes.columns(basis.r_a, basis.r_c);
        assert!((va.tr_mul(&vc)).amax() < 1e-10);
        assert!(!basis.degenerate);
    }

    #[test]
    fn identical_sets_make_stage_two_degenerate() {
        let (unc, _) = random_sets(5);
        let basis = two_stage_pod(&unc, &unc, 3, 2, MeanMode::Arithmetic).unwrap();
        assert!(basis.degenerate);
        let s1 = basis.singular_values[0];
        let s2 = basis.singular_values[basis.r_a];
        assert!(s2 < 1e-8 * s1);
    }

    #[test]
    fn energy_fractions_are_monotone_within_stage() {
        let (unc, con) = random_sets(6);
        let basis = two_stage_pod(&unc, &con, 3, 2, MeanMode::Arithmetic).unwrap();
        for w in basis.energy_fractions[..basis.r_a].windows(2) {
            assert!(w[0] >= w[1] - 1e-15);
        }
        for w in basis.energy_fractions[basis.r_a..].windows(2) {
            assert!(w[0] >= w[1] - 1e-15);
        }
        for &f in &basis.energy_fractions {
            assert!((0.0..=1.0 + 1e-15).contains(&f));
        }
    }

    #[test]
    fn sparse_selection_reads_expected_entries() {
        let c = SparseMeasurement::selection(
            &[0, 3, 7],
            vec!["s0".into(), "s3".into(), "s7".into()],
            10,
        )
        .unwrap();
        let ones = DVector::from_element(10, 1.0);
        assert_eq!(sparse_measure(&ones, &c).unwrap(), DVector::from_element(3, 1.0));
        let q = DVector::from_fn(10, |i, _| i as f64);
        let out = sparse_measure(&q, &c).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 3.0, 7.0]);
        assert_eq!(
            sparse_measure(&DVector::zeros(10), &c).unwrap(),
            DVector::zeros(3)
        );
    }

    #[test]
    fn sparse_selection_rejects_out_of_bounds() {
        assert!(SparseMeasurement::selection(&[11], vec!["x".into()], 10).is_err());
    }
}
