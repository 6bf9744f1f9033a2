//! Evaluation metrics: transfer functions from impulse data, H2 norms,
//! drag statistics, and perturbation-energy / model-fit summaries.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::plants::EpisodeRecord;
use crate::romcore::{trapezoid_weight, ReducedTrajectory};

/// Frequency response sampled on a grid, with provenance of the impulse
/// series it was built from.
#[derive(Debug, Clone)]
pub struct TransferFunction {
    pub omegas: Vec<f64>,
    /// One `p x m` complex block per frequency.
    pub values: Vec<DMatrix<Complex<f64>>>,
    pub dt: f64,
    pub source_len: usize,
    /// True when the impulse tail had not decayed below `1e-8` of its
    /// peak, so the response is truncated.
    pub tail_warning: bool,
}

/// Discrete-time frequency response `G(omega) = sum_k h[k] e^{-i omega k dt}`.
pub fn transfer_from_impulse(
    h: &[DMatrix<f64>],
    dt: f64,
    omegas: &[f64],
) -> Result<TransferFunction> {
    if h.is_empty() {
        return Err(Error::config("empty impulse response"));
    }
    if dt <= 0.0 {
        return Err(Error::config("dt must be positive"));
    }
    let shape = h[0].shape();
    if h.iter().any(|b| b.shape() != shape) {
        return Err(Error::dimension("inconsistent impulse block shapes"));
    }
    let peak = h.iter().map(|b| b.amax()).fold(0.0f64, f64::max);
    let tail = h.last().unwrap().amax();
    let tail_warning = peak > 0.0 && tail > 1e-8 * peak;
    let mut values = Vec::with_capacity(omegas.len());
    for &omega in omegas {
        let mut g = DMatrix::from_element(shape.0, shape.1, Complex::new(0.0, 0.0));
        for (k, block) in h.iter().enumerate() {
            let phase = Complex::from_polar(1.0, -omega * k as f64 * dt);
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    g[(i, j)] += phase * block[(i, j)];
                }
            }
        }
        values.push(g);
    }
    Ok(TransferFunction {
        omegas: omegas.to_vec(),
        values,
        dt,
        source_len: h.len(),
        tail_warning,
    })
}

/// Uniform frequency grid covering one Nyquist band `[0, pi/dt]`.
pub fn nyquist_grid(dt: f64, n: usize) -> Vec<f64> {
    let top = std::f64::consts::PI / dt;
    (0..n).map(|k| top * k as f64 / (n - 1) as f64).collect()
}

/// Time-domain H2 norm `sqrt(sum_k ||h[k]||_F^2)`.
pub fn h2_norm_time(h: &[DMatrix<f64>]) -> f64 {
    h.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
}

/// Frequency-domain H2 norm `sqrt(dt/(2 pi) * int ||G||_F^2 d omega)` over
/// the full band, evaluated by trapezoid on `[0, pi/dt]` and doubled by
/// conjugate symmetry.  Matches [`h2_norm_time`] by Parseval.
pub fn h2_norm_freq(tf: &TransferFunction) -> Result<f64> {
    let n = tf.omegas.len();
    if n < 2 {
        return Err(Error::config("H2 quadrature needs at least 2 frequencies"));
    }
    let top = std::f64::consts::PI / tf.dt;
    if tf.omegas[0].abs() > 1e-12 || (tf.omegas[n - 1] - top).abs() > 1e-9 * top {
        return Err(Error::config(
            "H2 quadrature requires a grid spanning [0, pi/dt]",
        ));
    }
    let mut integral = 0.0;
    for k in 0..n {
        let w = trapezoid_weight(&tf.omegas, k);
        integral += w * tf.values[k].norm_squared();
    }
    Ok((tf.dt / std::f64::consts::PI * integral).sqrt())
}

#[derive(Debug, Clone, Copy)]
pub struct DragStats {
    /// Mean drag over the window (infinite for a diverged episode).
    pub mean: f64,
    /// `1 - mean / baseline_mean`; negative infinity for a diverged
    /// episode so it always classifies as dangerous.
    pub reduction: f64,
}

/// Mean drag and relative reduction over `window = (t0, t1)`.  The window
/// must not overlap the uncontrolled transient of a controlled episode.
pub fn drag_stats(
    record: &EpisodeRecord,
    window: (f64, f64),
    baseline_mean: f64,
) -> Result<DragStats> {
    if baseline_mean <= 0.0 {
        return Err(Error::config("baseline drag mean must be positive"));
    }
    if window.1 <= window.0 {
        return Err(Error::config("empty drag window"));
    }
    if record.diverged {
        return Ok(DragStats {
            mean: f64::INFINITY,
            reduction: f64::NEG_INFINITY,
        });
    }
    let t_end = *record.times.last().ok_or_else(|| Error::config("empty episode"))?;
    if record.control_on <= t_end && window.0 + 1e-9 < record.control_on {
        return Err(Error::config(format!(
            "drag window starts at {} before control-on at {}",
            window.0, record.control_on
        )));
    }
    let cd = record.sensor_series("c_d")?;
    let mut sum = 0.0;
    let mut wsum = 0.0;
    let idx: Vec<usize> = record
        .times
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= window.0 - 1e-9 && t <= window.1 + 1e-9)
        .map(|(k, _)| k)
        .collect();
    if idx.len() < 2 {
        return Err(Error::config("drag window contains fewer than 2 samples"));
    }
    let wtimes: Vec<f64> = idx.iter().map(|&k| record.times[k]).collect();
    for (j, &k) in idx.iter().enumerate() {
        let w = trapezoid_weight(&wtimes, j);
        sum += w * cd[k];
        wsum += w;
    }
    let mean = sum / wsum;
    Ok(DragStats {
        mean,
        reduction: 1.0 - mean / baseline_mean,
    })
}

/// Per-sample perturbation energy `||q_k||^2` of a snapshot sequence.
pub fn perturbation_energy(states: &[DVector<f64>]) -> Vec<f64> {
    states.iter().map(|q| q.norm_squared()).collect()
}

/// Trapezoid-integrated squared prediction error normalized by the
/// reference energy, both over the common time grid.
pub fn normalized_linear_loss(
    prediction: &ReducedTrajectory,
    reference: &ReducedTrajectory,
) -> Result<f64> {
    if prediction.times.len() != reference.times.len() {
        return Err(Error::dimension("prediction/reference length mismatch"));
    }
    let mut err = 0.0;
    let mut energy = 0.0;
    for k in 0..reference.times.len() {
        if (prediction.times[k] - reference.times[k]).abs() > 1e-9 {
            return Err(Error::config("prediction/reference time grids differ"));
        }
        let w = trapezoid_weight(&reference.times, k);
        err += w * (&prediction.states[k] - &reference.states[k]).norm_squared();
        energy += w * reference.states[k].norm_squared();
    }
    if energy <= 0.0 {
        return Err(Error::Numerical("reference trajectory has zero energy".into()));
    }
    Ok(err / energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::Controller;
    use crate::plants::{run_episode, NoiseSpec, PlantModel, Schedule, WakePlant, WakePlantConfig};
    #[allow(unused_imports)]
    use crate::plants::Plant;

    fn scalar_blocks(vals: &[f64]) -> Vec<DMatrix<f64>> {
        vals.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect()
    }

    #[test]
    fn dc_gain_is_the_impulse_sum() {
        let h = scalar_blocks(&[0.0, 1.0, 0.5, 0.25, 0.125]);
        let tf = transfer_from_impulse(&h, 0.5, &[0.0]).unwrap();
        assert!((tf.values[0][(0, 0)].re - 1.875).abs() < 1e-14);
        assert!(tf.values[0][(0, 0)].im.abs() < 1e-14);
    }

    #[test]
    fn single_delay_tap_has_unit_magnitude_and_linear_phase() {
        // h = delta at k=1: G = e^{-i omega dt}
        let h = scalar_blocks(&[0.0, 1.0, 0.0]);
        let omega = 0.7;
        let dt = 0.3;
        let tf = transfer_from_impulse(&h, dt, &[omega]).unwrap();
        let g = tf.values[0][(0, 0)];
        assert!((g.norm() - 1.0).abs() < 1e-14);
        assert!((g.arg() + omega * dt).abs() < 1e-14);
    }

    #[test]
    fn tail_warning_fires_only_for_undecayed_responses() {
        let decayed = scalar_blocks(&[1.0, 0.5, 1e-12]);
        let truncated = scalar_blocks(&[1.0, 0.5, 0.25]);
        assert!(!transfer_from_impulse(&decayed, 1.0, &[0.0]).unwrap().tail_warning);
        assert!(transfer_from_impulse(&truncated, 1.0, &[0.0]).unwrap().tail_warning);
    }

    #[test]
    fn h2_freq_matches_parseval_sum_for_geometric_impulse() {
        // h[k] = a^k: sum h^2 = 1/(1-a^2)
        let a: f64 = 0.8;
        let h = scalar_blocks(&(0..400).map(|k| a.powi(k)).collect::<Vec<_>>());
        let time = h2_norm_time(&h);
        let exact = (1.0 / (1.0 - a * a)).sqrt();
        assert!((time - exact).abs() < 1e-12, "time-domain {time} vs {exact}");
        let dt = 0.25;
        let tf = transfer_from_impulse(&h, dt, &nyquist_grid(dt, 4001)).unwrap();
        let freq = h2_norm_freq(&tf).unwrap();
        assert!(
            (freq - time).abs() < 1e-6 * time,
            "freq {freq} vs time {time}"
        );
    }

    #[test]
    fn h2_rejects_partial_frequency_grids() {
        let h = scalar_blocks(&[1.0, 0.5]);
        let tf = transfer_from_impulse(&h, 1.0, &[0.0, 1.0]).unwrap();
        assert!(h2_norm_freq(&tf).is_err());
    }

    #[test]
    fn perturbation_energy_is_squared_norm() {
        let states = vec![DVector::from_row_slice(&[3.0, 4.0]), DVector::zeros(2)];
        assert_eq!(perturbation_energy(&states), vec![25.0, 0.0]);
    }

    #[test]
    fn normalized_loss_zero_for_exact_and_one_for_zero_prediction() {
        let times = vec![0.0, 0.5, 1.0];
        let reference = ReducedTrajectory {
            times: times.clone(),
            states: vec![
                DVector::from_row_slice(&[1.0, 0.0]),
                DVector::from_row_slice(&[0.5, 0.5]),
                DVector::from_row_slice(&[0.0, 1.0]),
            ],
        };
        let exact = normalized_linear_loss(&reference, &reference).unwrap();
        assert_eq!(exact, 0.0);
        let zero = ReducedTrajectory {
            times,
            states: vec![DVector::zeros(2); 3],
        };
        assert!((normalized_linear_loss(&zero, &reference).unwrap() - 1.0).abs() < 1e-14);
    }

    fn wake_record(control_on: f64, gain: f64, duration: f64) -> EpisodeRecord {
        let plant = PlantModel::Wake(WakePlant::new(WakePlantConfig::default()).unwrap());
        run_episode(
            &plant,
            &Controller::Proportional { gain },
            &Schedule {
                duration,
                control_on,
                noise: NoiseSpec::Zero,
                dither: NoiseSpec::Zero,
                stride: 5,
                seed: 0,
            },
        )
        .unwrap()
    }

    #[test]
    fn drag_stats_reduction_zero_against_own_baseline() {
        let rec = wake_record(1e9, 0.0, 120.0);
        let base = drag_stats(&rec, (60.0, 120.0), 1.0).unwrap();
        let stats = drag_stats(&rec, (60.0, 120.0), base.mean).unwrap();
        assert!(stats.reduction.abs() < 1e-14);
    }

    #[test]
    fn drag_stats_rejects_window_before_control_on() {
        let rec = wake_record(50.0, 3.0, 120.0);
        assert!(drag_stats(&rec, (30.0, 120.0), 1.0).is_err());
        assert!(drag_stats(&rec, (60.0, 120.0), 1.0).is_ok());
    }

    #[test]
    fn diverged_episode_gets_sentinel_reduction() {
        let rec = wake_record(0.0, -4000.0, 200.0);
        assert!(rec.diverged);
        let stats = drag_stats(&rec, (10.0, 20.0), 1.0).unwrap();
        assert_eq!(stats.reduction, f64::NEG_INFINITY);
        assert!(stats.mean.is_infinite());
    }

    #[test]
    fn opposition_control_shows_positive_reduction() {
        let base = wake_record(1e9, 0.0, 150.0);
        let base_mean = drag_stats(&base, (90.0, 150.0), 1.0).unwrap().mean;
        let ctl = wake_record(30.0, 3.0, 150.0);
        let stats = drag_stats(&ctl, (90.0, 150.0), base_mean).unwrap();
        assert!(stats.reduction > 0.02, "reduction {}", stats.reduction);
    }
}
