//! Step-size resampling of discrete transfer functions.
//!
//! Inverse Tustin map to the continuous plane followed by a Tustin map at
//! the new step composes into a single Möbius substitution in `z^{-1}`:
//! with `rho = dt_old / dt_new`,
//! `z^{-1} = ((1 - rho) + (1 + rho) w^{-1}) / ((1 + rho) + (1 - rho) w^{-1})`.
//! The map fixes `z = 1`, so DC gain is preserved exactly.

use crate::control::DiscreteTf;
use crate::error::{Error, Result};

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    out
}

fn poly_pow(p: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![1.0];
    for _ in 0..k {
        out = poly_mul(&out, p);
    }
    out
}

/// `sum_i c_i P(v)^i Q(v)^(m - i)` as a polynomial in `v` of degree <= m.
fn substitute(coeffs: &[f64], p: &[f64], q: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m + 1];
    for (i, &ci) in coeffs.iter().enumerate() {
        if ci == 0.0 {
            continue;
        }
        let term = poly_mul(&poly_pow(p, i), &poly_pow(q, m - i));
        for (k, &tk) in term.iter().enumerate() {
            out[k] += ci * tk;
        }
    }
    out
}

/// Resample `tf` to step size `dt_new`.
pub fn bilinear_resample(tf: &DiscreteTf, dt_new: f64) -> Result<DiscreteTf> {
    if tf.dt <= 0.0 || dt_new <= 0.0 {
        return Err(Error::config("step sizes must be positive"));
    }
    // Pole at z = -1 sits at the Tustin singularity: the continuous image
    // is at infinite frequency and cannot be re-warped.
    let den_at_minus_one: f64 = 1.0
        + tf.a
            .iter()
            .enumerate()
            .map(|(i, &ai)| ai * if i % 2 == 0 { -1.0 } else { 1.0 })
            .sum::<f64>();
    let den_scale: f64 = 1.0 + tf.a.iter().map(|v| v.abs()).sum::<f64>();
    if den_at_minus_one.abs() < 1e-9 * den_scale {
        return Err(Error::Numerical(
            "pole at z = -1 cannot be frequency-warped to a new step size".into(),
        ));
    }

    let rho = tf.dt / dt_new;
    // z^{-1} = P(w^{-1}) / Q(w^{-1})
    let p = [1.0 - rho, 1.0 + rho];
    let q = [1.0 + rho, 1.0 - rho];

    let mut den_full = vec![1.0];
    den_full.extend_from_slice(&tf.a);
    let m = tf.b.len().max(den_full.len()) - 1;

    let num = substitute(&tf.b, &p, &q, m);
    let den = substitute(&den_full, &p, &q, m);

    let max_den = den.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if den[0].abs() < 1e-12 * max_den {
        return Err(Error::Numerical(
            "resampled denominator is not monic-normalizable (pole maps to infinity)".into(),
        ));
    }
    let s = den[0];
    Ok(DiscreteTf {
        b: num.iter().map(|v| v / s).collect(),
        a: den[1..].iter().map(|v| v / s).collect(),
        dt: dt_new,
    })
}
