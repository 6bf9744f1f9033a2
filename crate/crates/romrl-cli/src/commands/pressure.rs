//! `pressure-map`: fit the nonlinear map from the reduced state to the
//! four body-sensor readings used as feedback surrogates.

use std::path::{Path, PathBuf};

use nalgebra::DVector;

use romrl::control::{pressure_map_eval, pressure_map_fit, PressureMapConfig, PRESSURE_OUTPUTS};
use romrl::reduction::{project_set, ReducedBasis};
use romrl::{Error, Result};

use crate::artifacts;
use crate::config::LoadedConfig;

const PRESSURE_SENSORS: [&str; PRESSURE_OUTPUTS] = ["u1", "u2", "u3", "u4"];

pub fn run(
    cfg: &LoadedConfig,
    episode_dirs: &[PathBuf],
    basis_path: &Path,
    out: &Path,
) -> Result<()> {
    let basis: ReducedBasis = artifacts::read_model::<ReducedBasis>(basis_path)?.value;
    let mut states: Vec<DVector<f64>> = Vec::new();
    let mut pressures: Vec<DVector<f64>> = Vec::new();
    let mut sources = Vec::new();
    for dir in episode_dirs {
        let ep = artifacts::read_episode(dir, Some(&cfg.hash))?;
        let reduced = project_set(&ep.snapshots, &basis)?;
        let stride = ep.meta.stride;
        let series: Vec<Vec<f64>> = PRESSURE_SENSORS
            .iter()
            .map(|name| ep.sensor_series(name))
            .collect::<Result<_>>()?;
        for (j, q) in reduced.states.iter().enumerate() {
            let k = j * stride;
            if k >= ep.times.len() {
                return Err(Error::Integrity(format!(
                    "{}: snapshot {} has no matching sensor sample",
                    dir.display(),
                    j
                )));
            }
            states.push(q.clone());
            pressures.push(DVector::from_fn(PRESSURE_OUTPUTS, |i, _| series[i][k]));
        }
        sources.push(ep.meta.snapshots_sha256.clone());
    }

    let section = cfg.run.pressure.clone();
    let map_cfg = match section {
        Some(p) => PressureMapConfig {
            hidden: p.hidden,
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            seed: cfg.run.seed,
        },
        None => PressureMapConfig { seed: cfg.run.seed, ..PressureMapConfig::default() },
    };
    let map = pressure_map_fit(&states, &pressures, &map_cfg)?;

    let mut mse = 0.0;
    for (q, p) in states.iter().zip(&pressures) {
        let (pred, _, _) = pressure_map_eval(&map, q);
        mse += (pred - p).norm_squared();
    }
    mse /= (states.len() * PRESSURE_OUTPUTS) as f64;

    std::fs::create_dir_all(out)?;
    artifacts::write_model(&out.join("pressure_map.json"), &map, &cfg.hash, sources)?;
    println!(
        "pressure-map: {} samples, final mse {}, wrote {}",
        states.len(),
        mse,
        out.display()
    );
    Ok(())
}
