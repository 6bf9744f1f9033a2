//! `place-sensors`: jointly optimize a Gaussian feedback sensor position
//! and the controller on a fitted wake ROM.

use std::path::Path;

use romrl::control::{optimize_sensor_placement, PlacementConfig};
use romrl::romcore::Readout;
use romrl::plants::{Plant, PlantModel};
use romrl::reduction::{project, ReducedBasis};
use romrl::romcore::NodeRom;
use romrl::{Error, Result};

use crate::artifacts;
use crate::config::LoadedConfig;

const SENSOR_WIDTH: f64 = 0.3;
const EDGE_MARGIN: f64 = 0.05;

pub fn run(
    cfg: &LoadedConfig,
    rom_path: &Path,
    basis_path: &Path,
    out: &Path,
    iterations: usize,
    x0: f64,
    y0: f64,
) -> Result<()> {
    let plant = cfg.plant()?;
    let wake = match &plant {
        PlantModel::Wake(w) => w,
        PlantModel::Convective(_) => {
            return Err(Error::Unsupported(
                "sensor placement runs on the wake plant's measurement grid".into(),
            ))
        }
    };
    let rom: NodeRom = artifacts::read_model::<NodeRom>(rom_path)?.value;
    let basis: ReducedBasis = artifacts::read_model::<ReducedBasis>(basis_path)?.value;
    if basis.full_dim() != wake.embed_dim() || basis.r() != rom.dim() {
        return Err(Error::dimension(format!(
            "basis ({} x {}) does not match the plant grid ({}) and rom ({})",
            basis.full_dim(),
            basis.r(),
            wake.embed_dim(),
            rom.dim()
        )));
    }

    let spec = cfg.run.cost.spec();
    let (_, w1) = spec.window.bounds();
    let horizon = (w1 / rom.dt).round() as usize;
    let q0 = project(&wake.embed(&plant.initial_state()), &basis)?;
    let perf_rows = plant.performance_rows();
    let perf_row = perf_rows.rows(0, 1);
    let off_val = (perf_row * &basis.mean)[(0, 0)] - plant.performance_offset()[0];
    let performance = Readout {
        c: perf_row * &basis.modes,
        offset: nalgebra::DVector::from_element(1, off_val),
    };

    let place_cfg = PlacementConfig {
        xs: wake.xs.clone(),
        ys: wake.ys.clone(),
        modes: basis.modes.clone(),
        sigma_x: SENSOR_WIDTH,
        sigma_y: SENSOR_WIDTH,
        q0,
        horizon,
        cost: spec,
        performance,
        learning_rate: cfg.run.trainer.policy_lr,
        iterations,
        margin: EDGE_MARGIN,
    };
    let controller = cfg.run.controller.build(1, cfg.run.seed ^ 0xc0de, rom.dt)?;
    let outcome = optimize_sensor_placement(
        std::slice::from_ref(&rom),
        &controller,
        x0,
        y0,
        &place_cfg,
    )?;

    std::fs::create_dir_all(out)?;
    artifacts::write_model(&out.join("controller.json"), &outcome.controller, &cfg.hash, vec![])?;
    #[derive(serde::Serialize)]
    struct PlacementReport {
        config_hash: String,
        x0: f64,
        y0: f64,
        best_cost: f64,
        clamped: bool,
        cost_history: Vec<f64>,
    }
    romrl::io::write_checkpoint(
        &out.join("placement.json"),
        &PlacementReport {
            config_hash: cfg.hash.clone(),
            x0: outcome.x0,
            y0: outcome.y0,
            best_cost: outcome.best_cost,
            clamped: outcome.clamped,
            cost_history: outcome.cost_history.clone(),
        },
    )?;
    println!(
        "place-sensors: position ({}, {}), best cost {}, clamped = {}",
        outcome.x0, outcome.y0, outcome.best_cost, outcome.clamped
    );
    println!("place-sensors: wrote {}", out.display());
    Ok(())
}
