//! `eval`: deploy a controller on the plant and report its cost, drag
//! statistics (wake), or H2 norms (convective).

use std::path::Path;

use romrl::metrics::drag_stats;
use romrl::plants::{run_episode, NoiseSpec, Plant, Schedule};
use romrl::trainer::plant_episode_cost;
use romrl::Result;

use crate::artifacts;
use crate::commands::{plant_kind, resolve_controller, train::plant_impulse};
use crate::config::LoadedConfig;

#[derive(serde::Serialize)]
struct EvalReport {
    config_hash: String,
    plant_kind: String,
    plant_cost: f64,
    diverged: bool,
    drag_mean: Option<f64>,
    drag_reduction: Option<f64>,
    h2_open: Option<f64>,
    h2_closed: Option<f64>,
    h2_ratio: Option<f64>,
}

pub fn run(cfg: &LoadedConfig, out: &Path, controller_path: Option<&Path>) -> Result<()> {
    let plant = cfg.plant()?;
    let controller = resolve_controller(cfg, &plant, controller_path)?;
    let schedule = cfg.schedule()?;
    let spec = cfg.run.cost.spec();

    let record = run_episode(&plant, &controller, &schedule)?;
    let plant_cost = plant_episode_cost(&plant, &record, &spec)?;
    let (w0, w1) = spec.window.bounds();

    let mut report = EvalReport {
        config_hash: cfg.hash.clone(),
        plant_kind: plant_kind(&plant).to_string(),
        plant_cost,
        diverged: record.diverged,
        drag_mean: None,
        drag_reduction: None,
        h2_open: None,
        h2_closed: None,
        h2_ratio: None,
    };

    if plant.drag_sensor().is_some() && !record.diverged {
        // uncontrolled baseline under the same noise realization
        let base_sched = Schedule {
            control_on: f64::INFINITY,
            dither: NoiseSpec::Zero,
            ..schedule.clone()
        };
        let baseline = run_episode(
            &plant,
            &romrl::control::Controller::Proportional { gain: 0.0 },
            &base_sched,
        )?;
        let base_mean = drag_stats(&baseline, (w0, w1), 1.0)?.mean;
        let stats = drag_stats(&record, (w0, w1), base_mean)?;
        report.drag_mean = Some(stats.mean);
        report.drag_reduction = Some(stats.reduction);
    }

    if plant_kind(&plant) == "convective" {
        let horizon = cfg
            .run
            .bank
            .as_ref()
            .map_or(4000, |b| b.impulse_horizon);
        let zero = romrl::control::Controller::Proportional { gain: 0.0 };
        let h_open = plant_impulse(&plant, &zero, horizon, false)?;
        let h_closed = plant_impulse(&plant, &controller, horizon, true)?;
        let dt_sqrt = plant.dt().sqrt();
        let h2_open = dt_sqrt * romrl::metrics::h2_norm_time(&h_open);
        let h2_closed = dt_sqrt * romrl::metrics::h2_norm_time(&h_closed);
        report.h2_open = Some(h2_open);
        report.h2_closed = Some(h2_closed);
        report.h2_ratio = Some(h2_closed / h2_open);
    }

    std::fs::create_dir_all(out)?;
    artifacts::write_episode(&out.join("episode"), &record, &cfg.hash, plant_kind(&plant))?;
    romrl::io::write_checkpoint(&out.join("metrics.json"), &report)?;
    println!("eval: plant cost {} (diverged = {})", plant_cost, record.diverged);
    if let (Some(m), Some(r)) = (report.drag_mean, report.drag_reduction) {
        println!("eval: mean drag {m}, drag reduction {r}");
    }
    if let Some(r) = report.h2_ratio {
        println!("eval: H2 closed/open = {r}");
    }
    println!("eval: wrote {}", out.display());
    Ok(())
}
