//! `episode`: deploy a controller under the configured schedule and
//! persist the recording.

use std::path::Path;

use romrl::plants::{run_episode, NoiseSpec, Plant, Schedule};
use romrl::Result;

use crate::artifacts;
use crate::commands::{plant_kind, resolve_controller};
use crate::config::LoadedConfig;

pub fn run(
    cfg: &LoadedConfig,
    out: &Path,
    uncontrolled: bool,
    seed_offset: u64,
    controller_path: Option<&Path>,
) -> Result<()> {
    let plant = cfg.plant()?;
    let controller = resolve_controller(cfg, &plant, controller_path)?;
    let mut schedule: Schedule = cfg.schedule()?;
    schedule.seed = schedule.seed.wrapping_add(seed_offset);
    if uncontrolled {
        schedule.control_on = f64::INFINITY;
        schedule.dither = NoiseSpec::Zero;
    }
    let record = run_episode(&plant, &controller, &schedule)?;
    let meta = artifacts::write_episode(out, &record, &cfg.hash, plant_kind(&plant))?;
    println!(
        "episode: {} samples, {} snapshots, dt = {}, diverged = {}",
        record.times.len(),
        record.snapshots.len(),
        plant.dt(),
        record.diverged
    );
    println!("episode: wrote {} (config {})", out.display(), &meta.config_hash[..12]);
    Ok(())
}
