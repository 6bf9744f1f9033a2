//! `train`: the adaptive ROM-RL loop (wake) or the frequency-bank
//! controller synthesis (convective, when a `[bank]` section is present).

use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use romrl::control::Controller;
use romrl::metrics::{drag_stats, h2_norm_time, nyquist_grid, transfer_from_impulse};
use romrl::plants::{run_episode, NoiseSpec, Plant, PlantModel, Schedule};
use romrl::trainer::{adaptive_rl_loop, build_frequency_bank, optimize_policy_on_rom};
use romrl::{Error, Result};

use crate::artifacts::{self, write_table};
use crate::commands::plant_kind;
use crate::config::LoadedConfig;

/// Discrete impulse response of the performance output to the noise
/// channel, with the feedback loop closed through `controller`.
pub fn plant_impulse(
    plant: &PlantModel,
    controller: &Controller,
    horizon: usize,
    closed: bool,
) -> Result<Vec<DMatrix<f64>>> {
    let dt = plant.dt();
    let mut pulse = vec![0.0; horizon];
    pulse[0] = 1.0 / dt;
    let schedule = Schedule {
        duration: horizon as f64 * dt,
        control_on: if closed { 0.0 } else { f64::INFINITY },
        noise: NoiseSpec::Sequence(pulse),
        dither: NoiseSpec::Zero,
        stride: horizon.max(1),
        seed: 0,
    };
    let record = run_episode(plant, controller, &schedule)?;
    if record.diverged {
        return Err(Error::Divergence {
            time: record.diverged_time.unwrap_or(0.0),
            context: "impulse-response episode diverged".into(),
        });
    }
    let name = plant.performance_names()[0].clone();
    let offset = plant.performance_offset()[0];
    let series = record.sensor_series(&name)?;
    Ok(series
        .iter()
        .map(|&v| DMatrix::from_element(1, 1, v - offset))
        .collect())
}

fn train_wake(cfg: &LoadedConfig, out: &Path) -> Result<()> {
    let plant = cfg.plant()?;
    let initial = cfg.controller(&plant)?;
    let train_cfg = cfg.train_config()?;
    let outcome = adaptive_rl_loop(&plant, &initial, &train_cfg)?;

    std::fs::create_dir_all(out)?;
    artifacts::write_model(&out.join("controller.json"), &outcome.controller, &cfg.hash, vec![])?;
    let mut audit = std::fs::File::create(out.join("audit.jsonl"))?;
    for line in &outcome.audit {
        writeln!(audit, "{line}")?;
    }

    // per-episode mean-drag table over the cost window
    let (w0, w1) = train_cfg.cost.window.bounds();
    let mut rows = Vec::new();
    for summary in &outcome.episodes {
        let ds = outcome
            .ledger
            .iter()
            .find(|d| d.episode_index == summary.episode);
        let drag_mean = match ds {
            Some(d) if !d.record.diverged => drag_stats(&d.record, (w0, w1), 1.0)?.mean,
            _ => f64::INFINITY,
        };
        rows.push(vec![
            summary.episode as f64,
            summary.plant_cost,
            drag_mean,
            summary.drag_reduction.unwrap_or(f64::NAN),
            if summary.dangerous { 1.0 } else { 0.0 },
        ]);
    }
    write_table(
        &out.join("episodes.csv"),
        &["episode", "plant_cost", "drag_mean", "drag_reduction", "dangerous"],
        &rows,
    )?;

    println!(
        "train: best plant cost {} at episode {} ({} episodes, stopped_early = {})",
        outcome.best_plant_cost,
        outcome.best_episode,
        outcome.episodes.len(),
        outcome.stopped_early
    );
    println!("train: wrote {}", out.display());
    Ok(())
}

fn train_convective(cfg: &LoadedConfig, out: &Path) -> Result<()> {
    let plant = cfg.plant()?;
    let (frequencies, bank_cfg) = cfg.bank_config()?;
    let bank_section = cfg.run.bank.as_ref().unwrap();
    // transfer functions are optimized at the ROM rate, then resampled
    let rom_dt = plant.dt() * bank_cfg.stride as f64;
    let initial = cfg.controller_with_dt(&plant, rom_dt)?;

    let bank = build_frequency_bank(&plant, &initial, &frequencies, &bank_cfg)?;
    let instances: Vec<_> = bank
        .entries
        .iter()
        .filter(|e| !e.low_signal)
        .map(|e| e.instance.clone())
        .collect();
    if instances.is_empty() {
        return Err(Error::Numerical(
            "every bank frequency was below the signal threshold".into(),
        ));
    }
    let report = optimize_policy_on_rom(
        &instances,
        &initial,
        &bank_cfg.cost,
        bank_section.policy_steps,
        bank_section.policy_lr,
        &[],
        None,
    )?;

    let deployed = match &report.controller {
        Controller::DiscreteTf(tf) => {
            Controller::DiscreteTf(romrl::control::bilinear_resample(tf, plant.dt())?)
        }
        other => other.clone(),
    };

    // plant-side verification: open- vs closed-loop noise-to-performance
    let horizon = bank_section.impulse_horizon;
    let zero = Controller::Proportional { gain: 0.0 };
    let h_open = plant_impulse(&plant, &zero, horizon, false)?;
    let h_closed = plant_impulse(&plant, &deployed, horizon, true)?;
    let omegas = nyquist_grid(plant.dt(), 200);
    let tf_open = transfer_from_impulse(&h_open, plant.dt(), &omegas)?;
    let tf_closed = transfer_from_impulse(&h_closed, plant.dt(), &omegas)?;
    let dt_sqrt = plant.dt().sqrt();
    let h2_open = dt_sqrt * h2_norm_time(&h_open);
    let h2_closed = dt_sqrt * h2_norm_time(&h_closed);

    std::fs::create_dir_all(out)?;
    artifacts::write_model(&out.join("controller.json"), &deployed, &cfg.hash, vec![])?;
    let rows: Vec<Vec<f64>> = omegas
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            vec![
                w,
                tf_open.values[i][(0, 0)].norm(),
                tf_closed.values[i][(0, 0)].norm(),
            ]
        })
        .collect();
    write_table(&out.join("bode.csv"), &["omega", "mag_open", "mag_closed"], &rows)?;
    #[derive(serde::Serialize)]
    struct H2Report {
        config_hash: String,
        h2_open: f64,
        h2_closed: f64,
        ratio: f64,
        rom_cost_initial: f64,
        rom_cost_best: f64,
        bank_size: usize,
        low_signal_frequencies: Vec<f64>,
    }
    romrl::io::write_checkpoint(
        &out.join("h2.json"),
        &H2Report {
            config_hash: cfg.hash.clone(),
            h2_open,
            h2_closed,
            ratio: h2_closed / h2_open,
            rom_cost_initial: report.cost_history.first().copied().unwrap_or(f64::NAN),
            rom_cost_best: report.best_cost,
            bank_size: instances.len(),
            low_signal_frequencies: bank
                .entries
                .iter()
                .filter(|e| e.low_signal)
                .map(|e| e.frequency)
                .collect(),
        },
    )?;
    println!(
        "train: H2 closed/open = {} ({} -> {}), rom cost {} -> {}",
        h2_closed / h2_open,
        h2_open,
        h2_closed,
        report.cost_history.first().copied().unwrap_or(f64::NAN),
        report.best_cost
    );
    println!("train: wrote {}", out.display());
    Ok(())
}

pub fn run(cfg: &LoadedConfig, out: &Path) -> Result<()> {
    let plant = cfg.plant()?;
    match (plant_kind(&plant), cfg.run.bank.is_some()) {
        (_, true) => train_convective(cfg, out),
        ("wake", false) => train_wake(cfg, out),
        (kind, false) => Err(Error::config(format!(
            "train on a {kind} plant needs a [bank] section or a wake plant"
        ))),
    }
}
