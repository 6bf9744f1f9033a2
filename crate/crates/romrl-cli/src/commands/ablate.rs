//! `ablate-linear`: compare the identified-linear-plus-residual model
//! against a residual-only model and a linear-only model under equal
//! training budgets, on a held-out episode.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use romrl::plants::Plant;
use romrl::reduction::project_set;
use romrl::romcore::{
    rom_loss_with_grad, simulate_open_loop, train_residual, AdamState, NodeRom, ResidualNet,
    TrainDataset, TrainMode,
};
use romrl::sysid::LinearRom;
use romrl::trainer::opinf_from_trajectories;
use romrl::{Error, Result};

use crate::artifacts;
use crate::commands::fit::build_basis;
use crate::config::LoadedConfig;

fn replay_loss(rom: &NodeRom, ds: &TrainDataset) -> Result<f64> {
    let horizon = ds.reference.len() - 1;
    match simulate_open_loop(
        rom,
        &ds.reference.states[0],
        &ds.actions,
        ds.reference.times[0],
        horizon,
    ) {
        Ok((traj, _)) => Ok(rom_loss_with_grad(&traj, &ds.reference)?.0),
        Err(Error::Divergence { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

pub fn run(cfg: &LoadedConfig, episode_dirs: &[PathBuf], out: &Path, epochs: usize) -> Result<()> {
    if episode_dirs.len() < 2 {
        return Err(Error::config(
            "ablate-linear needs at least two episodes (the last is held out)",
        ));
    }
    let plant = cfg.plant()?;
    let mut episodes = Vec::new();
    for dir in episode_dirs {
        episodes.push(artifacts::read_episode(dir, Some(&cfg.hash))?);
    }
    let basis = build_basis(cfg, &episodes, plant.snapshot_dim())?;

    let mut datasets = Vec::new();
    for ep in &episodes {
        datasets.push(TrainDataset {
            reference: project_set(&ep.snapshots, &basis)?,
            actions: ep.action_series(),
        });
    }
    let holdout = datasets.pop().unwrap();
    let train = datasets;
    let rom_dt = train[0].reference.times[1] - train[0].reference.times[0];
    let r = basis.r();

    let pairs: Vec<_> = train.iter().map(|d| (&d.reference, &d.actions)).collect();
    let linear = opinf_from_trajectories(&pairs, cfg.run.rom.lambda, vec![])?;
    let zero_linear = LinearRom {
        a: DMatrix::zeros(r, r),
        b: DVector::zeros(r),
        lambda: cfg.run.rom.lambda,
        provenance: vec![],
    };

    let make_residual = || {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ 0x5eed);
        ResidualNet::with_hidden(
            r,
            &cfg.run.rom.residual_hidden,
            cfg.run.rom.residual_scale,
            &mut rng,
        )
    };

    let mut variants: Vec<(&str, NodeRom, bool)> = vec![
        (
            "linear+residual",
            NodeRom { linear: linear.clone(), residual: Some(make_residual()), dt: rom_dt },
            true,
        ),
        (
            "residual-only",
            NodeRom { linear: zero_linear, residual: Some(make_residual()), dt: rom_dt },
            true,
        ),
        ("linear-only", NodeRom::linear_only(linear, rom_dt), false),
    ];

    let mut lines = vec!["variant,train_loss,holdout_loss".to_string()];
    println!("ablate-linear: {} training episodes, 1 held out, {epochs} epochs", train.len());
    for (name, rom, trainable) in &mut variants {
        if *trainable && epochs > 0 {
            let n_params = rom.residual.as_ref().unwrap().net.param_count();
            let mut adam = AdamState::new(n_params, cfg.run.rom.residual_lr);
            train_residual(rom, &train, TrainMode::Open, epochs, &mut adam)?;
        }
        let train_loss: f64 = train.iter().map(|d| replay_loss(rom, d)).sum::<Result<f64>>()?;
        let holdout_loss = replay_loss(rom, &holdout)?;
        println!("ablate-linear: {name}: train {train_loss}, holdout {holdout_loss}");
        lines.push(format!(
            "{name},{},{}",
            romrl::io::fmt_f64(train_loss),
            romrl::io::fmt_f64(holdout_loss)
        ));
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("ablate.csv"), lines.join("\n") + "\n")?;
    println!("ablate-linear: wrote {}", out.join("ablate.csv").display());
    Ok(())
}
