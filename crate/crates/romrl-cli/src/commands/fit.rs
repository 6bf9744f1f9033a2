//! `fit`: identify a reduced basis and a (residual-corrected) ROM from
//! recorded episodes.  Inputs are hash-verified against the current
//! config; a mismatch is refused as an integrity error.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use romrl::io::SnapshotSet;
use romrl::plants::Plant;
use romrl::reduction::{project_set, two_stage_pod, MeanMode, ReducedBasis};
use romrl::romcore::{
    train_residual, AdamState, NodeRom, ResidualNet, TrainDataset, TrainMode,
};
use romrl::trainer::{identity_basis, opinf_from_trajectories, BasisMode};
use romrl::{Error, Result};

use crate::artifacts::{self, StoredEpisode};
use crate::config::LoadedConfig;

fn pooled(sets: &[&SnapshotSet]) -> SnapshotSet {
    let mut times = Vec::new();
    let mut states = Vec::new();
    for set in sets {
        times.extend_from_slice(&set.times);
        states.extend_from_slice(&set.states);
    }
    SnapshotSet { times, states }
}

pub fn build_basis(
    cfg: &LoadedConfig,
    episodes: &[StoredEpisode],
    snapshot_dim: usize,
) -> Result<ReducedBasis> {
    match cfg.run.rom.basis_mode()? {
        BasisMode::Identity => Ok(identity_basis(snapshot_dim)),
        BasisMode::TwoStagePod { r_a, r_c } => {
            let unc: Vec<&SnapshotSet> = episodes
                .iter()
                .filter(|e| e.uncontrolled())
                .map(|e| &e.snapshots)
                .collect();
            let con: Vec<&SnapshotSet> = episodes
                .iter()
                .filter(|e| !e.uncontrolled())
                .map(|e| &e.snapshots)
                .collect();
            if unc.is_empty() || con.is_empty() {
                return Err(Error::config(
                    "two-stage POD needs at least one uncontrolled and one controlled episode",
                ));
            }
            two_stage_pod(&pooled(&unc), &pooled(&con), r_a, r_c, MeanMode::Arithmetic)
        }
    }
}

pub fn run(cfg: &LoadedConfig, episode_dirs: &[std::path::PathBuf], out: &Path) -> Result<()> {
    let plant = cfg.plant()?;
    let mut episodes = Vec::with_capacity(episode_dirs.len());
    for dir in episode_dirs {
        let ep = artifacts::read_episode(dir, Some(&cfg.hash))?;
        if ep.meta.diverged {
            return Err(Error::Integrity(format!(
                "{}: refusing to fit on a diverged episode",
                dir.display()
            )));
        }
        episodes.push(ep);
    }
    let basis = build_basis(cfg, &episodes, plant.snapshot_dim())?;

    let mut trajs = Vec::with_capacity(episodes.len());
    for ep in &episodes {
        trajs.push((project_set(&ep.snapshots, &basis)?, ep.action_series()));
    }
    let pairs: Vec<_> = trajs.iter().map(|(t, a)| (t, a)).collect();
    let sources: Vec<String> = episodes
        .iter()
        .map(|e| e.meta.snapshots_sha256.clone())
        .collect();
    let linear = opinf_from_trajectories(&pairs, cfg.run.rom.lambda, sources.clone())?;

    let first = &trajs[0].0;
    if first.len() < 2 {
        return Err(Error::config("episode too short for a ROM time step"));
    }
    let rom_dt = first.times[1] - first.times[0];
    let r = basis.r();
    let mut rom = if cfg.run.rom.residual {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ 0x5eed);
        NodeRom {
            linear,
            residual: Some(ResidualNet::with_hidden(
                r,
                &cfg.run.rom.residual_hidden,
                cfg.run.rom.residual_scale,
                &mut rng,
            )),
            dt: rom_dt,
        }
    } else {
        NodeRom::linear_only(linear, rom_dt)
    };

    if cfg.run.rom.residual && cfg.run.rom.fit_epochs > 0 {
        let datasets: Vec<TrainDataset> = trajs
            .iter()
            .map(|(t, a)| TrainDataset { reference: t.clone(), actions: a.clone() })
            .collect();
        let n_params = rom.residual.as_ref().unwrap().net.param_count();
        let mut adam = AdamState::new(n_params, cfg.run.rom.residual_lr);
        let report = train_residual(
            &mut rom,
            &datasets,
            TrainMode::Open,
            cfg.run.rom.fit_epochs,
            &mut adam,
        )?;
        println!(
            "fit: residual loss {} -> {} over {} epochs",
            report.loss_history.first().copied().unwrap_or(f64::NAN),
            report.loss_history.last().copied().unwrap_or(f64::NAN),
            report.loss_history.len()
        );
    }

    std::fs::create_dir_all(out)?;
    artifacts::write_model(&out.join("basis.json"), &basis, &cfg.hash, sources.clone())?;
    artifacts::write_model(&out.join("rom.json"), &rom, &cfg.hash, sources)?;
    println!(
        "fit: basis rank {} (r_a = {}, r_c = {}), rom dt = {}, wrote {}",
        basis.r(),
        basis.r_a,
        basis.r_c,
        rom_dt,
        out.display()
    );
    Ok(())
}
