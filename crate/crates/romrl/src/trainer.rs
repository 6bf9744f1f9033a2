//! Adaptive ROM-based RL outer loop: episode collection, dataset
//! curation, ROM updates with a frozen linear part, differentiable policy
//! updates, convergence checks, stabilized-training safeguards, and the
//! frequency-bank workflow for the convective case.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{
    cost_j1_with_grad, cost_j2_with_grad, penalty_slope, repulsive_penalty_with_grad,
    wake_cost_with_grad, Controller, CostSpec, NeuralPolicy, SampleGrid, SAMPLE_GRID_SIDE,
};
use crate::error::{Error, Result};
use crate::io::SnapshotSet;
use crate::metrics::drag_stats;
use crate::plants::{run_episode, EpisodeRecord, Plant, Schedule};
use crate::reduction::{project_set, two_stage_pod, MeanMode, ReducedBasis};
use crate::romcore::{
    adam_update, backward_closed_loop, backward_open_loop, rom_loss_with_grad,
    simulate_closed_loop, simulate_open_loop, AdamState, NodeRom, Readout, ReducedTrajectory,
    ResidualNet, ActionSeries,
};
use crate::sysid::{estimate_derivatives, opinf_fit, LinearRom};

/// Cost charged to a rollout that left the ROM's domain of validity; it
/// carries no gradient.
pub const DIVERGED_COST: f64 = 1e6;

/// How the reduced basis is built from snapshot data.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum BasisMode {
    /// No reduction: reduced state = snapshot (small plants and oracles).
    Identity,
    /// Two-stage POD: `r_a` uncontrolled modes plus `r_c` control modes.
    TwoStagePod { r_a: usize, r_c: usize },
}

/// Outer-loop budgets and switches.  The `*_first` budgets apply to the
/// initial episode, the `*_later` budgets to every subsequent one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Outer iterations K.
    pub iterations: usize,
    pub rom_epochs_first: usize,
    pub rom_epochs_later: usize,
    pub policy_steps_first: usize,
    pub policy_steps_later: usize,
    /// Mixed schedule: this many initial episodes train the residual in
    /// open loop; the rest replay the recorded controller in closed loop.
    pub open_loop_episodes: usize,
    pub convergence_fraction: f64,
    pub dataset_cap: usize,
    pub warm_start: bool,
    /// Stabilized training: exclude dangerous datasets, warm-start from
    /// the last stable policy, add the repulsive penalty.
    pub stabilization: bool,
    /// Collect an uncontrolled baseline episode before the loop (needed
    /// for two-stage POD and drag baselines; off for unstable oracles).
    pub collect_uncontrolled: bool,
    pub basis: BasisMode,
    /// OpInf ridge parameter.
    pub lambda: f64,
    pub residual: bool,
    pub residual_scale: f64,
    pub residual_hidden: Vec<usize>,
    pub residual_lr: f64,
    pub policy_lr: f64,
    pub episode: Schedule,
    pub cost: CostSpec,
    /// Controller-input bounds of the repulsion sample grid
    /// (`[lo1, lo2]`, `[hi1, hi2]`), for neural policies.
    pub repulsion_bounds: Option<([f64; 2], [f64; 2])>,
}

impl TrainConfig {
    /// Reference budgets (full-scale); desk-scale runs shrink these.
    pub fn new(episode: Schedule, cost: CostSpec, basis: BasisMode) -> Self {
        TrainConfig {
            iterations: 4,
            rom_epochs_first: 2000,
            rom_epochs_later: 500,
            policy_steps_first: 150,
            policy_steps_later: 50,
            open_loop_episodes: 2,
            convergence_fraction: 0.15,
            dataset_cap: 6,
            warm_start: true,
            stabilization: false,
            collect_uncontrolled: true,
            basis,
            lambda: 1e-8,
            residual: true,
            residual_scale: 3e-4,
            residual_hidden: vec![128, 128, 128],
            residual_lr: 1e-3,
            policy_lr: 2e-2,
            episode,
            cost,
            repulsion_bounds: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_cap < 2 {
            return Err(Error::config("dataset cap must be at least 2"));
        }
        if !(self.convergence_fraction > 0.0 && self.convergence_fraction < 1.0) {
            return Err(Error::config("convergence fraction must be in (0, 1)"));
        }
        if self.lambda < 0.0 {
            return Err(Error::config("ridge parameter must be nonnegative"));
        }
        if self.residual && (self.residual_scale <= 0.0 || self.residual_hidden.is_empty()) {
            return Err(Error::config("residual needs a positive scale and hidden layers"));
        }
        self.cost.validate()
    }
}

/// One ledger entry: an episode with recomputed summaries.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub record: EpisodeRecord,
    /// Reduced trajectory in the current basis (empty until one exists).
    pub reduced: ReducedTrajectory,
    pub actions: ActionSeries,
    pub plant_cost: f64,
    pub drag_reduction: Option<f64>,
    pub dangerous: bool,
    pub episode_index: usize,
    pub controller: Option<Controller>,
    pub uncontrolled: bool,
}

/// Danger rule: a dataset is dangerous when its episode diverged or its
/// drag reduction fell strictly below `gamma_crit`.
pub fn danger_classify(diverged: bool, drag_reduction: Option<f64>, gamma_crit: f64) -> bool {
    if diverged {
        return true;
    }
    matches!(drag_reduction, Some(r) if r < gamma_crit)
}

/// Stop when the relative improvement `(prev - cur)/prev` drops below
/// `fraction`; non-improving histories stop as well.
pub fn convergence_check(history: &[f64], fraction: f64) -> bool {
    if history.len() < 2 {
        return false;
    }
    let prev = history[history.len() - 2];
    let cur = history[history.len() - 1];
    if prev <= 0.0 {
        return true;
    }
    (prev - cur) / prev < fraction
}

/// Curate the training ensemble: the uncontrolled set, the previous
/// episode, and the four best-performing sets, de-duplicated and capped.
/// With stabilization on, dangerous sets are excluded and backfilled with
/// the most recent stable history.
pub fn select_datasets(ledger: &[Dataset], cap: usize, stabilization: bool) -> Vec<usize> {
    let eligible: Vec<usize> = (0..ledger.len())
        .filter(|&i| !(stabilization && ledger[i].dangerous))
        .collect();
    let mut picked: Vec<usize> = Vec::new();
    let push = |i: usize, picked: &mut Vec<usize>| {
        if picked.len() < cap && !picked.contains(&i) {
            picked.push(i);
        }
    };
    if let Some(&i) = eligible.iter().find(|&&i| ledger[i].uncontrolled) {
        push(i, &mut picked);
    }
    if let Some(&i) = eligible.iter().max_by_key(|&&i| ledger[i].episode_index) {
        push(i, &mut picked);
    }
    let mut by_cost: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|&i| !ledger[i].uncontrolled)
        .collect();
    by_cost.sort_by(|&a, &b| {
        ledger[a]
            .plant_cost
            .partial_cmp(&ledger[b].plant_cost)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in by_cost.iter().take(4) {
        push(i, &mut picked);
    }
    // backfill with the most recent stable history
    let mut recent: Vec<usize> = eligible.clone();
    recent.sort_by_key(|&i| std::cmp::Reverse(ledger[i].episode_index));
    for &i in &recent {
        push(i, &mut picked);
    }
    picked.sort_unstable();
    picked
}

/// One differentiable rollout problem on a ROM.
#[derive(Debug, Clone)]
pub struct RomInstance {
    pub rom: NodeRom,
    pub q0: DVector<f64>,
    pub t0: f64,
    pub horizon: usize,
    pub feedback: Readout,
    pub performance: Readout,
}

#[derive(Debug, Clone)]
pub struct PolicyOptReport {
    pub controller: Controller,
    pub best_cost: f64,
    /// ROM cost at the initial parameters and after each step.
    pub cost_history: Vec<f64>,
}

/// ROM cost of one rollout plus the flat controller-parameter gradient.
/// A diverged rollout charges [`DIVERGED_COST`] with zero gradient.
fn instance_cost_grad(
    inst: &RomInstance,
    controller: &Controller,
    spec: &CostSpec,
) -> Result<(f64, Option<DVector<f64>>)> {
    let n_perf = inst.performance.c.nrows();
    let (traj, tape) = match simulate_closed_loop(
        &inst.rom,
        &inst.q0,
        controller,
        &inst.feedback,
        inst.t0,
        inst.horizon,
    ) {
        Ok(r) => r,
        Err(Error::Divergence { .. }) => return Ok((DIVERGED_COST, None)),
        Err(e) => return Err(e),
    };
    let perf: Vec<DVector<f64>> = traj.states.iter().map(|q| inst.performance.apply(q)).collect();
    let series = |row: usize| -> Vec<f64> { perf.iter().map(|p| p[row]).collect() };
    let (mut cost, per_step): (f64, Vec<DVector<f64>>) = match n_perf {
        1 => {
            let p = series(0);
            let (j1, g1) = cost_j1_with_grad(&traj.times, &p, spec)?;
            let (j2, g2) = cost_j2_with_grad(&traj.times, &p, spec)?;
            let slope = penalty_slope(j2, spec);
            let cost = j1 + spec.alpha * (j2 - spec.j2_threshold).max(0.0);
            let g: Vec<DVector<f64>> = g1
                .iter()
                .zip(&g2)
                .map(|(&a, &b)| DVector::from_vec(vec![a + slope * b]))
                .collect();
            (cost, g)
        }
        2 => {
            let (p1, p2) = (series(0), series(1));
            let (j, g1, g2) = wake_cost_with_grad(&traj.times, &p1, &p2, spec)?;
            let g: Vec<DVector<f64>> = g1
                .iter()
                .zip(&g2)
                .map(|(&a, &b)| DVector::from_vec(vec![a, b]))
                .collect();
            (j, g)
        }
        other => {
            return Err(Error::dimension(format!(
                "cost supports 1 or 2 performance outputs, got {other}"
            )))
        }
    };
    let traj_grad: Vec<DVector<f64>> = per_step.iter().map(|g| inst.performance.c.tr_mul(g)).collect();
    // quadratic action penalty over the whole rollout (ZOH rectangle rule)
    let mut action_grad = vec![0.0; inst.horizon];
    if spec.action_weight > 0.0 {
        for (k, &a) in tape.actions.iter().enumerate() {
            cost += spec.action_weight * a * a * inst.rom.dt;
            action_grad[k] = 2.0 * spec.action_weight * a * inst.rom.dt;
        }
    }
    let ag = if spec.action_weight > 0.0 { Some(&action_grad[..]) } else { None };
    let grads = backward_closed_loop(
        &inst.rom,
        controller,
        &inst.feedback,
        &tape,
        &traj_grad,
        ag,
    )?;
    Ok((cost, Some(grads.controller)))
}

/// `steps` Adam updates of the controller against the summed ROM cost,
/// returning the best iterate by ROM cost.  `bad_policies` add the
/// repulsive stabilization penalty for neural controllers.
pub fn optimize_policy_on_rom(
    instances: &[RomInstance],
    controller: &Controller,
    spec: &CostSpec,
    steps: usize,
    learning_rate: f64,
    bad_policies: &[NeuralPolicy],
    grid: Option<&SampleGrid>,
) -> Result<PolicyOptReport> {
    if instances.is_empty() {
        return Err(Error::config("policy optimization needs at least one ROM"));
    }
    let mut current = controller.clone();
    let dim = current.param_count();
    let mut adam = AdamState::new(dim, learning_rate);
    let mut params = current.flatten();

    let evaluate = |ctrl: &Controller| -> Result<(f64, DVector<f64>, usize)> {
        let mut total = 0.0;
        let mut grad = DVector::zeros(dim);
        let mut alive = 0;
        for inst in instances {
            let (c, g) = instance_cost_grad(inst, ctrl, spec)?;
            total += c;
            if let Some(g) = g {
                grad += g;
                alive += 1;
            }
        }
        if let (Controller::Neural(p), Some(grid)) = (ctrl, grid) {
            if !bad_policies.is_empty() {
                let (pen, pgrad) = repulsive_penalty_with_grad(p, bad_policies, grid, spec)?;
                total += pen;
                grad += pgrad;
            }
        }
        Ok((total, grad, alive))
    };

    let (init_cost, init_grad, alive) = evaluate(&current)?;
    if alive == 0 {
        return Err(Error::Numerical(
            "every rollout diverged at the initial controller; start from a smaller gain".into(),
        ));
    }
    let mut history = vec![init_cost];
    let mut best_cost = init_cost;
    let mut best_params = params.clone();
    let mut grad = init_grad;
    for _ in 0..steps {
        adam_update(&mut params, &grad, &mut adam);
        current.unflatten_into(&params)?;
        let (cost, g, _) = evaluate(&current)?;
        history.push(cost);
        if cost < best_cost {
            best_cost = cost;
            best_params.copy_from(&params);
        }
        grad = g;
    }
    current.unflatten_into(&best_params)?;
    Ok(PolicyOptReport {
        controller: current,
        best_cost,
        cost_history: history,
    })
}

/// Trivial basis: reduced state = snapshot.
pub fn identity_basis(dim: usize) -> ReducedBasis {
    ReducedBasis {
        mean: DVector::zeros(dim),
        modes: DMatrix::identity(dim, dim),
        singular_values: vec![1.0; dim],
        energy_fractions: vec![1.0 / dim as f64; dim],
        r_a: dim,
        r_c: 0,
        truncated: false,
        degenerate: false,
    }
}

/// Subsampled action values at the snapshot times.
fn actions_at(reduced: &ReducedTrajectory, actions: &ActionSeries) -> Vec<f64> {
    reduced.times.iter().map(|&t| actions.interp(t)).collect()
}

/// Pool reduced trajectories with their action signals into a single
/// OpInf regression.  Each trajectory needs at least 7 samples for the
/// smoothed derivative stencil.
pub fn opinf_from_trajectories(
    pairs: &[(&ReducedTrajectory, &ActionSeries)],
    lambda: f64,
    provenance: Vec<String>,
) -> Result<LinearRom> {
    let usable: Vec<_> = pairs.iter().filter(|(tr, _)| tr.len() >= 7).collect();
    if usable.is_empty() {
        return Err(Error::config("no dataset has enough snapshots for OpInf"));
    }
    let r = usable[0].0.states[0].len();
    let mut q_cols: Vec<DVector<f64>> = Vec::new();
    let mut dq_cols: Vec<DVector<f64>> = Vec::new();
    let mut u_vals: Vec<f64> = Vec::new();
    for (tr, actions) in &usable {
        let dt = tr.times[1] - tr.times[0];
        let derivs = estimate_derivatives(tr, dt)?;
        let u = actions_at(tr, actions);
        for k in 0..tr.len() {
            q_cols.push(tr.states[k].clone());
            dq_cols.push(derivs[k].clone());
            u_vals.push(u[k]);
        }
    }
    let n = q_cols.len();
    let q = DMatrix::from_fn(r, n, |i, j| q_cols[j][i]);
    let dq = DMatrix::from_fn(r, n, |i, j| dq_cols[j][i]);
    let u = DMatrix::from_fn(1, n, |_, j| u_vals[j]);
    let mut rom = opinf_fit(&q, &dq, &u, lambda)?;
    rom.provenance = provenance;
    Ok(rom)
}

/// Pool the selected reduced trajectories into an OpInf regression.
fn fit_linear(datasets: &[&Dataset], lambda: f64) -> Result<LinearRom> {
    let pairs: Vec<(&ReducedTrajectory, &ActionSeries)> = datasets
        .iter()
        .filter(|d| d.reduced.len() >= 7)
        .map(|d| (&d.reduced, &d.actions))
        .collect();
    let provenance = datasets
        .iter()
        .filter(|d| d.reduced.len() >= 7)
        .map(|d| format!("episode-{}", d.episode_index))
        .collect();
    opinf_from_trajectories(&pairs, lambda, provenance)
}

/// Summed open-loop replay loss of the ROM over the datasets (diverged
/// replays are skipped).
fn rom_replay_loss(rom: &NodeRom, datasets: &[&Dataset]) -> Result<f64> {
    let mut total = 0.0;
    let mut alive = 0;
    for d in datasets {
        if d.reduced.len() < 2 {
            continue;
        }
        let horizon = d.reduced.len() - 1;
        match simulate_open_loop(rom, &d.reduced.states[0], &d.actions, d.reduced.times[0], horizon)
        {
            Ok((traj, _)) => {
                total += rom_loss_with_grad(&traj, &d.reduced)?.0;
                alive += 1;
            }
            Err(Error::Divergence { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    if alive == 0 {
        return Err(Error::Numerical("ROM diverges on every dataset".into()));
    }
    Ok(total)
}

/// One epoch of residual training over the selected datasets.  Open-loop
/// datasets replay the recorded actions; closed-loop ones re-run the
/// recorded controller from the control-on time.
fn residual_epoch(
    rom: &NodeRom,
    datasets: &[&Dataset],
    fb_readout: &Readout,
    closed: bool,
) -> Result<(f64, DVector<f64>, usize)> {
    let nres = rom
        .residual
        .as_ref()
        .ok_or_else(|| Error::config("residual training without a residual network"))?
        .net
        .param_count();
    let mut loss = 0.0;
    let mut grad = DVector::zeros(nres);
    let mut alive = 0;
    for d in datasets {
        if d.reduced.len() < 2 {
            continue;
        }
        let use_closed = closed && d.controller.is_some() && d.record.control_on.is_finite();
        if use_closed {
            let ctrl = d.controller.as_ref().unwrap();
            let j0 = d
                .reduced
                .times
                .iter()
                .position(|&t| t >= d.record.control_on - 1e-9)
                .unwrap_or(0);
            if d.reduced.len() - j0 < 2 {
                continue;
            }
            let horizon = d.reduced.len() - 1 - j0;
            let reference = ReducedTrajectory {
                times: d.reduced.times[j0..].to_vec(),
                states: d.reduced.states[j0..].to_vec(),
            };
            match simulate_closed_loop(
                rom,
                &reference.states[0],
                ctrl,
                fb_readout,
                reference.times[0],
                horizon,
            ) {
                Ok((traj, tape)) => {
                    let (l, g) = rom_loss_with_grad(&traj, &reference)?;
                    let grads = backward_closed_loop(rom, ctrl, fb_readout, &tape, &g, None)?;
                    if let Some(rg) = grads.residual {
                        grad += rg.flatten();
                    }
                    loss += l;
                    alive += 1;
                }
                Err(Error::Divergence { .. }) => continue,
                Err(e) => return Err(e),
            }
        } else {
            let horizon = d.reduced.len() - 1;
            match simulate_open_loop(
                rom,
                &d.reduced.states[0],
                &d.actions,
                d.reduced.times[0],
                horizon,
            ) {
                Ok((traj, tape)) => {
                    let (l, g) = rom_loss_with_grad(&traj, &d.reduced)?;
                    let grads = backward_open_loop(rom, &tape, &g)?;
                    if let Some(rg) = grads.residual {
                        grad += rg.flatten();
                    }
                    loss += l;
                    alive += 1;
                }
                Err(Error::Divergence { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok((loss, grad, alive))
}

fn train_residual_mixed(
    rom: &mut NodeRom,
    datasets: &[&Dataset],
    fb_readout: &Readout,
    closed: bool,
    epochs: usize,
    learning_rate: f64,
) -> Result<Vec<f64>> {
    let nres = rom
        .residual
        .as_ref()
        .ok_or_else(|| Error::config("residual training without a residual network"))?
        .net
        .param_count();
    let mut adam = AdamState::new(nres, learning_rate);
    let mut history = Vec::with_capacity(epochs);
    let mut params = rom.residual.as_ref().unwrap().net.flatten();
    for _ in 0..epochs {
        let (loss, grad, alive) = residual_epoch(rom, datasets, fb_readout, closed)?;
        if alive == 0 {
            return Err(Error::Numerical(
                "residual training: every dataset rollout diverged".into(),
            ));
        }
        history.push(loss);
        adam_update(&mut params, &grad, &mut adam);
        rom.residual.as_mut().unwrap().net.unflatten_into(&params)?;
    }
    Ok(history)
}

/// Per-episode audit entry; the audit log is these, one JSON object per
/// line.
#[derive(Debug, Clone, Serialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub seed: u64,
    pub selected: Vec<usize>,
    pub rom_loss: Option<f64>,
    pub policy_best_cost: Option<f64>,
    pub plant_cost: f64,
    pub drag_reduction: Option<f64>,
    pub dangerous: bool,
    pub warm_started_from: Option<usize>,
    pub best_plant_cost: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub controller: Controller,
    pub best_plant_cost: f64,
    pub best_episode: usize,
    pub episodes: Vec<EpisodeSummary>,
    pub ledger: Vec<Dataset>,
    pub rom: Option<NodeRom>,
    pub basis: Option<ReducedBasis>,
    /// JSON-lines audit log.
    pub audit: Vec<String>,
    pub stopped_early: bool,
}

/// Plant-side cost of an episode under the configured cost spec
/// (fluctuation performance outputs, plus the optional action penalty).
pub fn plant_episode_cost<P: Plant + ?Sized>(
    plant: &P,
    record: &EpisodeRecord,
    spec: &CostSpec,
) -> Result<f64> {
    if record.diverged {
        return Ok(f64::INFINITY);
    }
    let names = plant.performance_names();
    let offset = plant.performance_offset();
    let mut series: Vec<Vec<f64>> = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let mut s = record.sensor_series(name)?;
        for v in &mut s {
            *v -= offset[i];
        }
        series.push(s);
    }
    let mut cost = match series.len() {
        1 => {
            let (j1, _) = cost_j1_with_grad(&record.times, &series[0], spec)?;
            let (j2, _) = cost_j2_with_grad(&record.times, &series[0], spec)?;
            j1 + spec.alpha * (j2 - spec.j2_threshold).max(0.0)
        }
        2 => wake_cost_with_grad(&record.times, &series[0], &series[1], spec)?.0,
        other => {
            return Err(Error::dimension(format!(
                "cost supports 1 or 2 performance outputs, got {other}"
            )))
        }
    };
    if spec.action_weight > 0.0 {
        let (w0, w1) = spec.window.bounds();
        for (k, &t) in record.times.iter().enumerate().skip(1) {
            if t >= w0 - 1e-9 && t <= w1 + 1e-9 {
                let dt = t - record.times[k - 1];
                cost += spec.action_weight * record.actions[k - 1].powi(2) * dt;
            }
        }
    }
    Ok(cost)
}

/// Build a ledger entry from an episode, recomputing every summary.
pub fn ingest_episode<P: Plant + ?Sized>(
    plant: &P,
    record: EpisodeRecord,
    controller: Option<Controller>,
    episode_index: usize,
    baseline_drag: Option<f64>,
    cfg: &TrainConfig,
) -> Result<Dataset> {
    let plant_cost = plant_episode_cost(plant, &record, &cfg.cost)?;
    let drag_reduction = match (plant.drag_sensor(), baseline_drag) {
        (Some(_), Some(base)) => {
            let (w0, w1) = cfg.cost.window.bounds();
            Some(drag_stats(&record, (w0, w1), base)?.reduction)
        }
        _ => None,
    };
    let dangerous = danger_classify(record.diverged, drag_reduction, cfg.cost.gamma_crit);
    let actions = record.action_series();
    let uncontrolled = !record.control_on.is_finite()
        || record.control_on > *record.times.last().unwrap_or(&0.0);
    Ok(Dataset {
        record,
        reduced: ReducedTrajectory { times: vec![], states: vec![] },
        actions,
        plant_cost,
        drag_reduction,
        dangerous,
        episode_index,
        controller,
        uncontrolled,
    })
}

/// Mean drag of an uncontrolled baseline record over the cost window.
fn baseline_drag_mean<P: Plant + ?Sized>(
    plant: &P,
    record: &EpisodeRecord,
    spec: &CostSpec,
) -> Result<Option<f64>> {
    if plant.drag_sensor().is_none() || record.diverged {
        return Ok(None);
    }
    let (w0, w1) = spec.window.bounds();
    Ok(Some(drag_stats(record, (w0, w1), 1.0)?.mean))
}

/// Readouts of the plant's feedback and performance sensors in the
/// reduced coordinates of `basis`.
pub fn reduced_readouts<P: Plant + ?Sized>(
    plant: &P,
    basis: &ReducedBasis,
) -> (Readout, Readout) {
    let fb_rows = plant.feedback_rows();
    let perf_rows = plant.performance_rows();
    let fb = Readout {
        c: &fb_rows * &basis.modes,
        offset: &fb_rows * &basis.mean,
    };
    let perf = Readout {
        c: &perf_rows * &basis.modes,
        offset: &perf_rows * &basis.mean - plant.performance_offset(),
    };
    (fb, perf)
}

/// The adaptive ROM-based RL loop: deploy, aggregate, update the ROM,
/// update the policy, evaluate; returns the best-found policy by plant
/// cost with a full audit trail.
pub fn adaptive_rl_loop<P: Plant + ?Sized>(
    plant: &P,
    initial: &Controller,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    adaptive_rl_loop_seeded(plant, initial, cfg, Vec::new())
}

/// Variant accepting pre-existing ledger entries (summaries are already
/// recomputed by [`ingest_episode`]); used to resume or to inject
/// historical datasets.
pub fn adaptive_rl_loop_seeded<P: Plant + ?Sized>(
    plant: &P,
    initial: &Controller,
    cfg: &TrainConfig,
    preseed: Vec<Dataset>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut outcome = TrainOutcome {
        controller: initial.clone(),
        best_plant_cost: f64::INFINITY,
        best_episode: 0,
        episodes: Vec::new(),
        ledger: Vec::new(),
        rom: None,
        basis: None,
        audit: Vec::new(),
        stopped_early: false,
    };
    if cfg.iterations == 0 {
        return Ok(outcome);
    }

    let (w0, w1) = cfg.cost.window.bounds();
    if w1 > cfg.episode.duration + 1e-9 {
        return Err(Error::config("cost window extends past the episode duration"));
    }

    let mut episode_counter = 0usize;
    let mut baseline_drag: Option<f64> = None;

    if cfg.collect_uncontrolled {
        let sched = Schedule {
            control_on: f64::INFINITY,
            dither: crate::plants::NoiseSpec::Zero,
            seed: cfg.episode.seed,
            ..cfg.episode.clone()
        };
        let record = run_episode(plant, &Controller::Proportional { gain: 0.0 }, &sched)?;
        baseline_drag = baseline_drag_mean(plant, &record, &cfg.cost)?;
        let ds = ingest_episode(plant, record, None, episode_counter, baseline_drag, cfg)?;
        outcome.ledger.push(ds);
    }
    for mut ds in preseed {
        episode_counter += 1;
        ds.episode_index = episode_counter;
        outcome.ledger.push(ds);
    }

    // initial deployment
    episode_counter += 1;
    {
        let sched = Schedule {
            seed: cfg.episode.seed + episode_counter as u64,
            ..cfg.episode.clone()
        };
        let record = run_episode(plant, initial, &sched)?;
        let ds = ingest_episode(
            plant,
            record,
            Some(initial.clone()),
            episode_counter,
            baseline_drag,
            cfg,
        )?;
        if ds.plant_cost < outcome.best_plant_cost && !ds.dangerous {
            outcome.best_plant_cost = ds.plant_cost;
            outcome.best_episode = episode_counter;
            outcome.controller = initial.clone();
        }
        outcome.ledger.push(ds);
    }

    let mut basis: Option<ReducedBasis> = None;
    let mut rom: Option<NodeRom> = None;
    let mut fb_readout: Option<Readout> = None;
    let mut perf_readout: Option<Readout> = None;
    let mut current = initial.clone();
    let mut last_stable: Option<(usize, Controller)> = if outcome.best_plant_cost.is_finite() {
        Some((episode_counter, initial.clone()))
    } else {
        None
    };
    let mut rom_track: Vec<f64> = Vec::new();
    let mut policy_track: Vec<f64> = Vec::new();
    let grid = match cfg.repulsion_bounds {
        Some((lo, hi)) => Some(SampleGrid::from_bounds(lo, hi, SAMPLE_GRID_SIDE)?),
        None => None,
    };

    for iter in 1..=cfg.iterations {
        let first = iter == 1;
        let selected = select_datasets(&outcome.ledger, cfg.dataset_cap, cfg.stabilization);
        if selected.is_empty() {
            return Err(Error::Numerical(
                "stabilization failure: every candidate dataset is dangerous with no stable history"
                    .into(),
            ));
        }

        // --- ROM update (linear part frozen after the first fit) ---
        if first {
            let b = match cfg.basis {
                BasisMode::Identity => identity_basis(plant.snapshot_dim()),
                BasisMode::TwoStagePod { r_a, r_c } => {
                    let mut unc = SnapshotSet { times: vec![], states: vec![] };
                    let mut con = SnapshotSet { times: vec![], states: vec![] };
                    for &i in &selected {
                        let d = &outcome.ledger[i];
                        let target = if d.uncontrolled { &mut unc } else { &mut con };
                        target.times.extend_from_slice(&d.record.snapshots.times);
                        target.states.extend_from_slice(&d.record.snapshots.states);
                    }
                    if unc.is_empty() {
                        return Err(Error::config(
                            "two-stage POD needs an uncontrolled dataset; enable collect_uncontrolled",
                        ));
                    }
                    two_stage_pod(&unc, &con, r_a, r_c, MeanMode::Arithmetic)?
                }
            };
            for d in outcome.ledger.iter_mut() {
                d.reduced = project_set(&d.record.snapshots, &b)?;
            }
            let picked: Vec<&Dataset> = selected.iter().map(|&i| &outcome.ledger[i]).collect();
            let linear = fit_linear(&picked, cfg.lambda)?;
            let rom_dt = plant.dt() * cfg.episode.stride as f64;
            let mut node = NodeRom::linear_only(linear, rom_dt);
            if cfg.residual {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.episode.seed ^ 0x5eed);
                node.residual = Some(ResidualNet::with_hidden(
                    node.dim(),
                    &cfg.residual_hidden,
                    cfg.residual_scale,
                    &mut rng,
                ));
            }
            let (fb, perf) = reduced_readouts(plant, &b);
            basis = Some(b);
            fb_readout = Some(fb);
            perf_readout = Some(perf);
            rom = Some(node);
        } else if let Some(b) = &basis {
            // project any episodes added since the basis was built
            for d in outcome.ledger.iter_mut() {
                if d.reduced.is_empty() {
                    d.reduced = project_set(&d.record.snapshots, b)?;
                }
            }
        }
        let rom_mut = rom.as_mut().expect("ROM exists after the first iteration");
        let fb = fb_readout.as_ref().unwrap();
        let perf = perf_readout.as_ref().unwrap();
        let picked: Vec<&Dataset> = selected.iter().map(|&i| &outcome.ledger[i]).collect();

        let epochs = if first { cfg.rom_epochs_first } else { cfg.rom_epochs_later };
        if cfg.residual && epochs > 0 {
            let closed = episode_counter > cfg.open_loop_episodes;
            train_residual_mixed(rom_mut, &picked, fb, closed, epochs, cfg.residual_lr)?;
        }
        let rom_loss = rom_replay_loss(rom_mut, &picked)?;
        rom_track.push(rom_loss);

        // --- policy update ---
        let warm_from;
        let mut theta = if cfg.warm_start {
            let prev = outcome.ledger.last().unwrap();
            if cfg.stabilization && prev.dangerous {
                match &last_stable {
                    Some((idx, ctrl)) => {
                        warm_from = Some(*idx);
                        ctrl.clone()
                    }
                    None => {
                        return Err(Error::Numerical(
                            "stabilization failure: previous episode dangerous and no stable history"
                                .into(),
                        ))
                    }
                }
            } else {
                warm_from = Some(prev.episode_index);
                current.clone()
            }
        } else {
            warm_from = None;
            initial.clone()
        };

        // rollout problem: start where control engages in the most recent
        // stable dataset, run through the cost window
        let anchor = selected
            .iter()
            .map(|&i| &outcome.ledger[i])
            .filter(|d| !d.uncontrolled)
            .max_by_key(|d| d.episode_index)
            .or_else(|| selected.iter().map(|&i| &outcome.ledger[i]).next())
            .unwrap();
        let t0 = if cfg.episode.control_on.is_finite() {
            cfg.episode.control_on.max(anchor.reduced.times[0])
        } else {
            anchor.reduced.times[0]
        };
        if w0 + 1e-9 < t0 {
            return Err(Error::config("cost window starts before control engages"));
        }
        let horizon = ((w1 - t0) / rom_mut.dt).round() as usize;
        let instance = RomInstance {
            rom: rom_mut.clone(),
            q0: anchor.reduced.interp(t0),
            t0,
            horizon,
            feedback: fb.clone(),
            performance: perf.clone(),
        };
        let bad: Vec<NeuralPolicy> = if cfg.stabilization {
            outcome
                .ledger
                .iter()
                .filter(|d| d.dangerous)
                .filter_map(|d| match &d.controller {
                    Some(Controller::Neural(p)) => Some(p.clone()),
                    _ => None,
                })
                .collect()
        } else {
            Vec::new()
        };
        let steps = if first { cfg.policy_steps_first } else { cfg.policy_steps_later };
        let report = optimize_policy_on_rom(
            &[instance],
            &theta,
            &cfg.cost,
            steps,
            cfg.policy_lr,
            &bad,
            grid.as_ref(),
        )?;
        theta = report.controller.clone();
        policy_track.push(report.best_cost);
        current = theta.clone();

        // --- evaluate on the plant ---
        episode_counter += 1;
        let sched = Schedule {
            seed: cfg.episode.seed + episode_counter as u64,
            ..cfg.episode.clone()
        };
        let record = run_episode(plant, &current, &sched)?;
        let ds = ingest_episode(
            plant,
            record,
            Some(current.clone()),
            episode_counter,
            baseline_drag,
            cfg,
        )?;
        if !ds.dangerous {
            last_stable = Some((episode_counter, current.clone()));
        }
        if ds.plant_cost < outcome.best_plant_cost && !ds.dangerous {
            outcome.best_plant_cost = ds.plant_cost;
            outcome.best_episode = episode_counter;
            outcome.controller = current.clone();
        }
        let summary = EpisodeSummary {
            episode: episode_counter,
            seed: sched.seed,
            selected: selected.clone(),
            rom_loss: Some(rom_loss),
            policy_best_cost: Some(report.best_cost),
            plant_cost: ds.plant_cost,
            drag_reduction: ds.drag_reduction,
            dangerous: ds.dangerous,
            warm_started_from: warm_from,
            best_plant_cost: outcome.best_plant_cost,
        };
        outcome.audit.push(
            serde_json::to_string(&summary)
                .map_err(|e| Error::Numerical(format!("audit serialization failed: {e}")))?,
        );
        outcome.episodes.push(summary);
        outcome.ledger.push(ds);

        if convergence_check(&rom_track, cfg.convergence_fraction)
            && convergence_check(&policy_track, cfg.convergence_fraction)
            && iter < cfg.iterations
        {
            outcome.stopped_early = true;
            break;
        }
    }

    outcome.rom = rom;
    outcome.basis = basis;
    Ok(outcome)
}

/// One per-frequency ROM of the convective workflow.
#[derive(Debug, Clone)]
pub struct BankEntry {
    pub frequency: f64,
    pub basis: ReducedBasis,
    pub rom: LinearRom,
    /// The forcing barely registered at the performance sensor.
    pub low_signal: bool,
    /// Ready-to-optimize rollout problem on this bank member.
    pub instance: RomInstance,
}

#[derive(Debug, Clone)]
pub struct FrequencyBank {
    pub entries: Vec<BankEntry>,
}

#[derive(Debug, Clone)]
pub struct BankConfig {
    /// Forcing amplitude of the single-frequency episodes.
    pub amplitude: f64,
    pub duration: f64,
    /// Control-on time of the controlled identification episode.
    pub control_on: f64,
    /// Exploration dither of the controlled episode.  Keep it smooth
    /// (sinusoidal): derivative-based identification pairs state
    /// derivatives with interpolated actions, and step-held white noise
    /// biases the input operator low.
    pub dither: crate::plants::NoiseSpec,
    pub stride: usize,
    pub r_a: usize,
    pub r_c: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Peak performance-sensor response below this flags low signal.
    pub low_signal_threshold: f64,
    /// Rollout start time for policy optimization on the bank.
    pub rollout_start: f64,
    pub cost: CostSpec,
}

/// Per frequency: one uncontrolled and one controlled forced episode,
/// a two-stage POD basis, and an OpInf fit of the actuated dynamics
/// (the disturbance input is deliberately not part of the model).
pub fn build_frequency_bank<P: Plant + ?Sized>(
    plant: &P,
    controller: &Controller,
    frequencies: &[f64],
    cfg: &BankConfig,
) -> Result<FrequencyBank> {
    if frequencies.is_empty() {
        return Err(Error::config("frequency bank needs at least one frequency"));
    }
    if frequencies.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("bank frequencies must be strictly increasing"));
    }
    cfg.cost.validate()?;
    let (_, w1) = cfg.cost.window.bounds();
    let mut entries = Vec::with_capacity(frequencies.len());
    for (fi, &freq) in frequencies.iter().enumerate() {
        let noise = crate::plants::NoiseSpec::Sinusoid {
            amplitude: cfg.amplitude,
            frequency: freq,
        };
        let unc_sched = Schedule::uncontrolled(
            cfg.duration,
            noise.clone(),
            cfg.stride,
            cfg.seed + fi as u64,
        );
        let unc = run_episode(plant, &Controller::Proportional { gain: 0.0 }, &unc_sched)?;
        let con_sched = Schedule {
            duration: cfg.duration,
            control_on: cfg.control_on,
            noise,
            dither: cfg.dither.clone(),
            stride: cfg.stride,
            seed: cfg.seed + fi as u64,
        };
        let con = run_episode(plant, controller, &con_sched)?;
        if unc.diverged || con.diverged {
            return Err(Error::Divergence {
                time: unc.diverged_time.or(con.diverged_time).unwrap_or(0.0),
                context: format!("bank identification episode diverged at frequency {freq}"),
            });
        }
        // signal check at the performance sensor of the uncontrolled run
        let perf_name = plant.performance_names()[0].clone();
        let zp = unc.sensor_series(&perf_name)?;
        let offset = plant.performance_offset()[0];
        let peak = zp.iter().map(|v| (v - offset).abs()).fold(0.0f64, f64::max);
        let low_signal = peak < cfg.low_signal_threshold;

        let basis = two_stage_pod(
            &unc.snapshots,
            &con.snapshots,
            cfg.r_a,
            cfg.r_c,
            MeanMode::Arithmetic,
        )?;
        let d_unc = Dataset {
            reduced: project_set(&unc.snapshots, &basis)?,
            actions: unc.action_series(),
            record: unc,
            plant_cost: 0.0,
            drag_reduction: None,
            dangerous: false,
            episode_index: 0,
            controller: None,
            uncontrolled: true,
        };
        let d_con = Dataset {
            reduced: project_set(&con.snapshots, &basis)?,
            actions: con.action_series(),
            record: con,
            plant_cost: 0.0,
            drag_reduction: None,
            dangerous: false,
            episode_index: 1,
            controller: Some(controller.clone()),
            uncontrolled: false,
        };
        let rom = fit_linear(&[&d_unc, &d_con], cfg.lambda)?;
        let rom_dt = plant.dt() * cfg.stride as f64;
        let node = NodeRom::linear_only(rom.clone(), rom_dt);
        let (fb, perf) = reduced_readouts(plant, &basis);
        let t0 = cfg.rollout_start;
        let horizon = ((w1 - t0) / rom_dt).round() as usize;
        let instance = RomInstance {
            rom: node,
            q0: d_unc.reduced.interp(t0),
            t0,
            horizon,
            feedback: fb,
            performance: perf,
        };
        entries.push(BankEntry {
            frequency: freq,
            basis,
            rom,
            low_signal,
            instance,
        });
    }
    Ok(FrequencyBank { entries })
}
