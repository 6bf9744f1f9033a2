//! Run configuration: one versioned TOML file describing the plant, the
//! episode schedule, the ROM, the controller, the cost, and the trainer.
//! The whole file is validated before any computation starts and its
//! SHA-256 hash is recorded in every artifact written from it.

use serde::Deserialize;

use romrl::control::{Controller, CostSpec, CostWindow, DiscreteTf, NeuralPolicy};
use romrl::plants::{
    ConvectivePlant, ConvectivePlantConfig, NoiseSpec, Plant, PlantModel, Schedule, WakePlant,
    WakePlantConfig,
};
use romrl::trainer::{BankConfig, BasisMode, TrainConfig};
use romrl::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Noise signal description (`kind = "zero" | "gaussian" | "sinusoid"`).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: Option<String>,
    pub std: Option<f64>,
    pub amplitude: Option<f64>,
    pub frequency: Option<f64>,
}

impl NoiseSection {
    pub fn to_spec(&self, path: &str) -> Result<NoiseSpec> {
        let kind = self.kind.as_deref().unwrap_or("zero");
        match kind {
            "zero" => Ok(NoiseSpec::Zero),
            "gaussian" => {
                let std = self
                    .std
                    .ok_or_else(|| Error::config(format!("{path}: gaussian noise needs `std`")))?;
                Ok(NoiseSpec::Gaussian { std })
            }
            "sinusoid" => {
                let amplitude = self.amplitude.ok_or_else(|| {
                    Error::config(format!("{path}: sinusoid noise needs `amplitude`"))
                })?;
                let frequency = self.frequency.ok_or_else(|| {
                    Error::config(format!("{path}: sinusoid noise needs `frequency`"))
                })?;
                Ok(NoiseSpec::Sinusoid { amplitude, frequency })
            }
            other => Err(Error::config(format!(
                "{path}: unknown noise kind {other:?} (expected zero, gaussian, or sinusoid)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    /// `"convective"` or `"wake"`.
    pub kind: String,
    /// Full config override of the convective plant.
    pub convective: Option<toml::Value>,
    /// Full config override of the wake plant.
    pub wake: Option<toml::Value>,
}

const CONVECTIVE_KEYS: &[&str] = &[
    "n", "length", "advection", "gamma", "mu_amp", "mu_center", "mu_width", "noise_shape",
    "actuator_shape", "x_fb", "x_p", "dt",
];
const WAKE_KEYS: &[&str] = &[
    "mu_w", "omega_w", "lambda_w", "g", "g_w", "c0", "c1", "c2", "k_wave", "mode_width", "dt",
];
const SHAPE_KEYS: &[&str] = &["amplitude", "x0", "y0", "sigma_x", "sigma_y"];

/// `deny_unknown_fields` does not reach into library config types, so
/// override tables are key-checked by hand before deserializing.
fn check_keys(value: &toml::Value, allowed: &[&str], path: &str) -> Result<()> {
    let table = value
        .as_table()
        .ok_or_else(|| Error::config(format!("{path} must be a table")))?;
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::config(format!("{path}: unknown key `{key}`")));
        }
    }
    Ok(())
}

impl PlantSection {
    pub fn build(&self) -> Result<PlantModel> {
        match self.kind.as_str() {
            "convective" => {
                if self.wake.is_some() {
                    return Err(Error::config("plant.wake set but plant.kind is convective"));
                }
                let cfg = match &self.convective {
                    Some(v) => {
                        check_keys(v, CONVECTIVE_KEYS, "plant.convective")?;
                        if let Some(shape) = v.get("noise_shape") {
                            check_keys(shape, SHAPE_KEYS, "plant.convective.noise_shape")?;
                        }
                        if let Some(shape) = v.get("actuator_shape") {
                            check_keys(shape, SHAPE_KEYS, "plant.convective.actuator_shape")?;
                        }
                        partial_override(v, &ConvectivePlantConfig::default())?
                    }
                    None => ConvectivePlantConfig::default(),
                };
                Ok(PlantModel::Convective(ConvectivePlant::new(cfg)?))
            }
            "wake" => {
                if self.convective.is_some() {
                    return Err(Error::config("plant.convective set but plant.kind is wake"));
                }
                let cfg = match &self.wake {
                    Some(v) => {
                        check_keys(v, WAKE_KEYS, "plant.wake")?;
                        partial_override(v, &WakePlantConfig::default())?
                    }
                    None => WakePlantConfig::default(),
                };
                Ok(PlantModel::Wake(WakePlant::new(cfg)?))
            }
            other => Err(Error::config(format!(
                "unknown plant kind {other:?} (expected convective or wake)"
            ))),
        }
    }
}

/// Merge an override table onto the serialized defaults, then
/// deserialize the merged table into the config type.
fn partial_override<T: serde::Serialize + serde::de::DeserializeOwned>(
    overrides: &toml::Value,
    defaults: &T,
) -> Result<T> {
    let mut base = toml::Value::try_from(defaults)
        .map_err(|e| Error::config(format!("default config serialization failed: {e}")))?;
    let (base_tab, over_tab) = match (base.as_table_mut(), overrides.as_table()) {
        (Some(b), Some(o)) => (b, o),
        _ => return Err(Error::config("plant override must be a table")),
    };
    for (k, v) in over_tab {
        base_tab.insert(k.clone(), v.clone());
    }
    base.try_into()
        .map_err(|e| Error::config(format!("invalid plant override: {e}")))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSection {
    pub duration: f64,
    /// Omitted = never (uncontrolled episode).
    pub control_on: Option<f64>,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub dither: NoiseSection,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

impl EpisodeSection {
    pub fn schedule(&self, seed: u64) -> Result<Schedule> {
        Ok(Schedule {
            duration: self.duration,
            control_on: self.control_on.unwrap_or(f64::INFINITY),
            noise: self.noise.to_spec("episode.noise")?,
            dither: self.dither.to_spec("episode.dither")?,
            stride: self.stride,
            seed,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RomSection {
    /// `"identity"` or `"pod"` (two-stage POD).
    pub basis: String,
    #[serde(default = "default_r_a")]
    pub r_a: usize,
    #[serde(default = "default_r_c")]
    pub r_c: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub residual: bool,
    #[serde(default = "default_residual_scale")]
    pub residual_scale: f64,
    #[serde(default = "default_residual_hidden")]
    pub residual_hidden: Vec<usize>,
    #[serde(default = "default_residual_lr")]
    pub residual_lr: f64,
    /// Residual training epochs used by `fit`.
    #[serde(default = "default_fit_epochs")]
    pub fit_epochs: usize,
}

fn default_r_a() -> usize {
    2
}
fn default_r_c() -> usize {
    1
}
fn default_lambda() -> f64 {
    1e-8
}
fn default_residual_scale() -> f64 {
    3e-4
}
fn default_residual_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_residual_lr() -> f64 {
    1e-3
}
fn default_fit_epochs() -> usize {
    500
}

impl Default for RomSection {
    fn default() -> Self {
        RomSection {
            basis: "identity".into(),
            r_a: default_r_a(),
            r_c: default_r_c(),
            lambda: default_lambda(),
            residual: false,
            residual_scale: default_residual_scale(),
            residual_hidden: default_residual_hidden(),
            residual_lr: default_residual_lr(),
            fit_epochs: default_fit_epochs(),
        }
    }
}

impl RomSection {
    pub fn basis_mode(&self) -> Result<BasisMode> {
        match self.basis.as_str() {
            "identity" => Ok(BasisMode::Identity),
            "pod" => Ok(BasisMode::TwoStagePod { r_a: self.r_a, r_c: self.r_c }),
            other => Err(Error::config(format!(
                "unknown basis {other:?} (expected identity or pod)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    /// `"zero"`, `"proportional"`, `"fir"`, `"tf"`, or `"neural"`.
    pub kind: String,
    pub gain: Option<f64>,
    /// Transfer-function order (kind = "tf").
    #[serde(default = "default_tf_order")]
    pub order: usize,
    #[serde(default = "default_policy_scale")]
    pub scale: f64,
    #[serde(default = "default_policy_hidden")]
    pub hidden: Vec<usize>,
}

fn default_tf_order() -> usize {
    4
}

fn default_policy_scale() -> f64 {
    0.05
}
fn default_policy_hidden() -> Vec<usize> {
    vec![32, 32]
}

impl Default for ControllerSection {
    fn default() -> Self {
        ControllerSection {
            kind: "zero".into(),
            gain: None,
            order: default_tf_order(),
            scale: default_policy_scale(),
            hidden: default_policy_hidden(),
        }
    }
}

impl ControllerSection {
    /// `dt` is the rate the controller will run at (the ROM rate during
    /// optimization; transfer functions are resampled for deployment).
    pub fn build(&self, n_inputs: usize, seed: u64, dt: f64) -> Result<Controller> {
        match self.kind.as_str() {
            "zero" => Ok(Controller::Proportional { gain: 0.0 }),
            "proportional" => {
                let gain = self
                    .gain
                    .ok_or_else(|| Error::config("proportional controller needs `gain`"))?;
                Ok(Controller::Proportional { gain })
            }
            // FIR keeps the optimized filter stable by construction;
            // full tf denominators can drift to unstable poles.
            "fir" => {
                if self.order == 0 {
                    return Err(Error::config("fir controller needs order >= 1"));
                }
                Ok(Controller::DiscreteTf(DiscreteTf {
                    b: vec![0.0; self.order + 1],
                    a: vec![],
                    dt,
                }))
            }
            "tf" => {
                if self.order == 0 {
                    return Err(Error::config("tf controller needs order >= 1"));
                }
                Ok(Controller::DiscreteTf(DiscreteTf {
                    b: vec![0.0; self.order + 1],
                    a: vec![0.0; self.order],
                    dt,
                }))
            }
            "neural" => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                Ok(Controller::Neural(NeuralPolicy::with_hidden(
                    n_inputs,
                    &self.hidden,
                    self.scale,
                    &mut rng,
                )))
            }
            other => Err(Error::config(format!(
                "unknown controller kind {other:?} (expected zero, proportional, or neural)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub window_start: f64,
    pub window_end: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_j2_threshold")]
    pub j2_threshold: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lambda_rep")]
    pub lambda_rep: f64,
    #[serde(default = "default_gamma_crit")]
    pub gamma_crit: f64,
    #[serde(default)]
    pub action_weight: f64,
}

fn default_alpha() -> f64 {
    1e3
}
fn default_j2_threshold() -> f64 {
    1e9
}
fn default_tau() -> f64 {
    1.0
}
fn default_lambda_rep() -> f64 {
    1.0
}
fn default_gamma_crit() -> f64 {
    0.05
}

impl CostSection {
    pub fn spec(&self) -> CostSpec {
        CostSpec {
            window: CostWindow::Range { t0: self.window_start, t_end: self.window_end },
            j2_threshold: self.j2_threshold,
            alpha: self.alpha,
            tau: self.tau,
            lambda_rep: self.lambda_rep,
            gamma_crit: self.gamma_crit,
            action_weight: self.action_weight,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub iterations: usize,
    pub rom_epochs_first: usize,
    pub rom_epochs_later: usize,
    pub policy_steps_first: usize,
    pub policy_steps_later: usize,
    pub open_loop_episodes: usize,
    pub convergence_fraction: f64,
    pub dataset_cap: usize,
    pub warm_start: bool,
    pub stabilization: bool,
    pub collect_uncontrolled: bool,
    pub policy_lr: f64,
    pub repulsion_lo: Option<[f64; 2]>,
    pub repulsion_hi: Option<[f64; 2]>,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            iterations: 4,
            rom_epochs_first: 300,
            rom_epochs_later: 100,
            policy_steps_first: 80,
            policy_steps_later: 30,
            open_loop_episodes: 2,
            convergence_fraction: 0.15,
            dataset_cap: 6,
            warm_start: true,
            stabilization: false,
            collect_uncontrolled: true,
            policy_lr: 2e-2,
            repulsion_lo: None,
            repulsion_hi: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankSection {
    pub frequencies: Vec<f64>,
    pub amplitude: f64,
    pub duration: f64,
    pub control_on: f64,
    #[serde(default)]
    pub dither: NoiseSection,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_r_a")]
    pub r_a: usize,
    #[serde(default = "default_r_c")]
    pub r_c: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_low_signal")]
    pub low_signal_threshold: f64,
    pub rollout_start: f64,
    #[serde(default = "default_bank_steps")]
    pub policy_steps: usize,
    #[serde(default = "default_bank_lr")]
    pub policy_lr: f64,
    /// Impulse-response horizon for the plant-side Bode/H2 evaluation.
    #[serde(default = "default_impulse_horizon")]
    pub impulse_horizon: usize,
}

fn default_low_signal() -> f64 {
    1e-6
}
fn default_bank_steps() -> usize {
    100
}
fn default_bank_lr() -> f64 {
    5e-2
}
fn default_impulse_horizon() -> usize {
    4000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PressureSection {
    #[serde(default = "default_residual_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_pressure_epochs")]
    pub epochs: usize,
    #[serde(default = "default_pressure_batch")]
    pub batch_size: usize,
    #[serde(default = "default_residual_lr")]
    pub learning_rate: f64,
}

fn default_pressure_epochs() -> usize {
    500
}
fn default_pressure_batch() -> usize {
    32
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub plant: PlantSection,
    pub episode: EpisodeSection,
    #[serde(default)]
    pub rom: RomSection,
    #[serde(default)]
    pub controller: ControllerSection,
    pub cost: CostSection,
    #[serde(default)]
    pub trainer: TrainerSection,
    pub bank: Option<BankSection>,
    pub pressure: Option<PressureSection>,
}

/// A parsed config together with the exact text it came from and its
/// hash; the hash ties every artifact back to this file.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub run: RunConfig,
    pub hash: String,
}

pub fn load_config(path: &std::path::Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path)?;
    let run: RunConfig = toml::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    if run.schema_version != SCHEMA_VERSION {
        return Err(Error::config(format!(
            "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
            run.schema_version
        )));
    }
    // surface config errors before any computation
    run.plant.build()?;
    run.episode.schedule(run.seed)?;
    run.rom.basis_mode()?;
    run.cost.spec().validate()?;
    if let Some(bank) = &run.bank {
        if bank.frequencies.is_empty() {
            return Err(Error::config("bank.frequencies must not be empty"));
        }
        bank.dither.to_spec("bank.dither")?;
    }
    let hash = romrl::io::config_hash(&text);
    Ok(LoadedConfig { run, hash })
}

impl LoadedConfig {
    pub fn plant(&self) -> Result<PlantModel> {
        self.run.plant.build()
    }

    pub fn schedule(&self) -> Result<Schedule> {
        self.run.episode.schedule(self.run.seed)
    }

    pub fn controller(&self, plant: &PlantModel) -> Result<Controller> {
        self.controller_with_dt(plant, plant.dt())
    }

    pub fn controller_with_dt(&self, plant: &PlantModel, dt: f64) -> Result<Controller> {
        let n_inputs = plant.feedback(&plant.initial_state()).len();
        self.run.controller.build(n_inputs, self.run.seed ^ 0xc0de, dt)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.run.trainer;
        let r = &self.run.rom;
        let cfg = TrainConfig {
            iterations: t.iterations,
            rom_epochs_first: t.rom_epochs_first,
            rom_epochs_later: t.rom_epochs_later,
            policy_steps_first: t.policy_steps_first,
            policy_steps_later: t.policy_steps_later,
            open_loop_episodes: t.open_loop_episodes,
            convergence_fraction: t.convergence_fraction,
            dataset_cap: t.dataset_cap,
            warm_start: t.warm_start,
            stabilization: t.stabilization,
            collect_uncontrolled: t.collect_uncontrolled,
            basis: self.run.rom.basis_mode()?,
            lambda: r.lambda,
            residual: r.residual,
            residual_scale: r.residual_scale,
            residual_hidden: r.residual_hidden.clone(),
            residual_lr: r.residual_lr,
            policy_lr: t.policy_lr,
            episode: self.schedule()?,
            cost: self.run.cost.spec(),
            repulsion_bounds: match (t.repulsion_lo, t.repulsion_hi) {
                (Some(lo), Some(hi)) => Some((lo, hi)),
                (None, None) => None,
                _ => {
                    return Err(Error::config(
                        "repulsion_lo and repulsion_hi must be set together",
                    ))
                }
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bank_config(&self) -> Result<(Vec<f64>, BankConfig)> {
        let bank = self
            .run
            .bank
            .as_ref()
            .ok_or_else(|| Error::config("this command needs a [bank] section"))?;
        Ok((
            bank.frequencies.clone(),
            BankConfig {
                amplitude: bank.amplitude,
                duration: bank.duration,
                control_on: bank.control_on,
                dither: bank.dither.to_spec("bank.dither")?,
                stride: bank.stride,
                r_a: bank.r_a,
                r_c: bank.r_c,
                lambda: bank.lambda,
                seed: self.run.seed,
                low_signal_threshold: bank.low_signal_threshold,
                rollout_start: bank.rollout_start,
                cost: self.run.cost.spec(),
            },
        ))
    }
}
