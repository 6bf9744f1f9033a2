pub mod ablate;
pub mod checks;
pub mod episode;
pub mod eval;
pub mod fit;
pub mod place;
pub mod pressure;
pub mod train;

use romrl::control::Controller;
use romrl::plants::PlantModel;
use romrl::Result;

use crate::artifacts;
use crate::config::LoadedConfig;

pub fn plant_kind(plant: &PlantModel) -> &'static str {
    match plant {
        PlantModel::Convective(_) => "convective",
        PlantModel::Wake(_) => "wake",
    }
}

/// Controller from a checkpoint when given, else from the config section.
pub fn resolve_controller(
    cfg: &LoadedConfig,
    plant: &PlantModel,
    checkpoint: Option<&std::path::Path>,
) -> Result<Controller> {
    match checkpoint {
        Some(path) => Ok(artifacts::read_model::<Controller>(path)?.value),
        None => cfg.controller(plant),
    }
}
