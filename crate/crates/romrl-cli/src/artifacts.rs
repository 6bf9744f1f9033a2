//! On-disk artifact layout shared by the subcommands.
//!
//! An episode directory holds `sensors.csv`, `snapshots.bin`, and
//! `metadata.json`; the metadata records the config hash plus the hashes
//! of both data files so downstream commands can refuse to consume
//! tampered or mismatched inputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use romrl::io::{
    file_hash, read_checkpoint, read_sensors_csv, read_snapshots_bin, write_checkpoint,
    write_sensors_csv, write_snapshots_bin, SnapshotSet,
};
use romrl::plants::EpisodeRecord;
use romrl::{Error, Result};

pub const SENSORS_FILE: &str = "sensors.csv";
pub const SNAPSHOTS_FILE: &str = "snapshots.bin";
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeMetadata {
    pub schema_version: u32,
    pub config_hash: String,
    pub plant_kind: String,
    pub seed: u64,
    /// `None` means control never switched on (uncontrolled episode).
    pub control_on: Option<f64>,
    pub stride: usize,
    pub diverged: bool,
    pub diverged_time: Option<f64>,
    pub sensors_sha256: String,
    pub snapshots_sha256: String,
}

pub fn write_episode(
    dir: &Path,
    record: &EpisodeRecord,
    config_hash: &str,
    plant_kind: &str,
) -> Result<EpisodeMetadata> {
    std::fs::create_dir_all(dir)?;
    let sensors_path = dir.join(SENSORS_FILE);
    let snapshots_path = dir.join(SNAPSHOTS_FILE);
    write_sensors_csv(
        &sensors_path,
        &record.times,
        &record.actions,
        &record.sensor_names,
        &record.sensors,
    )?;
    write_snapshots_bin(&snapshots_path, &record.snapshots.states)?;
    let meta = EpisodeMetadata {
        schema_version: crate::config::SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        plant_kind: plant_kind.to_string(),
        seed: record.seed,
        control_on: record.control_on.is_finite().then_some(record.control_on),
        stride: record.stride,
        diverged: record.diverged,
        diverged_time: record.diverged_time,
        sensors_sha256: file_hash(&sensors_path)?,
        snapshots_sha256: file_hash(&snapshots_path)?,
    };
    write_checkpoint(&dir.join(METADATA_FILE), &meta)?;
    Ok(meta)
}

/// An episode read back from disk, hash-verified against its metadata.
#[derive(Debug, Clone)]
pub struct StoredEpisode {
    pub meta: EpisodeMetadata,
    pub times: Vec<f64>,
    pub actions: Vec<f64>,
    pub sensor_names: Vec<String>,
    pub sensors: Vec<Vec<f64>>,
    pub snapshots: SnapshotSet,
}

impl StoredEpisode {
    pub fn uncontrolled(&self) -> bool {
        self.meta.control_on.is_none()
    }

    pub fn sensor_series(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .sensor_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::config(format!("no sensor named {name}")))?;
        Ok(self.sensors.iter().map(|row| row[idx]).collect())
    }

    pub fn action_series(&self) -> romrl::romcore::ActionSeries {
        romrl::romcore::ActionSeries {
            times: self.times.clone(),
            values: self.actions.clone(),
        }
    }
}

/// Load an episode directory, refusing to proceed when the stored file
/// hashes or the config hash do not match.
pub fn read_episode(dir: &Path, expect_config_hash: Option<&str>) -> Result<StoredEpisode> {
    let meta: EpisodeMetadata = read_checkpoint(&dir.join(METADATA_FILE))?;
    if meta.schema_version != crate::config::SCHEMA_VERSION {
        return Err(Error::Integrity(format!(
            "{}: episode written by schema version {}, this build reads {}",
            dir.display(),
            meta.schema_version,
            crate::config::SCHEMA_VERSION
        )));
    }
    if let Some(expect) = expect_config_hash {
        if meta.config_hash != expect {
            return Err(Error::Integrity(format!(
                "{}: episode was produced from config {} but the current config hashes to {}",
                dir.display(),
                &meta.config_hash[..12.min(meta.config_hash.len())],
                &expect[..12.min(expect.len())]
            )));
        }
    }
    let sensors_path = dir.join(SENSORS_FILE);
    let snapshots_path = dir.join(SNAPSHOTS_FILE);
    for (path, expect) in [
        (&sensors_path, &meta.sensors_sha256),
        (&snapshots_path, &meta.snapshots_sha256),
    ] {
        let actual = file_hash(path)?;
        if &actual != expect {
            return Err(Error::Integrity(format!(
                "{}: stored hash does not match the file contents",
                path.display()
            )));
        }
    }
    let table = read_sensors_csv(&sensors_path)?;
    let states = read_snapshots_bin(&snapshots_path)?;
    let stride = meta.stride;
    let snap_times: Vec<f64> = table.times.iter().copied().step_by(stride).collect();
    if snap_times.len() != states.len() {
        return Err(Error::Integrity(format!(
            "{}: {} snapshots but {} strided sensor samples",
            dir.display(),
            states.len(),
            snap_times.len()
        )));
    }
    Ok(StoredEpisode {
        meta,
        times: table.times,
        actions: table.actions,
        sensor_names: table.sensor_names,
        sensors: table.sensor_rows,
        snapshots: SnapshotSet { times: snap_times, states },
    })
}

/// Provenance wrapper around persisted models: the config hash and the
/// episode hashes the model was fitted from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenanced<T> {
    pub schema_version: u32,
    pub config_hash: String,
    pub sources: Vec<String>,
    pub value: T,
}

pub fn write_model<T: Serialize>(
    path: &Path,
    value: &T,
    config_hash: &str,
    sources: Vec<String>,
) -> Result<()> {
    write_checkpoint(
        path,
        &Provenanced {
            schema_version: crate::config::SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            sources,
            value,
        },
    )
}

pub fn read_model<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Provenanced<T>> {
    let model: Provenanced<T> = read_checkpoint(path)?;
    if model.schema_version != crate::config::SCHEMA_VERSION {
        return Err(Error::Integrity(format!(
            "{}: model written by schema version {}, this build reads {}",
            path.display(),
            model.schema_version,
            crate::config::SCHEMA_VERSION
        )));
    }
    Ok(model)
}

/// Write a CSV table with full-precision values; the header names the
/// columns, each row is one record.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::dimension("table row width mismatch"));
        }
        let cells: Vec<String> = row.iter().map(|&v| romrl::io::fmt_f64(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
