//! Artifact persistence: the snapshot binary format, sensor tables,
//! config hashing, and JSON checkpoints.
//!
//! `snapshots.bin` layout: 8-byte magic `ROMSNAP1`, `u32` snapshot count,
//! `u32` state length (both little-endian), then the snapshots
//! consecutively as little-endian `f64`, row-major (one snapshot per row).

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::DVector;
use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"ROMSNAP1";

/// Time-stamped full-state snapshots of one episode.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    /// Snapshots as matrix columns (`dim x count`).
    pub fn matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.dim(), self.len(), |i, j| self.states[j][i])
    }
}

pub fn write_snapshots_bin(path: &Path, states: &[DVector<f64>]) -> Result<()> {
    let dim = states.first().map_or(0, |s| s.len());
    if states.len() > u32::MAX as usize || dim > u32::MAX as usize {
        return Err(Error::config("snapshot set too large for the header"));
    }
    for s in states {
        if s.len() != dim {
            return Err(Error::dimension("inconsistent snapshot lengths"));
        }
    }
    let mut buf = Vec::with_capacity(16 + states.len() * dim * 8);
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    buf.extend_from_slice(&(states.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for s in states {
        for &v in s.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_snapshots_bin(path: &Path) -> Result<Vec<DVector<f64>>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..8] != SNAPSHOT_MAGIC {
        return Err(Error::Integrity(format!(
            "{}: bad snapshot magic (expected ROMSNAP1)",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + count * dim * 8;
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "{}: payload is {} bytes, header implies {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let mut states = Vec::with_capacity(count);
    let mut off = 16;
    for _ in 0..count {
        let mut s = DVector::zeros(dim);
        for i in 0..dim {
            s[i] = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            off += 8;
        }
        states.push(s);
    }
    Ok(states)
}

/// Format preserving full `f64` precision (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// `sensors.csv`: columns t, a, then one column per sensor.
pub fn write_sensors_csv(
    path: &Path,
    times: &[f64],
    actions: &[f64],
    sensor_names: &[String],
    sensor_rows: &[Vec<f64>],
) -> Result<()> {
    if times.len() != actions.len() || times.len() != sensor_rows.len() {
        return Err(Error::dimension("sensor table column lengths differ"));
    }
    let mut out = String::new();
    out.push_str("t,a");
    for n in sensor_names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (k, &t) in times.iter().enumerate() {
        if sensor_rows[k].len() != sensor_names.len() {
            return Err(Error::dimension("sensor row width mismatch"));
        }
        out.push_str(&fmt_f64(t));
        out.push(',');
        out.push_str(&fmt_f64(actions[k]));
        for &v in &sensor_rows[k] {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parsed sensor table.
pub struct SensorTable {
    pub times: Vec<f64>,
    pub actions: Vec<f64>,
    pub sensor_names: Vec<String>,
    pub sensor_rows: Vec<Vec<f64>>,
}

pub fn read_sensors_csv(path: &Path) -> Result<SensorTable> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Integrity(format!("{}: empty sensor table", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "t" || cols[1] != "a" {
        return Err(Error::Integrity(format!(
            "{}: sensor table must start with columns t,a",
            path.display()
        )));
    }
    let sensor_names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    let mut table = SensorTable {
        times: vec![],
        actions: vec![],
        sensor_names,
        sensor_rows: vec![],
    };
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.parse::<f64>().map_err(|_| {
                    Error::Integrity(format!("{}: bad number at line {}", path.display(), ln + 2))
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != table.sensor_names.len() + 2 {
            return Err(Error::Integrity(format!(
                "{}: row width mismatch at line {}",
                path.display(),
                ln + 2
            )));
        }
        table.times.push(vals[0]);
        table.actions.push(vals[1]);
        table.sensor_rows.push(vals[2..].to_vec());
    }
    Ok(table)
}

/// Hex SHA-256 of arbitrary text (config documents).
pub fn config_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// JSON checkpoint persistence for any serializable model object.
pub fn write_checkpoint<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_string(value)
        .map_err(|e| Error::Integrity(format!("serialization failed: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_checkpoint<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Integrity(format!("{}: bad checkpoint: {e}", path.display())))
}
