//! IR frame stacks: a JSON manifest plus one `TCIR1` file per frame.

use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::block::{self, Block};
use crate::error::{Error, Result};

pub const DEFAULT_CHANNEL: &str = "IR ~10.7um";
pub const MIN_TEMP_K: f64 = 150.0;
pub const MAX_TEMP_K: f64 = 340.0;
pub const MIN_FRAME_SIDE: usize = 16;

/// A geostationary IR frame on a regular lat/lon grid.
#[derive(Debug, Clone)]
pub struct IrFrame {
    pub valid_time: NaiveDateTime,
    pub channel: String,
    /// Latitude of the centre of pixel (0, 0).
    pub origin_lat: f64,
    /// Longitude of the centre of pixel (0, 0).
    pub origin_lon: f64,
    /// Degrees per pixel; latitude decreases down the rows.
    pub step_deg: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major brightness temperatures (K), row 0 northernmost. NaN = missing.
    pub temps: Vec<f32>,
}

impl IrFrame {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.temps[row * self.width + col]
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.get(row, col).is_nan()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub file: String,
    pub valid_time: String,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub step_deg: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub storm_id: String,
    pub channel: String,
    pub frames: Vec<ManifestFrame>,
}

pub fn format_time(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

pub fn parse_time(s: &str) -> Option<NaiveDateTime> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc).naive_utc());
    }
    let s = s.trim_end_matches('Z');
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .ok()
}

/// Read every frame listed in a manifest. Frames must be listed in strictly
/// increasing time order.
pub fn read_ir_stack(manifest_path: &Path) -> Result<Vec<IrFrame>> {
    let manifest: Manifest = block::read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut frames: Vec<IrFrame> = Vec::with_capacity(manifest.frames.len());
    for entry in &manifest.frames {
        let path = dir.join(&entry.file);
        let valid_time = parse_time(&entry.valid_time).ok_or_else(|| {
            Error::format(manifest_path, format!("bad valid_time '{}'", entry.valid_time))
        })?;
        if let Some(prev) = frames.last() {
            if valid_time == prev.valid_time {
                return Err(Error::format(
                    manifest_path,
                    format!("duplicate valid_time {} ({})", entry.valid_time, entry.file),
                ));
            }
            if valid_time < prev.valid_time {
                return Err(Error::format(
                    manifest_path,
                    format!("frames out of time order at {}", entry.file),
                ));
            }
        }
        let blk = Block::read(&path)?;
        if blk.width != entry.width as usize || blk.height != entry.height as usize {
            return Err(Error::format(
                &path,
                format!(
                    "dimension mismatch: file {}x{}, manifest {}x{}",
                    blk.width, blk.height, entry.width, entry.height
                ),
            ));
        }
        if blk.width < MIN_FRAME_SIDE || blk.height < MIN_FRAME_SIDE {
            return Err(Error::format(&path, "frame smaller than 16x16"));
        }
        if !(entry.step_deg > 0.0) {
            return Err(Error::format(&path, "step_deg must be positive"));
        }
        let mut temps = blk.values;
        for v in temps.iter_mut() {
            if !(f64::from(*v) >= MIN_TEMP_K && f64::from(*v) <= MAX_TEMP_K) {
                *v = f32::NAN;
            }
        }
        frames.push(IrFrame {
            valid_time,
            channel: manifest.channel.clone(),
            origin_lat: entry.origin_lat,
            origin_lon: entry.origin_lon,
            step_deg: entry.step_deg,
            width: blk.width,
            height: blk.height,
            temps,
        });
    }
    Ok(frames)
}

/// Write frames as `<dir>/fNNNN.tcir` plus `<dir>/manifest.json`. Returns the manifest path.
pub fn write_ir_stack(dir: &Path, storm_id: &str, frames: &[IrFrame]) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let file = format!("f{:04}.tcir", i);
        Block {
            width: f.width,
            height: f.height,
            values: f.temps.clone(),
        }
        .write(&dir.join(&file))?;
        entries.push(ManifestFrame {
            file,
            valid_time: format_time(f.valid_time),
            origin_lat: f.origin_lat,
            origin_lon: f.origin_lon,
            step_deg: f.step_deg,
            width: f.width as u32,
            height: f.height as u32,
        });
    }
    let manifest = Manifest {
        storm_id: storm_id.to_string(),
        channel: frames
            .first()
            .map(|f| f.channel.clone())
            .unwrap_or_else(|| DEFAULT_CHANNEL.to_string()),
        frames: entries,
    };
    let path = dir.join("manifest.json");
    block::write_json(&path, &manifest)?;
    Ok(path)
}
