//! Intensity forecasts from observed intensity and observed plus forecast
//! structure, and rapid-change probabilities.

pub mod gam;
pub mod lasso;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{Duration, NaiveDateTime};

use crate::error::{Error, Result};
use crate::ingest::frames::format_time;
use crate::ingest::StormTrack;

pub use gam::{fit_gam, GamConfig, GamFit, GamModel, Smoother};
pub use lasso::{fit_logistic_lasso, lambda_max, sigmoid, LassoFit, LassoModel, LassoOptions};

pub const RI_WINDOW_HOURS: i64 = 24;
pub const RI_THRESHOLD_KT: f64 = 30.0;
pub const MAX_INTENSITY_KT: f64 = 250.0;

/// Best-track intensities per storm, keyed by time.
#[derive(Debug, Clone, Default)]
pub struct IntensityTable {
    storms: HashMap<String, BTreeMap<NaiveDateTime, f64>>,
}

impl IntensityTable {
    pub fn from_tracks(tracks: &[StormTrack]) -> Self {
        let mut t = IntensityTable::default();
        for tr in tracks {
            for f in &tr.fixes {
                if let Some(v) = f.vmax {
                    t.insert(&tr.storm_id, f.time, f64::from(v));
                }
            }
        }
        t
    }

    pub fn insert(&mut self, storm_id: &str, time: NaiveDateTime, vmax: f64) {
        self.storms.entry(storm_id.to_string()).or_default().insert(time, vmax);
    }

    pub fn get(&self, storm_id: &str, time: NaiveDateTime) -> Option<f64> {
        self.storms.get(storm_id)?.get(&time).copied()
    }
}

/// Rapid-change label at `t`: `|V(t + window) - V(t)| >= threshold`
/// (`V(t + window) - V(t) >= threshold` with `increase_only`). `None` when
/// either endpoint has no intensity.
pub fn label_rapid_change(
    track: &StormTrack,
    t: NaiveDateTime,
    window_hours: i64,
    threshold_kt: f64,
    increase_only: bool,
) -> Option<bool> {
    let v0 = f64::from(track.vmax_at(t)?);
    let v1 = f64::from(track.vmax_at(t + Duration::hours(window_hours))?);
    Some(rapid_change(v1 - v0, threshold_kt, increase_only))
}

pub fn rapid_change(dv: f64, threshold_kt: f64, increase_only: bool) -> bool {
    if increase_only {
        dv >= threshold_kt
    } else {
        dv.abs() >= threshold_kt
    }
}

/// Observed state at a synoptic time: intensity and structure coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedState {
    pub storm_id: String,
    pub time: NaiveDateTime,
    pub vmax: f64,
    pub z: Vec<f64>,
}

/// Structural forecast issued at `issue_time` for `issue_time + horizon_hours`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralForecast {
    pub storm_id: String,
    pub issue_time: NaiveDateTime,
    pub horizon_hours: u32,
    pub z_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    pub storm_id: String,
    pub issue_time: NaiveDateTime,
    pub horizon_hours: u32,
    pub v_now: f64,
    pub dv_past: f64,
    pub z_obs: Vec<f64>,
    pub z_fc: Vec<f64>,
    /// `V(t + h) - V(t)` when known.
    pub target: Option<f64>,
}

impl DesignRow {
    /// `[v_now, dv_past, z_obs.., z_fc..]`
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(2 + self.z_obs.len() + self.z_fc.len());
        f.push(self.v_now);
        f.push(self.dv_past);
        f.extend_from_slice(&self.z_obs);
        f.extend_from_slice(&self.z_fc);
        f
    }
}

pub fn feature_names(k: usize) -> Vec<String> {
    let mut n = vec!["v_now".to_string(), "dv_past".to_string()];
    n.extend((1..=k).map(|i| format!("z_obs_{}", i)));
    n.extend((1..=k).map(|i| format!("z_fc_{}", i)));
    n
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DesignSummary {
    pub rows: usize,
    pub missing_forecast: usize,
    pub missing_target: usize,
}

/// One row per observed state that has a structural forecast at
/// `horizon_hours`. With `require_target`, rows whose future intensity is
/// unknown are dropped and counted.
pub fn build_design(
    observed: &[ObservedState],
    forecasts: &[StructuralForecast],
    intensities: &IntensityTable,
    horizon_hours: u32,
    cadence_hours: u32,
    require_target: bool,
) -> Result<(Vec<DesignRow>, DesignSummary)> {
    let fc: HashMap<(&str, NaiveDateTime), &StructuralForecast> = forecasts
        .iter()
        .filter(|f| f.horizon_hours == horizon_hours)
        .map(|f| ((f.storm_id.as_str(), f.issue_time), f))
        .collect();
    let mut rows = Vec::new();
    let mut summary = DesignSummary::default();
    let h = Duration::hours(i64::from(horizon_hours));
    let back = Duration::hours(i64::from(cadence_hours));
    for obs in observed {
        let Some(f) = fc.get(&(obs.storm_id.as_str(), obs.time)) else {
            summary.missing_forecast += 1;
            continue;
        };
        if f.z_hat.len() != obs.z.len() {
            return Err(Error::DimensionMismatch {
                expected: obs.z.len(),
                got: f.z_hat.len(),
            });
        }
        let target = intensities.get(&obs.storm_id, obs.time + h).map(|v| v - obs.vmax);
        if require_target && target.is_none() {
            summary.missing_target += 1;
            continue;
        }
        let dv_past = intensities
            .get(&obs.storm_id, obs.time - back)
            .map_or(0.0, |v| obs.vmax - v);
        rows.push(DesignRow {
            storm_id: obs.storm_id.clone(),
            issue_time: obs.time,
            horizon_hours,
            v_now: obs.vmax,
            dv_past,
            z_obs: obs.z.clone(),
            z_fc: f.z_hat.clone(),
            target,
        });
    }
    summary.rows = rows.len();
    Ok((rows, summary))
}

/// `v_now + intercept + sum_j f_j(x_j)`, clamped to the recorded range.
pub fn predict_intensity(model: &GamModel, row: &DesignRow) -> Result<f64> {
    let x = row.features();
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok((row.v_now + model.predict(&x)?).clamp(0.0, MAX_INTENSITY_KT))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityPrediction {
    pub storm_id: String,
    pub issue_time: NaiveDateTime,
    pub horizon_hours: u32,
    pub v_now: f64,
    pub v_hat: f64,
    pub p_ri: f64,
}

pub fn write_predictions(path: &Path, preds: &[IntensityPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["storm_id", "issue_time", "horizon", "v_now", "v_hat", "p_ri"])?;
    for p in preds {
        w.write_record([
            p.storm_id.clone(),
            format_time(p.issue_time),
            p.horizon_hours.to_string(),
            format!("{:.4}", p.v_now),
            format!("{:.4}", p.v_hat),
            if p.p_ri.is_finite() {
                format!("{:.6}", p.p_ri)
            } else {
                "NA".to_string()
            },
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
    crate::block::write_atomic(path, &bytes)
}
