//! Deterministic synthetic storms: parametric IR scenes driven by a
//! convective-depth process that in turn drives intensity.
//!
//! All randomness comes from counter-based draws keyed by (seed, stream,
//! index), so output bytes do not depend on evaluation order.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block;
use crate::error::{Error, Result};
use crate::ingest::frames::{write_ir_stack, DEFAULT_CHANNEL, MAX_TEMP_K, MIN_TEMP_K};
use crate::ingest::{write_hurdat2, CenteredImage, GridSpec, IrFrame, StormTrack, TrackFix, KM_PER_DEG};

pub const MIN_SIM_KT: f64 = 15.0;
pub const MAX_SIM_KT: f64 = 185.0;

const STREAM_PIXEL: u64 = 0;
const STREAM_DEPTH: u64 = 1;
const STREAM_WIND: u64 = 2;
const STREAM_STORM: u64 = 3;

/// Uniform draw in [0, 1) at position `index` of `stream` under `seed`.
pub fn uniform(seed: u64, stream: u64, index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 4);
    rng.random::<f64>()
}

/// Standard normal draw (Box-Muller on two words) at `index` of `stream`.
pub fn gaussian(seed: u64, stream: u64, index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 4);
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser on a combined word
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub eye_radius_km: f64,
    pub eyewall_outer_radius_km: f64,
    pub eye_temp: f64,
    pub eyewall_temp: f64,
    pub background_temp: f64,
    pub asym_amp: f64,
    pub asym_phase: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl SceneParams {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        let temps_ok = [self.eye_temp, self.eyewall_temp, self.background_temp]
            .iter()
            .all(|t| (MIN_TEMP_K..=MAX_TEMP_K).contains(t));
        if !(self.eye_radius_km > 0.0
            && self.eye_radius_km < self.eyewall_outer_radius_km
            && self.eyewall_outer_radius_km <= grid.half_width_km)
        {
            return Err(Error::InvalidArgument(format!(
                "scene radii eye {} / eyewall {} must satisfy 0 < eye < eyewall <= {}",
                self.eye_radius_km, self.eyewall_outer_radius_km, grid.half_width_km
            )));
        }
        if !temps_ok || !(self.noise_sd >= 0.0) || !self.asym_amp.is_finite() || !self.asym_phase.is_finite() {
            return Err(Error::InvalidArgument("scene temperatures or noise out of range".into()));
        }
        Ok(())
    }

    /// Noise-free temperature at offset (x east, y north) in km.
    pub fn clean_value(&self, x: f64, y: f64) -> f64 {
        let r = x.hypot(y);
        if r < self.eye_radius_km {
            self.eye_temp
        } else if r < self.eyewall_outer_radius_km {
            self.eyewall_temp + self.asym_amp * (y.atan2(x) - self.asym_phase).cos()
        } else {
            self.background_temp
        }
    }

    fn value(&self, x: f64, y: f64, index: u64) -> f64 {
        let mut t = self.clean_value(x, y);
        if self.noise_sd > 0.0 {
            t += self.noise_sd * gaussian(self.seed, STREAM_PIXEL, index);
        }
        t.clamp(MIN_TEMP_K, MAX_TEMP_K)
    }
}

/// Scene on a storm-centred grid (centre and time left at their defaults).
pub fn render_scene(params: &SceneParams, grid: GridSpec) -> Result<CenteredImage> {
    grid.validate()?;
    params.validate(&grid)?;
    let n = grid.side();
    let temps = (0..n * n)
        .map(|idx| {
            let (x, y) = grid.offset_km(idx / n, idx % n);
            params.value(x, y, idx as u64)
        })
        .collect();
    Ok(CenteredImage {
        center_lat: 0.0,
        center_lon: 0.0,
        grid,
        valid_time: NaiveDateTime::default(),
        temps,
    })
}

/// Lat/lon frame layout for rendered stacks; frames are centred on the storm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub width: usize,
    pub height: usize,
    pub step_deg: f64,
}

impl Default for FrameGeometry {
    fn default() -> Self {
        FrameGeometry {
            width: 40,
            height: 40,
            step_deg: 0.08,
        }
    }
}

/// Scene rendered into a lat/lon frame centred at `center`.
pub fn render_frame(params: &SceneParams, center: (f64, f64), geom: &FrameGeometry, time: NaiveDateTime) -> IrFrame {
    let (clat, clon) = center;
    let coslat = clat.to_radians().cos();
    let origin_lat = clat + 0.5 * (geom.height - 1) as f64 * geom.step_deg;
    let origin_lon = clon - 0.5 * (geom.width - 1) as f64 * geom.step_deg;
    let mut temps = Vec::with_capacity(geom.width * geom.height);
    for r in 0..geom.height {
        for c in 0..geom.width {
            let y = (origin_lat - r as f64 * geom.step_deg - clat) * KM_PER_DEG;
            let x = (origin_lon + c as f64 * geom.step_deg - clon) * KM_PER_DEG * coslat;
            temps.push(params.value(x, y, (r * geom.width + c) as u64) as f32);
        }
    }
    IrFrame {
        valid_time: time,
        channel: DEFAULT_CHANNEL.to_string(),
        origin_lat,
        origin_lon,
        step_deg: geom.step_deg,
        width: geom.width,
        height: geom.height,
        temps,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StormSimConfig {
    pub regime: String,
    pub steps: usize,
    pub cadence_hours: u32,
    pub rho: f64,
    pub depth_noise_sd: f64,
    /// kt per K per step.
    pub gamma: f64,
    pub intensity_noise_sd: f64,
    pub initial_intensity: f64,
    /// D*; also the initial depth unless `initial_depth` is set.
    pub reference_depth: f64,
    #[serde(default)]
    pub initial_depth: Option<f64>,
    /// Scene template; its eyewall temperature is replaced by the depth process.
    pub scene: SceneParams,
}

impl StormSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 || !(self.rho.abs() < 1.0) || self.cadence_hours == 0 {
            return Err(Error::InvalidArgument(format!(
                "simulation needs steps >= 2, |rho| < 1 and a cadence (steps {}, rho {})",
                self.steps, self.rho
            )));
        }
        if !(self.depth_noise_sd >= 0.0 && self.intensity_noise_sd >= 0.0) {
            return Err(Error::InvalidArgument("noise sd must be non-negative".into()));
        }
        if !(MIN_SIM_KT..=MAX_SIM_KT).contains(&self.initial_intensity) {
            return Err(Error::InvalidArgument(format!(
                "initial intensity {} outside [{}, {}]",
                self.initial_intensity, MIN_SIM_KT, MAX_SIM_KT
            )));
        }
        Ok(())
    }

    /// Deep, symmetric convection.
    pub fn deep_symmetric() -> Self {
        StormSimConfig {
            regime: "deep-symmetric".into(),
            steps: 40,
            cadence_hours: 6,
            rho: 0.9,
            depth_noise_sd: 3.0,
            gamma: 0.8,
            intensity_noise_sd: 2.0,
            initial_intensity: 35.0,
            reference_depth: 75.0,
            initial_depth: None,
            scene: SceneParams {
                eye_radius_km: 20.0,
                eyewall_outer_radius_km: 100.0,
                eye_temp: 285.0,
                eyewall_temp: 220.0,
                background_temp: 295.0,
                asym_amp: 0.0,
                asym_phase: 0.0,
                noise_sd: 1.0,
                seed: 0,
            },
        }
    }

    /// Shallower convection with a wavenumber-1 asymmetry.
    pub fn shallow_asymmetric() -> Self {
        StormSimConfig {
            regime: "shallow-asymmetric".into(),
            reference_depth: 40.0,
            scene: SceneParams {
                eye_radius_km: 30.0,
                eyewall_outer_radius_km: 120.0,
                eye_temp: 265.0,
                eyewall_temp: 250.0,
                background_temp: 290.0,
                asym_amp: 15.0,
                asym_phase: 0.0,
                noise_sd: 1.0,
                seed: 0,
            },
            ..Self::deep_symmetric()
        }
    }
}

/// Depth and intensity sequences of the coupled recurrence.
pub fn simulate_dynamics(cfg: &StormSimConfig, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    let mut d = vec![cfg.initial_depth.unwrap_or(cfg.reference_depth)];
    let mut v = vec![cfg.initial_intensity];
    for t in 1..cfg.steps {
        let (dp, vp) = (d[t - 1], v[t - 1]);
        let eta = cfg.depth_noise_sd * gaussian(seed, STREAM_DEPTH, t as u64);
        let eps = cfg.intensity_noise_sd * gaussian(seed, STREAM_WIND, t as u64);
        d.push(cfg.reference_depth * (1.0 - cfg.rho) + cfg.rho * dp + eta);
        v.push((vp + cfg.gamma * (dp - cfg.reference_depth) + eps).clamp(MIN_SIM_KT, MAX_SIM_KT));
    }
    Ok((d, v))
}

fn step_scene(template: &SceneParams, depth: f64, seed: u64, t: usize) -> SceneParams {
    SceneParams {
        eyewall_temp: (template.background_temp - depth).clamp(MIN_TEMP_K, MAX_TEMP_K),
        seed: mix(seed, t as u64),
        ..*template
    }
}

#[derive(Debug, Clone)]
pub struct SimStep {
    pub image: CenteredImage,
    pub vmax: f64,
    pub depth: f64,
}

/// Images and intensities on a storm-centred grid.
pub fn simulate_storm(cfg: &StormSimConfig, grid: GridSpec, seed: u64) -> Result<Vec<SimStep>> {
    cfg.scene.validate(&grid)?;
    let (d, v) = simulate_dynamics(cfg, seed)?;
    let t0 = NaiveDateTime::default();
    d.iter()
        .zip(&v)
        .enumerate()
        .map(|(t, (&depth, &vmax))| {
            let mut image = render_scene(&step_scene(&cfg.scene, depth, seed, t), grid)?;
            image.valid_time = t0 + Duration::hours(i64::from(cfg.cadence_hours) * t as i64);
            Ok(SimStep { image, vmax, depth })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryConfig {
    pub n_storms: usize,
    pub seed: u64,
    pub regimes: Vec<StormSimConfig>,
    pub frame: FrameGeometry,
    /// Grid the scene radii are validated against.
    pub grid: GridSpec,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        LibraryConfig {
            n_storms: 200,
            seed: 7,
            regimes: vec![StormSimConfig::deep_symmetric(), StormSimConfig::shallow_asymmetric()],
            frame: FrameGeometry::default(),
            grid: GridSpec {
                half_width_km: 160.0,
                step_km: 8.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryStorm {
    pub storm_id: String,
    pub regime: String,
    pub regime_index: usize,
    /// Relative to the library root.
    pub manifest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryIndex {
    pub seed: u64,
    pub hurdat2: String,
    pub storms: Vec<LibraryStorm>,
}

pub const LIBRARY_INDEX: &str = "library.json";
pub const LIBRARY_HURDAT2: &str = "hurdat2.txt";

impl LibraryIndex {
    pub fn load(root: &Path) -> Result<Self> {
        block::read_json(&root.join(LIBRARY_INDEX))
    }
}

/// `SY` + two-digit storm number + year; 50 storms per year from 2000.
pub fn storm_id(i: usize) -> String {
    format!("SY{:02}{:04}", i % 50 + 1, 2000 + i / 50)
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn status_for(v: i32) -> &'static str {
    match v {
        ..=33 => "TD",
        34..=63 => "TS",
        _ => "HU",
    }
}

/// Per-storm configuration and track for storm `i`.
fn storm_plan(cfg: &LibraryConfig, i: usize) -> (StormSimConfig, u64, StormTrack) {
    let regime = &cfg.regimes[i % cfg.regimes.len()];
    let s = mix(cfg.seed, i as u64);
    let u = |k: u64| uniform(s, STREAM_STORM, k);
    let mut sim = regime.clone();
    sim.initial_intensity = (regime.initial_intensity + 20.0 * (u(0) - 0.5)).clamp(MIN_SIM_KT, MAX_SIM_KT);
    let stationary_sd = regime.depth_noise_sd / (1.0 - regime.rho * regime.rho).sqrt();
    sim.initial_depth = Some(
        regime.initial_depth.unwrap_or(regime.reference_depth) + stationary_sd * gaussian(s, STREAM_STORM, 1),
    );
    sim.scene.asym_phase = 2.0 * PI * u(2);
    let (lat0, lon0) = (10.0 + 6.0 * u(3), -70.0 + 30.0 * u(4));
    let (dlat, dlon) = (0.1 + 0.15 * u(5), -0.6 + 0.4 * u(6));
    let year = 2000 + (i / 50) as i32;
    let start = NaiveDate::from_ymd_opt(year, 6, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
        + Duration::days(3 * (i % 50) as i64);
    let fixes = (0..sim.steps)
        .map(|t| TrackFix {
            time: start + Duration::hours(i64::from(sim.cadence_hours) * t as i64),
            record_id: None,
            status: String::new(),
            lat: round1(lat0 + dlat * t as f64),
            lon: round1(lon0 + dlon * t as f64),
            vmax: None,
            pmin: None,
        })
        .collect();
    let track = StormTrack {
        storm_id: storm_id(i),
        name: "UNNAMED".into(),
        fixes,
    };
    (sim, s, track)
}

/// Write a library: `hurdat2.txt`, `stacks/<id>/` frame stacks and
/// `library.json` with regime labels.
pub fn generate_library(cfg: &LibraryConfig, out: &Path) -> Result<LibraryIndex> {
    if cfg.n_storms == 0 || cfg.regimes.is_empty() {
        return Err(Error::InvalidArgument("library needs at least one storm and one regime".into()));
    }
    if cfg.n_storms > 50 * 100 {
        return Err(Error::InvalidArgument("at most 5000 storms fit the id scheme".into()));
    }
    cfg.grid.validate()?;
    for r in &cfg.regimes {
        r.validate()?;
        r.scene.validate(&cfg.grid)?;
    }
    if cfg.frame.width < 16 || cfg.frame.height < 16 || !(cfg.frame.step_deg > 0.0) {
        return Err(Error::InvalidArgument("frames must be at least 16x16 with a positive step".into()));
    }
    let results: Vec<(StormTrack, LibraryStorm)> = (0..cfg.n_storms)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let (sim, seed, mut track) = storm_plan(cfg, i);
            let (depths, winds) = simulate_dynamics(&sim, seed)?;
            let mut frames = Vec::with_capacity(sim.steps);
            for (t, fix) in track.fixes.iter_mut().enumerate() {
                let v = winds[t].round() as i32;
                fix.vmax = Some(v);
                fix.pmin = Some((1012.0 - 0.75 * f64::from(v)).round() as i32);
                fix.status = status_for(v).to_string();
                let scene = step_scene(&sim.scene, depths[t], seed, t);
                frames.push(render_frame(&scene, (fix.lat, fix.lon), &cfg.frame, fix.time));
            }
            let rel = PathBuf::from("stacks").join(&track.storm_id);
            write_ir_stack(&out.join(&rel), &track.storm_id, &frames)?;
            let entry = LibraryStorm {
                storm_id: track.storm_id.clone(),
                regime: sim.regime.clone(),
                regime_index: i % cfg.regimes.len(),
                manifest: rel.join("manifest.json").to_string_lossy().replace('\\', "/"),
            };
            Ok((track, entry))
        })
        .collect::<Result<_>>()?;
    let (tracks, storms): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    block::write_atomic(&out.join(LIBRARY_HURDAT2), write_hurdat2(&tracks).as_bytes())?;
    let index = LibraryIndex {
        seed: cfg.seed,
        hurdat2: LIBRARY_HURDAT2.into(),
        storms,
    };
    block::write_json(&out.join(LIBRARY_INDEX), &index)?;
    Ok(index)
}
