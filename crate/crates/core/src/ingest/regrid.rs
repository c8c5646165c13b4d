//! Storm-centred analysis grids.

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::frames::IrFrame;
use crate::error::{Error, Result};

/// km per degree of latitude in the local flat-earth approximation.
pub const KM_PER_DEG: f64 = 111.32;

/// Geometry of a square storm-centred grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub half_width_km: f64,
    pub step_km: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            half_width_km: 400.0,
            step_km: 4.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_km > 0.0) {
            return Err(Error::InvalidArgument(format!("step_km must be positive, got {}", self.step_km)));
        }
        let ratio = self.half_width_km / self.step_km;
        if !(self.half_width_km > 0.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "half_width_km {} is not a multiple of step_km {}",
                self.half_width_km, self.step_km
            )));
        }
        Ok(())
    }

    /// Pixels per side (always odd).
    pub fn side(&self) -> usize {
        2 * (self.half_width_km / self.step_km).round() as usize + 1
    }

    /// Displacement (east, north) in km of pixel (row, col) from the centre.
    #[inline]
    pub fn offset_km(&self, row: usize, col: usize) -> (f64, f64) {
        let h = self.half_width_km;
        (-h + col as f64 * self.step_km, h - row as f64 * self.step_km)
    }
}

/// A square storm-centred brightness-temperature grid. Row 0 is north, column 0 west.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredImage {
    pub center_lat: f64,
    pub center_lon: f64,
    pub grid: GridSpec,
    pub valid_time: NaiveDateTime,
    /// Row-major temperatures in K; NaN marks missing.
    pub temps: Vec<f64>,
}

impl CenteredImage {
    pub fn side(&self) -> usize {
        self.grid.side()
    }

    pub fn is_missing(&self, idx: usize) -> bool {
        self.temps[idx].is_nan()
    }

    pub fn missing_count(&self) -> usize {
        self.temps.iter().filter(|v| v.is_nan()).count()
    }

    /// Rotate the grid a quarter turn counter-clockwise about its centre pixel.
    pub fn rotated_quarter(&self) -> CenteredImage {
        let n = self.side();
        let mut temps = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                // (i, j) -> (n-1-j, i)
                temps[(n - 1 - j) * n + i] = self.temps[i * n + j];
            }
        }
        CenteredImage {
            temps,
            ..self.clone()
        }
    }
}

/// Bilinear sample with missing-aware weights. `None` outside the frame or
/// when no neighbour with positive weight is present.
fn sample_bilinear(frame: &IrFrame, row: f64, col: f64) -> Option<f64> {
    let (h, w) = (frame.height, frame.width);
    if !(row >= 0.0 && col >= 0.0 && row <= (h - 1) as f64 && col <= (w - 1) as f64) {
        return None;
    }
    let r0 = (row.floor() as usize).min(h - 2);
    let c0 = (col.floor() as usize).min(w - 2);
    let fr = row - r0 as f64;
    let fc = col - c0 as f64;
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
            let v = frame.get(r0 + dr, c0 + dc);
            let wt = wr * wc;
            if !v.is_nan() && wt > 0.0 {
                acc += wt * f64::from(v);
                wsum += wt;
            }
        }
    }
    if wsum > 0.0 {
        Some(acc / wsum)
    } else {
        None
    }
}

/// Resample `frame` onto a grid centred at `center` (lat, lon).
pub fn regrid_to_storm(frame: &IrFrame, center: (f64, f64), grid: GridSpec) -> Result<CenteredImage> {
    grid.validate()?;
    let (clat, clon) = center;
    if clat.abs() >= 85.0 {
        return Err(Error::InvalidArgument(format!(
            "centre latitude {} too close to the pole",
            clat
        )));
    }
    let n = grid.side();
    let coslat = (clat * std::f64::consts::PI / 180.0).cos();
    let mut temps = vec![f64::NAN; n * n];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = grid.offset_km(i, j);
            let lat = clat + y / KM_PER_DEG;
            let lon = clon + x / (KM_PER_DEG * coslat);
            // longitude difference to the frame origin, wrapped into (-180, 180]
            let mut dlon = lon - frame.origin_lon;
            dlon -= 360.0 * ((dlon - 180.0) / 360.0).ceil();
            let col = dlon / frame.step_deg;
            let row = (frame.origin_lat - lat) / frame.step_deg;
            if let Some(v) = sample_bilinear(frame, row, col) {
                temps[i * n + j] = v;
            }
        }
    }
    Ok(CenteredImage {
        center_lat: clat,
        center_lon: clon,
        grid,
        valid_time: frame.valid_time,
        temps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(w: usize, h: usize, origin: (f64, f64), step: f64, f: impl Fn(usize, usize) -> f32) -> IrFrame {
        let mut temps = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                temps.push(f(r, c));
            }
        }
        IrFrame {
            valid_time: NaiveDateTime::default(),
            channel: "IR".into(),
            origin_lat: origin.0,
            origin_lon: origin.1,
            step_deg: step,
            width: w,
            height: h,
            temps,
        }
    }

    #[test]
    fn constant_frame_gives_constant_image() {
        let f = frame(64, 64, (20.0, -70.0), 0.1, |_, _| 250.0);
        let img = regrid_to_storm(&f, (16.8, -66.8), GridSpec { half_width_km: 100.0, step_km: 5.0 }).unwrap();
        assert_eq!(img.missing_count(), 0);
        assert!(img.temps.iter().all(|&t| (t - 250.0).abs() < 1e-9));
    }

    #[test]
    fn identity_resampling_at_equator() {
        let step_km = 4.0;
        let step_deg = step_km / KM_PER_DEG;
        let f = frame(41, 41, (20.0 * step_deg, -20.0 * step_deg), step_deg, |r, c| {
            200.0 + (r * 41 + c) as f32 * 0.05
        });
        let img = regrid_to_storm(&f, (0.0, 0.0), GridSpec { half_width_km: 40.0, step_km }).unwrap();
        let n = img.side();
        for i in 0..n {
            for j in 0..n {
                let src = f.get(10 + i, 10 + j) as f64;
                assert!((img.temps[i * n + j] - src).abs() < 1e-9, "{} {}", i, j);
            }
        }
    }

    #[test]
    fn near_edge_far_side_missing() {
        let f = frame(32, 32, (20.0, -70.0), 0.1, |_, _| 260.0);
        // centre two pixels from the eastern edge
        let img = regrid_to_storm(&f, (18.5, -67.1), GridSpec { half_width_km: 100.0, step_km: 10.0 }).unwrap();
        let n = img.side();
        assert!(img.is_missing(n / 2 * n + (n - 1)), "east edge should be missing");
        assert!(!img.is_missing(n / 2 * n), "west edge should be present");
    }

    #[test]
    fn missing_neighbours_are_skipped() {
        let f = frame(32, 32, (20.0, -70.0), 0.1, |r, c| if (r + c) % 2 == 0 { f32::NAN } else { 240.0 });
        let img = regrid_to_storm(&f, (18.45, -68.45), GridSpec { half_width_km: 20.0, step_km: 4.0 }).unwrap();
        assert!(img.temps.iter().filter(|v| !v.is_nan()).all(|&t| (t - 240.0).abs() < 1e-9));
    }

    #[test]
    fn wraps_across_dateline() {
        let f = frame(40, 40, (12.0, 178.0), 0.1, |_, _| 255.0);
        let img = regrid_to_storm(&f, (10.0, -179.95), GridSpec { half_width_km: 40.0, step_km: 4.0 }).unwrap();
        assert_eq!(img.missing_count(), 0);
    }

    #[test]
    fn rejects_polar_centres_and_bad_steps() {
        let f = frame(16, 16, (0.0, 0.0), 0.1, |_, _| 250.0);
        assert!(regrid_to_storm(&f, (85.0, 0.0), GridSpec::default()).is_err());
        assert!(regrid_to_storm(&f, (0.0, 0.0), GridSpec { half_width_km: 10.0, step_km: 0.0 }).is_err());
        assert!(regrid_to_storm(&f, (0.0, 0.0), GridSpec { half_width_km: 10.0, step_km: 3.0 }).is_err());
    }

    #[test]
    fn default_grid_is_201() {
        assert_eq!(GridSpec::default().side(), 201);
    }
}
