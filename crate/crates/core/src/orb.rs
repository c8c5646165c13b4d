//! Structural summary functions of a storm-centred image.
//!
//! Three families are computed on a fixed discretisation:
//!
//! * radial profiles (mean and population standard deviation of brightness
//!   temperature in concentric annuli),
//! * azimuthal harmonic amplitudes per annulus (organisation / symmetry of the
//!   convection around the centre),
//! * cold-cloud fraction as a function of a temperature threshold (bulk
//!   morphology of the level sets).
//!
//! All of them are set functions of the pixels: sums run over values sorted
//! into a canonical order, so the output does not depend on traversal order
//! and quarter-turn rotations of the grid give bit-identical radial means and
//! level-set areas.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::CenteredImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbscissaKind {
    RadiusKm,
    ThresholdK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadialStatistic {
    Mean,
    Stdev,
}

/// A discretised one-dimensional summary. `NaN` marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbFunction {
    pub kind: AbscissaKind,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl OrbFunction {
    pub fn missing_fraction(&self) -> f64 {
        if self.values.is_empty() {
            return 1.0;
        }
        self.values.iter().filter(|v| v.is_nan()).count() as f64 / self.values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbConfig {
    pub r_step_km: f64,
    pub r_max_km: f64,
    pub c_min_k: f64,
    pub c_max_k: f64,
    pub c_step_k: f64,
    pub asym_wavenumbers: Vec<u32>,
    pub max_missing_fraction: f64,
}

impl Default for OrbConfig {
    fn default() -> Self {
        OrbConfig {
            r_step_km: 4.0,
            r_max_km: 400.0,
            c_min_k: 180.0,
            c_max_k: 310.0,
            c_step_k: 2.0,
            asym_wavenumbers: vec![1],
            max_missing_fraction: 0.5,
        }
    }
}

impl OrbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_step_km > 0.0 && self.c_step_k > 0.0) {
            return Err(Error::InvalidArgument("ORB grid steps must be positive".into()));
        }
        if self.n_annuli() == 0 || self.c_max_k < self.c_min_k {
            return Err(Error::InvalidArgument("ORB grids must be non-empty".into()));
        }
        if self.asym_wavenumbers.contains(&0) {
            return Err(Error::InvalidArgument("asymmetry wavenumbers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn n_annuli(&self) -> usize {
        (self.r_max_km / self.r_step_km + 1e-9).floor() as usize
    }

    /// Annulus edges `0, step, ..., r_max`.
    pub fn r_edges(&self) -> Vec<f64> {
        (0..=self.n_annuli()).map(|k| k as f64 * self.r_step_km).collect()
    }

    /// Annulus centres, the abscissa of radial functions.
    pub fn r_grid(&self) -> Vec<f64> {
        (0..self.n_annuli())
            .map(|k| (k as f64 + 0.5) * self.r_step_km)
            .collect()
    }

    pub fn c_grid(&self) -> Vec<f64> {
        let n = ((self.c_max_k - self.c_min_k) / self.c_step_k + 1e-9).floor() as usize + 1;
        (0..n).map(|i| self.c_min_k + i as f64 * self.c_step_k).collect()
    }

    pub fn layout(&self) -> OrbLayout {
        let nr = self.n_annuli();
        let nc = self.c_grid().len();
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, kind, len| {
            entries.push(LayoutEntry { name, kind, offset, len });
            offset += len;
        };
        push("radial_mean".into(), AbscissaKind::RadiusKm, nr);
        push("radial_stdev".into(), AbscissaKind::RadiusKm, nr);
        for k in &self.asym_wavenumbers {
            push(format!("asymmetry_k{}", k), AbscissaKind::RadiusKm, nr);
        }
        push("levelset_area".into(), AbscissaKind::ThresholdK, nc);
        OrbLayout {
            entries,
            r_grid: self.r_grid(),
            c_grid: self.c_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub kind: AbscissaKind,
    pub offset: usize,
    pub len: usize,
}

/// Where each function lives inside an [`OrbVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbLayout {
    pub entries: Vec<LayoutEntry>,
    pub r_grid: Vec<f64>,
    pub c_grid: Vec<f64>,
}

impl OrbLayout {
    pub fn dim(&self) -> usize {
        self.entries.iter().map(|e| e.len).sum()
    }
}

/// The concatenated summary vector of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbVector {
    pub values: Vec<f64>,
    pub layout: Arc<OrbLayout>,
}

impl OrbVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.values[e.offset..e.offset + e.len])
    }
}

/// Sum in ascending order so the result depends only on the multiset.
fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Per-annulus pixel membership for one grid geometry.
struct Annuli {
    /// (pixel index, angle) per annulus.
    members: Vec<Vec<(usize, f64)>>,
    /// annuli that extend beyond the image
    outside: Vec<bool>,
}

impl Annuli {
    fn new(img: &CenteredImage, cfg: &OrbConfig) -> Self {
        let n = img.side();
        let edges = cfg.r_edges();
        let nr = cfg.n_annuli();
        let mut members = vec![Vec::new(); nr];
        for i in 0..n {
            for j in 0..n {
                let (x, y) = img.grid.offset_km(i, j);
                let r = (x * x + y * y).sqrt();
                if r >= edges[nr] {
                    continue;
                }
                let mut k = ((r / cfg.r_step_km).floor() as usize).min(nr - 1);
                if r < edges[k] {
                    k -= 1;
                } else if r >= edges[k + 1] {
                    k += 1;
                }
                members[k].push((i * n + j, y.atan2(x)));
            }
        }
        let limit = img.grid.half_width_km + 0.5 * img.grid.step_km;
        let outside = edges[1..].iter().map(|&e| e > limit + 1e-9).collect();
        Annuli { members, outside }
    }

    /// Non-missing (temperature, angle) pairs of annulus `k`, or `None` when
    /// the annulus is missing.
    fn present(&self, img: &CenteredImage, k: usize, max_missing: f64) -> Option<Vec<(f64, f64)>> {
        let m = &self.members[k];
        if self.outside[k] || m.is_empty() {
            return None;
        }
        let vals: Vec<(f64, f64)> = m
            .iter()
            .filter(|(p, _)| !img.is_missing(*p))
            .map(|&(p, th)| (img.temps[p], th))
            .collect();
        let missing = (m.len() - vals.len()) as f64 / m.len() as f64;
        if vals.is_empty() || missing > max_missing {
            None
        } else {
            Some(vals)
        }
    }
}

fn radial_from(annuli: &Annuli, img: &CenteredImage, stat: RadialStatistic, cfg: &OrbConfig) -> OrbFunction {
    let values = (0..cfg.n_annuli())
        .map(|k| match annuli.present(img, k, cfg.max_missing_fraction) {
            None => f64::NAN,
            Some(pairs) => {
                let mut v: Vec<f64> = pairs.iter().map(|p| p.0).collect();
                let n = v.len() as f64;
                let mean = canonical_sum(&mut v) / n;
                match stat {
                    RadialStatistic::Mean => mean,
                    RadialStatistic::Stdev => {
                        // v is sorted now, so the squared deviations come out in a fixed order
                        let ss: f64 = v.iter().map(|t| (t - mean) * (t - mean)).sum();
                        (ss / n).sqrt()
                    }
                }
            }
        })
        .collect();
    OrbFunction {
        kind: AbscissaKind::RadiusKm,
        grid: cfg.r_grid(),
        values,
    }
}

fn asymmetry_from(annuli: &Annuli, img: &CenteredImage, k: u32, cfg: &OrbConfig) -> OrbFunction {
    let kf = f64::from(k);
    let values = (0..cfg.n_annuli())
        .map(|a| match annuli.present(img, a, cfg.max_missing_fraction) {
            None => f64::NAN,
            Some(mut pairs) => {
                pairs.sort_unstable_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
                let n = pairs.len() as f64;
                let mean = pairs.iter().map(|p| p.0).sum::<f64>() / n;
                let (mut re, mut im) = (0.0, 0.0);
                for &(t, th) in &pairs {
                    let d = t - mean;
                    re += d * (kf * th).cos();
                    im -= d * (kf * th).sin();
                }
                2.0 / n * re.hypot(im)
            }
        })
        .collect();
    OrbFunction {
        kind: AbscissaKind::RadiusKm,
        grid: cfg.r_grid(),
        values,
    }
}

/// Mean or standard deviation of brightness temperature per annulus.
pub fn radial_profile(img: &CenteredImage, stat: RadialStatistic, cfg: &OrbConfig) -> OrbFunction {
    radial_from(&Annuli::new(img, cfg), img, stat, cfg)
}

/// Amplitude (K) of the wavenumber-`k` azimuthal harmonic per annulus.
pub fn asymmetry_profile(img: &CenteredImage, k: u32, cfg: &OrbConfig) -> Result<OrbFunction> {
    if k == 0 {
        return Err(Error::InvalidArgument("wavenumber must be >= 1".into()));
    }
    Ok(asymmetry_from(&Annuli::new(img, cfg), img, k, cfg))
}

/// Fraction of non-missing pixels at or below each temperature threshold.
pub fn levelset_area(img: &CenteredImage, cfg: &OrbConfig) -> Result<OrbFunction> {
    let mut temps: Vec<f64> = img.temps.iter().copied().filter(|v| !v.is_nan()).collect();
    if temps.is_empty() {
        return Err(Error::Rejected("level-set area of a fully missing image".into()));
    }
    temps.sort_unstable_by(f64::total_cmp);
    let n = temps.len() as f64;
    let grid = cfg.c_grid();
    let values = grid
        .iter()
        .map(|&c| temps.partition_point(|&t| t <= c) as f64 / n)
        .collect();
    Ok(OrbFunction {
        kind: AbscissaKind::ThresholdK,
        grid,
        values,
    })
}

/// Fill missing entries from the nearest present neighbour; ties take the lower abscissa.
pub fn impute_nearest(values: &mut [f64]) {
    let present: Vec<usize> = (0..values.len()).filter(|&i| !values[i].is_nan()).collect();
    if present.is_empty() {
        return;
    }
    let src = values.to_vec();
    for i in 0..values.len() {
        if !src[i].is_nan() {
            continue;
        }
        let p = present.partition_point(|&j| j < i);
        let below = p.checked_sub(1).map(|q| present[q]);
        let above = present.get(p).copied();
        let pick = match (below, above) {
            (Some(b), Some(a)) => {
                if i - b <= a - i {
                    b
                } else {
                    a
                }
            }
            (Some(b), None) => b,
            (None, Some(a)) => a,
            (None, None) => unreachable!(),
        };
        values[i] = src[pick];
    }
}

/// Computes all summary functions of an image and concatenates them.
pub struct OrbExtractor {
    cfg: OrbConfig,
    layout: Arc<OrbLayout>,
}

impl OrbExtractor {
    pub fn new(cfg: OrbConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Arc::new(cfg.layout());
        Ok(OrbExtractor { cfg, layout })
    }

    pub fn config(&self) -> &OrbConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<OrbLayout> {
        &self.layout
    }

    pub fn functions(&self, img: &CenteredImage) -> Result<Vec<OrbFunction>> {
        let annuli = Annuli::new(img, &self.cfg);
        let mut fns = vec![
            radial_from(&annuli, img, RadialStatistic::Mean, &self.cfg),
            radial_from(&annuli, img, RadialStatistic::Stdev, &self.cfg),
        ];
        for &k in &self.cfg.asym_wavenumbers {
            fns.push(asymmetry_from(&annuli, img, k, &self.cfg));
        }
        fns.push(levelset_area(img, &self.cfg)?);
        Ok(fns)
    }

    pub fn extract(&self, img: &CenteredImage) -> Result<OrbVector> {
        let fns = self.functions(img)?;
        let mut values = Vec::with_capacity(self.layout.dim());
        for (f, entry) in fns.into_iter().zip(&self.layout.entries) {
            let frac = f.missing_fraction();
            if frac > self.cfg.max_missing_fraction {
                return Err(Error::Rejected(format!(
                    "{} is {:.0}% missing",
                    entry.name,
                    100.0 * frac
                )));
            }
            let mut v = f.values;
            impute_nearest(&mut v);
            values.extend(v);
        }
        Ok(OrbVector {
            values,
            layout: Arc::clone(&self.layout),
        })
    }
}

/// One-shot version of [`OrbExtractor::extract`].
pub fn assemble_orb_vector(img: &CenteredImage, cfg: &OrbConfig) -> Result<OrbVector> {
    OrbExtractor::new(cfg.clone())?.extract(img)
}
