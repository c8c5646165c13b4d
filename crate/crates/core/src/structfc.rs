//! Structural forecasts.
//!
//! * Pathway B: a pooled ridge VAR(p) on the principal-component coefficients
//!   of the summary vectors.
//! * Pathway A: PCA of the flattened images plus a VAR in that image latent
//!   space; forecast frames are reconstructed, clamped to the physical range,
//!   and handed back to the summary extractor by the caller.
//! * Persistence: repeat the last observation.

use std::path::Path;

use chrono::Duration;
use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use crate::block::{self, Block};
use crate::error::{Error, Result};
use crate::ingest::frames::{MAX_TEMP_K, MIN_TEMP_K};
use crate::ingest::{CenteredImage, GridSpec};
use crate::latent::{fit_pca, PcBasis, RankRule};

/// Default ridge candidates, chosen between on a validation split.
pub const RIDGE_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

/// z_t = b + sum_i A_i z_{t-i}
#[derive(Debug, Clone, PartialEq)]
pub struct VarModel {
    pub order: usize,
    pub intercept: Vec<f64>,
    /// A_1..A_p, each k x k.
    pub coefs: Vec<DMatrix<f64>>,
    pub lambda: f64,
    /// Per-dimension mean squared one-step training residual.
    pub residual_var: Vec<f64>,
}

impl VarModel {
    pub fn dim(&self) -> usize {
        self.intercept.len()
    }

    /// Frobenius norm of the stacked lag matrices.
    pub fn coef_norm(&self) -> f64 {
        self.coefs.iter().map(|a| a.norm_squared()).sum::<f64>().sqrt()
    }

    /// One-step prediction from lags, most recent last.
    pub fn predict_next(&self, lags: &[Vec<f64>]) -> Vec<f64> {
        let n = lags.len();
        let mut out = self.intercept.clone();
        for (i, a) in self.coefs.iter().enumerate() {
            let z = &lags[n - 1 - i];
            for r in 0..out.len() {
                let mut acc = 0.0;
                for c in 0..z.len() {
                    acc += a[(r, c)] * z[c];
                }
                out[r] += acc;
            }
        }
        out
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let k = self.dim();
        let mut vals = self.intercept.clone();
        for a in &self.coefs {
            for r in 0..k {
                vals.extend(a.row(r).iter());
            }
        }
        let bin = format!("{}.bin", stem);
        Block::from_f64(k, 1 + self.order * k, &vals).write(&dir.join(&bin))?;
        block::write_json(
            &dir.join(format!("{}.json", stem)),
            &VarFile {
                order: self.order,
                k,
                lambda: self.lambda,
                residual_var: self.residual_var.clone(),
                block: bin,
            },
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<VarModel> {
        let meta: VarFile = block::read_json(&dir.join(format!("{}.json", stem)))?;
        let path = dir.join(&meta.block);
        let blk = Block::read(&path)?;
        let k = meta.k;
        if blk.width != k || blk.height != 1 + meta.order * k {
            return Err(Error::format(&path, "VAR block shape does not match metadata"));
        }
        let v = blk.to_f64();
        let coefs = (0..meta.order)
            .map(|i| DMatrix::from_row_slice(k, k, &v[k + i * k * k..k + (i + 1) * k * k]))
            .collect();
        Ok(VarModel {
            order: meta.order,
            intercept: v[..k].to_vec(),
            coefs,
            lambda: meta.lambda,
            residual_var: meta.residual_var,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VarFile {
    order: usize,
    k: usize,
    lambda: f64,
    residual_var: Vec<f64>,
    block: String,
}

fn series_dim(series: &[Vec<Vec<f64>>]) -> Result<usize> {
    let k = series
        .iter()
        .flat_map(|s| s.first())
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::InsufficientData("no sequences".into()))?;
    for z in series.iter().flatten() {
        if z.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: z.len(),
            });
        }
    }
    Ok(k)
}

/// Pooled ridge least squares for a VAR(p); the intercept is not penalised
/// and no lag crosses a sequence boundary.
pub fn fit_var(series: &[Vec<Vec<f64>>], p: usize, lambda: f64) -> Result<VarModel> {
    if p == 0 {
        return Err(Error::InvalidArgument("VAR order must be >= 1".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge lambda {} < 0", lambda)));
    }
    let k = series_dim(series)?;
    let n_obs: usize = series.iter().map(|s| s.len().saturating_sub(p)).sum();
    if n_obs == 0 {
        return Err(Error::InsufficientData(format!(
            "no sequence longer than the VAR order {}",
            p
        )));
    }
    let m = 1 + k * p;
    let ridge_rows = if lambda > 0.0 { k * p } else { 0 };
    let mut x = DMatrix::zeros(n_obs + ridge_rows, m);
    let mut y = DMatrix::zeros(n_obs + ridge_rows, k);
    let mut row = 0;
    for s in series {
        for t in p..s.len() {
            x[(row, 0)] = 1.0;
            for i in 0..p {
                for c in 0..k {
                    x[(row, 1 + i * k + c)] = s[t - 1 - i][c];
                }
            }
            for c in 0..k {
                y[(row, c)] = s[t][c];
            }
            row += 1;
        }
    }
    // ridge as extra rows sqrt(lambda) * I on the lag columns
    let sl = lambda.sqrt();
    for j in 0..ridge_rows {
        x[(n_obs + j, 1 + j)] = sl;
    }
    let svd = SVD::new(x.clone(), true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-13 * (m as f64);
    let beta = svd
        .solve(&y, eps)
        .map_err(|e| Error::Numerical(format!("VAR least squares: {}", e)))?;

    let intercept = beta.row(0).iter().copied().collect();
    let coefs = (0..p)
        .map(|i| beta.rows(1 + i * k, k).transpose())
        .collect::<Vec<_>>();
    let fitted = x.rows(0, n_obs) * &beta;
    let resid = y.rows(0, n_obs) - fitted;
    let residual_var = (0..k)
        .map(|c| resid.column(c).norm_squared() / n_obs as f64)
        .collect();
    Ok(VarModel {
        order: p,
        intercept,
        coefs,
        lambda,
        residual_var,
    })
}

/// Iterated forecast: predictions are fed back as lags.
pub fn forecast_var(model: &VarModel, history: &[Vec<f64>], steps: usize) -> Result<Vec<Vec<f64>>> {
    if history.len() < model.order {
        return Err(Error::InsufficientData(format!(
            "history of {} < VAR order {}",
            history.len(),
            model.order
        )));
    }
    if let Some(z) = history.iter().find(|z| z.len() != model.dim()) {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: z.len(),
        });
    }
    let mut lags: Vec<Vec<f64>> = history[history.len() - model.order..].to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next = model.predict_next(&lags);
        lags.remove(0);
        lags.push(next.clone());
        out.push(next);
    }
    Ok(out)
}

/// Root-mean-square one-step error of `model` over every step of `series`.
pub fn one_step_rms(model: &VarModel, series: &[Vec<Vec<f64>>]) -> Option<f64> {
    let p = model.order;
    let (mut ss, mut n) = (0.0, 0usize);
    for s in series {
        for t in p..s.len() {
            let pred = model.predict_next(&s[t - p..t]);
            for (a, b) in pred.iter().zip(&s[t]) {
                ss += (a - b) * (a - b);
                n += 1;
            }
        }
    }
    (n > 0).then(|| (ss / n as f64).sqrt())
}

/// Fit on `train` for each ridge candidate and keep the one with the lowest
/// validation one-step RMS. Falls back to the training RMS when the
/// validation split has no usable sequence. Ties keep the smaller lambda.
pub fn select_var(
    train: &[Vec<Vec<f64>>],
    validation: &[Vec<Vec<f64>>],
    p: usize,
    grid: &[f64],
) -> Result<VarModel> {
    let mut best: Option<(f64, VarModel)> = None;
    for &lambda in grid {
        let m = fit_var(train, p, lambda)?;
        let score = one_step_rms(&m, validation)
            .or_else(|| one_step_rms(&m, train))
            .unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, m));
        }
    }
    best.map(|(_, m)| m)
        .ok_or_else(|| Error::InvalidArgument("empty ridge grid".into()))
}

/// Repeat the last element of `history`.
pub fn persistence_forecast<T: Clone>(history: &[T], steps: usize) -> Result<Vec<T>> {
    let last = history
        .last()
        .ok_or_else(|| Error::InsufficientData("persistence needs a non-empty history".into()))?;
    Ok(vec![last.clone(); steps])
}

/// Pathway A: linear dynamics of whole images in a PCA latent space.
#[derive(Debug, Clone)]
pub struct ImageDynamicsModel {
    pub image_basis: PcBasis,
    pub dynamics: VarModel,
    pub grid: GridSpec,
    pub cadence_hours: u32,
}

/// Flattened temperatures with missing pixels set to the image's own mean.
pub fn flatten_imputed(img: &CenteredImage) -> Vec<f64> {
    let present: Vec<f64> = img.temps.iter().copied().filter(|v| !v.is_nan()).collect();
    let fill = if present.is_empty() {
        0.5 * (MIN_TEMP_K + MAX_TEMP_K)
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    img.temps.iter().map(|&v| if v.is_nan() { fill } else { v }).collect()
}

fn check_grid(expected: &GridSpec, img: &CenteredImage) -> Result<()> {
    if img.grid != *expected {
        return Err(Error::InvalidArgument(format!(
            "image grid {:?} differs from the model grid {:?}",
            img.grid, expected
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageDynamicsParams {
    pub k_img: usize,
    pub order: usize,
    pub lambda: f64,
    pub cadence_hours: u32,
}

impl Default for ImageDynamicsParams {
    fn default() -> Self {
        ImageDynamicsParams {
            k_img: 64,
            order: 4,
            lambda: 0.1,
            cadence_hours: 6,
        }
    }
}

fn image_rows(sequences: &[Vec<CenteredImage>], grid: &GridSpec) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for img in sequences.iter().flatten() {
        check_grid(grid, img)?;
        rows.push(flatten_imputed(img));
    }
    Ok(rows)
}

fn image_latent(basis: &PcBasis, sequences: &[Vec<CenteredImage>], grid: &GridSpec) -> Result<Vec<Vec<Vec<f64>>>> {
    sequences
        .iter()
        .map(|s| {
            s.iter()
                .map(|img| {
                    check_grid(grid, img)?;
                    basis.project(&flatten_imputed(img))
                })
                .collect()
        })
        .collect()
}

fn image_basis(sequences: &[Vec<CenteredImage>], params: &ImageDynamicsParams) -> Result<(PcBasis, GridSpec)> {
    let grid = sequences
        .iter()
        .flat_map(|s| s.first())
        .map(|i| i.grid)
        .next()
        .ok_or_else(|| Error::InsufficientData("no image sequences".into()))?;
    if !sequences.iter().any(|s| s.len() > params.order) {
        return Err(Error::InsufficientData(format!(
            "no image sequence longer than the VAR order {}",
            params.order
        )));
    }
    let rows = image_rows(sequences, &grid)?;
    Ok((fit_pca(&rows, RankRule::Fixed(params.k_img))?, grid))
}

pub fn fit_image_dynamics(sequences: &[Vec<CenteredImage>], params: &ImageDynamicsParams) -> Result<ImageDynamicsModel> {
    let (basis, grid) = image_basis(sequences, params)?;
    let latent = image_latent(&basis, sequences, &grid)?;
    let dynamics = fit_var(&latent, params.order, params.lambda)?;
    Ok(ImageDynamicsModel {
        image_basis: basis,
        dynamics,
        grid,
        cadence_hours: params.cadence_hours,
    })
}

/// As [`fit_image_dynamics`], with the ridge weight picked from `grid` by
/// one-step RMS on `validation` (in the image latent space).
pub fn fit_image_dynamics_select(
    train: &[Vec<CenteredImage>],
    validation: &[Vec<CenteredImage>],
    params: &ImageDynamicsParams,
    lambdas: &[f64],
) -> Result<ImageDynamicsModel> {
    let (basis, grid) = image_basis(train, params)?;
    let latent = image_latent(&basis, train, &grid)?;
    let val = image_latent(&basis, validation, &grid)?;
    let dynamics = select_var(&latent, &val, params.order, lambdas)?;
    Ok(ImageDynamicsModel {
        image_basis: basis,
        dynamics,
        grid,
        cadence_hours: params.cadence_hours,
    })
}

impl ImageDynamicsModel {
    pub fn encode(&self, img: &CenteredImage) -> Result<Vec<f64>> {
        check_grid(&self.grid, img)?;
        self.image_basis.project(&flatten_imputed(img))
    }

    /// Image for a latent state, clamped to the physical range.
    pub fn decode(&self, z: &[f64], template: &CenteredImage) -> Result<CenteredImage> {
        let temps = self
            .image_basis
            .reconstruct(z)?
            .into_iter()
            .map(|t| t.clamp(MIN_TEMP_K, MAX_TEMP_K))
            .collect();
        Ok(CenteredImage {
            temps,
            ..template.clone()
        })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.image_basis.save(dir, &format!("{}_basis", stem), None)?;
        self.dynamics.save(dir, &format!("{}_var", stem))?;
        block::write_json(
            &dir.join(format!("{}.json", stem)),
            &serde_json::json!({
                "grid": self.grid,
                "cadence_hours": self.cadence_hours,
                "basis": format!("{}_basis", stem),
                "dynamics": format!("{}_var", stem),
            }),
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<ImageDynamicsModel> {
        #[derive(Deserialize)]
        struct Meta {
            grid: GridSpec,
            cadence_hours: u32,
            basis: String,
            dynamics: String,
        }
        let meta: Meta = block::read_json(&dir.join(format!("{}.json", stem)))?;
        let (image_basis, _) = PcBasis::load(dir, &meta.basis)?;
        let dynamics = VarModel::load(dir, &meta.dynamics)?;
        Ok(ImageDynamicsModel {
            image_basis,
            dynamics,
            grid: meta.grid,
            cadence_hours: meta.cadence_hours,
        })
    }
}

/// Pathway A forecast frames, one per step after the last history frame.
pub fn forecast_images(model: &ImageDynamicsModel, history: &[CenteredImage], steps: usize) -> Result<Vec<CenteredImage>> {
    let p = model.dynamics.order;
    if history.len() < p {
        return Err(Error::InsufficientData(format!(
            "history of {} < VAR order {}",
            history.len(),
            p
        )));
    }
    if steps == 0 {
        return Ok(Vec::new());
    }
    let recent = &history[history.len() - p..];
    let z: Vec<Vec<f64>> = recent.iter().map(|img| model.encode(img)).collect::<Result<_>>()?;
    let zs = forecast_var(&model.dynamics, &z, steps)?;
    let last = history.last().unwrap();
    zs.iter()
        .enumerate()
        .map(|(i, z)| {
            let mut img = model.decode(z, last)?;
            img.valid_time = last.valid_time + Duration::hours(i64::from(model.cadence_hours) * (i as i64 + 1));
            Ok(img)
        })
        .collect()
}
