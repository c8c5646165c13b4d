//! Principal components of standardised summary vectors.
//!
//! Columns are standardised by their mean and (population) standard
//! deviation before the decomposition, so the latent space and every distance
//! measured in it are in standardised units.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::block::{self, Block};
use crate::error::{Error, Result};
use crate::orb::OrbLayout;

pub const SCALE_FLOOR: f64 = 1e-8;

/// Above this smaller dimension the decomposition goes through the
/// cross-product matrix instead of a dense SVD of the data.
const DIRECT_SVD_LIMIT: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankRule {
    Fixed(usize),
    VarianceFraction(f64),
}

impl Default for RankRule {
    fn default() -> Self {
        RankRule::VarianceFraction(0.95)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcBasis {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// k x d, orthonormal rows.
    pub components: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// Cumulative explained-variance fraction, length k.
    pub explained_fraction: Vec<f64>,
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "PCA needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.len(),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
    }
    if d == 0 {
        return Err(Error::InvalidArgument("zero-dimensional rows".into()));
    }
    Ok(d)
}

/// Modified Gram-Schmidt on the columns of `v`, twice for stability. Columns
/// that collapse are replaced by the first unit vector that is independent.
fn orthonormalize_columns(v: &mut DMatrix<f64>) {
    let (d, k) = v.shape();
    let mut next_unit = 0;
    for j in 0..k {
        for _ in 0..2 {
            for i in 0..j {
                let proj = v.column(i).dot(&v.column(j));
                let ci = v.column(i).clone_owned();
                v.column_mut(j).axpy(-proj, &ci, 1.0);
            }
        }
        let mut norm = v.column(j).norm();
        while norm < 1e-6 && next_unit < d {
            let mut e = DVector::zeros(d);
            e[next_unit] = 1.0;
            next_unit += 1;
            for _ in 0..2 {
                for i in 0..j {
                    let proj = v.column(i).dot(&e);
                    e.axpy(-proj, &v.column(i).clone_owned(), 1.0);
                }
            }
            norm = e.norm();
            v.set_column(j, &e);
        }
        let c = v.column(j) / norm;
        v.set_column(j, &c);
    }
}

/// Singular values in decreasing order (ties by original index) and the
/// leading right singular vectors as columns. `keep` sees the sorted values
/// and says how many vectors to build.
fn right_singular(z: &DMatrix<f64>, keep: impl FnOnce(&[f64]) -> Result<usize>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (n, d) = z.shape();
    let sorted = |s: Vec<f64>| {
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let vals: Vec<f64> = order.iter().map(|&o| s[o]).collect();
        (order, vals)
    };
    let pick = |v: &DMatrix<f64>, order: &[usize], k: usize| {
        let mut out = DMatrix::zeros(v.nrows(), k);
        for (c, &o) in order.iter().take(k).enumerate() {
            out.set_column(c, &v.column(o));
        }
        out
    };
    if n.min(d) <= DIRECT_SVD_LIMIT {
        let (s, v) = if n >= d {
            let svd = SVD::try_new(z.clone(), false, true, f64::EPSILON, 0)
                .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
            (svd.singular_values.iter().copied().collect::<Vec<_>>(), svd.v_t.unwrap().transpose())
        } else {
            let svd = SVD::try_new(z.transpose(), true, false, f64::EPSILON, 0)
                .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
            (svd.singular_values.iter().copied().collect(), svd.u.unwrap())
        };
        let (order, vals) = sorted(s);
        let k = keep(&vals)?;
        Ok((vals, pick(&v, &order, k)))
    } else if d <= n {
        let eig = SymmetricEigen::new(z.tr_mul(z));
        let (order, vals) = sorted(eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect());
        let k = keep(&vals)?;
        Ok((vals, pick(&eig.eigenvectors, &order, k)))
    } else {
        let eig = SymmetricEigen::new(z * z.transpose());
        let (order, vals) = sorted(eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect());
        let k = keep(&vals)?;
        let smax = vals.first().copied().unwrap_or(0.0);
        let u = pick(&eig.eigenvectors, &order, k);
        let mut v = z.tr_mul(&u);
        for (j, &sj) in vals.iter().take(k).enumerate() {
            if sj > 1e-12 * smax {
                let c = v.column(j) / sj;
                v.set_column(j, &c);
            } else {
                v.column_mut(j).fill(0.0);
            }
        }
        orthonormalize_columns(&mut v);
        Ok((vals, v))
    }
}

/// Fit a principal-component basis to the rows of `x`.
pub fn fit_pca(x: &[Vec<f64>], rule: RankRule) -> Result<PcBasis> {
    let d = check_rows(x)?;
    let n = x.len();
    let nf = n as f64;
    let mut mean = vec![0.0; d];
    for r in x {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![0.0; d];
    for r in x {
        for j in 0..d {
            let dv = r[j] - mean[j];
            var[j] += dv * dv;
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| (v / nf).sqrt().max(SCALE_FLOOR)).collect();
    let z = DMatrix::from_fn(n, d, |i, j| (x[i][j] - mean[j]) / scale[j]);

    let k_max = (n - 1).min(d);
    let mut cum = Vec::new();
    let (s, v) = right_singular(&z, |s| {
        let total: f64 = s.iter().map(|x| x * x).sum();
        let mut acc = 0.0;
        for x in s {
            acc += x * x;
            cum.push(if total > 0.0 { acc / total } else { 1.0 });
        }
        match rule {
            RankRule::Fixed(k) => {
                if k == 0 {
                    return Err(Error::InvalidArgument("rank must be >= 1".into()));
                }
                if k > k_max {
                    log::warn!("requested rank {} clipped to {}", k, k_max);
                }
                Ok(k.min(k_max))
            }
            RankRule::VarianceFraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::InvalidArgument(format!("variance fraction {} not in (0, 1]", f)));
                }
                let k = cum.iter().position(|&c| c >= f - 1e-12).map_or(cum.len(), |p| p + 1);
                Ok(k.min(k_max))
            }
        }
    })?;
    let k = v.ncols();

    let mut components = DMatrix::zeros(k, d);
    for row in 0..k {
        let col = v.column(row);
        // largest-magnitude entry positive, first index on ties
        let mut arg = 0;
        for j in 1..d {
            if col[j].abs() > col[arg].abs() {
                arg = j;
            }
        }
        let sign = if col[arg] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[(row, j)] = sign * col[j];
        }
    }
    Ok(PcBasis {
        mean,
        scale,
        components,
        singular_values: s[..k].to_vec(),
        explained_fraction: cum[..k].to_vec(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct BasisFile {
    dim: usize,
    k: usize,
    singular_values: Vec<f64>,
    explained_fraction: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    layout: Option<OrbLayout>,
    /// Block rows: mean, scale, then the k components.
    block: String,
}

impl PcBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn standardize(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u = DVector::from_vec(self.standardize(x)?);
        Ok((&self.components * u).iter().copied().collect())
    }

    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                got: z.len(),
            });
        }
        let u = self.components.tr_mul(&DVector::from_column_slice(z));
        Ok(u.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| m + v * s)
            .collect())
    }

    /// Keep only the leading `k` components.
    pub fn truncated(&self, k: usize) -> PcBasis {
        let k = k.min(self.k());
        PcBasis {
            mean: self.mean.clone(),
            scale: self.scale.clone(),
            components: self.components.rows(0, k).into_owned(),
            singular_values: self.singular_values[..k].to_vec(),
            explained_fraction: self.explained_fraction[..k].to_vec(),
        }
    }

    /// Writes `<stem>.json` and `<stem>.bin` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str, layout: Option<&OrbLayout>) -> Result<()> {
        let (k, d) = (self.k(), self.dim());
        let mut vals = Vec::with_capacity((k + 2) * d);
        vals.extend_from_slice(&self.mean);
        vals.extend_from_slice(&self.scale);
        for i in 0..k {
            vals.extend(self.components.row(i).iter());
        }
        let bin = format!("{}.bin", stem);
        Block::from_f64(d, k + 2, &vals).write(&dir.join(&bin))?;
        block::write_json(
            &dir.join(format!("{}.json", stem)),
            &BasisFile {
                dim: d,
                k,
                singular_values: self.singular_values.clone(),
                explained_fraction: self.explained_fraction.clone(),
                layout: layout.cloned(),
                block: bin,
            },
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<(PcBasis, Option<OrbLayout>)> {
        let json = dir.join(format!("{}.json", stem));
        let meta: BasisFile = block::read_json(&json)?;
        let path = dir.join(&meta.block);
        let blk = Block::read(&path)?;
        if blk.width != meta.dim || blk.height != meta.k + 2 {
            return Err(Error::format(&path, "basis block shape does not match metadata"));
        }
        let v = blk.to_f64();
        let d = meta.dim;
        let basis = PcBasis {
            mean: v[..d].to_vec(),
            scale: v[d..2 * d].to_vec(),
            components: DMatrix::from_row_slice(meta.k, d, &v[2 * d..]),
            singular_values: meta.singular_values,
            explained_fraction: meta.explained_fraction,
        };
        Ok((basis, meta.layout))
    }
}
