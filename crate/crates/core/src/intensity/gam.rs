//! Additive model with piecewise-linear smoothers, fitted by backfitting.
//!
//! Each smoother is a linear combination of hat functions at feature-quantile
//! knots (linear extrapolation beyond the end knots) with a second-difference
//! penalty on its coefficients. The hat basis is a partition of unity, so a
//! smoother can be shifted by a constant by shifting its coefficients; that is
//! how each smoother is kept mean-zero over the training rows.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GamConfig {
    pub knots_per_feature: usize,
    pub penalty: f64,
    pub max_cycles: usize,
    pub tol: f64,
}

impl Default for GamConfig {
    fn default() -> Self {
        GamConfig {
            knots_per_feature: 10,
            penalty: 1.0,
            max_cycles: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Smoother {
    pub knots: Vec<f64>,
    pub coefs: Vec<f64>,
    /// Constant feature in training; the smoother is identically zero.
    pub degenerate: bool,
}

impl Smoother {
    /// Segment index and weight on its right knot; `u` leaves [0, 1] outside
    /// the knot range (linear extrapolation of the end segment).
    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        let k = &self.knots;
        let seg = k.partition_point(|&t| t <= x).saturating_sub(1).min(k.len() - 2);
        let u = (x - k[seg]) / (k[seg + 1] - k[seg]);
        (seg, u)
    }

    pub fn eval(&self, x: f64) -> f64 {
        if self.degenerate {
            return 0.0;
        }
        let (s, u) = self.locate(x);
        (1.0 - u) * self.coefs[s] + u * self.coefs[s + 1]
    }

    fn roughness(&self) -> f64 {
        self.coefs
            .windows(3)
            .map(|w| {
                let d = w[0] - 2.0 * w[1] + w[2];
                d * d
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamModel {
    pub intercept: f64,
    pub smoothers: Vec<Smoother>,
    pub penalty: f64,
    pub feature_names: Vec<String>,
}

impl GamModel {
    pub fn n_features(&self) -> usize {
        self.smoothers.len()
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                got: features.len(),
            });
        }
        Ok(self.intercept
            + self
                .smoothers
                .iter()
                .zip(features)
                .map(|(s, &x)| s.eval(x))
                .sum::<f64>())
    }
}

#[derive(Debug, Clone)]
pub struct GamFit {
    pub model: GamModel,
    /// Fitted values on the training rows after the last cycle.
    pub fitted: Vec<f64>,
    /// Penalised residual sum of squares after each cycle.
    pub objective: Vec<f64>,
    pub cycles: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Knots at evenly spaced order statistics, duplicates removed.
pub fn quantile_knots(values: &[f64], n_knots: usize) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    let mut knots: Vec<f64> = (0..n_knots)
        .map(|i| {
            let q = i as f64 / (n_knots - 1) as f64;
            v[(q * (n - 1) as f64).round() as usize]
        })
        .collect();
    knots.dedup();
    knots
}

struct Design {
    seg: Vec<usize>,
    u: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    n_coef: usize,
}

impl Design {
    fn new(smoother: &Smoother, x: &[f64], penalty: f64) -> Result<Design> {
        let m = smoother.knots.len();
        let mut seg = Vec::with_capacity(x.len());
        let mut u = Vec::with_capacity(x.len());
        let mut gram = DMatrix::<f64>::zeros(m, m);
        for &xi in x {
            let (s, w) = smoother.locate(xi);
            let (a, b) = (1.0 - w, w);
            gram[(s, s)] += a * a;
            gram[(s, s + 1)] += a * b;
            gram[(s + 1, s)] += a * b;
            gram[(s + 1, s + 1)] += b * b;
            seg.push(s);
            u.push(w);
        }
        for r in 0..m.saturating_sub(2) {
            let d = [1.0, -2.0, 1.0];
            for i in 0..3 {
                for j in 0..3 {
                    gram[(r + i, r + j)] += penalty * d[i] * d[j];
                }
            }
        }
        let chol = Cholesky::new(gram)
            .ok_or_else(|| Error::Numerical("smoother normal equations not positive definite".into()))?;
        Ok(Design { seg, u, chol, n_coef: m })
    }

    fn fit(&self, r: &[f64]) -> Vec<f64> {
        let mut rhs = DVector::zeros(self.n_coef);
        for ((&s, &w), &ri) in self.seg.iter().zip(&self.u).zip(r) {
            rhs[s] += (1.0 - w) * ri;
            rhs[s + 1] += w * ri;
        }
        self.chol.solve(&rhs).iter().copied().collect()
    }

    fn values(&self, coefs: &[f64], out: &mut [f64]) {
        for ((o, &s), &w) in out.iter_mut().zip(&self.seg).zip(&self.u) {
            *o = (1.0 - w) * coefs[s] + w * coefs[s + 1];
        }
    }
}

fn objective(y: &[f64], fitted: &[f64], smoothers: &[Smoother], penalty: f64) -> f64 {
    let rss: f64 = y.iter().zip(fitted).map(|(a, b)| (a - b) * (a - b)).sum();
    rss + penalty * smoothers.iter().map(Smoother::roughness).sum::<f64>()
}

/// Backfit an additive model of `y` on the columns of `x` (rows are observations).
pub fn fit_gam(x: &[Vec<f64>], y: &[f64], names: &[String], cfg: &GamConfig) -> Result<GamFit> {
    let n = x.len();
    if n < 20 {
        return Err(Error::InsufficientData(format!("GAM needs at least 20 rows, got {}", n)));
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    if cfg.knots_per_feature < 2 || !(cfg.penalty >= 0.0) {
        return Err(Error::InvalidArgument("GAM needs >= 2 knots and a non-negative penalty".into()));
    }
    let p = x[0].len();
    for (i, row) in x.iter().enumerate() {
        if row.len() != p {
            return Err(Error::DimensionMismatch { expected: p, got: row.len() });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
    }

    let mut warnings = Vec::new();
    let mut smoothers = Vec::with_capacity(p);
    let mut designs = Vec::with_capacity(p);
    for j in 0..p {
        let col: Vec<f64> = x.iter().map(|r| r[j]).collect();
        let knots = quantile_knots(&col, cfg.knots_per_feature);
        let name = names.get(j).cloned().unwrap_or_else(|| format!("x{}", j));
        if knots.len() < 2 {
            warnings.push(format!("feature {} is constant; smoother fixed at 0", name));
            smoothers.push(Smoother {
                knots: vec![knots[0], knots[0] + 1.0],
                coefs: vec![0.0, 0.0],
                degenerate: true,
            });
            designs.push(None);
        } else {
            let s = Smoother {
                coefs: vec![0.0; knots.len()],
                knots,
                degenerate: false,
            };
            designs.push(Some(Design::new(&s, &col, cfg.penalty)?));
            smoothers.push(s);
        }
    }

    let mut intercept = y.iter().sum::<f64>() / n as f64;
    let mut parts = vec![vec![0.0; n]; p];
    let mut fitted = vec![intercept; n];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut cycles = 0;
    let mut partial = vec![0.0; n];
    let mut next = vec![0.0; n];
    while cycles < cfg.max_cycles {
        cycles += 1;
        let before = fitted.clone();
        for j in 0..p {
            let Some(design) = &designs[j] else { continue };
            for i in 0..n {
                partial[i] = y[i] - fitted[i] + parts[j][i];
            }
            let mut coefs = design.fit(&partial);
            design.values(&coefs, &mut next);
            let m = next.iter().sum::<f64>() / n as f64;
            coefs.iter_mut().for_each(|c| *c -= m);
            next.iter_mut().for_each(|v| *v -= m);
            intercept += m;
            for i in 0..n {
                fitted[i] += next[i] - parts[j][i] + m;
            }
            std::mem::swap(&mut parts[j], &mut next);
            smoothers[j].coefs = coefs;
        }
        // refresh to keep rounding from accumulating in the running sum
        for i in 0..n {
            fitted[i] = intercept + parts.iter().map(|f| f[i]).sum::<f64>();
        }
        trace.push(objective(y, &fitted, &smoothers, cfg.penalty));
        let change = fitted
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!("backfitting stopped after {} cycles", cycles));
    }
    for w in &warnings {
        log::warn!("{}", w);
    }
    Ok(GamFit {
        model: GamModel {
            intercept,
            smoothers,
            penalty: cfg.penalty,
            feature_names: names.to_vec(),
        },
        fitted,
        objective: trace,
        cycles,
        converged,
        warnings,
    })
}
