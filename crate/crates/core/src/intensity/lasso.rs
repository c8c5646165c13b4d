//! L1-penalised logistic regression by proximal gradient descent.
//!
//! Objective: mean logistic loss + lambda * ||w||_1 on internally
//! standardised features; the intercept is unpenalised. Each iteration takes
//! one proximal gradient step with backtracking on all parameters and then
//! minimises exactly over the intercept, so the objective never increases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoModel {
    /// Weights on standardised features.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LassoOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Permit single-class labels; the intercept is then pinned at +/-40.
    pub allow_single_class: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            max_iter: 10_000,
            tol: 1e-10,
            allow_single_class: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LassoFit {
    pub model: LassoModel,
    /// Objective value at the start and after every iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^s), stable for large |s|.
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

struct Problem {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    n: f64,
}

impl Problem {
    fn scores(&self, w: &[f64], b: f64) -> Vec<f64> {
        self.x
            .iter()
            .map(|r| b + r.iter().zip(w).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    fn loss_from_scores(&self, s: &[f64]) -> f64 {
        s.iter().zip(&self.y).map(|(&si, &yi)| softplus(si) - yi * si).sum::<f64>() / self.n
    }

    fn loss(&self, w: &[f64], b: f64) -> f64 {
        self.loss_from_scores(&self.scores(w, b))
    }

    fn gradient(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let s = self.scores(w, b);
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        for (r, (&si, &yi)) in self.x.iter().zip(s.iter().zip(&self.y)) {
            let e = sigmoid(si) - yi;
            gb += e;
            for (g, &xij) in gw.iter_mut().zip(r) {
                *g += e * xij;
            }
        }
        gw.iter_mut().for_each(|g| *g /= self.n);
        (gw, gb / self.n)
    }

    /// Exact minimisation over the intercept with `w` fixed (safeguarded Newton).
    fn best_intercept(&self, w: &[f64], b0: f64) -> f64 {
        let base: Vec<f64> = self.scores(w, 0.0);
        let f = |b: f64| base.iter().zip(&self.y).map(|(&s, &y)| softplus(s + b) - y * (s + b)).sum::<f64>();
        let mut b = b0;
        let mut fb = f(b);
        for _ in 0..100 {
            let (mut g, mut h) = (0.0, 0.0);
            for (&s, &y) in base.iter().zip(&self.y) {
                let p = sigmoid(s + b);
                g += p - y;
                h += p * (1.0 - p);
            }
            if g == 0.0 || h <= 0.0 {
                break;
            }
            let mut step = g / h;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = b - step;
                let fc = f(cand);
                if fc <= fb {
                    accepted = cand != b;
                    b = cand;
                    fb = fc;
                    break;
                }
                step *= 0.5;
            }
            if !accepted || step.abs() <= 1e-15 * (1.0 + b.abs()) {
                break;
            }
        }
        b
    }
}

/// `max_j |d loss / d w_j|` at the intercept-only optimum; any lambda at or
/// above it leaves every weight at zero.
pub fn lambda_max(x: &[Vec<f64>], labels: &[bool]) -> Result<f64> {
    let (xs, _, _) = standardize(x)?;
    let n = labels.len() as f64;
    let rate = labels.iter().filter(|&&l| l).count() as f64 / n;
    let p = xs.first().map_or(0, Vec::len);
    Ok((0..p)
        .map(|j| {
            xs.iter()
                .zip(labels)
                .map(|(r, &l)| r[j] * (rate - if l { 1.0 } else { 0.0 }))
                .sum::<f64>()
                .abs()
                / n
        })
        .fold(0.0, f64::max))
}

fn standardize(x: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let n = x.len();
    if n == 0 {
        return Err(Error::InsufficientData("no rows".into()));
    }
    let p = x[0].len();
    for (i, r) in x.iter().enumerate() {
        if r.len() != p {
            return Err(Error::DimensionMismatch { expected: p, got: r.len() });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
    }
    let mean: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let scale: Vec<f64> = (0..p)
        .map(|j| {
            let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if v.sqrt() > 1e-12 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let xs = x
        .iter()
        .map(|r| r.iter().zip(mean.iter().zip(&scale)).map(|(v, (m, s))| (v - m) / s).collect())
        .collect();
    Ok((xs, mean, scale))
}

pub fn fit_logistic_lasso(x: &[Vec<f64>], labels: &[bool], lambda: f64, opts: &LassoOptions) -> Result<LassoFit> {
    if x.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: labels.len(),
        });
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lasso lambda {} < 0", lambda)));
    }
    let (xs, mean, scale) = standardize(x)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let p = mean.len();
    if n_pos == 0 || n_pos == labels.len() {
        if !opts.allow_single_class {
            return Err(Error::InsufficientData("labels contain a single class".into()));
        }
        let model = LassoModel {
            weights: vec![0.0; p],
            intercept: if n_pos == 0 { -40.0 } else { 40.0 },
            lambda,
            feature_mean: mean,
            feature_scale: scale,
        };
        return Ok(LassoFit {
            model,
            objective: Vec::new(),
            iterations: 0,
        });
    }
    let prob = Problem {
        y: labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect(),
        n: labels.len() as f64,
        x: xs,
    };
    let penalty = |w: &[f64]| lambda * w.iter().map(|v| v.abs()).sum::<f64>();

    let mut w = vec![0.0; p];
    let mut b = 0.0;
    let mut f_smooth = prob.loss(&w, b);
    let mut trace = vec![f_smooth + penalty(&w)];
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let (gw, gb) = prob.gradient(&w, b);
        // backtracking on the smooth part; start a little larger than last time
        step *= 2.0;
        let (nw, nb, nf) = loop {
            let cw: Vec<f64> = w
                .iter()
                .zip(&gw)
                .map(|(wi, gi)| soft_threshold(wi - step * gi, step * lambda))
                .collect();
            let cb = b - step * gb;
            let fc = prob.loss(&cw, cb);
            let mut lin = gb * (cb - b);
            let mut quad = (cb - b) * (cb - b);
            for j in 0..p {
                let d = cw[j] - w[j];
                lin += gw[j] * d;
                quad += d * d;
            }
            if fc <= f_smooth + lin + quad / (2.0 * step) || step < 1e-20 {
                break (cw, cb, fc);
            }
            step *= 0.5;
        };
        let prev = *trace.last().unwrap();
        let mut cand_f = nf + penalty(&nw);
        let (mut cw, mut cb) = (nw, nb);
        if cand_f > prev {
            // rounding at the optimum; keep the previous iterate
            cw = w.clone();
            cb = b;
            cand_f = prev;
        }
        let tb = prob.best_intercept(&cw, cb);
        let tf = prob.loss(&cw, tb);
        if tf + penalty(&cw) <= cand_f {
            cb = tb;
            cand_f = tf + penalty(&cw);
        }
        w = cw;
        b = cb;
        f_smooth = cand_f - penalty(&w);
        trace.push(cand_f);
        if prev - cand_f < opts.tol {
            break;
        }
    }
    Ok(LassoFit {
        model: LassoModel {
            weights: w,
            intercept: b,
            lambda,
            feature_mean: mean,
            feature_scale: scale,
        },
        objective: trace,
        iterations,
    })
}

impl LassoModel {
    pub fn n_features(&self) -> usize {
        self.weights.len()
    }

    pub fn score(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                got: features.len(),
            });
        }
        Ok(self.intercept
            + features
                .iter()
                .zip(&self.weights)
                .zip(self.feature_mean.iter().zip(&self.feature_scale))
                .map(|((x, w), (m, s))| w * (x - m) / s)
                .sum::<f64>())
    }

    /// Probability of rapid intensity change.
    pub fn predict_ri(&self, features: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.score(features)?))
    }

    /// Intercept and weights on the original feature scale.
    pub fn raw_coefficients(&self) -> (f64, Vec<f64>) {
        let w: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.feature_scale)
            .map(|(w, s)| w / s)
            .collect();
        let b = self.intercept - w.iter().zip(&self.feature_mean).map(|(w, m)| w * m).sum::<f64>();
        (b, w)
    }

    pub fn nonzero(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_limits() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(40.0) > 1.0 - 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
    }

    #[test]
    fn zero_model_predicts_half() {
        let m = LassoModel {
            weights: vec![0.0; 2],
            intercept: 0.0,
            lambda: 0.0,
            feature_mean: vec![0.0; 2],
            feature_scale: vec![1.0; 2],
        };
        assert_eq!(m.predict_ri(&[3.0, -1.0]).unwrap(), 0.5);
        assert!(m.predict_ri(&[1.0]).is_err());
        let sure = LassoModel { intercept: 40.0, ..m.clone() };
        assert!(sure.predict_ri(&[0.0, 0.0]).unwrap() > 1.0 - 1e-15);
    }

    #[test]
    fn monotone_in_positive_weight() {
        let m = LassoModel {
            weights: vec![0.7],
            intercept: -0.2,
            lambda: 0.0,
            feature_mean: vec![1.0],
            feature_scale: vec![2.0],
        };
        let ps: Vec<f64> = (-5..5).map(|x| m.predict_ri(&[x as f64]).unwrap()).collect();
        assert!(ps.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn single_class_rejected_unless_allowed() {
        let x = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert!(fit_logistic_lasso(&x, &[true; 3], 0.1, &LassoOptions::default()).is_err());
        let opts = LassoOptions {
            allow_single_class: true,
            ..Default::default()
        };
        let fit = fit_logistic_lasso(&x, &[false; 3], 0.1, &opts).unwrap();
        assert!(fit.model.predict_ri(&[2.0]).unwrap() < 1e-15);
    }
}
