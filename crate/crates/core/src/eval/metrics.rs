use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};

use crate::block;
use crate::error::{Error, Result};
use crate::intensity::IntensityTable;
use crate::latent::PcBasis;

/// Forecast of intensity at `issue_time + horizon_hours` under one model.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityForecast {
    pub storm_id: String,
    pub issue_time: NaiveDateTime,
    pub horizon_hours: u32,
    pub model: String,
    pub v_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub horizon_hours: u32,
    pub model: String,
    pub n: usize,
    /// `None` when `n == 0`.
    pub rmse: Option<f64>,
    /// Mean of forecast minus truth; `None` when `n == 0`.
    pub bias: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    /// Forecasts with no verifying intensity.
    pub unmatched: usize,
}

impl MetricsReport {
    pub fn get(&self, horizon_hours: u32, model: &str) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.horizon_hours == horizon_hours && r.model == model)
    }
}

/// RMSE and bias per (horizon, model). Every requested horizon and every
/// model seen gets a row, with `n = 0` when nothing verified.
pub fn intensity_metrics(forecasts: &[IntensityForecast], truth: &IntensityTable, horizons: &[u32]) -> MetricsReport {
    let mut acc: BTreeMap<(u32, String), (usize, f64, f64)> = BTreeMap::new();
    let models: std::collections::BTreeSet<&str> = forecasts.iter().map(|f| f.model.as_str()).collect();
    for &h in horizons {
        for m in &models {
            acc.insert((h, m.to_string()), (0, 0.0, 0.0));
        }
    }
    let mut unmatched = 0;
    for f in forecasts {
        let Some(slot) = acc.get_mut(&(f.horizon_hours, f.model.clone())) else {
            continue;
        };
        let valid = f.issue_time + Duration::hours(i64::from(f.horizon_hours));
        match truth.get(&f.storm_id, valid) {
            Some(v) => {
                let e = f.v_hat - v;
                slot.0 += 1;
                slot.1 += e;
                slot.2 += e * e;
            }
            None => unmatched += 1,
        }
    }
    let rows = acc
        .into_iter()
        .map(|((h, model), (n, se, sse))| MetricsRow {
            horizon_hours: h,
            model,
            n,
            rmse: (n > 0).then(|| (sse / n as f64).sqrt()),
            bias: (n > 0).then(|| se / n as f64),
        })
        .collect();
    MetricsReport { rows, unmatched }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{:.6}", x))
}

pub fn write_intensity_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["horizon", "model", "n", "rmse_kt", "bias_kt_forecast_minus_truth"])?;
    for r in &report.rows {
        w.write_record([
            r.horizon_hours.to_string(),
            r.model.clone(),
            r.n.to_string(),
            opt(r.rmse),
            opt(r.bias),
        ])?;
    }
    finish(w, path)
}

pub(crate) fn finish(w: csv::Writer<Vec<u8>>, path: &Path) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
    block::write_atomic(path, &bytes)
}

/// Summary-vector forecasts keyed by (storm id, issue time, horizon).
pub type ForecastSet = BTreeMap<(String, NaiveDateTime, u32), Vec<f64>>;
/// Observed summary vectors keyed by (storm id, valid time).
pub type TruthSet = BTreeMap<(String, NaiveDateTime), Vec<f64>>;

/// `||standardise(a) - standardise(b)|| / sqrt(d)`
pub fn standardized_distance(a: &[f64], b: &[f64], basis: &PcBasis) -> Result<f64> {
    let d = basis.dim();
    for v in [a, b] {
        if v.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: v.len() });
        }
    }
    let ss: f64 = a
        .iter()
        .zip(b)
        .zip(&basis.scale)
        .map(|((x, y), s)| {
            let t = (x - y) / s;
            t * t
        })
        .sum();
    Ok((ss / d as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralRow {
    pub horizon_hours: u32,
    pub pair: String,
    pub n: usize,
    pub mean_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StructuralReport {
    pub rows: Vec<StructuralRow>,
}

impl StructuralReport {
    pub fn get(&self, horizon_hours: u32, pair: &str) -> Option<&StructuralRow> {
        self.rows
            .iter()
            .find(|r| r.horizon_hours == horizon_hours && r.pair == pair)
    }
}

fn mean_row(h: u32, pair: String, ds: Vec<f64>) -> StructuralRow {
    let n = ds.len();
    StructuralRow {
        horizon_hours: h,
        pair,
        n,
        mean_distance: (n > 0).then(|| ds.iter().sum::<f64>() / n as f64),
    }
}

/// Mean standardised distance per horizon for A vs B, A vs truth and B vs
/// truth, over the cases both sides cover.
pub fn structural_metrics(
    a: &ForecastSet,
    b: &ForecastSet,
    truth: &TruthSet,
    basis: &PcBasis,
    horizons: &[u32],
) -> Result<StructuralReport> {
    let mut rows = Vec::new();
    for &h in horizons {
        let mut ab = Vec::new();
        for (key, x) in a.iter().filter(|(k, _)| k.2 == h) {
            if let Some(y) = b.get(key) {
                ab.push(standardized_distance(x, y, basis)?);
            }
        }
        rows.push(mean_row(h, "A_vs_B".into(), ab));
        for (name, set) in [("A", a), ("B", b)] {
            rows.push(mean_row(h, format!("{}_vs_truth", name), distances_to_truth(set, truth, basis, h)?));
        }
    }
    Ok(StructuralReport { rows })
}

/// Distances from each forecast at horizon `h` to the verifying observation.
pub fn distances_to_truth(set: &ForecastSet, truth: &TruthSet, basis: &PcBasis, h: u32) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for ((id, issue, _), x) in set.iter().filter(|(k, _)| k.2 == h) {
        let valid = *issue + Duration::hours(i64::from(h));
        if let Some(y) = truth.get(&(id.clone(), valid)) {
            out.push(standardized_distance(x, y, basis)?);
        }
    }
    Ok(out)
}

impl StructuralReport {
    /// Append `<name>_vs_truth` rows for an extra forecast set.
    pub fn add_vs_truth(&mut self, name: &str, set: &ForecastSet, truth: &TruthSet, basis: &PcBasis, horizons: &[u32]) -> Result<()> {
        for &h in horizons {
            self.rows
                .push(mean_row(h, format!("{}_vs_truth", name), distances_to_truth(set, truth, basis, h)?));
        }
        Ok(())
    }
}

pub fn write_structural_metrics(path: &Path, report: &StructuralReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["horizon", "pair", "n", "mean_standardized_l2"])?;
    for r in &report.rows {
        w.write_record([r.horizon_hours.to_string(), r.pair.clone(), r.n.to_string(), opt(r.mean_distance)])?;
    }
    finish(w, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn t0() -> NaiveDateTime {
        NaiveDateTime::parse_from_str("2004-09-01 00:00", "%Y-%m-%d %H:%M").unwrap()
    }

    fn fc(h: u32, v: f64) -> IntensityForecast {
        IntensityForecast {
            storm_id: "AL012004".into(),
            issue_time: t0(),
            horizon_hours: h,
            model: "gam".into(),
            v_hat: v,
        }
    }

    #[test]
    fn rmse_and_bias() {
        let mut truth = IntensityTable::default();
        truth.insert("AL012004", t0() + Duration::hours(6), 50.0);
        truth.insert("AL012004", t0() + Duration::hours(12), 60.0);
        let mut f2 = fc(6, 47.0);
        f2.storm_id = "AL022004".into();
        truth.insert("AL022004", t0() + Duration::hours(6), 50.0);
        let r = intensity_metrics(&[fc(6, 53.0), f2, fc(12, 65.0), fc(24, 1.0)], &truth, &[6, 12, 24]);
        let six = r.get(6, "gam").unwrap();
        assert_eq!((six.n, six.rmse, six.bias), (2, Some(3.0), Some(0.0)));
        let twelve = r.get(12, "gam").unwrap();
        assert_eq!((twelve.rmse, twelve.bias), (Some(5.0), Some(5.0)));
        let day = r.get(24, "gam").unwrap();
        assert_eq!((day.n, day.rmse), (0, None));
        assert_eq!(r.unmatched, 1);
    }

    #[test]
    fn empty_join() {
        let r = intensity_metrics(&[], &IntensityTable::default(), &[6]);
        assert!(r.rows.is_empty());
        assert_eq!(r.unmatched, 0);
    }

    fn basis(d: usize) -> PcBasis {
        PcBasis {
            mean: vec![0.0; d],
            scale: vec![2.0; d],
            components: DMatrix::identity(1, d),
            singular_values: vec![1.0],
            explained_fraction: vec![1.0],
        }
    }

    #[test]
    fn one_coordinate_difference() {
        let b = basis(4);
        let d = standardized_distance(&[0.0, 0.0, 3.0, 0.0], &[0.0; 4], &b).unwrap();
        assert!((d - 1.5 / 2.0).abs() < 1e-15);
        assert!(standardized_distance(&[0.0; 3], &[0.0; 4], &b).is_err());
    }

    #[test]
    fn identical_sets_are_zero_and_symmetric() {
        let b = basis(2);
        let mut a = ForecastSet::new();
        a.insert(("X".into(), t0(), 6), vec![1.0, 2.0]);
        let mut c = ForecastSet::new();
        c.insert(("X".into(), t0(), 6), vec![2.0, 2.0]);
        let mut truth = TruthSet::new();
        truth.insert(("X".into(), t0() + Duration::hours(6)), vec![1.0, 2.0]);
        let r = structural_metrics(&a, &a, &truth, &b, &[6]).unwrap();
        assert!(r.rows.iter().all(|row| row.mean_distance == Some(0.0)));
        let r1 = structural_metrics(&a, &c, &truth, &b, &[6]).unwrap();
        let r2 = structural_metrics(&c, &a, &truth, &b, &[6]).unwrap();
        assert_eq!(r1.get(6, "A_vs_B"), r2.get(6, "A_vs_B"));
        assert_eq!(r1.get(6, "A_vs_truth").unwrap().mean_distance, r2.get(6, "B_vs_truth").unwrap().mean_distance);
    }
}
