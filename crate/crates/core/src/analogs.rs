//! Trajectory windows in coefficient space: distances, spectral clustering
//! into modes of evolution, and analog retrieval.

use std::cmp::Ordering;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::{self, Block};
use crate::error::{Error, Result};
use crate::ingest::frames::format_time;

pub const DEFAULT_WINDOW: usize = 5;
pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub storm_id: String,
    pub times: Vec<NaiveDateTime>,
    pub coeffs: Vec<Vec<f64>>,
}

/// `L` consecutive coefficient vectors of one storm.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub storm_id: String,
    pub start: NaiveDateTime,
    pub values: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Gap-free windows of length `len` at stride 1.
    pub fn windows(&self, len: usize, cadence_hours: u32) -> Vec<Window> {
        let step = Duration::hours(i64::from(cadence_hours));
        if len == 0 || self.times.len() < len {
            return Vec::new();
        }
        (0..=self.times.len() - len)
            .filter(|&s| self.times[s..s + len].windows(2).all(|w| w[1] - w[0] == step))
            .map(|s| Window {
                storm_id: self.storm_id.clone(),
                start: self.times[s],
                values: self.coeffs[s..s + len].to_vec(),
            })
            .collect()
    }
}

/// `sqrt(sum_{t,j} (a_tj - b_tj)^2 / L)`
pub fn trajectory_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut ss = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: y.len(),
            });
        }
        ss += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    Ok((ss / a.len() as f64).sqrt())
}

pub fn distance_matrix(windows: &[Window]) -> Result<DMatrix<f64>> {
    let n = windows.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| trajectory_distance(&windows[i].values, &windows[j].values))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut d = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    // exact symmetry regardless of evaluation order
    for i in 0..n {
        d[(i, i)] = 0.0;
        for j in 0..i {
            d[(i, j)] = d[(j, i)];
        }
    }
    Ok(d)
}

fn check_distances(d: &DMatrix<f64>) -> Result<()> {
    if !d.is_square() {
        return Err(Error::InvalidArgument(format!(
            "distance matrix is {}x{}",
            d.nrows(),
            d.ncols()
        )));
    }
    let n = d.nrows();
    for i in 0..n {
        for j in 0..n {
            let v = d[(i, j)];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("distance ({}, {}) = {}", i, j, v)));
            }
            if (v - d[(j, i)]).abs() > 1e-12 * (1.0 + v.abs()) {
                return Err(Error::InvalidArgument(format!("distance matrix asymmetric at ({}, {})", i, j)));
            }
        }
    }
    Ok(())
}

/// Median off-diagonal distance, else the mean; 0 when all points coincide.
pub fn bandwidth(d: &DMatrix<f64>) -> f64 {
    let n = d.nrows();
    let mut off: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| d[(i, j)]).collect();
    if off.is_empty() {
        return 0.0;
    }
    off.sort_unstable_by(f64::total_cmp);
    let m = off.len();
    let med = if m % 2 == 1 {
        off[m / 2]
    } else {
        0.5 * (off[m / 2 - 1] + off[m / 2])
    };
    if med > 0.0 {
        med
    } else {
        off.iter().sum::<f64>() / m as f64
    }
}

pub fn affinity(d: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    let s2 = 2.0 * sigma * sigma;
    d.map(|v| (-(v * v) / s2).exp())
}

/// `I - D^{-1/2} A D^{-1/2}`
pub fn normalized_laplacian(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg = a.row(i).sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| {
        let v = -a[(i, j)] * inv_sqrt[i] * inv_sqrt[j];
        if i == j {
            1.0 + v
        } else {
            v
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    /// n x m row-normalised spectral coordinates.
    pub embedding: DMatrix<f64>,
    pub sigma: f64,
    pub seed: u64,
    /// Smallest Laplacian eigenvalues, ascending (up to m + 1 of them).
    pub eigenvalues: Vec<f64>,
    /// lambda_{m+1} - lambda_m; diagnostic only.
    pub eigengap: Option<f64>,
    pub wcss: f64,
}

pub fn spectral_cluster(d: &DMatrix<f64>, k_clusters: usize, seed: u64) -> Result<ClusterResult> {
    check_distances(d)?;
    let n = d.nrows();
    if k_clusters == 0 {
        return Err(Error::InvalidArgument("k_clusters must be >= 1".into()));
    }
    if n < k_clusters {
        return Err(Error::InsufficientData(format!("{} points < {} clusters", n, k_clusters)));
    }
    let sigma = bandwidth(d);
    if sigma == 0.0 {
        return Ok(ClusterResult {
            labels: vec![0; n],
            embedding: DMatrix::zeros(n, k_clusters),
            sigma,
            seed,
            eigenvalues: Vec::new(),
            eigengap: None,
            wcss: 0.0,
        });
    }
    let lap = normalized_laplacian(&affinity(d, sigma));
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let m = k_clusters;
    let mut emb = DMatrix::from_fn(n, m, |i, j| eig.eigenvectors[(i, order[j])]);
    for i in 0..n {
        let norm = emb.row(i).norm();
        if norm > 0.0 {
            for j in 0..m {
                emb[(i, j)] /= norm;
            }
        }
    }
    let eigenvalues: Vec<f64> = order.iter().take(m + 1).map(|&i| eig.eigenvalues[i]).collect();
    let eigengap = eigenvalues.get(m).map(|&next| next - eigenvalues[m - 1]);
    let points: Vec<Vec<f64>> = (0..n).map(|i| emb.row(i).iter().copied().collect()).collect();
    let (labels, wcss) = kmeans(&points, m, seed, KMEANS_RESTARTS);
    Ok(ClusterResult {
        labels,
        embedding: emb,
        sigma,
        seed,
        eigenvalues,
        eigengap,
        wcss,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, ctr) in centers.iter().enumerate() {
        let d = sq_dist(p, ctr);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[idx].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> (Vec<usize>, f64) {
    let dim = points[0].len();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, (s, &cnt)) in sums.into_iter().zip(&counts).enumerate() {
            if cnt > 0 {
                centers[c] = s.into_iter().map(|v| v / cnt as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let wcss = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
    (labels, wcss)
}

/// Relabel so clusters are numbered by first appearance.
fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// k-means with k-means++ seeding; the restart with the lowest
/// within-cluster sum of squares wins (earliest on ties).
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> (Vec<usize>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let init = kmeans_pp_init(points, k, &mut rng);
        let (labels, wcss) = lloyd(points, init);
        if best.as_ref().is_none_or(|(_, w)| wcss < *w) {
            best = Some((labels, wcss));
        }
    }
    let (labels, wcss) = best.unwrap();
    (canonical_labels(&labels), wcss)
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len() as f64;
    let mut table = std::collections::BTreeMap::new();
    let mut ra = std::collections::BTreeMap::new();
    let mut rb = std::collections::BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_insert(0usize) += 1;
        *ra.entry(x).or_insert(0usize) += 1;
        *rb.entry(y).or_insert(0usize) += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c as f64)).sum();
    let sa: f64 = ra.values().map(|&c| choose2(c as f64)).sum();
    let sb: f64 = rb.values().map(|&c| choose2(c as f64)).sum();
    let expected = sa * sb / choose2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analog {
    pub storm_id: String,
    pub start: NaiveDateTime,
    pub distance: f64,
}

/// Nearest `m` library windows to `query`, ascending by distance; ties by
/// storm id then earlier start.
pub fn find_analogs(query: &Window, library: &[Window], m: usize, exclude_own_storm: bool) -> Result<Vec<Analog>> {
    if library.is_empty() {
        return Err(Error::InsufficientData("analog library is empty".into()));
    }
    let mut out = library
        .iter()
        .filter(|w| !(exclude_own_storm && w.storm_id == query.storm_id))
        .map(|w| {
            Ok(Analog {
                storm_id: w.storm_id.clone(),
                start: w.start,
                distance: trajectory_distance(&query.values, &w.values)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.storm_id.cmp(&b.storm_id))
            .then(a.start.cmp(&b.start))
    });
    out.truncate(m);
    Ok(out)
}

fn finish_csv(w: csv::Writer<Vec<u8>>, path: &Path) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
    block::write_atomic(path, &bytes)
}

pub fn write_clusters(path: &Path, windows: &[Window], labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["storm_id", "window_start", "cluster"])?;
    for (win, l) in windows.iter().zip(labels) {
        w.write_record([win.storm_id.clone(), format_time(win.start), l.to_string()])?;
    }
    finish_csv(w, path)
}

pub fn write_analogs(path: &Path, results: &[(Window, Vec<Analog>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["query_storm_id", "query_start", "rank", "storm_id", "window_start", "distance"])?;
    for (q, list) in results {
        for (r, a) in list.iter().enumerate() {
            w.write_record([
                q.storm_id.clone(),
                format_time(q.start),
                (r + 1).to_string(),
                a.storm_id.clone(),
                format_time(a.start),
                format!("{:.6}", a.distance),
            ])?;
        }
    }
    finish_csv(w, path)
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingFile {
    rows: usize,
    cols: usize,
    sigma: f64,
    seed: u64,
    eigenvalues: Vec<f64>,
    eigengap: Option<f64>,
    block: String,
}

pub fn save_embedding(dir: &Path, stem: &str, res: &ClusterResult) -> Result<()> {
    let (n, m) = res.embedding.shape();
    let vals: Vec<f64> = (0..n).flat_map(|i| res.embedding.row(i).iter().copied().collect::<Vec<_>>()).collect();
    let bin = format!("{}.bin", stem);
    Block::from_f64(m, n, &vals).write(&dir.join(&bin))?;
    block::write_json(
        &dir.join(format!("{}.json", stem)),
        &EmbeddingFile {
            rows: n,
            cols: m,
            sigma: res.sigma,
            seed: res.seed,
            eigenvalues: res.eigenvalues.clone(),
            eigengap: res.eigengap,
            block: bin,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t0() -> NaiveDateTime {
        NaiveDateTime::parse_from_str("2010-09-01 00:00", "%Y-%m-%d %H:%M").unwrap()
    }

    fn win(id: &str, h: i64, v: f64) -> Window {
        Window {
            storm_id: id.into(),
            start: t0() + Duration::hours(h),
            values: vec![vec![v, 0.0]; 5],
        }
    }

    #[test]
    fn distance_basics() {
        let a = vec![vec![0.0, 1.0]; 5];
        assert_eq!(trajectory_distance(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b[2][1] += 3.0;
        assert!((trajectory_distance(&a, &b).unwrap() - 3.0 / 5f64.sqrt()).abs() < 1e-15);
        assert!(trajectory_distance(&a, &b[..4]).is_err());
    }

    #[test]
    fn windows_skip_gaps() {
        let times: Vec<_> = [0, 6, 12, 18, 24, 30, 42, 48].iter().map(|&h| t0() + Duration::hours(h)).collect();
        let tr = Trajectory {
            storm_id: "X".into(),
            coeffs: vec![vec![0.0]; times.len()],
            times,
        };
        let w = tr.windows(5, 6);
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].start, t0() + Duration::hours(6));
    }

    #[test]
    fn one_cluster_and_identical_points() {
        let d = DMatrix::from_fn(4, 4, |i, j| (i as f64 - j as f64).abs());
        let r = spectral_cluster(&d, 1, 3).unwrap();
        assert_eq!(r.labels, vec![0; 4]);
        let z = DMatrix::zeros(3, 3);
        assert_eq!(spectral_cluster(&z, 2, 3).unwrap().labels, vec![0; 3]);
    }

    #[test]
    fn invalid_inputs() {
        let mut d = DMatrix::from_fn(3, 3, |i, j| (i as f64 - j as f64).abs());
        assert!(spectral_cluster(&d, 4, 0).is_err());
        d[(0, 1)] = 5.0;
        assert!(spectral_cluster(&d, 2, 0).is_err());
        d[(1, 0)] = 5.0;
        assert!(spectral_cluster(&d, 2, 0).is_ok());
        d[(1, 0)] = -5.0;
        d[(0, 1)] = -5.0;
        assert!(spectral_cluster(&d, 2, 0).is_err());
    }

    #[test]
    fn duplicated_windows_share_a_label() {
        let ws: Vec<Window> = [0.0, 0.1, 0.1, 5.0, 5.2, 5.2, 0.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| win(&format!("S{}", i), 0, v))
            .collect();
        let d = distance_matrix(&ws).unwrap();
        let r = spectral_cluster(&d, 2, 11).unwrap();
        assert_eq!(r.labels[1], r.labels[2]);
        assert_eq!(r.labels[4], r.labels[5]);
        assert_eq!(r.labels[0], r.labels[6]);
        assert_ne!(r.labels[0], r.labels[3]);
    }

    #[test]
    fn ari_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
    }

    #[test]
    fn analogs_sorted_with_ties() {
        let lib = vec![win("B", 0, 1.0), win("A", 6, 1.0), win("A", 0, 1.0), win("Q", 0, 0.0), win("C", 0, 0.5)];
        let q = win("Q", 0, 0.0);
        let r = find_analogs(&q, &lib, 10, true).unwrap();
        let ids: Vec<(&str, i64)> = r.iter().map(|a| (a.storm_id.as_str(), (a.start - t0()).num_hours())).collect();
        assert_eq!(ids, vec![("C", 0), ("A", 0), ("A", 6), ("B", 0)]);
        let r = find_analogs(&q, &lib, 1, false).unwrap();
        assert_eq!((r[0].storm_id.as_str(), r[0].distance), ("Q", 0.0));
        assert!(find_analogs(&q, &[], 1, true).is_err());
    }
}
