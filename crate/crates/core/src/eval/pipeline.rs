//! Stage-by-stage orchestration. Every stage reads its inputs from the
//! output directory and writes its results back there, so any stage can be
//! rerun on its own from persisted intermediates.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDateTime};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{split_of, IntensityPathway, RunConfig, Split};
use super::metrics::{
    finish, intensity_metrics, structural_metrics, write_intensity_metrics, write_structural_metrics,
    ForecastSet, IntensityForecast, TruthSet,
};
use super::svg::{line_plot, Series};
use crate::analogs::{
    adjusted_rand_index, distance_matrix, find_analogs, save_embedding, spectral_cluster, write_analogs,
    write_clusters, Trajectory, Window,
};
use crate::block::{self, Block};
use crate::error::{Error, Result};
use crate::ingest::frames::{format_time, parse_time};
use crate::ingest::{
    build_samples, parse_hurdat2, read_ir_stack, write_hurdat2, CenteredImage, SampleConfig,
};
use crate::intensity::{
    build_design, feature_names, fit_gam, fit_logistic_lasso, predict_intensity, rapid_change, sigmoid,
    write_predictions, DesignRow, GamModel, IntensityPrediction, IntensityTable, LassoModel, LassoOptions,
    ObservedState, StructuralForecast,
};
use crate::latent::{fit_pca, PcBasis};
use crate::orb::{OrbExtractor, OrbLayout};
use crate::structfc::{
    fit_image_dynamics_select, forecast_images, forecast_var, select_var, ImageDynamicsModel, ImageDynamicsParams,
    VarModel,
};
use crate::synth::{generate_library, LibraryIndex, LIBRARY_HURDAT2};

pub const DONE: &str = "DONE";
pub const RUN_MANIFEST: &str = "run_manifest.json";

const TRACKS: &str = "ingest/tracks.txt";
const SAMPLES: &str = "ingest/samples.csv";
const IMAGES: &str = "ingest/images";
const ORB_CSV: &str = "orb/orb.csv";
const ORB_LAYOUT: &str = "orb/layout.json";
const SPLIT_CSV: &str = "split.csv";
const MODELS: &str = "models";
const ORB_PCA: &str = "orb_pca";
const VAR_B: &str = "var_b";
const IMAGEDYN: &str = "imagedyn";
const COEFFS: &str = "latent/coefficients.csv";
const PREDICTIONS: &str = "intensity/predictions.csv";
const INTENSITY_METRICS: &str = "reports/intensity_metrics.csv";
const STRUCTURAL_METRICS: &str = "reports/structural_metrics.csv";
const CLUSTERS: &str = "analogs/clusters.csv";
const ANALOGS: &str = "analogs/analogs.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pathway {
    A,
    B,
    Persistence,
}

impl Pathway {
    pub fn name(self) -> &'static str {
        match self {
            Pathway::A => "a",
            Pathway::B => "b",
            Pathway::Persistence => "persistence",
        }
    }

    fn file(self) -> String {
        format!("forecasts/{}.csv", self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitTarget {
    Pca,
    Var,
    ImageDynamics,
    Gam,
    Lasso,
}

/// Output directory handle.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn models(&self) -> PathBuf {
        self.root.join(MODELS)
    }
}

pub fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {}", name);
    f().map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(f))
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, path: &Path) -> Result<&'a str> {
    rec.get(i)
        .ok_or_else(|| Error::format(path, format!("missing column {}", i)))
}

fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.parse().map_err(|_| Error::format(path, format!("bad number '{}'", s)))
}

fn parse_t(s: &str, path: &Path) -> Result<NaiveDateTime> {
    parse_time(s).ok_or_else(|| Error::format(path, format!("bad time '{}'", s)))
}

fn fmt_full(v: f64) -> String {
    format!("{}", v)
}

/// Root of the input data set.
pub fn input_root(cfg: &RunConfig, ws: &Workspace) -> PathBuf {
    cfg.input.clone().unwrap_or_else(|| ws.path("library"))
}

/// Generate the synthetic library when no input is configured.
pub fn stage_synth(cfg: &RunConfig, ws: &Workspace) -> Result<Value> {
    if cfg.input.is_some() {
        return Ok(json!({"skipped": true}));
    }
    let index = generate_library(&cfg.synth, &ws.path("library"))?;
    Ok(json!({"storms": index.storms.len(), "seed": index.seed}))
}

fn regime_labels(root: &Path) -> Option<HashMap<String, usize>> {
    let index = LibraryIndex::load(root).ok()?;
    Some(index.storms.into_iter().map(|s| (s.storm_id, s.regime_index)).collect())
}

/// Storms with their ingested samples, as persisted by [`stage_ingest`].
#[derive(Debug, Clone)]
pub struct StoredSample {
    pub storm_id: String,
    pub time: NaiveDateTime,
    pub vmax: f64,
    pub image: CenteredImage,
}

pub fn stage_ingest(cfg: &RunConfig, ws: &Workspace) -> Result<Value> {
    let root = input_root(cfg, ws);
    let (hurdat, manifests) = match LibraryIndex::load(&root) {
        Ok(index) => (
            root.join(&index.hurdat2),
            index
                .storms
                .iter()
                .map(|s| (s.storm_id.clone(), root.join(&s.manifest)))
                .collect::<HashMap<_, _>>(),
        ),
        Err(_) => (root.join(LIBRARY_HURDAT2), HashMap::new()),
    };
    let parsed = parse_hurdat2(&read_text(&hurdat)?);
    for e in &parsed.rejected {
        log::warn!("rejected track block: {}", e);
    }
    let scfg = SampleConfig {
        cadence_hours: cfg.cadence_hours,
        tolerance_minutes: cfg.tolerance_minutes,
        grid: cfg.grid,
    };
    let per_storm: Vec<Option<Vec<crate::ingest::Sample>>> = parsed
        .tracks
        .par_iter()
        .map(|tr| {
            let manifest = manifests
                .get(&tr.storm_id)
                .cloned()
                .unwrap_or_else(|| root.join("stacks").join(&tr.storm_id).join("manifest.json"));
            if !manifest.exists() {
                return Ok(None);
            }
            let frames = read_ir_stack(&manifest)?;
            let (samples, _) = build_samples(&frames, tr, &scfg)?;
            Ok(Some(samples))
        })
        .collect::<Result<_>>()?;

    block::write_atomic(&ws.path(TRACKS), write_hurdat2(&parsed.tracks).as_bytes())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["storm_id", "time", "vmax", "center_lat", "center_lon", "row"])?;
    let side = cfg.grid.side();
    let (mut storms, mut n_samples, mut no_stack) = (0, 0, 0);
    for (tr, samples) in parsed.tracks.iter().zip(&per_storm) {
        let Some(samples) = samples else {
            no_stack += 1;
            continue;
        };
        if samples.is_empty() {
            continue;
        }
        storms += 1;
        n_samples += samples.len();
        let mut vals = Vec::with_capacity(samples.len() * side * side);
        for (row, s) in samples.iter().enumerate() {
            w.write_record([
                s.storm_id.clone(),
                format_time(s.time),
                fmt_full(s.vmax),
                fmt_full(s.image.center_lat),
                fmt_full(s.image.center_lon),
                row.to_string(),
            ])?;
            vals.extend_from_slice(&s.image.temps);
        }
        Block::from_f64(side * side, samples.len(), &vals).write(&ws.path(IMAGES).join(format!("{}.bin", tr.storm_id)))?;
    }
    finish(w, &ws.path(SAMPLES))?;
    if n_samples == 0 {
        return Err(Error::InsufficientData(format!("no samples could be built from {}", root.display())));
    }
    Ok(json!({
        "tracks": parsed.tracks.len(),
        "rejected_blocks": parsed.rejected.len(),
        "storms_without_stack": no_stack,
        "storms_with_samples": storms,
        "samples": n_samples,
    }))
}

/// Samples grouped by storm in file order.
pub fn load_samples(cfg: &RunConfig, ws: &Workspace) -> Result<BTreeMap<String, Vec<StoredSample>>> {
    let path = ws.path(SAMPLES);
    let mut rdr = csv_reader(&path)?;
    let mut rows: BTreeMap<String, Vec<(NaiveDateTime, f64, f64, f64, usize)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = field(&rec, 0, &path)?.to_string();
        let row: usize = field(&rec, 5, &path)?
            .parse()
            .map_err(|_| Error::format(&path, "bad row index"))?;
        rows.entry(id).or_default().push((
            parse_t(field(&rec, 1, &path)?, &path)?,
            parse_f64(field(&rec, 2, &path)?, &path)?,
            parse_f64(field(&rec, 3, &path)?, &path)?,
            parse_f64(field(&rec, 4, &path)?, &path)?,
            row,
        ));
    }
    let side = cfg.grid.side();
    let mut out = BTreeMap::new();
    for (id, list) in rows {
        let bpath = ws.path(IMAGES).join(format!("{}.bin", id));
        let blk = Block::read(&bpath)?;
        if blk.width != side * side {
            return Err(Error::format(&bpath, "image size does not match the configured grid"));
        }
        let samples = list
            .into_iter()
            .map(|(time, vmax, clat, clon, row)| {
                if row >= blk.height {
                    return Err(Error::format(&bpath, format!("row {} out of range", row)));
                }
                Ok(StoredSample {
                    storm_id: id.clone(),
                    time,
                    vmax,
                    image: CenteredImage {
                        center_lat: clat,
                        center_lon: clon,
                        grid: cfg.grid,
                        valid_time: time,
                        temps: blk.row(row).iter().map(|&v| f64::from(v)).collect(),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(id, samples);
    }
    Ok(out)
}

/// One row of the ORB table.
#[derive(Debug, Clone)]
pub struct OrbRow {
    pub storm_id: String,
    pub time: NaiveDateTime,
    pub values: Vec<f64>,
}

fn orb_header(layout: &OrbLayout) -> Vec<String> {
    let mut h = vec!["storm_id".to_string(), "time".to_string()];
    for e in &layout.entries {
        h.extend((0..e.len).map(|i| format!("{}_{}", e.name, i)));
    }
    h
}

pub fn stage_extract(cfg: &RunConfig, ws: &Workspace) -> Result<Value> {
    let samples = load_samples(cfg, ws)?;
    let extractor = OrbExtractor::new(cfg.orb.clone())?;
    let layout = extractor.layout().as_ref().clone();
    let storms: Vec<(&String, &Vec<StoredSample>)> = samples.iter().collect();
    let per_storm: Vec<(Vec<OrbRow>, usize)> = storms
        .par_iter()
        .map(|(id, list)| {
            let mut rows = Vec::new();
            let mut rejected = 0;
            for s in list.iter() {
                match extractor.extract(&s.image) {
                    Ok(v) => rows.push(OrbRow {
                        storm_id: (*id).clone(),
                        time: s.time,
                        values: v.values,
                    }),
                    Err(Error::Rejected(msg)) => {
                        log::warn!("{} {}: {}", id, format_time(s.time), msg);
                        rejected += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok((rows, rejected))
        })
        .collect::<Result<_>>()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(orb_header(&layout))?;
    let mut n = 0;
    let mut rejected = 0;
    for (rows, r) in &per_storm {
        rejected += r;
        for row in rows {
            let mut rec = vec![row.storm_id.clone(), format_time(row.time)];
            rec.extend(row.values.iter().map(|&v| fmt_full(v)));
            w.write_record(&rec)?;
            n += 1;
        }
    }
    finish(w, &ws.path(ORB_CSV))?;
    block::write_json(&ws.path(ORB_LAYOUT), &layout)?;

    let mut s = csv::Writer::from_writer(Vec::new());
    s.write_record(["storm_id", "split"])?;
    for id in samples.keys() {
        s.write_record([id.as_str(), split_of(id, &cfg.split).name()])?;
    }
    finish(s, &ws.path(SPLIT_CSV))?;
    Ok(json!({"vectors": n, "rejected": rejected, "dim": layout.dim()}))
}

pub fn load_orb(ws: &Workspace) -> Result<(Vec<OrbRow>, OrbLayout)> {
    let layout: OrbLayout = block::read_json(&ws.path(ORB_LAYOUT))?;
    let path = ws.path(ORB_CSV);
    let mut rdr = csv_reader(&path)?;
    let d = layout.dim();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != d + 2 {
            return Err(Error::format(&path, format!("expected {} columns, found {}", d + 2, rec.len())));
        }
        rows.push(OrbRow {
            storm_id: rec[0].to_string(),
            time: parse_t(&rec[1], &path)?,
            values: (2..d + 2).map(|i| parse_f64(&rec[i], &path)).collect::<Result<_>>()?,
        });
    }
    Ok((rows, layout))
}

pub fn load_split(ws: &Workspace) -> Result<HashMap<String, Split>> {
    let path = ws.path(SPLIT_CSV);
    let mut rdr = csv_reader(&path)?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let split = match field(&rec, 1, &path)? {
            "train" => Split::Train,
            "validation" => Split::Validation,
            "test" => Split::Test,
            other => return Err(Error::format(&path, format!("unknown split '{}'", other))),
        };
        out.insert(field(&rec, 0, &path)?.to_string(), split);
    }
    Ok(out)
}

fn split_or_hash(split: &HashMap<String, Split>, id: &str, cfg: &RunConfig) -> Split {
    split.get(id).copied().unwrap_or_else(|| split_of(id, &cfg.split))
}

/// Coefficients of one storm in time order.
#[derive(Debug, Clone)]
pub struct CoeffSeries {
    pub storm_id: String,
    pub split: Split,
    pub times: Vec<NaiveDateTime>,
    pub z: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
}

fn fit_pca_stage(cfg: &RunConfig, ws: &Workspace) -> Result<Value> {
    let (rows, layout) = load_orb(ws)?;
    let split = load_split(ws)?;
    let train: Vec<Vec<f64>> = rows
        .iter()
        .filter(|r| split_or_hash(&split, &r.storm_id, cfg) == Split::Train)
        .map(|r| r.values.clone())
        .collect();
    let basis = fit_pca(&train, cfg.pca)?;
    basis.save(&ws.models(), ORB_PCA, Some(&layout))?;
    let (basis, _) = PcBasis::load(&ws.models(), ORB_PCA)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["storm_id".to_string(), "time".to_string(), "split".to_string()];
    header.extend((1..=basis.k()).map(|i| format!("z_{}", i)));
    w.write_record(&header)?;
    for r in &rows {
        let z = basis.project(&r.values)?;
        let mut rec = vec![
            r.storm_id.clone(),
            format_time(r.time),
            split_or_hash(&split, &r.storm_id, cfg).name().to_string(),
        ];
        rec.extend(z.iter().map(|&v| fmt_full(v)));
        w.write_record(&rec)?;
    }
    finish(w, &ws.path(COEFFS))?;
    Ok(json!({
        "train_rows": train.len(),
        "k": basis.k(),
        "explained": basis.explained_fraction.last().copied().unwrap_or(0.0),
    }))
}

/// ORB vectors and their coefficients per storm.
pub fn load_series(cfg: &RunConfig, ws: &Workspace) -> Result<(Vec<CoeffSeries>, PcBasis)> {
    let (basis, _) = PcBasis::load(&ws.models(), ORB_PCA)?;
    let (rows, _) = load_orb(ws)?;
    let split = load_split(ws)?;
    let path = ws.path(COEFFS);
    let mut rdr = csv_reader(&path)?;
    let k = basis.k();
    let mut coeffs: HashMap<(String, NaiveDateTime), Vec<f64>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != k + 3 {
            return Err(Error::format(&path, "coefficient count does not match the basis"));
        }
        let z = (3..k + 3).map(|i| parse_f64(&rec[i], &path)).collect::<Result<Vec<_>>>()?;
        coeffs.insert((rec[0].to_string(), parse_t(&rec[1], &path)?), z);
    }
    let mut by_storm: BTreeMap<String, CoeffSeries> = BTreeMap::new();
    for r in rows {
        let z = coeffs
            .remove(&(r.storm_id.clone(), r.time))
            .ok_or_else(|| Error::format(&path, format!("no coefficients for {} {}", r.storm_id, format_time(r.time))))?;
        let s = by_storm.entry(r.storm_id.clone()).or_insert_with(|| CoeffSeries {
            storm_id: r.storm_id.clone(),
            split: split_or_hash(&split, &r.storm_id, cfg),
            times: Vec::new(),
            z: Vec::new(),
            x: Vec::new(),
        });
        s.times.push(r.time);
        s.z.push(z);
        s.x.push(r.values);
    }
    Ok((by_storm.into_values().collect(), basis))
}

/// Index ranges of gap-free runs at the cadence.
fn segments(times: &[NaiveDateTime], cadence_hours: u32) -> Vec<std::ops::Range<usize>> {
    let step = Duration::hours(i64::from(cadence_hours));
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=times.len() {
        if i == times.len() || times[i] - times[i - 1] != step {
            if i > start {
                out.push(start..i);
            }
            start = i;
        }
    }
    out
}

fn z_segments(series: &[CoeffSeries], which: Split, cadence: u32) -> Vec<Vec<Vec<f64>>> {
    series
        .iter()
        .filter(|s| s.split == which)
        .flat_map(|s| segments(&s.times, cadence).into_iter().map(move |r| s.z[r].to_vec()))
        .collect()
}

fn image_segments(
    series: &[CoeffSeries],
    samples: &BTreeMap<String, Vec<StoredSample>>,
    which: Split,
    cadence: u32,
) -> Result<Vec<Vec<CenteredImage>>> {
    let mut out = Vec::new();
    for s in series.iter().filter(|s| s.split == which) {
        let imgs = storm_images(s, samples)?;
        for r in segments(&s.times, cadence) {
            out.push(imgs[r].iter().map(|i| (*i).clone()).collect());
        }
    }
    Ok(out)
}

fn storm_images<'a>(s: &CoeffSeries, samples: &'a BTreeMap<String, Vec<StoredSample>>) -> Result<Vec<&'a CenteredImage>> {
    let list = samples
        .get(&s.storm_id)
        .ok_or_else(|| Error::InsufficientData(format!("no images for {}", s.storm_id)))?;
    let by_time: HashMap<NaiveDateTime, &CenteredImage> = list.iter().map(|x| (x.time, &x.image)).collect();
    s.times
        .iter()
        .map(|t| {
            by_time
                .get(t)
                .copied()
                .ok_or_else(|| Error::InsufficientData(format!("no image for {} {}", s.storm_id, format_time(*t))))
        })
        .collect()
}

fn fit_var_stage(cfg: &RunConfig, ws: &Workspace) -> Result<Value> {
    let (series, _) = load_series(cfg, ws)?;
    let train = z_segments(&series, Split::Train, cfg.cadence_hours);
    let val = z_segments(&series, Split::Validation, cfg.cadence_hours);
    let model = select_var(&train, &val, cfg.var.order, &cfg.var.lambda_grid)?;
    model.save(&ws.models(), VAR_B)?;
    Ok(json!({"order": model.order, "lambda": model.lambda, "k": model.dim()}))
}

fn fit_imagedyn_stage(cfg: &RunConfig, ws: &Workspace) -> Result<Value> {
    let (series, _) = load_series(cfg, ws)?;
    let samples = load_samples(cfg, ws)?;
    let train = image_segments(&series, &samples, Split::Train, cfg.cadence_hours)?;
    let val = image_segments(&series, &samples, Split::Validation, cfg.cadence_hours)?;
    let params = ImageDynamicsParams {
        k_img: cfg.image_dynamics.k_img,
        order: cfg.image_dynamics.order,
        lambda: cfg.image_dynamics.lambda_grid[0],
        cadence_hours: cfg.cadence_hours,
    };
    let model = fit_image_dynamics_select(&train, &val, &params, &cfg.image_dynamics.lambda_grid)?;
    model.save(&ws.models(), IMAGEDYN)?;
    Ok(json!({
        "k_img": model.image_basis.k(),
        "order": model.dynamics.order,
        "lambda": model.dynamics.lambda,
    }))
}

fn gam_path(ws: &Workspace, h: u32) -> PathBuf {
    ws.models().join(format!("gam_h{}.json", h))
}

fn lasso_path(ws: &Workspace, h: u32) -> PathBuf {
    ws.models().join(format!("lasso_h{}.json", h))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoSelection {
    pub lambda: f64,
    pub model: LassoModel,
    /// (lambda, validation mean log-loss)
    pub validation_loss: Vec<(f64, f64)>,
    pub single_class: bool,
}

/// Storm scope of a structural forecast run.
fn forecast_scope(cfg: &RunConfig, pathway: Pathway, split: Split) -> bool {
    match pathway {
        Pathway::B => true,
        Pathway::A => split == Split::Test || cfg.intensity_pathway == IntensityPathway::A,
        Pathway::Persistence => split == Split::Test,
    }
}

struct ForecastRow {
    storm_id: String,
    issue: NaiveDateTime,
    horizon: u32,
    split: Split,
    z: Vec<f64>,
    x: Vec<f64>,
}

pub fn stage_forecast(cfg: &RunConfig, ws: &Workspace, pathway: Pathway, horizons: &[u32]) -> Result<Value> {
    if horizons.is_empty() || horizons.iter().any(|h| *h == 0 || h % cfg.cadence_hours != 0) {
        return Err(Error::InvalidArgument(format!(
            "horizons {:?} must be positive multiples of {} h",
            horizons, cfg.cadence_hours
        )));
    }
    let (series, basis) = load_series(cfg, ws)?;
    let max_steps = (*horizons.iter().max().unwrap() / cfg.cadence_hours) as usize;
    let hist = cfg.history_len();
    let var = match pathway {
        Pathway::B => Some(VarModel::load(&ws.models(), VAR_B)?),
        _ => None,
    };
    let (imagedyn, samples) = match pathway {
        Pathway::A => (Some(ImageDynamicsModel::load(&ws.models(), IMAGEDYN)?), load_samples(cfg, ws)?),
        _ => (None, BTreeMap::new()),
    };
    let extractor = OrbExtractor::new(cfg.orb.clone())?;
    let span = Duration::hours(i64::from(cfg.cadence_hours) * (hist as i64 - 1));

    let per_storm: Vec<Vec<ForecastRow>> = series
        .par_iter()
        .filter(|s| forecast_scope(cfg, pathway, s.split))
        .map(|s| {
            let images = match pathway {
                Pathway::A => storm_images(s, &samples)?,
                _ => Vec::new(),
            };
            let mut rows = Vec::new();
            for i in (hist - 1)..s.times.len() {
                if s.times[i] - s.times[i + 1 - hist] != span {
                    continue;
                }
                let steps: Vec<(Vec<f64>, Vec<f64>)> = match pathway {
                    Pathway::B => {
                        let m = var.as_ref().unwrap();
                        forecast_var(m, &s.z[i + 1 - m.order..=i], max_steps)?
                            .into_iter()
                            .map(|z| Ok((basis.reconstruct(&z)?, z)))
                            .collect::<Result<_>>()?
                    }
                    Pathway::A => {
                        let m = imagedyn.as_ref().unwrap();
                        let p = m.dynamics.order;
                        let history: Vec<CenteredImage> = images[i + 1 - p..=i].iter().map(|x| (*x).clone()).collect();
                        forecast_images(m, &history, max_steps)?
                            .iter()
                            .map(|img| {
                                let x = extractor.extract(img)?.values;
                                let z = basis.project(&x)?;
                                Ok((x, z))
                            })
                            .collect::<Result<_>>()?
                    }
                    Pathway::Persistence => vec![(s.x[i].clone(), s.z[i].clone()); max_steps],
                };
                for &h in horizons {
                    let (x, z) = &steps[(h / cfg.cadence_hours) as usize - 1];
                    rows.push(ForecastRow {
                        storm_id: s.storm_id.clone(),
                        issue: s.times[i],
                        horizon: h,
                        split: s.split,
                        z: z.clone(),
                        x: x.clone(),
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let d = basis.dim();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["storm_id", "issue_time", "horizon", "pathway", "split"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=basis.k()).map(|i| format!("z_hat_{}", i)));
    header.extend((1..=d).map(|i| format!("x_hat_{}", i)));
    w.write_record(&header)?;
    let mut n = 0;
    for r in per_storm.iter().flatten() {
        let mut rec = vec![
            r.storm_id.clone(),
            format_time(r.issue),
            r.horizon.to_string(),
            pathway.name().to_string(),
            r.split.name().to_string(),
        ];
        rec.extend(r.z.iter().map(|&v| fmt_full(v)));
        // summary vectors are only kept where they are verified
        if r.split == Split::Test {
            rec.extend(r.x.iter().map(|v| format!("{:.6}", v)));
        } else {
            rec.extend(std::iter::repeat_n(String::new(), d));
        }
        w.write_record(&rec)?;
        n += 1;
    }
    finish(w, &ws.path(&pathway.file()))?;
    Ok(json!({"pathway": pathway.name(), "rows": n}))
}

struct LoadedForecasts {
    structural: Vec<StructuralForecast>,
    /// Test-split summary vectors.
    x_hat: ForecastSet,
}

fn load_forecasts(ws: &Workspace, pathway: Pathway, k: usize, d: usize) -> Result<LoadedForecasts> {
    let path = ws.path(&pathway.file());
    let mut rdr = csv_reader(&path)?;
    let mut structural = Vec::new();
    let mut x_hat = ForecastSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 5 + k + d {
            return Err(Error::format(&path, "forecast columns do not match the basis"));
        }
        let id = rec[0].to_string();
        let issue = parse_t(&rec[1], &path)?;
        let h: u32 = rec[2].parse().map_err(|_| Error::format(&path, "bad horizon"))?;
        let z = (5..5 + k).map(|i| parse_f64(&rec[i], &path)).collect::<Result<Vec<_>>>()?;
        if !rec[5 + k].is_empty() {
            let x = (5 + k..5 + k + d).map(|i| parse_f64(&rec[i], &path)).collect::<Result<Vec<_>>>()?;
            x_hat.insert((id.clone(), issue, h), x);
        }
        structural.push(StructuralForecast {
            storm_id: id,
            issue_time: issue,
            horizon_hours: h,
            z_hat: z,
        });
    }
    Ok(LoadedForecasts { structural, x_hat })
}

fn intensity_pathway(cfg: &RunConfig) -> Pathway {
    match cfg.intensity_pathway {
        IntensityPathway::A => Pathway::A,
        IntensityPathway::B => Pathway::B,
    }
}

struct IntensityInputs {
    table: IntensityTable,
    observed: Vec<(Split, ObservedState)>,
    forecasts: Vec<StructuralForecast>,
    k: usize,
}

fn intensity_inputs(cfg: &RunConfig, ws: &Workspace) -> Result<IntensityInputs> {
    let tracks = parse_hurdat2(&read_text(&ws.path(TRACKS))?).tracks;
    let table = IntensityTable::from_tracks(&tracks);
    let (series, basis) = load_series(cfg, ws)?;
    let fc = load_forecasts(ws, intensity_pathway(cfg), basis.k(), basis.dim())?;
    let mut observed = Vec::new();
    for s in &series {
        for (t, z) in s.times.iter().zip(&s.z) {
            if let Some(v) = table.get(&s.storm_id, *t) {
                observed.push((
                    s.split,
                    ObservedState {
                        storm_id: s.storm_id.clone(),
                        time: *t,
                        vmax: v,
                        z: z.clone(),
                    },
                ));
            }
        }
    }
    Ok(IntensityInputs {
        table,
        observed,
        forecasts: fc.structural,
        k: basis.k(),
    })
}

impl IntensityInputs {
    fn design(&self, which: Split, h: u32, cadence: u32, require_target: bool) -> Result<Vec<DesignRow>> {
        let obs: Vec<ObservedState> = self
            .observed
            .iter()
            .filter(|(s, _)| *s == which)
            .map(|(_, o)| o.clone())
            .collect();
        Ok(build_design(&obs, &self.forecasts, &self.table, h, cadence, require_target)?.0)
    }

    fn ri_label(&self, row: &DesignRow, cfg: &RunConfig) -> Option<bool> {
        let later = self.table.get(
            &row.storm_id,
            row.issue_time + Duration::hours(i64::from(cfg.lasso.window_hours)),
        )?;
        Some(rapid_change(later - row.v_now, cfg.lasso.threshold_kt, cfg.lasso.increase_only))
    }

    fn labelled(&self, rows: &[DesignRow], cfg: &RunConfig) -> (Vec<Vec<f64>>, Vec<bool>) {
        rows.iter()
            .filter_map(|r| self.ri_label(r, cfg).map(|l| (r.features(), l)))
            .unzip()
    }
}

fn log_loss(model: &LassoModel, x: &[Vec<f64>], y: &[bool]) -> Result<f64> {
    let mut s = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let p = sigmoid(model.score(xi)?).clamp(1e-15, 1.0 - 1e-15);
        s -= if yi { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(s / x.len().max(1) as f64)
}

fn fit_intensity_stage(cfg: &RunConfig, ws: &Workspace, target: FitTarget) -> Result<Value> {
    let inputs = intensity_inputs(cfg, ws)?;
    let names = feature_names(inputs.k);
    let mut summary = Vec::new();
    for &h in &cfg.horizons {
        let rows = inputs.design(Split::Train, h, cfg.cadence_hours, true)?;
        match target {
            FitTarget::Gam => {
                let x: Vec<Vec<f64>> = rows.iter().map(DesignRow::features).collect();
                let y: Vec<f64> = rows.iter().map(|r| r.target.unwrap()).collect();
                let fit = fit_gam(&x, &y, &names, &cfg.gam)?;
                block::write_json(&gam_path(ws, h), &fit.model)?;
                summary.push(json!({"horizon": h, "rows": rows.len(), "cycles": fit.cycles, "converged": fit.converged}));
            }
            FitTarget::Lasso => {
                let (x, y) = inputs.labelled(&rows, cfg);
                let val_rows = inputs.design(Split::Validation, h, cfg.cadence_hours, false)?;
                let (vx, vy) = inputs.labelled(&val_rows, cfg);
                let n_pos = y.iter().filter(|&&l| l).count();
                let single = n_pos == 0 || n_pos == y.len();
                if single {
                    log::warn!("horizon {} h: rapid-change labels are single-class", h);
                }
                let opts = LassoOptions {
                    allow_single_class: single,
                    ..Default::default()
                };
                let mut best: Option<(f64, LassoModel)> = None;
                let mut losses = Vec::new();
                for &lambda in &cfg.lasso.lambda_grid {
                    let fit = fit_logistic_lasso(&x, &y, lambda, &opts)?;
                    let (ex, ey) = if vx.is_empty() { (&x, &y) } else { (&vx, &vy) };
                    let loss = log_loss(&fit.model, ex, ey)?;
                    losses.push((lambda, loss));
                    if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                        best = Some((loss, fit.model));
                    }
                }
                let (_, model) = best.unwrap();
                let sel = LassoSelection {
                    lambda: model.lambda,
                    model,
                    validation_loss: losses,
                    single_class: single,
                };
                block::write_json(&lasso_path(ws, h), &sel)?;
                summary.push(json!({"horizon": h, "rows": y.len(), "positives": n_pos, "lambda": sel.lambda}));
            }
            _ => unreachable!("not an intensity model"),
        }
    }
    Ok(Value::Array(summary))
}

pub fn stage_fit(cfg: &RunConfig, ws: &Workspace, target: FitTarget) -> Result<Value> {
    match target {
        FitTarget::Pca => fit_pca_stage(cfg, ws),
        FitTarget::Var => fit_var_stage(cfg, ws),
        FitTarget::ImageDynamics => fit_imagedyn_stage(cfg, ws),
        FitTarget::Gam | FitTarget::Lasso => fit_intensity_stage(cfg, ws, target),
    }
}

/// Intensity predictions on the test split plus every metrics report.
pub fn stage_evaluate(cfg: &RunConfig, ws: &Workspace) -> Result<Value> {
    let inputs = intensity_inputs(cfg, ws)?;
    let mut preds = Vec::new();
    let mut scored = Vec::new();
    for &h in &cfg.horizons {
        let gam: GamModel = block::read_json(&gam_path(ws, h))?;
        let lasso: Option<LassoSelection> = block::read_json(&lasso_path(ws, h)).ok();
        for row in inputs.design(Split::Test, h, cfg.cadence_hours, false)? {
            let v_hat = predict_intensity(&gam, &row)?;
            let p_ri = match &lasso {
                Some(sel) => sel.model.predict_ri(&row.features())?,
                None => f64::NAN,
            };
            for (model, v) in [("gam", v_hat), ("persistence", row.v_now)] {
                scored.push(IntensityForecast {
                    storm_id: row.storm_id.clone(),
                    issue_time: row.issue_time,
                    horizon_hours: h,
                    model: model.into(),
                    v_hat: v,
                });
            }
            preds.push(IntensityPrediction {
                storm_id: row.storm_id,
                issue_time: row.issue_time,
                horizon_hours: h,
                v_now: row.v_now,
                v_hat,
                p_ri,
            });
        }
    }
    write_predictions(&ws.path(PREDICTIONS), &preds)?;
    let report = intensity_metrics(&scored, &inputs.table, &cfg.horizons);
    write_intensity_metrics(&ws.path(INTENSITY_METRICS), &report)?;

    let (series, basis) = load_series(cfg, ws)?;
    let mut truth = TruthSet::new();
    for s in series.iter().filter(|s| s.split == Split::Test) {
        for (t, x) in s.times.iter().zip(&s.x) {
            truth.insert((s.storm_id.clone(), *t), x.clone());
        }
    }
    let load = |p: Pathway| -> Result<ForecastSet> {
        if ws.path(&p.file()).exists() {
            Ok(load_forecasts(ws, p, basis.k(), basis.dim())?.x_hat)
        } else {
            Ok(ForecastSet::new())
        }
    };
    let (a, b, pers) = (load(Pathway::A)?, load(Pathway::B)?, load(Pathway::Persistence)?);
    let mut structural = structural_metrics(&a, &b, &truth, &basis, &cfg.horizons)?;
    structural.add_vs_truth("persistence", &pers, &truth, &basis, &cfg.horizons)?;
    write_structural_metrics(&ws.path(STRUCTURAL_METRICS), &structural)?;

    if cfg.plots {
        write_plots(cfg, ws, &series, &preds, &inputs.table)?;
    }
    let rows: Vec<Value> = report
        .rows
        .iter()
        .map(|r| json!({"horizon": r.horizon_hours, "model": r.model, "n": r.n, "rmse": r.rmse, "bias": r.bias}))
        .collect();
    Ok(json!({"predictions": preds.len(), "intensity": rows}))
}

fn write_plots(
    cfg: &RunConfig,
    ws: &Workspace,
    series: &[CoeffSeries],
    preds: &[IntensityPrediction],
    table: &IntensityTable,
) -> Result<()> {
    let layout: OrbLayout = block::read_json(&ws.path(ORB_LAYOUT))?;
    if let Some(s) = series.iter().find(|s| s.split == Split::Test) {
        let x = &s.x[0];
        for e in &layout.entries {
            let abscissa = if e.name == "levelset_area" { &layout.c_grid } else { &layout.r_grid };
            let pts = abscissa.iter().zip(&x[e.offset..e.offset + e.len]).map(|(a, b)| (*a, *b)).collect();
            let svg = line_plot(
                &format!("{} {} {}", s.storm_id, format_time(s.times[0]), e.name),
                if e.name == "levelset_area" { "threshold (K)" } else { "radius (km)" },
                &e.name,
                &[Series {
                    name: e.name.clone(),
                    points: pts,
                }],
            );
            block::write_atomic(&ws.path(&format!("plots/orb_{}.svg", e.name)), svg.as_bytes())?;
        }
    }
    let h = *cfg.horizons.iter().max().unwrap();
    if let Some(first) = preds.iter().find(|p| p.horizon_hours == h) {
        let t0 = first.issue_time;
        let hours = |t: NaiveDateTime| (t - t0).num_minutes() as f64 / 60.0;
        let mine: Vec<&IntensityPrediction> = preds
            .iter()
            .filter(|p| p.storm_id == first.storm_id && p.horizon_hours == h)
            .collect();
        let dt = Duration::hours(i64::from(h));
        let truth = mine
            .iter()
            .filter_map(|p| table.get(&p.storm_id, p.issue_time + dt).map(|v| (hours(p.issue_time + dt), v)))
            .collect();
        let fc = mine.iter().map(|p| (hours(p.issue_time + dt), p.v_hat)).collect();
        let pers = mine.iter().map(|p| (hours(p.issue_time + dt), p.v_now)).collect();
        let svg = line_plot(
            &format!("{} intensity, {} h forecasts", first.storm_id, h),
            "hours since first verifying time",
            "kt",
            &[
                Series { name: "truth".into(), points: truth },
                Series { name: "additive model".into(), points: fc },
                Series { name: "persistence".into(), points: pers },
            ],
        );
        block::write_atomic(&ws.path("plots/intensity_trace.svg"), svg.as_bytes())?;
    }
    Ok(())
}

fn train_windows(cfg: &RunConfig, series: &[CoeffSeries], which: Split) -> Vec<Window> {
    series
        .iter()
        .filter(|s| s.split == which)
        .flat_map(|s| {
            Trajectory {
                storm_id: s.storm_id.clone(),
                times: s.times.clone(),
                coeffs: s.z.clone(),
            }
            .windows(cfg.analogs.window, cfg.cadence_hours)
        })
        .collect()
}

/// Evenly spaced subset of at most `max` items.
fn subsample<T: Clone>(items: &[T], max: usize) -> Vec<T> {
    if items.len() <= max {
        return items.to_vec();
    }
    (0..max).map(|i| items[i * items.len() / max].clone()).collect()
}

pub fn stage_cluster(cfg: &RunConfig, ws: &Workspace) -> Result<Value> {
    let (series, _) = load_series(cfg, ws)?;
    let windows = subsample(&train_windows(cfg, &series, Split::Train), cfg.analogs.max_cluster_windows);
    let d = distance_matrix(&windows)?;
    let res = spectral_cluster(&d, cfg.analogs.k_clusters, cfg.seed)?;
    write_clusters(&ws.path(CLUSTERS), &windows, &res.labels)?;
    save_embedding(&ws.path("analogs"), "embedding", &res)?;
    let ari = regime_labels(&input_root(cfg, ws)).and_then(|labels| {
        let truth: Option<Vec<usize>> = windows.iter().map(|w| labels.get(&w.storm_id).copied()).collect();
        truth.map(|t| adjusted_rand_index(&res.labels, &t))
    });
    let summary = json!({
        "windows": windows.len(),
        "sigma": res.sigma,
        "eigengap": res.eigengap,
        "wcss": res.wcss,
        "ari_vs_regimes": ari,
    });
    block::write_json(&ws.path("analogs/cluster_summary.json"), &summary)?;
    Ok(summary)
}

pub fn stage_analogs(cfg: &RunConfig, ws: &Workspace) -> Result<Value> {
    let (series, _) = load_series(cfg, ws)?;
    let library = train_windows(cfg, &series, Split::Train);
    let mut queries: Vec<Window> = Vec::new();
    for s in series.iter().filter(|s| s.split == Split::Test) {
        let one = std::slice::from_ref(s);
        if let Some(last) = train_windows(cfg, one, Split::Test).pop() {
            queries.push(last);
        }
    }
    let results = queries
        .par_iter()
        .map(|q| Ok((q.clone(), find_analogs(q, &library, cfg.analogs.top_m, cfg.analogs.exclude_own_storm)?)))
        .collect::<Result<Vec<_>>>()?;
    write_analogs(&ws.path(ANALOGS), &results)?;
    Ok(json!({"queries": results.len(), "library_windows": library.len()}))
}

/// Relative paths of every CSV report a full run writes.
pub fn report_files(cfg: &RunConfig) -> Vec<String> {
    let mut v = vec![
        SAMPLES.to_string(),
        ORB_CSV.into(),
        SPLIT_CSV.into(),
        COEFFS.into(),
        Pathway::B.file(),
        Pathway::A.file(),
        Pathway::Persistence.file(),
        PREDICTIONS.into(),
        INTENSITY_METRICS.into(),
        STRUCTURAL_METRICS.into(),
        CLUSTERS.into(),
        ANALOGS.into(),
    ];
    if cfg.input.is_none() {
        v.insert(0, format!("library/{}", LIBRARY_HURDAT2));
    }
    v
}

/// Execute every stage in order. The `DONE` sentinel is written last.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let ws = Workspace::new(&cfg.out);
    fs::create_dir_all(&ws.root).map_err(|e| Error::io(&ws.root, e))?;
    let done = ws.path(DONE);
    if done.exists() {
        fs::remove_file(&done).map_err(|e| Error::io(&done, e))?;
    }
    let mut stages = serde_json::Map::new();
    let mut record = |name: &'static str, v: Value| {
        stages.insert(name.to_string(), v);
    };
    record("synth", stage("synth", || stage_synth(cfg, &ws))?);
    record("ingest", stage("ingest", || stage_ingest(cfg, &ws))?);
    record("orb", stage("orb", || stage_extract(cfg, &ws))?);
    record("latent", stage("latent", || stage_fit(cfg, &ws, FitTarget::Pca))?);
    let structfc = stage("structfc", || {
        let var = stage_fit(cfg, &ws, FitTarget::Var)?;
        let img = stage_fit(cfg, &ws, FitTarget::ImageDynamics)?;
        let mut fc = Vec::new();
        for p in [Pathway::B, Pathway::A, Pathway::Persistence] {
            fc.push(stage_forecast(cfg, &ws, p, &cfg.horizons)?);
        }
        Ok(json!({"var": var, "imagedyn": img, "forecasts": fc}))
    })?;
    record("structfc", structfc);
    let intensity = stage("intensity", || {
        Ok(json!({
            "gam": stage_fit(cfg, &ws, FitTarget::Gam)?,
            "lasso": stage_fit(cfg, &ws, FitTarget::Lasso)?,
        }))
    })?;
    record("intensity", intensity);
    let analogs = stage("analogs", || {
        Ok(json!({"cluster": stage_cluster(cfg, &ws)?, "analogs": stage_analogs(cfg, &ws)?}))
    })?;
    record("analogs", analogs);
    record("metrics", stage("metrics", || stage_evaluate(cfg, &ws))?);

    let manifest = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "versions": {
            "tcorb": env!("CARGO_PKG_VERSION"),
            "block_format": "TCIR1",
        },
        "config": cfg,
        "stages": Value::Object(stages),
        "reports": report_files(cfg),
    });
    block::write_json(&ws.path(RUN_MANIFEST), &manifest)?;
    block::write_atomic(&done, b"")?;
    Ok(manifest)
}
