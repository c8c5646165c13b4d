use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::GridSpec;
use crate::intensity::GamConfig;
use crate::latent::RankRule;
use crate::orb::OrbConfig;
use crate::structfc::RIDGE_GRID;
use crate::synth::LibraryConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarConfig {
    pub order: usize,
    pub lambda_grid: Vec<f64>,
}

impl Default for VarConfig {
    fn default() -> Self {
        VarConfig {
            order: 4,
            lambda_grid: RIDGE_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageDynConfig {
    pub k_img: usize,
    pub order: usize,
    pub lambda_grid: Vec<f64>,
}

impl Default for ImageDynConfig {
    fn default() -> Self {
        ImageDynConfig {
            k_img: 64,
            order: 4,
            lambda_grid: RIDGE_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    pub lambda_grid: Vec<f64>,
    pub threshold_kt: f64,
    pub window_hours: u32,
    pub increase_only: bool,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig {
            lambda_grid: vec![0.001, 0.01, 0.1],
            threshold_kt: crate::intensity::RI_THRESHOLD_KT,
            window_hours: crate::intensity::RI_WINDOW_HOURS as u32,
            increase_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalogConfig {
    pub window: usize,
    pub k_clusters: usize,
    /// Training windows beyond this are evenly subsampled before clustering.
    pub max_cluster_windows: usize,
    pub top_m: usize,
    pub exclude_own_storm: bool,
}

impl Default for AnalogConfig {
    fn default() -> Self {
        AnalogConfig {
            window: crate::analogs::DEFAULT_WINDOW,
            k_clusters: 2,
            max_cluster_windows: 600,
            top_m: 5,
            exclude_own_storm: true,
        }
    }
}

/// Which structural forecast feeds the intensity model's `z_fc` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IntensityPathway {
    A,
    #[default]
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset root holding `hurdat2.txt` and `stacks/<storm_id>/manifest.json`
    /// (or a `library.json` listing manifests). When absent, a synthetic
    /// library is generated from `synth` under the output directory.
    pub input: Option<PathBuf>,
    pub synth: LibraryConfig,
    pub out: PathBuf,
    pub seed: u64,
    pub cadence_hours: u32,
    pub tolerance_minutes: i64,
    pub grid: GridSpec,
    pub orb: OrbConfig,
    pub pca: RankRule,
    pub var: VarConfig,
    pub image_dynamics: ImageDynConfig,
    pub gam: GamConfig,
    pub lasso: LassoConfig,
    pub intensity_pathway: IntensityPathway,
    pub horizons: Vec<u32>,
    pub split: SplitConfig,
    pub analogs: AnalogConfig,
    pub plots: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            synth: LibraryConfig::default(),
            out: PathBuf::from("out"),
            seed: 7,
            cadence_hours: 6,
            tolerance_minutes: 90,
            grid: GridSpec::default(),
            orb: OrbConfig::default(),
            pca: RankRule::default(),
            var: VarConfig::default(),
            image_dynamics: ImageDynConfig::default(),
            gam: GamConfig::default(),
            lasso: LassoConfig::default(),
            intensity_pathway: IntensityPathway::default(),
            horizons: vec![6, 12, 24],
            split: SplitConfig::default(),
            analogs: AnalogConfig::default(),
            plots: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = crate::block::read_json(path)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.cadence_hours == 0 {
            return bad("cadence must be positive".into());
        }
        if self.horizons.is_empty() {
            return bad("at least one horizon is required".into());
        }
        if let Some(h) = self.horizons.iter().find(|h| **h == 0 || **h % self.cadence_hours != 0) {
            return bad(format!("horizon {} is not a positive multiple of the {} h cadence", h, self.cadence_hours));
        }
        let s = &self.split;
        if [s.train, s.validation, s.test].iter().any(|f| !(*f >= 0.0)) || (s.train + s.validation + s.test - 1.0).abs() > 1e-9 {
            return bad("split fractions must be non-negative and sum to 1".into());
        }
        if s.train == 0.0 || s.test == 0.0 {
            return bad("train and test fractions must be positive".into());
        }
        if self.analogs.window < 2 || self.analogs.k_clusters == 0 {
            return bad("analog window must be >= 2 and k_clusters >= 1".into());
        }
        if self.var.lambda_grid.is_empty() || self.image_dynamics.lambda_grid.is_empty() || self.lasso.lambda_grid.is_empty() {
            return bad("lambda grids must be non-empty".into());
        }
        self.grid.validate()?;
        self.orb.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }

    /// Longest history any forecast needs.
    pub fn history_len(&self) -> usize {
        self.var.order.max(self.image_dynamics.order)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Deterministic split from the first eight bytes of SHA-256(storm id).
pub fn split_of(storm_id: &str, cfg: &SplitConfig) -> Split {
    let h = Sha256::digest(storm_id.as_bytes());
    let v = u64::from_be_bytes(h[..8].try_into().unwrap());
    let u = v as f64 / 2f64.powi(64);
    if u < cfg.train {
        Split::Train
    } else if u < cfg.train + cfg.validation {
        Split::Validation
    } else {
        Split::Test
    }
}
