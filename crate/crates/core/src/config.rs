//! Run configuration shared by the CLI subcommands.
//!
//! Every key is optional; omitted keys take the defaults below.
//!
//! ```toml
//! history = 3                  # past frames h
//!
//! [ensembling]
//! tau_cos = 0.7071
//! top_k = 5
//! gamma = 0.9
//! zero_norm_eps = 1e-6
//! use_consensus_matrix = true
//! use_reliability_weights = true
//! use_aggregation = true
//!
//! [clustering]                 # used when an archive carries no labels
//! min_cluster_size = 5
//! eps = 0.5
//! motion_threshold = 0.1
//!
//! [loss]
//! enable_dcls = true
//! enable_static = true
//! enable_geom = true
//! dcls_mode = "both"           # both | point_only | cluster_only
//! chamfer_truncation = 2.0
//!
//! [eval]
//! dynamic_threshold = 0.05
//! eval_region_half_extent = 35.0
//! speed_buckets = [[0.05, 0.5], [0.5, 1.0], [1.0, 2.0], [2.0, inf]]
//!
//! [fit]
//! parameterization = "per_cluster_translation"   # or "per_point"
//! supervision = "teflow"       # or "two_frame_baseline"
//! step = 0.1
//! momentum = 0.5
//! max_iterations = 500
//! tolerance = 1e-10
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsemblingConfig;
use crate::error::{Error, Result};
use crate::fit::FitConfig;
use crate::loss::LossConfig;
use crate::metrics::EvalConfig;
use crate::segment::{DEFAULT_CLUSTER_EPS, DEFAULT_MIN_CLUSTER_SIZE};

pub const DEFAULT_HISTORY: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringConfig {
    pub min_cluster_size: usize,
    pub eps: f64,
    pub motion_threshold: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            min_cluster_size: DEFAULT_MIN_CLUSTER_SIZE,
            eps: DEFAULT_CLUSTER_EPS,
            motion_threshold: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub history: usize,
    pub ensembling: EnsemblingConfig,
    pub clustering: ClusteringConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub fit: FitConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            history: DEFAULT_HISTORY,
            ensembling: EnsemblingConfig::default(),
            clustering: ClusteringConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            fit: FitConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.history < 1 {
            return Err(Error::Config("history must be at least 1".into()));
        }
        self.ensembling.validate()?;
        self.loss.validate()?;
        self.eval.validate()?;
        self.fit.validate()?;
        Ok(())
    }
}
