//! Run configuration shared by the CLI subcommands and the Python bindings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::confidence::{MetricKind, NeighborRanking, DEFAULT_EPSILON_SCALE};
use crate::error::{Error, Result};
use crate::vae::VaeConfig;

/// Environment variable consulted when a dataset path does not exist as given.
pub const DATA_DIR_ENV: &str = "IDS_DATA_DIR";

/// Which error vector supplies the min-max constants for test-set errors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    /// Test errors are scaled with the training min/max (may leave [0, 1]).
    #[default]
    Training,
    /// Each set is scaled with its own min/max.
    PerSet,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    #[default]
    Pearson,
    Spearman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train_file: PathBuf,
    pub test_file: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            train_file: PathBuf::from("KDDTrain+.txt"),
            test_file: PathBuf::from("KDDTest+.txt"),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorOptions {
    pub normalization: NormalizationScope,
    /// Use this threshold instead of fitting one on the training errors.
    pub threshold_override: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceOptions {
    pub metrics: Vec<MetricKind>,
    pub epsilon_scale: f64,
    /// OWA weights for the Choquet score; uniform when absent.
    pub owa_weights: Option<Vec<f64>>,
    pub neighbor_ranking: NeighborRanking,
}

impl Default for ConfidenceOptions {
    fn default() -> Self {
        ConfidenceOptions {
            metrics: vec![MetricKind::Mahalanobis],
            epsilon_scale: DEFAULT_EPSILON_SCALE,
            owa_weights: None,
            neighbor_ranking: NeighborRanking::Mahalanobis,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrids {
    pub latent_dims: Vec<usize>,
    pub betas: Vec<f64>,
    /// Metric kinds for the distance comparison on one trained model.
    pub metrics: Vec<MetricKind>,
    /// Also run the latent-space vs feature-space timing comparison.
    pub timing: bool,
}

impl SweepGrids {
    pub fn is_empty(&self) -> bool {
        self.latent_dims.is_empty()
            && self.betas.is_empty()
            && self.metrics.is_empty()
            && !self.timing
    }
}

/// Everything a run needs. Unknown JSON keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub vae: VaeConfig,
    pub detector: DetectorOptions,
    pub confidence: ConfidenceOptions,
    pub correlation: CorrelationMethod,
    pub sweep: SweepGrids,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        // input_dim is filled in from the data, so check everything else
        let mut vae = self.vae.clone();
        if vae.input_dim == 0 {
            vae.input_dim = 1;
        }
        vae.validate()?;
        if self.confidence.metrics.is_empty() {
            return Err(Error::Config("confidence.metrics must not be empty".into()));
        }
        let eps = self.confidence.epsilon_scale;
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::Config(format!(
                "epsilon_scale must be finite and >= 0, got {eps}"
            )));
        }
        if let Some(t) = self.detector.threshold_override {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!(
                    "threshold_override must lie in [0, 1], got {t}"
                )));
            }
        }
        if self.sweep.latent_dims.contains(&0) {
            return Err(Error::Config(
                "sweep.latent_dims entries must be >= 1".into(),
            ));
        }
        if self
            .sweep
            .betas
            .iter()
            .any(|b| !(*b >= 0.0) || !b.is_finite())
        {
            return Err(Error::Config(
                "sweep.betas entries must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Returns `path` if it exists, else `$IDS_DATA_DIR/path` if that exists.
/// The error names the path as given.
pub fn resolve_data_path(path: &Path) -> Result<PathBuf> {
    resolve_with_root(
        path,
        std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).as_deref(),
    )
}

fn resolve_with_root(path: &Path, root: Option<&Path>) -> Result<PathBuf> {
    if path.exists() {
        return Ok(path.to_path_buf());
    }
    if let Some(root) = root {
        let joined = root.join(path);
        if joined.exists() {
            return Ok(joined);
        }
        if let Some(name) = path.file_name() {
            let by_name = root.join(name);
            if by_name.exists() {
                return Ok(by_name);
            }
        }
    }
    Err(Error::io(
        path,
        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
    ))
}
