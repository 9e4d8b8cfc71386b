use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use fend_core::cluster::ClusterConfig;
use fend_core::extractor::ExtractorConfig;
use fend_core::kalman::KalmanConfig;
use fend_core::training::TrainConfig;
use fend_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub cdf_bins: usize,
    /// Cap on the samples used for silhouette and PCA exports.
    pub max_separation_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cdf_bins: 50,
            max_separation_samples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub extractor: ExtractorConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub kalman: KalmanConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Ablation {
    NoPcl,
    NoHyper,
    HistoryOnly,
}

impl RunConfig {
    /// Reads TOML, or JSON when the file ends in `.json`. Relative paths
    /// are resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.dataset.is_relative() {
            cfg.dataset = base.join(&cfg.dataset);
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    /// Applies seed and ablation switches and checks every section.
    pub fn prepare(mut self, ablations: &[Ablation]) -> Result<Self> {
        self.train.seed = self.seed;
        for a in ablations {
            match a {
                Ablation::NoPcl => self.train.use_pcl = false,
                Ablation::NoHyper => self.train.use_hyper = false,
                Ablation::HistoryOnly => self.train.future_enhanced = false,
            }
        }
        self.train = self.train.synced();
        if !self.dataset.is_file() {
            return Err(Error::config("dataset", format!("{} does not exist", self.dataset.display())).into());
        }
        self.train.validate()?;
        self.kalman.validate()?;
        if self.train.use_pcl {
            self.extractor.validate()?;
            self.cluster.validate()?;
        }
        if self.eval.cdf_bins == 0 {
            return Err(Error::config("eval.cdf_bins", "must be at least 1").into());
        }
        Ok(self)
    }
}

/// Hex SHA-256 over labelled parts.
pub fn hash_parts(parts: &[(&str, &str)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in parts {
        h.update(k.as_bytes());
        h.update([0u8]);
        h.update(v.as_bytes());
        h.update([0u8]);
    }
    format!("{:x}", h.finalize())
}

pub fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config serializes")
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Per-stage configuration hashes; each covers everything upstream.
#[derive(Clone, Debug)]
pub struct StageHashes {
    pub extractor: String,
    pub clusters: String,
    pub baseline: String,
    pub fend: String,
    pub run: String,
}

impl StageHashes {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let data = file_hash(&cfg.dataset)?;
        let seed = cfg.seed.to_string();
        let extractor = hash_parts(&[("data", &data), ("seed", &seed), ("extractor", &json(&cfg.extractor))]);
        let clusters = hash_parts(&[
            ("extractor", &extractor),
            ("cluster", &json(&cfg.cluster)),
            ("future_enhanced", &cfg.train.future_enhanced.to_string()),
        ]);
        let baseline = hash_parts(&[("data", &data), ("train", &json(&cfg.train.baseline().synced()))]);
        let upstream = if cfg.train.use_pcl { clusters.as_str() } else { "" };
        let fend = hash_parts(&[("data", &data), ("clusters", upstream), ("train", &json(&cfg.train))]);
        let run = hash_parts(&[
            ("baseline", &baseline),
            ("fend", &fend),
            ("kalman", &json(&cfg.kalman)),
            ("eval", &json(&cfg.eval)),
        ]);
        Ok(Self {
            extractor,
            clusters,
            baseline,
            fend,
            run,
        })
    }

    pub fn run_dir(&self, cfg: &RunConfig) -> PathBuf {
        cfg.out_dir.join(&self.run[..16])
    }
}
