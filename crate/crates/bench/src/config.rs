//! Resolved harness configuration: a single TOML file with CLI overrides.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dsr_core::sim::{CameraConfig, EpisodeConfig, ShapeFamily, SimConfig};
use dsr_core::planner::PlannerConfig;
use dsr_core::voxel::GridSpec;
use dsr_core::warp::AggregateConfig;
use dsr_core::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_objects: usize,
    pub n_steps: usize,
    pub k: usize,
    pub family: ShapeFamily,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_objects: 4,
            n_steps: 10,
            k: 5,
            family: ShapeFamily::Mixed,
        }
    }
}

/// Full harness configuration; every section falls back to the benchmark
/// defaults so an empty file (or none at all) is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub grid: GridSpec,
    pub camera: CameraConfig,
    pub sim: SimConfig,
    pub aggregate: AggregateConfig,
    pub planner: PlannerConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            grid: GridSpec::benchmark(),
            camera: CameraConfig::default(),
            sim: SimConfig::default(),
            aggregate: AggregateConfig::default(),
            planner: PlannerConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => BenchConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let cfg: BenchConfig = toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?;
                anyhow::ensure!(
                    cfg.schema_version == SCHEMA_VERSION,
                    "config schema version {} (expected {})",
                    cfg.schema_version,
                    SCHEMA_VERSION
                );
                cfg
            }
        };
        Ok(cfg)
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            n_objects: self.dataset.n_objects,
            n_steps: self.dataset.n_steps,
            k: self.dataset.k,
            family: self.dataset.family,
            grid: self.grid,
            camera: self.camera,
            sim: self.sim,
        }
    }

    /// Stable hash of the resolved configuration (canonical JSON bytes).
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_vec(self).context("hashing config")?;
        let digest = Sha256::digest(&canonical);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
