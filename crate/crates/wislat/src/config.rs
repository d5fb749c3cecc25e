//! Application configuration: a single JSON document with one section per
//! subsystem. Every field has a default, so an empty object `{}` is a valid
//! config and partial files override only what they name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csi::DetectorParams;
use crate::ekf::EkfConfig;
use crate::error::Result;
use crate::geometry::SceneConfig;
use crate::harness::Shape;
use crate::solver::SolverConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub shapes: Vec<Shape>,
    pub seeds_per_shape: u64,
    /// Doppler noise standard deviations (Hz); each becomes its own run.
    pub noise_levels: Vec<f64>,
    pub use_csi_path: bool,
    /// Target speed (m/s).
    pub speed: f64,
    /// Arena side length (m), centered on the transmitter.
    pub arena: f64,
    pub num_stations: usize,
    /// Radial bounds for the random true station layout (m).
    pub annulus_min: f64,
    pub annulus_max: f64,
    /// Seed for the shared true layout.
    pub layout_seed: u64,
    /// Base seed from which per-run noise seeds are derived.
    pub base_seed: u64,
    pub blockage: Vec<(usize, (usize, usize))>,
    /// Density-filter radius (m) for station aggregation.
    pub cluster_eps: f64,
    /// Minimum neighbor count within `cluster_eps` to keep an estimate.
    pub cluster_min_pts: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            shapes: vec![Shape::Circle, Shape::Square, Shape::Triangle],
            seeds_per_shape: 5,
            noise_levels: vec![0.0, 1.0],
            use_csi_path: false,
            speed: 1.0,
            arena: 5.0,
            num_stations: 4,
            annulus_min: 2.0,
            annulus_max: 4.0,
            layout_seed: 0xC0FFEE,
            base_seed: 1,
            blockage: Vec::new(),
            cluster_eps: 1.0,
            cluster_min_pts: 3,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub scene: SceneConfig,
    pub detector: DetectorParams,
    pub ekf: EkfConfig,
    pub solver: SolverConfig,
    pub experiment: ExperimentConfig,
}

impl AppConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
