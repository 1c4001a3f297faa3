use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stagereg::data::{SynthConfig, DEFAULT_WINDOW};
use stagereg::evaluation::{DEFAULT_ALPHAS, DEFAULT_BETAS};
use stagereg::training::TrainConfig;

/// Everything a run can be configured with. The file is TOML; sections map
/// onto the fields below, e.g.
///
/// ```toml
/// seed = 7
/// [train]
/// learning_rate = 1e-4
/// [train.network]
/// in_shape = { d = 32, h = 32, w = 32 }
/// [preprocess]
/// window_low = -160.0
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// When present, loaded scans are windowed, rescaled to `[-1, 1]` and
    /// resized to the network input shape.
    pub preprocess: Option<PreprocessConfig>,
    pub grid: GridConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub window_low: f64,
    pub window_high: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            window_low: DEFAULT_WINDOW.0,
            window_high: DEFAULT_WINDOW.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            alphas: DEFAULT_ALPHAS.to_vec(),
            betas: DEFAULT_BETAS.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {}", path.display(), e.message()))
    }

    /// Applies the run seed everywhere randomness enters.
    pub fn resolve_seed(&mut self, cli_seed: Option<u64>) -> u64 {
        let seed = cli_seed.or(self.seed).unwrap_or(0);
        self.seed = Some(seed);
        self.train.seed = seed;
        self.synth.seed = seed;
        seed
    }
}
