use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cactusnet::base::DEFAULT_TAPS;
use cactusnet::cactus::GrowthConfig;
use cactusnet::data::ClassId;
use cactusnet::nn::{LayerSpec, TrainConfig};
use cactusnet::seed::mix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const ENV_PREFIX: &str = "CNL_";

/// Budget of one training phase; its seed comes from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
}

impl PhaseConfig {
    pub fn with_seed(self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdOverride {
    pub q: f64,
    pub y1: f64,
    pub y2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthSettings {
    pub max_branches_per_node: usize,
    pub consolidation_window: usize,
}

impl Default for GrowthSettings {
    fn default() -> Self {
        let g = GrowthConfig::default();
        GrowthSettings {
            max_branches_per_node: g.max_branches_per_node,
            consolidation_window: g.consolidation_window,
        }
    }
}

fn default_taps() -> Vec<usize> {
    DEFAULT_TAPS.to_vec()
}

fn default_base_train() -> PhaseConfig {
    PhaseConfig {
        learning_rate: 0.05,
        epochs: 12,
        batch_size: 32,
    }
}

fn default_pair_train() -> PhaseConfig {
    PhaseConfig {
        learning_rate: 0.01,
        epochs: 2,
        batch_size: 32,
    }
}

fn default_predictor_train() -> PhaseConfig {
    PhaseConfig {
        learning_rate: 0.01,
        epochs: 5,
        batch_size: 32,
    }
}

fn default_decision_depth() -> usize {
    2
}

fn default_workers() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset manifest. Relative paths here and in `out` resolve against
    /// the config file's directory.
    pub manifest: PathBuf,
    /// Base network layers; defaults to the standard small CNN sized to the
    /// known classes.
    #[serde(default)]
    pub base_layers: Option<Vec<LayerSpec>>,
    #[serde(default = "default_taps")]
    pub taps: Vec<usize>,
    #[serde(default = "default_base_train")]
    pub base_train: PhaseConfig,
    #[serde(default = "default_pair_train")]
    pub pair_train: PhaseConfig,
    #[serde(default = "default_predictor_train")]
    pub predictor_train: PhaseConfig,
    /// 1-based index into `taps` at which verdicts are rendered.
    #[serde(default = "default_decision_depth")]
    pub decision_depth: usize,
    #[serde(default)]
    pub thresholds: Option<ThresholdOverride>,
    /// Classes excluded from predictor training and used for evaluation;
    /// defaults to the last measured class of each subset.
    #[serde(default)]
    pub heldout_classes: Option<Vec<ClassId>>,
    /// Classes predictors train on; defaults to every other measured class.
    #[serde(default)]
    pub predictor_classes: Option<Vec<ClassId>>,
    #[serde(default)]
    pub growth: GrowthSettings,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

/// Command-line values that take precedence over the file and environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    /// Reads `path`, applies `CNL_<FIELD>` variables from `env`, then
    /// `overrides`, and validates the result.
    pub fn load(
        path: &Path,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &Overrides,
    ) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        apply_env(&mut value, env)?;
        let mut cfg: ExperimentConfig = serde_json::from_value(value).context("invalid config")?;
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(w) = overrides.workers {
            cfg.workers = w;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.manifest.is_relative() {
            cfg.manifest = base.join(&cfg.manifest);
        }
        if cfg.out.is_relative() && overrides.out.is_none() {
            cfg.out = base.join(&cfg.out);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.manifest.is_file() {
            bail!("manifest {} not found", self.manifest.display());
        }
        if self.taps.is_empty() || self.taps.windows(2).any(|w| w[0] >= w[1]) {
            bail!("taps {:?} must be non-empty and increasing", self.taps);
        }
        if self.decision_depth == 0 || self.decision_depth > self.taps.len() {
            bail!(
                "decision_depth {} outside 1..={}",
                self.decision_depth,
                self.taps.len()
            );
        }
        if self.workers == 0 {
            bail!("workers must be >= 1");
        }
        if self.growth.consolidation_window == 0 {
            bail!("growth.consolidation_window must be >= 1");
        }
        for (name, p) in [
            ("base_train", self.base_train),
            ("pair_train", self.pair_train),
            ("predictor_train", self.predictor_train),
        ] {
            p.with_seed(0)
                .validate()
                .with_context(|| format!("{name} is invalid"))?;
        }
        Ok(())
    }

    pub fn base_train_config(&self) -> TrainConfig {
        self.base_train.with_seed(mix(&[self.seed, 1]))
    }

    /// Per-job seeds are derived from `master_seed` in the sweep.
    pub fn pair_train_config(&self) -> TrainConfig {
        self.pair_train.with_seed(0)
    }

    pub fn predictor_train_config(&self) -> TrainConfig {
        self.predictor_train.with_seed(mix(&[self.seed, 3]))
    }

    pub fn growth_config(&self) -> GrowthConfig {
        GrowthConfig {
            max_branches_per_node: self.growth.max_branches_per_node,
            consolidation_window: self.growth.consolidation_window,
            seed: mix(&[self.seed, 4]),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// `CNL_SEED=7` sets `seed`; values parse as JSON when possible, otherwise
/// they are taken as strings.
pub fn apply_env(
    value: &mut serde_json::Value,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<()> {
    let obj = value
        .as_object_mut()
        .context("config must be a JSON object")?;
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let field = key[ENV_PREFIX.len()..].to_ascii_lowercase();
        let parsed = serde_json::from_str(&raw).unwrap_or(serde_json::Value::String(raw));
        obj.insert(field, parsed);
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
