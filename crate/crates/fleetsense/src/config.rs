//! Experiment configuration: a TOML file with a strict schema (unknown
//! keys are hard errors) plus dotted-path `--set` overrides, hashed so
//! every artifact can state exactly which configuration produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::IqlConfig;
use crate::demand::DemandModel;
use crate::env::{EnvConfig, EnvError};
use crate::grid::{Bbox, Connectivity, GridMap};
use crate::mappo::TrainConfig;
use crate::sensing::{DistributionTag, PoiModel, RankModel, TaskSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    MissingFile(PathBuf),
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: {1}")]
    BadOverride(String, String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    GreedyOs,
    GreedyFt,
    Mab,
    Iql,
    Mappo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunerKind {
    #[default]
    Off,
    Ranktuner,
    Greedy,
    Thompson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSection {
    /// Expected orders per slot per grid.
    pub rate: f64,
    #[serde(default = "default_price_base")]
    pub price_base: f64,
    #[serde(default = "default_price_per_step")]
    pub price_per_step: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_price_base() -> f64 {
    2.0
}
fn default_price_per_step() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoiSection {
    pub distribution: DistributionTag,
    /// Expected PoI spawns per slot per task, spread over the grid.
    pub total_per_task: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub rows: usize,
    pub cols: usize,
    /// Eight-connected moves instead of four.
    #[serde(default)]
    pub diagonal: bool,
    #[serde(default)]
    pub bbox: Option<Bbox>,
    pub num_vehicles: usize,
    pub horizon: u64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "default_expiry")]
    pub expiry_slots: u64,
    #[serde(default = "default_one")]
    pub collect_rate: u64,
    #[serde(default = "default_one")]
    pub tau_base: u64,
    #[serde(default)]
    pub seed: u64,
    pub demand: DemandSection,
    pub pois: PoiSection,
    #[serde(default = "TaskSpec::defaults")]
    pub tasks: Vec<TaskSpec>,
}

fn default_expiry() -> u64 {
    15
}
fn default_one() -> u64 {
    1
}
fn default_eval_episodes() -> u64 {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    pub policy: PolicyKind,
    #[serde(default)]
    pub ranktuner: TunerKind,
    pub episodes: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: u64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub log_events: bool,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub iql: IqlConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
        if !path.exists() {
            return Err(ConfigError::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for raw in overrides {
            apply_override(&mut value, raw)?;
        }
        let config: ExperimentConfig =
            value.try_into().map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must be non-empty".into()));
        }
        if self.episodes == 0 {
            return Err(ConfigError::Invalid("episodes must be positive".into()));
        }
        self.build_env_config(self.env.pois.distribution)?.validate()?;
        Ok(())
    }

    /// Instantiate the simulator configuration, optionally swapping the
    /// PoI distribution (the sweep iterates over all three tags).
    pub fn build_env_config(&self, tag: DistributionTag) -> Result<EnvConfig, ConfigError> {
        let e = &self.env;
        let connectivity = if e.diagonal { Connectivity::Moore8 } else { Connectivity::VonNeumann4 };
        let mut map = GridMap::new(e.rows, e.cols, connectivity);
        map.bbox = e.bbox.clone();
        let mut demand = DemandModel::uniform(&map, e.demand.rate, e.demand.seed);
        demand.price_base = e.demand.price_base;
        demand.price_per_step = e.demand.price_per_step;
        let pois = PoiModel::from_tag(
            tag,
            &demand.rate,
            e.tasks.len(),
            e.pois.total_per_task,
            e.pois.seed,
        );
        Ok(EnvConfig {
            map,
            num_vehicles: e.num_vehicles,
            horizon: e.horizon,
            alpha: e.alpha,
            beta: e.beta,
            expiry_slots: e.expiry_slots,
            collect_rate: e.collect_rate,
            tau_base: e.tau_base,
            demand,
            pois,
            tasks: e.tasks.clone(),
            rank_model: RankModel::default(),
            seed: e.seed,
        })
    }

    /// Stable hash of the fully-resolved configuration, embedded in every
    /// output header so artifacts are traceable.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).unwrap_or_default();
        let digest = Sha256::digest(canonical.as_bytes());
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        hex
    }
}

/// Apply one `key.path=value` override onto the raw TOML tree. The value
/// side is parsed as TOML, so strings need quotes only when ambiguous.
fn apply_override(root: &mut toml::Value, raw: &str) -> Result<(), ConfigError> {
    let (path, value_text) = raw
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(raw.into(), "expected key=value".into()))?;
    let parsed: toml::Value = toml::from_str(&format!("v = {value_text}"))
        .or_else(|_| toml::from_str(&format!("v = \"{value_text}\"")))
        .map_err(|e| ConfigError::BadOverride(raw.into(), e.to_string()))?;
    let parsed = parsed.get("v").cloned().unwrap();
    let mut cursor = root;
    let segments: Vec<&str> = path.trim().split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(raw.into(), format!("{seg} is not a table")))?;
        if i + 1 == segments.len() {
            table.insert(seg.to_string(), parsed);
            return Ok(());
        }
        cursor = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("split never yields zero segments")
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
policy = "random"
episodes = 2
seeds = [0, 1]
output_dir = "out"

[env]
rows = 4
cols = 4
num_vehicles = 10
horizon = 200
alpha = 0.5
beta = 0.5

[env.demand]
rate = 0.3

[env.pois]
distribution = "divergent"
total_per_task = 1.0
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let c = ExperimentConfig::from_toml(BASE, &[]).unwrap();
        assert_eq!(c.env.expiry_slots, 15);
        assert_eq!(c.eval_episodes, 20);
        assert_eq!(c.env.tasks.len(), 2);
        assert_eq!(c.ranktuner, TunerKind::Off);
        let env = c.build_env_config(DistributionTag::Aligned).unwrap();
        assert_eq!(env.map.num_grids(), 16);
        assert_eq!(env.pois.rate.len(), 2);
    }

    #[test]
    fn unknown_key_is_error() {
        let bad = format!("{BASE}\nunknown_field = 1\n");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad, &[]),
            Err(ConfigError::Parse(_))
        ));
        let bad_nested = BASE.replace("rate = 0.3", "rate = 0.3\ntypo_key = 2");
        assert!(ExperimentConfig::from_toml(&bad_nested, &[]).is_err());
    }

    #[test]
    fn overrides_apply_dotted_paths() {
        let c = ExperimentConfig::from_toml(
            BASE,
            &[
                "env.num_vehicles=20".into(),
                "env.demand.rate=0.5".into(),
                "policy=greedy_os".into(),
                "env.pois.distribution=uniform".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.env.num_vehicles, 20);
        assert_eq!(c.env.demand.rate, 0.5);
        assert_eq!(c.policy, PolicyKind::GreedyOs);
        assert_eq!(c.env.pois.distribution, DistributionTag::Uniform);
    }

    #[test]
    fn bad_override_reports() {
        assert!(matches!(
            ExperimentConfig::from_toml(BASE, &["no_equals_sign".into()]),
            Err(ConfigError::BadOverride(..))
        ));
    }

    #[test]
    fn zero_episodes_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml(BASE, &["episodes=0".into()]),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn empty_seeds_rejected() {
        assert!(ExperimentConfig::from_toml(BASE, &["seeds=[]".into()]).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_toml(BASE, &[]).unwrap();
        let b = ExperimentConfig::from_toml(BASE, &[]).unwrap();
        let c = ExperimentConfig::from_toml(BASE, &["env.alpha=0.7".into()]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
