//! Experiment orchestration: run policies for episodes, tune the adapter
//! rank between episodes, and emit traceable CSV artifacts.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::baselines::{iql_train, BaselineError, FleetController, IqlAgent, UcbState};
use crate::config::{ConfigError, ExperimentConfig, PolicyKind, TunerKind};
use crate::demand::{ingest_csv, write_order_cache, DemandError};
use crate::env::{action_space, Env, EnvError, Metrics};
use crate::grid::{Bbox, Connectivity, GridMap};
use crate::mappo::{self, PolicyModel, TrainError};
use crate::nn::{seeded_rng, NnError, ParamStore};
use crate::ranktuner::{ThompsonState, TunerState};
use crate::sensing::DistributionTag;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// One finished episode as it appears in the metrics CSV.
#[derive(Debug, Clone)]
pub struct EpisodeRow {
    pub episode: u64,
    pub metrics: Metrics,
    pub rank: u32,
    pub wall_ms: u64,
}

/// Metrics CSV bytes: two header comments (config hash + seed, then run
/// labels), a column header, one row per episode. Everything except
/// wall_ms is a pure function of (config, seed).
pub fn metrics_csv(
    config_hash: &str,
    seed: u64,
    policy: &str,
    distribution: &str,
    alpha: f64,
    beta: f64,
    rows: &[EpisodeRow],
) -> String {
    let mut out = String::new();
    out.push_str(&format!("# config_hash={config_hash} seed={seed}\n"));
    out.push_str(&format!("# policy={policy} distribution={distribution}\n"));
    out.push_str(
        "episode,slot_count,adi,adu,qos,avg_aoi,orders_served,orders_expired,\
         pois_collected,pois_expired,conflicts,rank,wall_ms\n",
    );
    for r in rows {
        let m = &r.metrics;
        let avg_aoi = m.avg_aoi().map(|a| format!("{a:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{},{},{},{},{},{},{},{}\n",
            r.episode,
            m.slots,
            m.adi,
            m.adu,
            m.qos(alpha, beta),
            avg_aoi,
            m.orders_served,
            m.orders_expired,
            m.pois_collected,
            m.pois_expired,
            m.conflicts,
            r.rank,
            r.wall_ms,
        ));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

/// Between-episode rank adjustment strategy.
pub enum RankTuning {
    Off,
    Hill(TunerState),
    Greedy(TunerState),
    Thompson(ThompsonState, rand_chacha::ChaCha8Rng),
}

impl RankTuning {
    pub fn from_kind(kind: TunerKind, rank0: u32, rank_min: u32, rank_max: u32, seed: u64) -> Self {
        match kind {
            TunerKind::Off => RankTuning::Off,
            TunerKind::Ranktuner => {
                RankTuning::Hill(TunerState::new(rank0, 1, rank_min, rank_max))
            }
            TunerKind::Greedy => RankTuning::Greedy(TunerState::new(rank0, 1, rank_min, rank_max)),
            TunerKind::Thompson => RankTuning::Thompson(
                ThompsonState::new(rank_min, rank_max),
                seeded_rng(seed ^ 0x7507),
            ),
        }
    }

    /// Digest the episode's ADU and return the rank for the next episode.
    pub fn next_rank(&mut self, current: u32, adu: f64) -> u32 {
        match self {
            RankTuning::Off => current,
            RankTuning::Hill(state) => {
                state.ranktuner_step(adu);
                state.rank
            }
            RankTuning::Greedy(state) => {
                state.greedy_rank_step(adu);
                state.rank
            }
            RankTuning::Thompson(state, rng) => state.step(current, adu, rng),
        }
    }

    pub fn history_csv(&self) -> Option<String> {
        match self {
            RankTuning::Hill(s) | RankTuning::Greedy(s) => Some(s.history_csv()),
            _ => None,
        }
    }
}

fn make_controller(
    config: &ExperimentConfig,
    env: &Env,
    seed: u64,
) -> Result<FleetController, HarnessError> {
    Ok(match config.policy {
        PolicyKind::Random => FleetController::Random,
        PolicyKind::GreedyOs => FleetController::GreedyOs,
        PolicyKind::GreedyFt => FleetController::GreedyFt,
        PolicyKind::Mab => FleetController::Ucb(UcbState::new(action_space(&env.config.map))),
        PolicyKind::Iql | PolicyKind::Mappo => {
            return Err(HarnessError::Invalid(format!(
                "policy {:?} requires `train`/`evaluate`, not `simulate` (seed {seed})",
                config.policy
            )))
        }
    })
}

/// Run a rule-based or bandit policy for `episodes` episodes under one
/// seed and distribution tag, tuning the rank between episodes.
pub fn run_simulate(
    config: &ExperimentConfig,
    tag: DistributionTag,
    seed: u64,
) -> Result<(Vec<EpisodeRow>, RankTuning), HarnessError> {
    let mut env_config = config.build_env_config(tag)?;
    env_config.seed = seed;
    let mut env = Env::new(env_config)?;
    if config.log_events {
        env.enable_event_log();
    }
    let (rank_min, rank_max) =
        (env.config.rank_model.rank_min(), env.config.rank_model.rank_max());
    let mut tuning = RankTuning::from_kind(config.ranktuner, env.rank, rank_min, rank_max, seed);
    let mut controller = make_controller(config, &env, seed)?;
    let mut rng = seeded_rng(seed ^ 0xf1ee7);
    let mut rows = Vec::new();
    let mut rank = env.rank;
    for episode in 0..config.episodes {
        let start = Instant::now();
        env.set_rank(rank)?;
        let metrics = crate::baselines::run_episode(
            &mut env,
            &mut controller,
            seed.wrapping_add(episode.wrapping_mul(0x9e37)),
            &mut rng,
        )?;
        rank = tuning.next_rank(rank, metrics.adu);
        rows.push(EpisodeRow {
            episode,
            metrics,
            rank: env.rank,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok((rows, tuning))
}

pub struct TrainArtifacts {
    pub rows: Vec<EpisodeRow>,
    pub diagnostics_csv: String,
    pub rank_history_csv: Option<String>,
    pub store: ParamStore,
}

/// Train the configured learner (actor-critic or Q-learning) on one seed.
pub fn run_training(
    config: &ExperimentConfig,
    tag: DistributionTag,
    seed: u64,
) -> Result<TrainArtifacts, HarnessError> {
    let mut env_config = config.build_env_config(tag)?;
    env_config.seed = seed;
    let mut env = Env::new(env_config)?;
    let (rank_min, rank_max) =
        (env.config.rank_model.rank_min(), env.config.rank_model.rank_max());
    let mut tuning = RankTuning::from_kind(config.ranktuner, env.rank, rank_min, rank_max, seed);

    match config.policy {
        PolicyKind::Mappo => {
            let mut train = config.train.clone();
            train.episodes = config.episodes;
            train.seed = seed;
            let mut rows = Vec::new();
            let mut diagnostics =
                String::from("episode,policy_loss,value_loss,entropy,mean_ratio,approx_kl\n");
            let mut last = Instant::now();
            let model = mappo::train(&mut env, &train, |episode, env, diag| {
                diagnostics.push_str(&format!(
                    "{episode},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    diag.policy_loss, diag.value_loss, diag.entropy, diag.mean_ratio, diag.approx_kl
                ));
                let rank = tuning.next_rank(env.rank, env.metrics.adu);
                let _ = env.set_rank(rank);
                rows.push(EpisodeRow {
                    episode,
                    metrics: env.metrics.clone(),
                    rank: env.rank,
                    wall_ms: last.elapsed().as_millis() as u64,
                });
                last = Instant::now();
            })?;
            Ok(TrainArtifacts {
                rows,
                diagnostics_csv: diagnostics,
                rank_history_csv: tuning.history_csv(),
                store: model.store,
            })
        }
        PolicyKind::Iql => {
            let mut iql = config.iql.clone();
            iql.episodes = config.episodes;
            iql.seed = seed;
            let agent = iql_train(&mut env, iql)?;
            Ok(TrainArtifacts {
                rows: Vec::new(),
                diagnostics_csv: String::from("episode\n"),
                rank_history_csv: tuning.history_csv(),
                store: agent.store,
            })
        }
        other => Err(HarnessError::Invalid(format!("policy {other:?} is not trainable"))),
    }
}

/// Evaluate a trained parameter store greedily for `eval_episodes`.
pub fn run_evaluate(
    config: &ExperimentConfig,
    tag: DistributionTag,
    seed: u64,
    store: ParamStore,
) -> Result<Vec<EpisodeRow>, HarnessError> {
    let mut env_config = config.build_env_config(tag)?;
    env_config.seed = seed;
    let mut env = Env::new(env_config)?;
    let rows: Vec<EpisodeRow> = match config.policy {
        PolicyKind::Mappo => {
            let model = PolicyModel::from_store(&env.config, &config.train, store);
            let all = mappo::evaluate(&mut env, &model, config.eval_episodes, seed ^ 0xe7a1)?;
            all.into_iter()
                .enumerate()
                .map(|(i, metrics)| EpisodeRow {
                    episode: i as u64,
                    rank: env.rank,
                    metrics,
                    wall_ms: 0,
                })
                .collect()
        }
        PolicyKind::Iql => {
            let mut agent = IqlAgent::new(action_space(&env.config.map), config.iql.clone());
            agent.store = store;
            let mut controller = FleetController::Iql(agent, 0.0);
            let mut rng = seeded_rng(seed ^ 0xe7a1);
            let mut rows = Vec::new();
            for e in 0..config.eval_episodes {
                let metrics = crate::baselines::run_episode(
                    &mut env,
                    &mut controller,
                    (seed ^ 0xe7a1).wrapping_add(e),
                    &mut rng,
                )?;
                rows.push(EpisodeRow { episode: e, metrics, rank: env.rank, wall_ms: 0 });
            }
            rows
        }
        other => return Err(HarnessError::Invalid(format!("policy {other:?} has no checkpoint"))),
    };
    Ok(rows)
}

/// Convert raw trip records into the order cache, returning the cache
/// path and a one-line drop report.
pub fn run_ingest(
    csv_path: &Path,
    bbox: Bbox,
    rows: usize,
    cols: usize,
    slot_seconds: u64,
    expiry_slots: u64,
    out_dir: &Path,
) -> Result<(PathBuf, String), HarnessError> {
    let mut map = GridMap::new(rows, cols, Connectivity::VonNeumann4);
    map.bbox = Some(bbox);
    let result = ingest_csv(csv_path, &map, slot_seconds, expiry_slots)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let cache = out_dir.join("orders.jsonl");
    write_order_cache(&cache, &result.orders).map_err(io_err(&cache))?;
    let report = format!(
        "ingested={} dropped={} cache={}\n",
        result.orders.len(),
        result.dropped,
        cache.display()
    );
    Ok((cache, report))
}

/// Label used in artifact paths and headers for a policy.
pub fn policy_label(kind: PolicyKind) -> &'static str {
    match kind {
        PolicyKind::Random => "random",
        PolicyKind::GreedyOs => "greedy_os",
        PolicyKind::GreedyFt => "greedy_ft",
        PolicyKind::Mab => "mab",
        PolicyKind::Iql => "iql",
        PolicyKind::Mappo => "mappo",
    }
}

/// Cross-product of configured seeds and the three distribution tags;
/// each combination writes `<out>/<distribution>/seed<k>/metrics.csv`.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    let hash = config.hash();
    let mut written = Vec::new();
    for tag in DistributionTag::all() {
        for &seed in &config.seeds {
            let (rows, _) = run_simulate(config, tag, seed)?;
            let csv = metrics_csv(
                &hash,
                seed,
                policy_label(config.policy),
                tag.as_str(),
                config.env.alpha,
                config.env.beta,
                &rows,
            );
            let path = config
                .output_dir
                .join(tag.as_str())
                .join(format!("seed{seed}"))
                .join("metrics.csv");
            write_text(&path, &csv)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn small_config(policy: &str) -> ExperimentConfig {
        let text = format!(
            r#"
policy = "{policy}"
episodes = 2
eval_episodes = 2
seeds = [0]
output_dir = "unused"

[env]
rows = 3
cols = 3
num_vehicles = 4
horizon = 40
alpha = 0.5
beta = 0.5

[env.demand]
rate = 0.3

[env.pois]
distribution = "divergent"
total_per_task = 1.0
"#
        );
        ExperimentConfig::from_toml(&text, &[]).unwrap()
    }

    #[test]
    fn simulate_rows_and_qos_consistency() {
        let config = small_config("random");
        let (rows, _) = run_simulate(&config, DistributionTag::Divergent, 7).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert_eq!(r.metrics.slots, 40);
        }
    }

    #[test]
    fn simulate_is_deterministic_modulo_wall_time() {
        let config = small_config("greedy_os");
        let key = |rows: &[EpisodeRow]| {
            rows.iter()
                .map(|r| (r.metrics.adi.to_bits(), r.metrics.adu.to_bits(), r.rank))
                .collect::<Vec<_>>()
        };
        let (a, _) = run_simulate(&config, DistributionTag::Aligned, 3).unwrap();
        let (b, _) = run_simulate(&config, DistributionTag::Aligned, 3).unwrap();
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn simulate_rejects_trainable_policies() {
        let config = small_config("mappo");
        assert!(matches!(
            run_simulate(&config, DistributionTag::Uniform, 0),
            Err(HarnessError::Invalid(_))
        ));
    }

    #[test]
    fn ranktuner_updates_rank_between_episodes() {
        let mut config = small_config("random");
        config.ranktuner = TunerKind::Ranktuner;
        config.episodes = 6;
        let (rows, tuning) = run_simulate(&config, DistributionTag::Divergent, 1).unwrap();
        let ranks: Vec<u32> = rows.iter().map(|r| r.rank).collect();
        assert!(ranks.windows(2).any(|w| w[0] != w[1]), "rank never moved: {ranks:?}");
        assert!(tuning.history_csv().unwrap().lines().count() > 1);
    }

    #[test]
    fn sweep_writes_expected_tree() {
        let tmp = tempfile::tempdir().unwrap();
        let mut config = small_config("random");
        config.output_dir = tmp.path().to_path_buf();
        config.seeds = vec![0, 1];
        let written = run_sweep(&config).unwrap();
        assert_eq!(written.len(), 6);
        for path in &written {
            let text = std::fs::read_to_string(path).unwrap();
            assert!(text.starts_with("# config_hash="));
            assert_eq!(text.lines().count(), 2 + 1 + 2);
        }
        assert!(tmp.path().join("aligned/seed1/metrics.csv").exists());
    }

    #[test]
    fn metrics_csv_header_and_shape() {
        let rows = vec![EpisodeRow {
            episode: 0,
            metrics: Metrics { slots: 10, adi: 5.0, adu: 2.0, ..Metrics::default() },
            rank: 3,
            wall_ms: 12,
        }];
        let text = metrics_csv("abcd", 9, "random", "uniform", 0.5, 0.5, &rows);
        assert!(text.contains("# config_hash=abcd seed=9"));
        assert!(text.contains("# policy=random distribution=uniform"));
        let data_line = text.lines().nth(3).unwrap();
        assert!(data_line.starts_with("0,10,5.000000,2.000000,"));
    }

    #[test]
    fn evaluate_requires_checkpointable_policy() {
        let config = small_config("random");
        assert!(run_evaluate(&config, DistributionTag::Uniform, 0, ParamStore::new()).is_err());
    }
}
