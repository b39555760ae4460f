//! Shared-parameter actor-critic over R-GCN embeddings with PPO clipping,
//! GAE, advantage normalization, value clipping, and action masking.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{action_space, Action, Env, EnvConfig, EnvError};
use crate::graph::{build_graph, FeatureBounds, Rgcn, RgcnConfig, TopologyGraph};
use crate::nn::{seeded_rng, stage_params, Forward, Mlp, NnError, ParamStore, Tape, TensorId};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("empty trajectory buffer")]
    EmptyBuffer,
    #[error("evaluation needs at least one episode")]
    NoEpisodes,
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub value_clip: f64,
    pub lr: f64,
    pub epochs_per_batch: usize,
    pub episodes: u64,
    pub entropy_coef: f64,
    pub mlp_hidden: usize,
    pub rgcn: RgcnConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            value_clip: 0.2,
            lr: 3e-4,
            epochs_per_batch: 4,
            episodes: 200,
            entropy_coef: 0.01,
            mlp_hidden: 64,
            rgcn: RgcnConfig::default(),
            seed: 0,
        }
    }
}

/// Actor-critic with a single shared parameter vector: one R-GCN encoder,
/// one actor head, one critic head, used by every agent.
pub struct PolicyModel {
    pub store: ParamStore,
    pub rgcn: Rgcn,
    pub actor: Mlp,
    pub critic: Mlp,
    pub action_dim: usize,
    names: Vec<String>,
}

impl PolicyModel {
    pub fn new(env_config: &EnvConfig, train: &TrainConfig) -> PolicyModel {
        let mut rng = seeded_rng(train.seed ^ 0x9e3779b97f4a7c15);
        let mut store = ParamStore::new();
        let dims = Rgcn::input_dims(
            env_config.map.num_grids(),
            env_config.num_vehicles,
            env_config.tasks.len(),
        );
        let rgcn = Rgcn::declare(&mut store, train.rgcn, dims, &mut rng);
        let action_dim = action_space(&env_config.map);
        let actor =
            Mlp::declare(&mut store, "actor", train.rgcn.output, train.mlp_hidden, action_dim, &mut rng);
        let critic = Mlp::declare(&mut store, "critic", train.rgcn.output, train.mlp_hidden, 1, &mut rng);
        let mut names = rgcn.param_names();
        names.extend(actor.param_names());
        names.extend(critic.param_names());
        PolicyModel { store, rgcn, actor, critic, action_dim, names }
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Rebuild a model around a loaded parameter store.
    pub fn from_store(env_config: &EnvConfig, train: &TrainConfig, store: ParamStore) -> PolicyModel {
        let mut model = PolicyModel::new(env_config, train);
        model.store = store;
        model
    }

    /// Forward pass for one graph snapshot: per-agent logits and values for
    /// the listed agents.
    fn heads(
        &self,
        tape: &mut Tape,
        leaves: &HashMap<String, TensorId>,
        graph: &TopologyGraph,
        agents: &[usize],
    ) -> (TensorId, TensorId) {
        let embeddings = self.rgcn.forward(tape, leaves, graph);
        let rows = tape.gather_rows(embeddings, agents);
        let logits = self.actor.forward(tape, leaves, rows);
        let values = self.critic.forward(tape, leaves, rows);
        (logits, values)
    }

    /// Per-agent action distribution at the current env state. Returns
    /// (log-prob matrix row per agent, value estimates).
    pub fn policy_at(
        &self,
        env: &Env,
        bounds: &FeatureBounds,
        agents: &[usize],
        masks: &[bool],
    ) -> (Vec<f64>, Vec<f64>) {
        let graph = build_graph(env, bounds);
        let mut tape = Tape::new();
        let (leaves, _) = stage_params(&self.store, &mut tape, &self.names);
        let (logits, values) = self.heads(&mut tape, &leaves, &graph, agents);
        let logp = tape.masked_log_softmax(logits, masks);
        (tape.value(logp).to_vec(), tape.value(values).to_vec())
    }
}

/// One recorded decision of one agent.
#[derive(Debug, Clone)]
pub struct AgentRecord {
    pub agent: usize,
    pub action_index: usize,
    pub mask: Vec<bool>,
    pub logp_old: f64,
    pub value_old: f64,
    pub reward: f64,
}

/// One slot of experience: the graph snapshot plus the records of every
/// agent that was available (busy agents contribute nothing).
#[derive(Debug, Clone)]
pub struct SlotRecord {
    pub graph: TopologyGraph,
    pub agents: Vec<AgentRecord>,
    /// True when this slot ended its episode (bootstrap value 0 past it).
    pub terminal: bool,
}

#[derive(Debug, Default)]
pub struct TrajectoryBuffer {
    pub slots: Vec<SlotRecord>,
}

impl TrajectoryBuffer {
    pub fn num_records(&self) -> usize {
        self.slots.iter().map(|s| s.agents.len()).sum()
    }
}

fn sample_from_logp(logp: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_legal = 0;
    for (i, &lp) in logp.iter().enumerate() {
        if lp.is_finite() {
            last_legal = i;
            acc += lp.exp();
            if u < acc {
                return i;
            }
        }
    }
    last_legal
}

fn argmax_logp(logp: &[f64]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, &lp) in logp.iter().enumerate() {
        if lp > best.0 {
            best = (lp, i);
        }
    }
    best.1
}

/// Run the policy for `slots` environment steps, resetting the env at
/// episode boundaries, and record transitions for every available agent.
pub fn collect_rollout(
    env: &mut Env,
    model: &PolicyModel,
    bounds: &FeatureBounds,
    slots: u64,
    rng: &mut impl Rng,
    episode_seed: &mut u64,
) -> Result<TrajectoryBuffer, TrainError> {
    let mut buffer = TrajectoryBuffer::default();
    for _ in 0..slots {
        if env.done() {
            *episode_seed += 1;
            env.reset(*episode_seed)?;
        }
        let graph = build_graph(env, bounds);
        let agents = env.available_agents();
        let mut actions: Vec<Option<Action>> = vec![None; env.config.num_vehicles];
        let mut records = Vec::new();
        if !agents.is_empty() {
            let mut masks = Vec::with_capacity(agents.len() * model.action_dim);
            for &a in &agents {
                masks.extend(env.legal_mask(a)?);
            }
            let mut tape = Tape::new();
            let (leaves, _) = stage_params(&model.store, &mut tape, &model.names);
            let (logits, values) = model.heads(&mut tape, &leaves, &graph, &agents);
            let logp_id = tape.masked_log_softmax(logits, &masks);
            let logp = tape.value(logp_id);
            let values = tape.value(values).to_vec();
            let a_dim = model.action_dim;
            for (row, &agent) in agents.iter().enumerate() {
                let row_logp = &logp[row * a_dim..(row + 1) * a_dim];
                let action_index = sample_from_logp(row_logp, rng);
                actions[agent] = Some(env.action_from_index(agent, action_index));
                records.push(AgentRecord {
                    agent,
                    action_index,
                    mask: masks[row * a_dim..(row + 1) * a_dim].to_vec(),
                    logp_old: row_logp[action_index],
                    value_old: values[row],
                    reward: 0.0,
                });
            }
        }
        let outcome = env.step(&actions)?;
        for r in &mut records {
            r.reward = outcome.rewards[r.agent];
        }
        buffer.slots.push(SlotRecord { graph, agents: records, terminal: env.done() });
    }
    Ok(buffer)
}

/// Advantages and returns per record, flattened in slot-then-agent order.
/// GAE runs along each agent's stream of decisions; advantages are then
/// normalized to mean 0, std 1 over the whole batch.
pub fn compute_gae(
    buffer: &TrajectoryBuffer,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let total = buffer.num_records();
    if total == 0 {
        return Err(TrainError::EmptyBuffer);
    }
    // flat index of each record, grouped into per-agent streams per episode
    let mut advantages = vec![0.0; total];
    let mut returns = vec![0.0; total];
    let mut streams: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut flat = 0;
    let mut episode_streams: Vec<HashMap<usize, Vec<usize>>> = Vec::new();
    for slot in &buffer.slots {
        for rec in &slot.agents {
            streams.entry(rec.agent).or_default().push(flat);
            flat += 1;
        }
        if slot.terminal {
            episode_streams.push(std::mem::take(&mut streams));
        }
    }
    if !streams.is_empty() {
        episode_streams.push(streams);
    }
    let recs: Vec<&AgentRecord> = buffer.slots.iter().flat_map(|s| s.agents.iter()).collect();
    for ep in &episode_streams {
        for stream in ep.values() {
            let mut next_adv = 0.0;
            let mut next_value = 0.0;
            for &idx in stream.iter().rev() {
                let r = recs[idx];
                let delta = r.reward + gamma * next_value - r.value_old;
                let adv = delta + gamma * lambda * next_adv;
                advantages[idx] = adv;
                returns[idx] = adv + r.value_old;
                next_adv = adv;
                next_value = r.value_old;
            }
        }
    }
    let mean = advantages.iter().sum::<f64>() / total as f64;
    let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / total as f64;
    let std = var.sqrt().max(1e-8);
    for a in &mut advantages {
        *a = (*a - mean) / std;
    }
    Ok((advantages, returns))
}

#[derive(Debug, Clone, Serialize)]
pub struct UpdateDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub approx_kl: f64,
    pub total_loss: f64,
}

/// Re-run the forward pass over every stored graph with the current
/// parameters, producing the per-record heads needed by the PPO loss.
fn replay_forward(
    model: &PolicyModel,
    tape: &mut Tape,
    leaves: &HashMap<String, TensorId>,
    buffer: &TrajectoryBuffer,
) -> (TensorId, TensorId, TensorId) {
    let mut logp_parts = Vec::new();
    let mut value_parts = Vec::new();
    let mut entropy_parts = Vec::new();
    for slot in &buffer.slots {
        if slot.agents.is_empty() {
            continue;
        }
        let agents: Vec<usize> = slot.agents.iter().map(|r| r.agent).collect();
        let masks: Vec<bool> = slot.agents.iter().flat_map(|r| r.mask.iter().copied()).collect();
        let actions: Vec<usize> = slot.agents.iter().map(|r| r.action_index).collect();
        let (logits, values) = model.heads(tape, leaves, &slot.graph, &agents);
        let logp = tape.masked_log_softmax(logits, &masks);
        logp_parts.push(tape.gather_cols(logp, &actions));
        value_parts.push(values);
        entropy_parts.push(tape.masked_entropy(logits, &masks));
    }
    (
        tape.concat_rows(&logp_parts),
        tape.concat_rows(&value_parts),
        tape.concat_rows(&entropy_parts),
    )
}

fn ppo_loss(
    model: &PolicyModel,
    tape: &mut Tape,
    leaves: &HashMap<String, TensorId>,
    buffer: &TrajectoryBuffer,
    advantages: &[f64],
    returns: &[f64],
    config: &TrainConfig,
) -> (TensorId, UpdateDiagnostics) {
    let n = buffer.num_records();
    let (logp_new, v_new, entropy) = replay_forward(model, tape, leaves, buffer);
    let logp_old_values: Vec<f64> =
        buffer.slots.iter().flat_map(|s| s.agents.iter().map(|r| r.logp_old)).collect();
    let v_old_values: Vec<f64> =
        buffer.slots.iter().flat_map(|s| s.agents.iter().map(|r| r.value_old)).collect();
    let logp_old = tape.leaf(n, 1, logp_old_values.clone());
    let v_old = tape.leaf(n, 1, v_old_values);
    let adv = tape.leaf(n, 1, advantages.to_vec());
    let ret = tape.leaf(n, 1, returns.to_vec());

    let diff = tape.sub(logp_new, logp_old);
    let ratio = tape.exp(diff);
    let surr1 = tape.mul_elem(ratio, adv);
    let clipped = tape.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip);
    let surr2 = tape.mul_elem(clipped, adv);
    let surr = tape.minimum(surr1, surr2);
    let mean_surr = tape.mean_all(surr);
    let policy_loss = tape.scale(mean_surr, -1.0);

    let verr = tape.sub(v_new, ret);
    let unclipped = tape.mul_elem(verr, verr);
    let vdiff = tape.sub(v_new, v_old);
    let vdiff_clipped = tape.clamp(vdiff, -config.value_clip, config.value_clip);
    let v_proj = tape.add(v_old, vdiff_clipped);
    let verr2 = tape.sub(v_proj, ret);
    let clipped_sq = tape.mul_elem(verr2, verr2);
    let worst = tape.maximum(unclipped, clipped_sq);
    let value_loss = tape.mean_all(worst);

    let mean_entropy = tape.mean_all(entropy);

    let half_value = tape.scale(value_loss, 0.5);
    let ent_term = tape.scale(mean_entropy, -config.entropy_coef);
    let pv = tape.add(policy_loss, half_value);
    let total = tape.add(pv, ent_term);

    let ratio_vals = tape.value(ratio);
    let mean_ratio = ratio_vals.iter().sum::<f64>() / n as f64;
    let approx_kl = tape
        .value(logp_new)
        .iter()
        .zip(&logp_old_values)
        .map(|(new, old)| old - new)
        .sum::<f64>()
        / n as f64;
    let diag = UpdateDiagnostics {
        policy_loss: tape.scalar_value(policy_loss),
        value_loss: tape.scalar_value(value_loss),
        entropy: tape.scalar_value(mean_entropy),
        mean_ratio,
        approx_kl,
        total_loss: tape.scalar_value(total),
    };
    (total, diag)
}

/// One PPO update: `epochs_per_batch` passes over the buffer, one Adam
/// step per pass. Returns the diagnostics of the last epoch.
pub fn ppo_update(
    model: &mut PolicyModel,
    buffer: &TrajectoryBuffer,
    advantages: &[f64],
    returns: &[f64],
    config: &TrainConfig,
) -> Result<UpdateDiagnostics, TrainError> {
    let mut last = None;
    for _ in 0..config.epochs_per_batch {
        let mut tape = Tape::new();
        let (leaves, leaf_list) = stage_params(&model.store, &mut tape, &model.names);
        let (total, diag) =
            ppo_loss(model, &mut tape, &leaves, buffer, advantages, returns, config);
        if !diag.total_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(format!("{diag:?}")));
        }
        tape.backward(total);
        model.store.adam_step(&tape, &leaf_list, config.lr)?;
        last = Some(diag);
    }
    last.ok_or(TrainError::EmptyBuffer)
}

/// Build a PPO loss over a fixed buffer for gradient checking and loss
/// tracking; exposed for the validation harness.
pub fn ppo_forward(
    model: &PolicyModel,
    buffer: &TrajectoryBuffer,
    advantages: &[f64],
    returns: &[f64],
    config: &TrainConfig,
) -> Forward {
    let mut tape = Tape::new();
    let (leaves, leaf_list) = stage_params(&model.store, &mut tape, &model.names);
    let (total, _) = ppo_loss(model, &mut tape, &leaves, buffer, advantages, returns, config);
    Forward { tape, loss: total, leaves: leaf_list }
}

/// Train for `config.episodes` episodes, one update per episode (the
/// on-policy buffer is discarded after its epochs). `on_episode` sees the
/// episode index and the environment after the episode finished, and may
/// mutate it (rank tuning happens there).
pub fn train(
    env: &mut Env,
    config: &TrainConfig,
    mut on_episode: impl FnMut(u64, &mut Env, &UpdateDiagnostics),
) -> Result<PolicyModel, TrainError> {
    let mut model = PolicyModel::new(&env.config, config);
    let bounds = FeatureBounds::from_env(env);
    let mut rng = seeded_rng(config.seed);
    let mut episode_seed = env.config.seed;
    env.reset(episode_seed)?;
    for episode in 0..config.episodes {
        let horizon = env.config.horizon;
        let buffer =
            collect_rollout(env, &model, &bounds, horizon, &mut rng, &mut episode_seed)?;
        let (advantages, returns) = compute_gae(&buffer, config.gamma, config.gae_lambda)?;
        let diag = ppo_update(&mut model, &buffer, &advantages, &returns, config)?;
        on_episode(episode, env, &diag);
    }
    Ok(model)
}

/// Greedy evaluation: argmax over the masked policy for `episodes`
/// episodes using seeds disjoint from training streams.
pub fn evaluate(
    env: &mut Env,
    model: &PolicyModel,
    episodes: u64,
    eval_seed: u64,
) -> Result<Vec<crate::env::Metrics>, TrainError> {
    if episodes == 0 {
        return Err(TrainError::NoEpisodes);
    }
    let bounds = FeatureBounds::from_env(env);
    let mut out = Vec::new();
    for e in 0..episodes {
        env.reset(eval_seed ^ (0xe7a1_0000 + e))?;
        while !env.done() {
            let agents = env.available_agents();
            let mut actions: Vec<Option<Action>> = vec![None; env.config.num_vehicles];
            if !agents.is_empty() {
                let mut masks = Vec::with_capacity(agents.len() * model.action_dim);
                for &a in &agents {
                    masks.extend(env.legal_mask(a)?);
                }
                let (logp, _) = model.policy_at(env, &bounds, &agents, &masks);
                for (row, &agent) in agents.iter().enumerate() {
                    let idx =
                        argmax_logp(&logp[row * model.action_dim..(row + 1) * model.action_dim]);
                    actions[agent] = Some(env.action_from_index(agent, idx));
                }
            }
            env.step(&actions)?;
        }
        out.push(env.metrics.clone());
    }
    Ok(out)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::demand::DemandModel;
    use crate::grid::{Connectivity, GridMap};
    use crate::sensing::{DistributionTag, PoiModel, RankModel, TaskSpec};

    pub(crate) fn tiny_env(seed: u64) -> Env {
        let map = GridMap::new(2, 2, Connectivity::VonNeumann4);
        let demand = DemandModel::uniform(&map, 0.3, 5);
        let pois = PoiModel::new(vec![vec![0.2; 4]; 2], DistributionTag::Uniform, 6);
        Env::new(EnvConfig {
            map,
            num_vehicles: 2,
            horizon: 30,
            alpha: 0.5,
            beta: 0.5,
            expiry_slots: 15,
            collect_rate: 1,
            tau_base: 1,
            demand,
            pois,
            tasks: TaskSpec::defaults(),
            rank_model: RankModel::default(),
            seed,
        })
        .unwrap()
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            rgcn: RgcnConfig { hidden: 6, output: 4 },
            mlp_hidden: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rollout_records_match_availability() {
        let mut env = tiny_env(1);
        let model = PolicyModel::new(&env.config, &tiny_train_config());
        let bounds = FeatureBounds::from_env(&env);
        let mut rng = seeded_rng(9);
        let mut seed = 1;
        let buffer = collect_rollout(&mut env, &model, &bounds, 30, &mut rng, &mut seed).unwrap();
        assert_eq!(buffer.slots.len(), 30);
        assert!(buffer.num_records() > 0);
        for slot in &buffer.slots {
            for rec in &slot.agents {
                assert!(rec.mask[rec.action_index], "sampled a masked action");
                assert!(rec.logp_old.is_finite());
            }
        }
    }

    #[test]
    fn rollout_is_deterministic() {
        let run = || {
            let mut env = tiny_env(1);
            let model = PolicyModel::new(&env.config, &tiny_train_config());
            let bounds = FeatureBounds::from_env(&env);
            let mut rng = seeded_rng(9);
            let mut seed = 1;
            let buffer =
                collect_rollout(&mut env, &model, &bounds, 20, &mut rng, &mut seed).unwrap();
            buffer
                .slots
                .iter()
                .flat_map(|s| s.agents.iter().map(|r| (r.agent, r.action_index)))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    fn single_record_buffer(reward: f64, value: f64) -> TrajectoryBuffer {
        let env = tiny_env(1);
        let graph = build_graph(&env, &FeatureBounds::from_env(&env));
        TrajectoryBuffer {
            slots: vec![SlotRecord {
                graph,
                agents: vec![AgentRecord {
                    agent: 0,
                    action_index: 0,
                    mask: vec![true; 7],
                    logp_old: -1.0,
                    value_old: value,
                    reward,
                }],
                terminal: true,
            }],
        }
    }

    #[test]
    fn gae_single_step() {
        let buffer = single_record_buffer(1.0, 0.0);
        // un-normalized A = 1; with a single record normalization maps it to 0
        let env = tiny_env(1);
        let graph = build_graph(&env, &FeatureBounds::from_env(&env));
        let mut two = buffer;
        two.slots.push(SlotRecord {
            graph,
            agents: vec![AgentRecord {
                agent: 0,
                action_index: 0,
                mask: vec![true; 7],
                logp_old: -1.0,
                value_old: 0.0,
                reward: 0.0,
            }],
            terminal: true,
        });
        let (_, returns) = compute_gae(&two, 0.99, 0.95).unwrap();
        assert!((returns[0] - 1.0).abs() < 1e-12);
        assert!((returns[1] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn gae_hand_unrolled_two_steps() {
        // gamma = 1, lambda = 1, rewards [0, 1], V = 0: A = [1, 1]
        let env = tiny_env(1);
        let graph = build_graph(&env, &FeatureBounds::from_env(&env));
        let rec = |reward| AgentRecord {
            agent: 0,
            action_index: 0,
            mask: vec![true; 7],
            logp_old: -1.0,
            value_old: 0.0,
            reward,
        };
        let buffer = TrajectoryBuffer {
            slots: vec![
                SlotRecord { graph: graph.clone(), agents: vec![rec(0.0)], terminal: false },
                SlotRecord { graph, agents: vec![rec(1.0)], terminal: true },
            ],
        };
        let (adv, returns) = compute_gae(&buffer, 1.0, 1.0).unwrap();
        // raw advantages both 1.0: normalization sends both to 0
        assert!((adv[0] - adv[1]).abs() < 1e-12);
        assert_eq!(returns, vec![1.0, 1.0]);
    }

    #[test]
    fn gae_fixed_point_zero_delta() {
        // all rewards r, all values r / (1 - gamma): every delta = 0 except
        // at the terminal bootstrap
        let gamma = 0.5;
        let r = 1.0;
        let v = r / (1.0 - gamma);
        let env = tiny_env(1);
        let graph = build_graph(&env, &FeatureBounds::from_env(&env));
        let rec = || AgentRecord {
            agent: 0,
            action_index: 0,
            mask: vec![true; 7],
            logp_old: -1.0,
            value_old: v,
            reward: r,
        };
        let buffer = TrajectoryBuffer {
            slots: vec![
                SlotRecord { graph: graph.clone(), agents: vec![rec()], terminal: false },
                SlotRecord { graph: graph.clone(), agents: vec![rec()], terminal: false },
                SlotRecord { graph, agents: vec![rec()], terminal: false },
            ],
        };
        let (_, returns) = compute_gae(&buffer, gamma, 1.0).unwrap();
        // interior deltas vanish; only the terminal bootstrap delta of
        // r - v = -1 flows back, discounted by gamma each step
        assert!((returns[2] - (v - 1.0)).abs() < 1e-9);
        assert!((returns[1] - (v - 0.5)).abs() < 1e-9);
        assert!((returns[0] - (v - 0.25)).abs() < 1e-9);
    }

    #[test]
    fn gae_empty_buffer_errors() {
        let buffer = TrajectoryBuffer::default();
        assert!(matches!(compute_gae(&buffer, 0.99, 0.95), Err(TrainError::EmptyBuffer)));
    }

    #[test]
    fn ppo_identity_ratio() {
        // new params == old params: ratio = 1 everywhere
        let mut env = tiny_env(1);
        let config = tiny_train_config();
        let model = PolicyModel::new(&env.config, &config);
        let bounds = FeatureBounds::from_env(&env);
        let mut rng = seeded_rng(2);
        let mut seed = 1;
        let buffer = collect_rollout(&mut env, &model, &bounds, 10, &mut rng, &mut seed).unwrap();
        let (adv, ret) = compute_gae(&buffer, config.gamma, config.gae_lambda).unwrap();
        let fwd = ppo_forward(&model, &buffer, &adv, &ret, &config);
        // recompute diagnostics through the same path
        let mut tape = Tape::new();
        let (leaves, _) = stage_params(&model.store, &mut tape, model.param_names());
        let (_, diag) = ppo_loss(&model, &mut tape, &leaves, &buffer, &adv, &ret, &config);
        assert!((diag.mean_ratio - 1.0).abs() < 1e-9);
        assert!(diag.approx_kl.abs() < 1e-9);
        // policy loss = -mean(A) when ratio is 1
        let mean_adv = adv.iter().sum::<f64>() / adv.len() as f64;
        assert!((diag.policy_loss + mean_adv).abs() < 1e-9);
        assert!(fwd.tape.scalar_value(fwd.loss).is_finite());
    }

    #[test]
    fn ppo_zero_advantage_zero_policy_gradient() {
        let mut env = tiny_env(1);
        let mut config = tiny_train_config();
        config.entropy_coef = 0.0;
        let model = PolicyModel::new(&env.config, &config);
        let bounds = FeatureBounds::from_env(&env);
        let mut rng = seeded_rng(2);
        let mut seed = 1;
        let buffer = collect_rollout(&mut env, &model, &bounds, 10, &mut rng, &mut seed).unwrap();
        let adv = vec![0.0; buffer.num_records()];
        // make returns equal the old values so the value loss is 0 too
        let ret: Vec<f64> =
            buffer.slots.iter().flat_map(|s| s.agents.iter().map(|r| r.value_old)).collect();
        let mut fwd = ppo_forward(&model, &buffer, &adv, &ret, &config);
        fwd.tape.backward(fwd.loss);
        for (_, id) in &fwd.leaves {
            for &g in fwd.tape.grad(*id) {
                assert!(g.abs() < 1e-9, "nonzero gradient {g} with zero advantage");
            }
        }
    }

    #[test]
    fn ppo_update_changes_params_and_reports() {
        let mut env = tiny_env(1);
        let config = tiny_train_config();
        let mut model = PolicyModel::new(&env.config, &config);
        let before = model.store.get("actor.w1").data.clone();
        let bounds = FeatureBounds::from_env(&env);
        let mut rng = seeded_rng(2);
        let mut seed = 1;
        let buffer = collect_rollout(&mut env, &model, &bounds, 15, &mut rng, &mut seed).unwrap();
        let (adv, ret) = compute_gae(&buffer, config.gamma, config.gae_lambda).unwrap();
        let diag = ppo_update(&mut model, &buffer, &adv, &ret, &config).unwrap();
        assert!(diag.total_loss.is_finite());
        assert_ne!(before, model.store.get("actor.w1").data);
    }

    #[test]
    fn evaluate_is_deterministic_and_validates() {
        let mut env = tiny_env(1);
        let config = tiny_train_config();
        let model = PolicyModel::new(&env.config, &config);
        assert!(matches!(evaluate(&mut env, &model, 0, 5), Err(TrainError::NoEpisodes)));
        let a = evaluate(&mut env, &model, 2, 5).unwrap();
        let b = evaluate(&mut env, &model, 2, 5).unwrap();
        let key = |ms: &[crate::env::Metrics]| {
            ms.iter().map(|m| (m.adi.to_bits(), m.adu.to_bits())).collect::<Vec<_>>()
        };
        assert_eq!(key(&a), key(&b));
    }
}
