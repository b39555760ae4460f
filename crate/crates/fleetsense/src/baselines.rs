//! Comparison policies: uniform-random, the two rule-based greedy
//! dispatchers, a fleet-shared UCB1 bandit, and independent Q-learning
//! with a shared network. All of them (and the trained actor-critic)
//! drive the environment through [`FleetController`].

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, Env, EnvError, Metrics, StepOutcome};
use crate::graph::FeatureBounds;
use crate::mappo::PolicyModel;
use crate::nn::{seeded_rng, stage_params, Mlp, NnError, ParamStore, Tape};
use crate::sensing::data_utility;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("no legal action in mask")]
    NoLegalAction,
}

fn legal_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// Uniform choice over the legal set.
pub fn random_action(mask: &[bool], rng: &mut impl Rng) -> Result<usize, BaselineError> {
    let legal = legal_indices(mask);
    if legal.is_empty() {
        return Err(BaselineError::NoLegalAction);
    }
    Ok(legal[rng.gen_range(0..legal.len())])
}

/// Accept an order whenever one is on offer; otherwise fall back to a
/// uniform choice over everything else that is legal.
pub fn greedy_os_action(mask: &[bool], rng: &mut impl Rng) -> Result<usize, BaselineError> {
    let accept = mask.len() - 2;
    if mask[accept] {
        return Ok(accept);
    }
    random_action(mask, rng)
}

/// Collect data whenever a sensing target is present; otherwise uniform.
pub fn greedy_ft_action(mask: &[bool], rng: &mut impl Rng) -> Result<usize, BaselineError> {
    let collect = mask.len() - 1;
    if mask[collect] {
        return Ok(collect);
    }
    random_action(mask, rng)
}

/// UCB1 statistics over the abstract action indices, shared by the whole
/// fleet ("context-free": the same arm means the same thing everywhere).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UcbState {
    pub counts: Vec<u64>,
    pub means: Vec<f64>,
    pub total: u64,
    pub c: f64,
}

impl UcbState {
    pub fn new(num_actions: usize) -> UcbState {
        UcbState { counts: vec![0; num_actions], means: vec![0.0; num_actions], total: 0, c: 2.0 }
    }

    /// Legal argmax of mean + c*sqrt(ln(max(1,n))/n_a); unpulled legal
    /// arms are taken first in index order.
    pub fn select(&self, mask: &[bool]) -> Result<usize, BaselineError> {
        let legal = legal_indices(mask);
        if legal.is_empty() {
            return Err(BaselineError::NoLegalAction);
        }
        for &a in &legal {
            if self.counts[a] == 0 {
                return Ok(a);
            }
        }
        let ln_n = (self.total.max(1) as f64).ln();
        let mut best = legal[0];
        let mut best_score = f64::NEG_INFINITY;
        for &a in &legal {
            let score = self.means[a] + self.c * (ln_n / self.counts[a] as f64).sqrt();
            if score > best_score {
                best_score = score;
                best = a;
            }
        }
        Ok(best)
    }

    pub fn update(&mut self, action: usize, reward: f64) {
        self.total += 1;
        self.counts[action] += 1;
        self.means[action] += (reward - self.means[action]) / self.counts[action] as f64;
    }
}

/// Fixed-size local view for independent Q-learning: own position and
/// phase, the episode clock, and count/extremum summaries of whatever
/// shares the agent's grid.
pub const IQL_OBS_DIM: usize = 13;

pub fn local_obs(env: &Env, agent: usize, bounds: &FeatureBounds) -> Vec<f64> {
    let v = &env.vehicles[agent];
    let (r, c) = env.config.map.norm_coords(v.grid);
    let mut obs = vec![0.0; IQL_OBS_DIM];
    obs[0] = r;
    obs[1] = c;
    obs[2 + v.phase as usize] = 1.0;
    obs[5] = env.t as f64 / env.config.horizon.max(1) as f64;
    obs[6] = env.vehicles.iter().filter(|o| o.grid == v.grid).count() as f64 / bounds.max_count;

    let orders: Vec<_> = env
        .orders
        .iter()
        .filter(|o| o.origin == v.grid && o.is_valid_at(env.t))
        .collect();
    obs[7] = orders.len() as f64 / bounds.max_count;
    obs[8] = orders.iter().map(|o| o.price).fold(0.0, f64::max) / bounds.max_price;
    obs[9] = orders
        .iter()
        .map(|o| (env.t - o.created_at) as f64)
        .fold(f64::INFINITY, f64::min)
        .min(bounds.max_order_age)
        / bounds.max_order_age;
    if orders.is_empty() {
        obs[9] = 1.0;
    }

    let pois: Vec<_> = env.pois.iter().filter(|p| p.grid == v.grid).collect();
    obs[10] = pois.len() as f64 / bounds.max_count;
    let max_ceiling = env.config.tasks.iter().map(|t| t.ceiling).fold(1e-12, f64::max);
    obs[11] = pois
        .iter()
        .filter_map(|p| {
            data_utility(
                &env.config.tasks[p.task],
                p.volume,
                p.aoi(env.t),
                env.rank,
                &env.config.rank_model,
            )
            .ok()
        })
        .fold(0.0, f64::max)
        / max_ceiling;
    obs[12] = pois
        .iter()
        .map(|p| p.aoi(env.t) as f64)
        .fold(f64::INFINITY, f64::min)
        .min(bounds.max_aoi)
        / bounds.max_aoi;
    if pois.is_empty() {
        obs[12] = 1.0;
    }
    obs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IqlConfig {
    pub gamma: f64,
    pub lr: f64,
    pub hidden: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Steps over which epsilon anneals linearly.
    pub epsilon_anneal_steps: u64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub target_sync_every: u64,
    pub episodes: u64,
    pub seed: u64,
}

impl Default for IqlConfig {
    fn default() -> Self {
        IqlConfig {
            gamma: 0.99,
            lr: 1e-3,
            hidden: 64,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 20_000,
            replay_capacity: 50_000,
            batch_size: 32,
            target_sync_every: 200,
            episodes: 60,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub next_mask: Vec<bool>,
    pub done: bool,
}

/// Shared-weight Q-network plus its frozen target copy and replay.
pub struct IqlAgent {
    pub store: ParamStore,
    pub target: ParamStore,
    pub qnet: Mlp,
    pub config: IqlConfig,
    pub action_dim: usize,
    names: Vec<String>,
    replay: VecDeque<Transition>,
    updates: u64,
    pub env_steps: u64,
}

impl IqlAgent {
    pub fn new(action_dim: usize, config: IqlConfig) -> IqlAgent {
        let mut rng = seeded_rng(config.seed ^ 0x1a7);
        let mut store = ParamStore::new();
        let qnet = Mlp::declare(&mut store, "q", IQL_OBS_DIM, config.hidden, action_dim, &mut rng);
        let names = qnet.param_names();
        let target = store.clone();
        IqlAgent {
            store,
            target,
            qnet,
            config,
            action_dim,
            names,
            replay: VecDeque::new(),
            updates: 0,
            env_steps: 0,
        }
    }

    pub fn epsilon(&self) -> f64 {
        let frac = (self.env_steps as f64 / self.config.epsilon_anneal_steps.max(1) as f64).min(1.0);
        self.config.epsilon_start + frac * (self.config.epsilon_end - self.config.epsilon_start)
    }

    fn q_row(&self, store: &ParamStore, obs: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let (leaves, _) = stage_params(store, &mut tape, &self.names);
        let x = tape.leaf(1, obs.len(), obs.to_vec());
        let q = self.qnet.forward(&mut tape, &leaves, x);
        tape.value(q).to_vec()
    }

    /// Epsilon-greedy over legal Q-values.
    pub fn act(
        &self,
        obs: &[f64],
        mask: &[bool],
        epsilon: f64,
        rng: &mut impl Rng,
    ) -> Result<usize, BaselineError> {
        if rng.gen::<f64>() < epsilon {
            return random_action(mask, rng);
        }
        let q = self.q_row(&self.store, obs);
        let legal = legal_indices(mask);
        if legal.is_empty() {
            return Err(BaselineError::NoLegalAction);
        }
        let mut best = legal[0];
        for &a in &legal {
            if q[a] > q[best] {
                best = a;
            }
        }
        Ok(best)
    }

    pub fn push(&mut self, t: Transition) {
        if self.replay.len() == self.config.replay_capacity {
            self.replay.pop_front();
        }
        self.replay.push_back(t);
    }

    /// One Q-learning step on a sampled minibatch; no-op until the replay
    /// holds a full batch. Returns the TD loss when an update happened.
    pub fn train_step(&mut self, rng: &mut impl Rng) -> Result<Option<f64>, BaselineError> {
        if self.replay.len() < self.config.batch_size {
            return Ok(None);
        }
        let b = self.config.batch_size;
        let batch: Vec<&Transition> =
            (0..b).map(|_| &self.replay[rng.gen_range(0..self.replay.len())]).collect();

        let mut targets = Vec::with_capacity(b);
        for t in &batch {
            let mut y = t.reward;
            if !t.done {
                let q_next = self.q_row(&self.target, &t.next_obs);
                let best = t
                    .next_mask
                    .iter()
                    .zip(&q_next)
                    .filter(|(&m, _)| m)
                    .map(|(_, &q)| q)
                    .fold(f64::NEG_INFINITY, f64::max);
                if best.is_finite() {
                    y += self.config.gamma * best;
                }
            }
            targets.push(y);
        }

        let mut tape = Tape::new();
        let (leaves, leaf_list) = stage_params(&self.store, &mut tape, &self.names);
        let obs_flat: Vec<f64> = batch.iter().flat_map(|t| t.obs.iter().copied()).collect();
        let x = tape.leaf(b, IQL_OBS_DIM, obs_flat);
        let q_all = self.qnet.forward(&mut tape, &leaves, x);
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let q_taken = tape.gather_cols(q_all, &actions);
        let y = tape.leaf(b, 1, targets);
        let err = tape.sub(q_taken, y);
        let sq = tape.mul_elem(err, err);
        let loss = tape.mean_all(sq);
        let loss_value = tape.scalar_value(loss);
        tape.backward(loss);
        self.store.adam_step(&tape, &leaf_list, self.config.lr)?;

        self.updates += 1;
        if self.updates % self.config.target_sync_every == 0 {
            self.target = self.store.clone();
        }
        Ok(Some(loss_value))
    }
}

/// Train independent Q-learning on the environment: every available
/// agent acts epsilon-greedily, each transition goes through the shared
/// replay, and one gradient step runs per slot.
pub fn iql_train(env: &mut Env, config: IqlConfig) -> Result<IqlAgent, BaselineError> {
    let bounds = FeatureBounds::from_env(env);
    let action_dim = crate::env::action_space(&env.config.map);
    let mut agent = IqlAgent::new(action_dim, config.clone());
    let mut rng = seeded_rng(config.seed ^ 0x51ab);
    for episode in 0..config.episodes {
        env.reset(env.config.seed.wrapping_add(episode))?;
        // pending (obs, action) per vehicle awaiting the post-step reward
        while !env.done() {
            let eps = agent.epsilon();
            let avail = env.available_agents();
            let mut actions: Vec<Option<Action>> = vec![None; env.config.num_vehicles];
            let mut taken: Vec<(usize, Vec<f64>, usize)> = Vec::new();
            for &a in &avail {
                let mask = env.legal_mask(a)?;
                let obs = local_obs(env, a, &bounds);
                let idx = agent.act(&obs, &mask, eps, &mut rng)?;
                actions[a] = Some(env.action_from_index(a, idx));
                taken.push((a, obs, idx));
            }
            let outcome = env.step(&actions)?;
            let done = env.done();
            for (a, obs, idx) in taken {
                let next_obs = local_obs(env, a, &bounds);
                let next_mask = if !done && outcome.available_next[a] {
                    env.legal_mask(a)?
                } else {
                    vec![true; action_dim]
                };
                agent.push(Transition {
                    obs,
                    action: idx,
                    reward: outcome.rewards[a],
                    next_obs,
                    next_mask,
                    done,
                });
            }
            agent.env_steps += 1;
            agent.train_step(&mut rng)?;
        }
    }
    Ok(agent)
}

/// One interface over all six policies so the harness and evaluation
/// loops stay policy-agnostic.
pub enum FleetController {
    Random,
    GreedyOs,
    GreedyFt,
    Ucb(UcbState),
    Iql(IqlAgent, f64),
    Mappo(PolicyModel, FeatureBounds),
}

impl FleetController {
    pub fn act(
        &mut self,
        env: &Env,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Option<Action>>, Vec<(usize, usize)>), BaselineError> {
        let avail = env.available_agents();
        let mut actions: Vec<Option<Action>> = vec![None; env.config.num_vehicles];
        let mut taken = Vec::new();
        match self {
            FleetController::Mappo(model, bounds) => {
                if !avail.is_empty() {
                    let mut masks = Vec::with_capacity(avail.len() * model.action_dim);
                    for &a in &avail {
                        masks.extend(env.legal_mask(a)?);
                    }
                    let (logp, _) = model.policy_at(env, bounds, &avail, &masks);
                    for (row, &a) in avail.iter().enumerate() {
                        let slice = &logp[row * model.action_dim..(row + 1) * model.action_dim];
                        let mut idx = 0;
                        let mut best = f64::NEG_INFINITY;
                        for (i, &lp) in slice.iter().enumerate() {
                            if lp > best {
                                best = lp;
                                idx = i;
                            }
                        }
                        actions[a] = Some(env.action_from_index(a, idx));
                        taken.push((a, idx));
                    }
                }
            }
            _ => {
                for &a in &avail {
                    let mask = env.legal_mask(a)?;
                    let idx = match self {
                        FleetController::Random => random_action(&mask, rng)?,
                        FleetController::GreedyOs => greedy_os_action(&mask, rng)?,
                        FleetController::GreedyFt => greedy_ft_action(&mask, rng)?,
                        FleetController::Ucb(state) => state.select(&mask)?,
                        FleetController::Iql(agent, eps) => {
                            let bounds = FeatureBounds::from_env(env);
                            let obs = local_obs(env, a, &bounds);
                            agent.act(&obs, &mask, *eps, rng)?
                        }
                        FleetController::Mappo(..) => unreachable!(),
                    };
                    actions[a] = Some(env.action_from_index(a, idx));
                    taken.push((a, idx));
                }
            }
        }
        Ok((actions, taken))
    }

    /// Feed realized rewards back into whatever learns online.
    pub fn observe(&mut self, taken: &[(usize, usize)], outcome: &StepOutcome) {
        if let FleetController::Ucb(state) = self {
            for &(agent, idx) in taken {
                state.update(idx, outcome.rewards[agent]);
            }
        }
    }
}

/// Run one full episode under a controller and return the final metrics.
pub fn run_episode(
    env: &mut Env,
    controller: &mut FleetController,
    episode_seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Metrics, BaselineError> {
    env.reset(episode_seed)?;
    while !env.done() {
        let (actions, taken) = controller.act(env, rng)?;
        let outcome = env.step(&actions)?;
        controller.observe(&taken, &outcome);
    }
    Ok(env.metrics.clone())
}
