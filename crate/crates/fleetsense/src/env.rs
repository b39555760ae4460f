//! The Markov-game engine: applies joint actions under the one-action-per-
//! available-agent constraint, resolves simultaneous claims, advances the
//! order/PoI/vehicle lifecycles, and accumulates rewards and metrics.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{self, DemandModel};
use crate::grid::{GridMap, Order, Phase, Poi, VehicleState};
use crate::sensing::{self, PoiModel, RankModel, TaskSpec};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("expected actions for exactly the available agents; agent {0} mismatched")]
    ActionCountMismatch(usize),
    #[error("illegal action for agent {0}")]
    IllegalAction(usize),
    #[error("agent {0} is busy and cannot be queried for actions")]
    BusyAgent(usize),
    #[error(transparent)]
    Sensing(#[from] crate::sensing::SensingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub map: GridMap,
    /// Fleet size M.
    pub num_vehicles: usize,
    /// Episode horizon T in slots.
    pub horizon: u64,
    pub alpha: f64,
    pub beta: f64,
    pub expiry_slots: u64,
    /// Packages collected per slot.
    pub collect_rate: u64,
    /// Base fine-tuning duration in slots, scaled by the rank time factor.
    pub tau_base: u64,
    pub demand: DemandModel,
    pub pois: PoiModel,
    pub tasks: Vec<TaskSpec>,
    pub rank_model: RankModel,
    pub seed: u64,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.num_vehicles < 1 {
            return Err(EnvError::InvalidConfig("need at least one vehicle".into()));
        }
        if self.horizon < 1 {
            return Err(EnvError::InvalidConfig("horizon must be >= 1".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || (self.alpha == 0.0 && self.beta == 0.0) {
            return Err(EnvError::InvalidConfig(
                "alpha and beta must be nonnegative and not both zero".into(),
            ));
        }
        if self.collect_rate < 1 || self.tau_base < 1 || self.expiry_slots < 1 {
            return Err(EnvError::InvalidConfig("rates and durations must be >= 1".into()));
        }
        if self.demand.rate.len() != self.map.num_grids() {
            return Err(EnvError::InvalidConfig("demand rate length != G".into()));
        }
        if self.pois.num_tasks() != self.tasks.len() {
            return Err(EnvError::InvalidConfig("poi rate rows != task count".into()));
        }
        for row in &self.pois.rate {
            if row.len() != self.map.num_grids() {
                return Err(EnvError::InvalidConfig("poi rate row length != G".into()));
            }
        }
        self.rank_model.validate();
        for t in &self.tasks {
            t.validate();
        }
        Ok(())
    }
}

/// One of the three per-slot choices of an available vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    /// Dispatch to a grid in N(current); the current grid means stay.
    MoveTo(usize),
    AcceptOrder,
    CollectData,
}

/// Fixed action-vector layout: stay, one slot per lattice direction,
/// then accept and collect.
pub fn action_space(map: &GridMap) -> usize {
    1 + map.num_directions() + 2
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Metrics {
    pub adi: f64,
    pub adu: f64,
    pub aoi_sum: u64,
    pub aoi_count: u64,
    pub orders_served: u64,
    pub orders_expired: u64,
    pub pois_collected: u64,
    pub pois_expired: u64,
    pub conflicts: u64,
    pub slots: u64,
}

impl Metrics {
    pub fn qos(&self, alpha: f64, beta: f64) -> f64 {
        alpha * self.adi + beta * self.adu
    }

    pub fn avg_aoi(&self) -> Option<f64> {
        (self.aoi_count > 0).then(|| self.aoi_sum as f64 / self.aoi_count as f64)
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub rewards: Vec<f64>,
    pub available_next: Vec<bool>,
    pub adi: f64,
    pub adu: f64,
    pub qos: f64,
    pub aoi_samples: Vec<u64>,
    pub conflicts_this_slot: u64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    OrderNew { slot: u64, id: u64, grid: usize, price: f64 },
    OrderServed { slot: u64, id: u64, agent: usize, price: f64 },
    OrderExpired { slot: u64, id: u64 },
    PoiNew { slot: u64, id: u64, grid: usize, task: usize, volume: u64 },
    PoiCollected { slot: u64, id: u64, agent: usize, aoi: u64, utility: f64 },
    PoiExpired { slot: u64, id: u64 },
    Move { slot: u64, agent: usize, from: usize, to: usize },
    Conflict { slot: u64, agent: usize },
}

pub struct Env {
    pub config: EnvConfig,
    pub t: u64,
    pub vehicles: Vec<VehicleState>,
    pub orders: Vec<Order>,
    pub pois: Vec<Poi>,
    pub metrics: Metrics,
    pub rank: u32,
    next_order_id: u64,
    next_poi_id: u64,
    episode_seed: u64,
    pub events: Option<Vec<Event>>,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let seed = config.seed;
        let rank = config.rank_model.rank_min();
        let mut env = Env {
            config,
            t: 0,
            vehicles: Vec::new(),
            orders: Vec::new(),
            pois: Vec::new(),
            metrics: Metrics::default(),
            rank,
            next_order_id: 0,
            next_poi_id: 0,
            episode_seed: seed,
            events: None,
        };
        env.reset(seed)?;
        Ok(env)
    }

    pub fn enable_event_log(&mut self) {
        self.events = Some(Vec::new());
    }

    pub fn set_rank(&mut self, rank: u32) -> Result<(), EnvError> {
        self.config.rank_model.lookup(rank)?;
        self.rank = rank;
        Ok(())
    }

    /// Reinitialize the episode: seeded uniform vehicle placement, fresh
    /// order/PoI registries, t = 0.
    pub fn reset(&mut self, seed: u64) -> Result<(), EnvError> {
        self.episode_seed = seed;
        self.t = 0;
        self.metrics = Metrics::default();
        self.next_order_id = 0;
        self.next_poi_id = 0;
        if let Some(ev) = &mut self.events {
            ev.clear();
        }
        let grids = self.config.map.num_grids();
        let mut rng = ChaCha8Rng::seed_from_u64(demand::substream(seed, 0, 0x9a1));
        self.vehicles = (0..self.config.num_vehicles)
            .map(|id| {
                let grid = rng.gen_range(0..grids);
                VehicleState { id, grid, phase: Phase::Available, busy_until: 0, release_grid: grid }
            })
            .collect();
        self.orders = Vec::new();
        self.pois = Vec::new();
        self.spawn(0);
        Ok(())
    }

    fn demand_model(&self) -> DemandModel {
        let mut m = self.config.demand.clone();
        m.seed = demand::substream(self.episode_seed, m.seed, 1);
        m
    }

    fn poi_model(&self) -> PoiModel {
        let mut m = self.config.pois.clone();
        m.seed = demand::substream(self.episode_seed, m.seed, 2);
        m
    }

    fn spawn(&mut self, t: u64) {
        let new_orders = demand::generate_orders(
            &self.demand_model(),
            &self.config.map,
            t,
            self.config.expiry_slots,
            &mut self.next_order_id,
        );
        for o in &new_orders {
            if let Some(ev) = &mut self.events {
                ev.push(Event::OrderNew { slot: t, id: o.id, grid: o.origin, price: o.price });
            }
        }
        self.orders.extend(new_orders);
        let new_pois =
            sensing::generate_pois(&self.poi_model(), &self.config.map, t, &mut self.next_poi_id);
        for p in &new_pois {
            if let Some(ev) = &mut self.events {
                ev.push(Event::PoiNew {
                    slot: t,
                    id: p.id,
                    grid: p.grid,
                    task: p.task,
                    volume: p.volume,
                });
            }
        }
        self.pois.extend(new_pois);
    }

    pub fn available_agents(&self) -> Vec<usize> {
        self.vehicles.iter().filter(|v| v.available()).map(|v| v.id).collect()
    }

    fn has_order_in(&self, grid: usize) -> bool {
        self.orders.iter().any(|o| o.origin == grid && o.is_valid_at(self.t))
    }

    fn has_poi_in(&self, grid: usize) -> bool {
        self.pois.iter().any(|p| p.grid == grid)
    }

    /// Boolean legality mask over the fixed action layout
    /// [stay, dir 1..D, accept, collect].
    pub fn legal_mask(&self, agent: usize) -> Result<Vec<bool>, EnvError> {
        let v = &self.vehicles[agent];
        if !v.available() {
            return Err(EnvError::BusyAgent(agent));
        }
        let map = &self.config.map;
        let d = map.num_directions();
        let mut mask = vec![false; action_space(map)];
        mask[0] = true; // stay
        let neigh = map.neighbors(v.grid).expect("vehicle grid in range");
        // neighbors() returns self first, then in-lattice directions in
        // fixed order; recover which direction slots are present.
        let (r, c) = map.row_col(v.grid);
        let offsets: &[(isize, isize)] = match map.connectivity {
            crate::grid::Connectivity::VonNeumann4 => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            crate::grid::Connectivity::Moore8 => {
                &[(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)]
            }
        };
        for (i, (dr, dc)) in offsets.iter().enumerate().take(d) {
            let nr = r as isize + dr;
            let nc = c as isize + dc;
            mask[1 + i] = nr >= 0 && nr < map.rows as isize && nc >= 0 && nc < map.cols as isize;
        }
        debug_assert_eq!(neigh.len(), 1 + mask[1..=d].iter().filter(|&&b| b).count());
        mask[1 + d] = self.has_order_in(v.grid);
        mask[2 + d] = self.has_poi_in(v.grid);
        Ok(mask)
    }

    /// Decode an action-vector index into an [`Action`] for `agent`.
    pub fn action_from_index(&self, agent: usize, index: usize) -> Action {
        let map = &self.config.map;
        let d = map.num_directions();
        let grid = self.vehicles[agent].grid;
        if index == 0 {
            Action::MoveTo(grid)
        } else if index <= d {
            let (r, c) = map.row_col(grid);
            let offsets: &[(isize, isize)] = match map.connectivity {
                crate::grid::Connectivity::VonNeumann4 => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
                crate::grid::Connectivity::Moore8 => {
                    &[(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)]
                }
            };
            let (dr, dc) = offsets[index - 1];
            let nr = (r as isize + dr).clamp(0, map.rows as isize - 1) as usize;
            let nc = (c as isize + dc).clamp(0, map.cols as isize - 1) as usize;
            Action::MoveTo(map.index(nr, nc))
        } else if index == 1 + d {
            Action::AcceptOrder
        } else {
            Action::CollectData
        }
    }

    fn action_is_legal(&self, agent: usize, action: Action) -> bool {
        let v = &self.vehicles[agent];
        match action {
            Action::MoveTo(g) => self
                .config
                .map
                .neighbors(v.grid)
                .map(|n| n.contains(&g))
                .unwrap_or(false),
            Action::AcceptOrder => self.has_order_in(v.grid),
            Action::CollectData => self.has_poi_in(v.grid),
        }
    }

    /// Advance one slot. `actions[m]` must be `Some` exactly for the agents
    /// available at the current slot.
    pub fn step(&mut self, actions: &[Option<Action>]) -> Result<StepOutcome, EnvError> {
        let m = self.config.num_vehicles;
        if actions.len() != m {
            return Err(EnvError::ActionCountMismatch(actions.len()));
        }
        for v in &self.vehicles {
            match (v.available(), actions[v.id].is_some()) {
                (true, false) | (false, true) => return Err(EnvError::ActionCountMismatch(v.id)),
                _ => {}
            }
        }
        let mut acting: Vec<usize> = self.available_agents();
        for &a in &acting {
            let action = actions[a].expect("checked above");
            if !self.action_is_legal(a, action) {
                return Err(EnvError::IllegalAction(a));
            }
        }

        let t = self.t;
        let mut rng = ChaCha8Rng::seed_from_u64(demand::substream(self.episode_seed, t, 0x5e9));
        acting.shuffle(&mut rng);

        let mut rewards = vec![0.0; m];
        let mut pending_moves: Vec<(usize, usize)> = Vec::new();
        let mut claimed_orders: Vec<u64> = Vec::new();
        let mut claimed_pois: Vec<u64> = Vec::new();
        let mut aoi_samples = Vec::new();
        let mut conflicts_this_slot = 0;

        for &a in &acting {
            let grid = self.vehicles[a].grid;
            match actions[a].expect("agent is acting") {
                Action::MoveTo(g) => {
                    pending_moves.push((a, g));
                    if let Some(ev) = &mut self.events {
                        ev.push(Event::Move { slot: t, agent: a, from: grid, to: g });
                    }
                }
                Action::AcceptOrder => {
                    // Highest price wins; ties go to the lowest id.
                    let best = self
                        .orders
                        .iter()
                        .filter(|o| {
                            o.origin == grid && o.is_valid_at(t) && !claimed_orders.contains(&o.id)
                        })
                        .max_by(|x, y| {
                            x.price.total_cmp(&y.price).then(y.id.cmp(&x.id))
                        })
                        .cloned();
                    match best {
                        Some(o) => {
                            claimed_orders.push(o.id);
                            let v = &mut self.vehicles[a];
                            v.phase = Phase::Serving;
                            v.busy_until = t + o.travel_time;
                            v.release_grid = o.destination;
                            rewards[a] = self.config.alpha * o.price;
                            self.metrics.adi += o.price;
                            self.metrics.orders_served += 1;
                            if let Some(ev) = &mut self.events {
                                ev.push(Event::OrderServed {
                                    slot: t,
                                    id: o.id,
                                    agent: a,
                                    price: o.price,
                                });
                            }
                        }
                        None => {
                            conflicts_this_slot += 1;
                            if let Some(ev) = &mut self.events {
                                ev.push(Event::Conflict { slot: t, agent: a });
                            }
                        }
                    }
                }
                Action::CollectData => {
                    // Highest current utility wins; ties go to the lowest id.
                    let mut best: Option<(f64, Poi)> = None;
                    for p in self.pois.iter().filter(|p| {
                        p.grid == grid && !claimed_pois.contains(&p.id)
                    }) {
                        let u = sensing::data_utility(
                            &self.config.tasks[p.task],
                            p.volume,
                            p.aoi(t),
                            self.rank,
                            &self.config.rank_model,
                        )?;
                        let better = match &best {
                            None => true,
                            Some((bu, bp)) => u > *bu || (u == *bu && p.id < bp.id),
                        };
                        if better {
                            best = Some((u, p.clone()));
                        }
                    }
                    match best {
                        Some((u, p)) => {
                            claimed_pois.push(p.id);
                            let collect_slots = p.volume.div_ceil(self.config.collect_rate);
                            let finetune = sensing::finetune_duration(
                                self.config.tau_base,
                                self.rank,
                                &self.config.rank_model,
                            )?;
                            let v = &mut self.vehicles[a];
                            v.phase = Phase::Collecting;
                            v.busy_until = t + collect_slots + finetune;
                            v.release_grid = grid;
                            rewards[a] = self.config.beta * u;
                            self.metrics.adu += u;
                            self.metrics.pois_collected += 1;
                            let aoi = p.aoi(t);
                            self.metrics.aoi_sum += aoi;
                            self.metrics.aoi_count += 1;
                            aoi_samples.push(aoi);
                            if let Some(ev) = &mut self.events {
                                ev.push(Event::PoiCollected {
                                    slot: t,
                                    id: p.id,
                                    agent: a,
                                    aoi,
                                    utility: u,
                                });
                            }
                        }
                        None => {
                            conflicts_this_slot += 1;
                            if let Some(ev) = &mut self.events {
                                ev.push(Event::Conflict { slot: t, agent: a });
                            }
                        }
                    }
                }
            }
        }
        self.metrics.conflicts += conflicts_this_slot;
        self.orders.retain(|o| !claimed_orders.contains(&o.id));
        self.pois.retain(|p| !claimed_pois.contains(&p.id));

        // Lifecycle: moves land, stale orders/PoIs expire, finished jobs
        // release their vehicles, and the next slot's arrivals spawn.
        let t_next = t + 1;
        for (a, g) in pending_moves {
            self.vehicles[a].grid = g;
            self.vehicles[a].release_grid = g;
        }
        let events = &mut self.events;
        let metrics = &mut self.metrics;
        self.orders.retain(|o| {
            let keep = o.is_valid_at(t_next);
            if !keep {
                metrics.orders_expired += 1;
                if let Some(ev) = events {
                    ev.push(Event::OrderExpired { slot: t_next, id: o.id });
                }
            }
            keep
        });
        let tasks = &self.config.tasks;
        self.pois.retain(|p| {
            let keep = p.aoi(t_next) < tasks[p.task].freshness_horizon;
            if !keep {
                metrics.pois_expired += 1;
                if let Some(ev) = events {
                    ev.push(Event::PoiExpired { slot: t_next, id: p.id });
                }
            }
            keep
        });
        for v in &mut self.vehicles {
            if !v.available() && v.busy_until <= t_next {
                v.phase = Phase::Available;
                v.grid = v.release_grid;
            }
        }
        self.spawn(t_next);
        self.t = t_next;
        self.metrics.slots = t_next;

        Ok(StepOutcome {
            available_next: self.vehicles.iter().map(|v| v.available()).collect(),
            adi: self.metrics.adi,
            adu: self.metrics.adu,
            qos: self.metrics.qos(self.config.alpha, self.config.beta),
            rewards,
            aoi_samples,
            conflicts_this_slot,
        })
    }

    pub fn done(&self) -> bool {
        self.t >= self.config.horizon
    }

    pub fn write_event_log(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        if let Some(events) = &self.events {
            for e in events {
                serde_json::to_writer(&mut f, e)?;
                writeln!(f)?;
            }
        }
        Ok(())
    }
}
