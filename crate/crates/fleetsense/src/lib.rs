//! Grid-city simulator in which a ride-hailing fleet jointly serves passenger
//! orders and collects spatio-temporally heterogeneous sensing data, plus the
//! learning stack (R-GCN state embedding, multi-agent PPO, rule/bandit/IQL
//! baselines) and an online LoRA-rank selection heuristic.

pub mod baselines;
pub mod config;
pub mod demand;
pub mod env;
pub mod graph;
pub mod grid;
pub mod harness;
pub mod mappo;
pub mod nn;
pub mod ranktuner;
pub mod report;
pub mod sensing;
