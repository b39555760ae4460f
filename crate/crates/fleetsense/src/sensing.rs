//! PoI generation, AoI bookkeeping, the LoRA rank trade-off table, and the
//! proxy data-utility model standing in for real fine-tuning accuracy.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{poisson_count, substream};
use crate::grid::{GridMap, Poi};

#[derive(Debug, Error, PartialEq)]
pub enum SensingError {
    #[error("rank {0} outside allowed range [{1}, {2}]")]
    RankOutOfRange(u32, u32, u32),
}

/// Calibrated utility curve for one fine-tuning task type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub k: usize,
    /// Best achievable utility A_k, in (0, 1].
    pub ceiling: f64,
    /// Freshness horizon lambda_max (slots): utility reaches 0 there.
    pub freshness_horizon: u64,
    /// Decay exponent p_k >= 1: 1 = linear decay, 2 = concave.
    pub decay_exponent: f64,
    /// Volume at which the log growth curve saturates to 1.
    pub volume_ref: u64,
}

impl TaskSpec {
    pub fn validate(&self) {
        assert!(self.ceiling > 0.0 && self.ceiling <= 1.0);
        assert!(self.decay_exponent >= 1.0);
        assert!(self.freshness_horizon >= 1);
        assert!(self.volume_ref >= 1);
    }

    /// Default task set: a classification proxy (concave freshness decay)
    /// and a segmentation proxy (linear decay).
    pub fn defaults() -> Vec<TaskSpec> {
        vec![
            TaskSpec { k: 0, ceiling: 0.70, freshness_horizon: 60, decay_exponent: 2.0, volume_ref: 12 },
            TaskSpec { k: 1, ceiling: 0.75, freshness_horizon: 60, decay_exponent: 1.0, volume_ref: 12 },
        ]
    }
}

/// Spatial distribution tag for the PoI rate matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistributionTag {
    /// PoI and order distributions differ strongly.
    #[default]
    Divergent,
    /// PoI distribution mirrors the order distribution.
    Aligned,
    /// PoIs uniform over the area.
    Uniform,
}

impl DistributionTag {
    pub fn all() -> [DistributionTag; 3] {
        [DistributionTag::Divergent, DistributionTag::Aligned, DistributionTag::Uniform]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DistributionTag::Divergent => "divergent",
            DistributionTag::Aligned => "aligned",
            DistributionTag::Uniform => "uniform",
        }
    }
}

/// PoI arrival process: per-task, per-grid Poisson rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiModel {
    /// K x G rate matrix.
    pub rate: Vec<Vec<f64>>,
    pub volume_min: u64,
    pub volume_max: u64,
    pub distribution_tag: DistributionTag,
    pub seed: u64,
}

impl PoiModel {
    pub fn new(rate: Vec<Vec<f64>>, tag: DistributionTag, seed: u64) -> Self {
        PoiModel { rate, volume_min: 3, volume_max: 12, distribution_tag: tag, seed }
    }

    /// Build a rate matrix realizing `tag` with the given total rate per
    /// task, relative to an order rate vector over the same grids.
    pub fn from_tag(
        tag: DistributionTag,
        order_rate: &[f64],
        tasks: usize,
        total_per_task: f64,
        seed: u64,
    ) -> Self {
        let g = order_rate.len();
        let order_sum: f64 = order_rate.iter().sum();
        let mut rate = Vec::with_capacity(tasks);
        for k in 0..tasks {
            let row: Vec<f64> = match tag {
                DistributionTag::Uniform => vec![total_per_task / g as f64; g],
                DistributionTag::Aligned => {
                    if order_sum <= 0.0 {
                        vec![total_per_task / g as f64; g]
                    } else {
                        order_rate.iter().map(|r| total_per_task * r / order_sum).collect()
                    }
                }
                DistributionTag::Divergent => {
                    // Concentrate PoI mass where order mass is lowest.
                    let inv: Vec<f64> = {
                        let max = order_rate.iter().cloned().fold(f64::MIN, f64::max);
                        order_rate.iter().map(|r| (max - r) + 0.05 * max.max(1e-9)).collect()
                    };
                    let s: f64 = inv.iter().sum();
                    inv.iter().map(|w| total_per_task * w / s).collect()
                }
            };
            let _ = k;
            rate.push(row);
        }
        PoiModel::new(rate, tag, seed)
    }

    pub fn num_tasks(&self) -> usize {
        self.rate.len()
    }
}

/// Generate the PoIs appearing at slot `t`.
pub fn generate_pois(model: &PoiModel, map: &GridMap, t: u64, next_id: &mut u64) -> Vec<Poi> {
    let grids = map.num_grids();
    let mut out = Vec::new();
    for (k, row) in model.rate.iter().enumerate() {
        assert_eq!(row.len(), grids, "rate row length must equal G");
        for g in 0..grids {
            let key = substream(model.seed ^ (k as u64).wrapping_mul(0x2545f4914f6cdd1d), t, g as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let count = poisson_count(&mut rng, row[g]);
            for _ in 0..count {
                out.push(Poi {
                    id: *next_id,
                    grid: g,
                    task: k,
                    volume: rng.gen_range(model.volume_min..=model.volume_max),
                    created_at: t,
                });
                *next_id += 1;
            }
        }
    }
    out
}

/// One row of the rank trade-off table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: u32,
    pub time_factor: f64,
    pub accuracy_factor: f64,
}

/// Rank -> (fine-tune time factor, accuracy factor) lookup table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankModel {
    pub table: Vec<RankRow>,
}

impl Default for RankModel {
    fn default() -> Self {
        RankModel {
            table: vec![
                RankRow { rank: 1, time_factor: 1.00, accuracy_factor: 0.70 },
                RankRow { rank: 2, time_factor: 1.45, accuracy_factor: 0.76 },
                RankRow { rank: 3, time_factor: 3.71, accuracy_factor: 0.98 },
                RankRow { rank: 4, time_factor: 5.05, accuracy_factor: 0.99 },
                RankRow { rank: 5, time_factor: 6.00, accuracy_factor: 0.99365 },
                RankRow { rank: 6, time_factor: 5.31, accuracy_factor: 1.00 },
            ],
        }
    }
}

impl RankModel {
    pub fn rank_min(&self) -> u32 {
        self.table.first().map(|r| r.rank).unwrap_or(1)
    }

    pub fn rank_max(&self) -> u32 {
        self.table.last().map(|r| r.rank).unwrap_or(1)
    }

    pub fn validate(&self) {
        assert!(!self.table.is_empty());
        for w in self.table.windows(2) {
            assert_eq!(w[1].rank, w[0].rank + 1, "ranks must be contiguous");
        }
        for r in &self.table {
            assert!(r.time_factor > 0.0);
            assert!(r.accuracy_factor > 0.0 && r.accuracy_factor <= 1.0);
        }
    }

    pub fn lookup(&self, rank: u32) -> Result<(f64, f64), SensingError> {
        self.table
            .iter()
            .find(|r| r.rank == rank)
            .map(|r| (r.time_factor, r.accuracy_factor))
            .ok_or(SensingError::RankOutOfRange(rank, self.rank_min(), self.rank_max()))
    }
}

/// Proxy fine-tuning utility u = ceiling * acc(rank) * V(d) * F(lambda),
/// with logarithmic volume growth V and polynomial freshness decay F.
pub fn data_utility(
    task: &TaskSpec,
    volume: u64,
    aoi: u64,
    rank: u32,
    rank_model: &RankModel,
) -> Result<f64, SensingError> {
    let (_, acc) = rank_model.lookup(rank)?;
    let v = ((1.0 + volume as f64).ln() / (1.0 + task.volume_ref as f64).ln()).min(1.0);
    let frac = aoi as f64 / task.freshness_horizon as f64;
    let f = (1.0 - frac.powf(task.decay_exponent)).max(0.0);
    Ok(task.ceiling * acc * v * f)
}

/// Slots a vehicle stays busy fine-tuning after collection:
/// ceil(base * time_factor), floored at 1.
pub fn finetune_duration(
    tau_base: u64,
    rank: u32,
    rank_model: &RankModel,
) -> Result<u64, SensingError> {
    let (time_factor, _) = rank_model.lookup(rank)?;
    Ok(((tau_base as f64 * time_factor).ceil() as u64).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Connectivity, GridMap};
    use proptest::prelude::*;

    fn task() -> TaskSpec {
        TaskSpec { k: 0, ceiling: 1.0, freshness_horizon: 60, decay_exponent: 1.0, volume_ref: 12 }
    }

    #[test]
    fn rank_table_rows() {
        let m = RankModel::default();
        assert_eq!(m.lookup(1).unwrap(), (1.00, 0.70));
        assert_eq!(m.lookup(3).unwrap(), (3.71, 0.98));
        assert_eq!(m.lookup(6).unwrap(), (5.31, 1.00));
        assert_eq!(m.lookup(7), Err(SensingError::RankOutOfRange(7, 1, 6)));
    }

    #[test]
    fn utility_zero_volume() {
        assert_eq!(data_utility(&task(), 0, 0, 3, &RankModel::default()).unwrap(), 0.0);
    }

    #[test]
    fn utility_zero_at_horizon() {
        let t = task();
        for d in [1, 5, 12, 40] {
            assert_eq!(data_utility(&t, d, 60, 3, &RankModel::default()).unwrap(), 0.0);
            assert_eq!(data_utility(&t, d, 75, 6, &RankModel::default()).unwrap(), 0.0);
        }
    }

    #[test]
    fn utility_closed_form() {
        // ceiling 1, lambda_max 60, p 1, d_ref 12: d=3, lambda=30, rank 3
        // = ln(4)/ln(13) * 0.5 * 0.98
        let u = data_utility(&task(), 3, 30, 3, &RankModel::default()).unwrap();
        let expected = 4.0f64.ln() / 13.0f64.ln() * 0.5 * 0.98;
        assert!((u - expected).abs() < 1e-12);
        assert!((u - 0.2649).abs() < 5e-4);
    }

    #[test]
    fn utility_calibration_anchors() {
        let t = task();
        // F(0) = 1 and V(d_ref) = 1 exactly
        assert_eq!(data_utility(&t, 12, 0, 6, &RankModel::default()).unwrap(), 1.0 * 1.0);
        let u = data_utility(&t, 12, 0, 3, &RankModel::default()).unwrap();
        assert_eq!(u, 0.98);
    }

    #[test]
    fn finetune_durations() {
        let m = RankModel::default();
        assert_eq!(finetune_duration(2, 1, &m).unwrap(), 2);
        assert_eq!(finetune_duration(2, 3, &m).unwrap(), 8);
        assert_eq!(finetune_duration(2, 6, &m).unwrap(), 11);
        assert!(finetune_duration(2, 0, &m).is_err());
    }

    #[test]
    fn generate_pois_zero_rate() {
        let map = GridMap::new(3, 3, Connectivity::VonNeumann4);
        let model = PoiModel::new(vec![vec![0.0; 9]; 2], DistributionTag::Uniform, 5);
        let mut id = 0;
        assert!(generate_pois(&model, &map, 0, &mut id).is_empty());
    }

    #[test]
    fn generate_pois_volume_range() {
        let map = GridMap::new(3, 3, Connectivity::VonNeumann4);
        let model = PoiModel::new(vec![vec![0.5; 9]; 2], DistributionTag::Uniform, 5);
        let mut id = 0;
        for t in 0..200 {
            for p in generate_pois(&model, &map, t, &mut id) {
                assert!((3..=12).contains(&p.volume));
                assert_eq!(p.created_at, t);
            }
        }
    }

    #[test]
    fn uniform_tag_empirical_rate() {
        // total rate R split uniformly: per-grid empirical rate -> R/G over 1e4 slots, +-5%
        let map = GridMap::new(2, 2, Connectivity::VonNeumann4);
        let model = PoiModel::from_tag(DistributionTag::Uniform, &[1.0; 4], 1, 2.0, 11);
        let mut id = 0;
        let mut counts = [0u64; 4];
        for t in 0..10_000 {
            for p in generate_pois(&model, &map, t, &mut id) {
                counts[p.grid] += 1;
            }
        }
        for c in counts {
            let rate = c as f64 / 10_000.0;
            assert!((rate - 0.5).abs() < 0.025, "per-grid rate {rate} not within 5% of 0.5");
        }
    }

    #[test]
    fn divergent_tag_inverts_mass() {
        let model =
            PoiModel::from_tag(DistributionTag::Divergent, &[10.0, 1.0, 1.0, 1.0], 1, 4.0, 1);
        let row = &model.rate[0];
        assert!(row[0] < row[1]);
        let total: f64 = row.iter().sum();
        assert!((total - 4.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn utility_monotone_and_bounded(d1 in 0u64..50, d2 in 0u64..50,
                                        l1 in 0u64..100, l2 in 0u64..100,
                                        rank in 1u32..=6, p in 1.0f64..3.0) {
            let t = TaskSpec { k: 0, ceiling: 0.8, freshness_horizon: 60, decay_exponent: p, volume_ref: 12 };
            let m = RankModel::default();
            let u = |d, l| data_utility(&t, d, l, rank, &m).unwrap();
            let (dl, dh) = (d1.min(d2), d1.max(d2));
            let (ll, lh) = (l1.min(l2), l1.max(l2));
            // non-decreasing in volume, non-increasing in AoI, within [0, ceiling]
            prop_assert!(u(dl, l1) <= u(dh, l1) + 1e-12);
            prop_assert!(u(d1, ll) + 1e-12 >= u(d1, lh));
            prop_assert!(u(d1, l1) >= 0.0 && u(d1, l1) <= t.ceiling + 1e-12);
        }
    }
}
