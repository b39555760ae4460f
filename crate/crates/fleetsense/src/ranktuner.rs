//! Online LoRA rank selection: hill climbing with direction reversal, plus
//! the greedy and Thompson-sampling comparison strategies.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Shared fleet-wide rank tuner state. One entry of `history` is appended
/// per feedback episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerState {
    pub rank: u32,
    pub direction: i32,
    pub adu_prev: f64,
    pub rank_min: u32,
    pub rank_max: u32,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub episode: u64,
    pub rank: u32,
    pub adu: f64,
}

impl TunerState {
    pub fn new(rank0: u32, direction: i32, rank_min: u32, rank_max: u32) -> Self {
        assert!(direction == 1 || direction == -1);
        assert!((rank_min..=rank_max).contains(&rank0));
        TunerState {
            rank: rank0,
            direction,
            adu_prev: f64::NEG_INFINITY,
            rank_min,
            rank_max,
            history: Vec::new(),
        }
    }

    fn clamp(&self, rank: i64) -> u32 {
        rank.clamp(self.rank_min as i64, self.rank_max as i64) as u32
    }

    fn record(&mut self, adu: f64) {
        let episode = self.history.len() as u64;
        let rank = self.rank;
        self.history.push(HistoryEntry { episode, rank, adu });
    }

    /// Hill climbing with reversal: keep direction while the ADU improves,
    /// otherwise reverse and step back. Ties count as no improvement.
    pub fn ranktuner_step(&mut self, adu_curr: f64) {
        self.record(adu_curr);
        if adu_curr <= self.adu_prev {
            self.direction = -self.direction;
        }
        self.rank = self.clamp(self.rank as i64 + self.direction as i64);
        self.adu_prev = adu_curr;
    }

    /// Greedy variant: step in the current direction only on improvement,
    /// otherwise leave the rank unchanged.
    pub fn greedy_rank_step(&mut self, adu_curr: f64) {
        self.record(adu_curr);
        if adu_curr > self.adu_prev {
            self.rank = self.clamp(self.rank as i64 + self.direction as i64);
        }
        self.adu_prev = adu_curr;
    }

    /// Modal rank over the last `n` history entries.
    pub fn modal_rank(&self, n: usize) -> Option<u32> {
        let tail = &self.history[self.history.len().saturating_sub(n)..];
        if tail.is_empty() {
            return None;
        }
        let mut counts = std::collections::BTreeMap::new();
        for e in tail {
            *counts.entry(e.rank).or_insert(0usize) += 1;
        }
        counts.into_iter().max_by_key(|&(rank, c)| (c, std::cmp::Reverse(rank))).map(|(r, _)| r)
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from("episode,rank,adu\n");
        for e in &self.history {
            s.push_str(&format!("{},{},{}\n", e.episode, e.rank, e.adu));
        }
        s
    }
}

/// Per-rank Gaussian posterior for Thompson sampling over ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThompsonState {
    pub rank_min: u32,
    pub rank_max: u32,
    /// Per rank: (running mean, running M2, observation count).
    pub stats: Vec<(f64, f64, u64)>,
    pub prior_variance: f64,
}

impl ThompsonState {
    pub fn new(rank_min: u32, rank_max: u32) -> Self {
        assert!(rank_min <= rank_max);
        ThompsonState {
            rank_min,
            rank_max,
            stats: vec![(0.0, 0.0, 0); (rank_max - rank_min + 1) as usize],
            prior_variance: 1.0,
        }
    }

    fn idx(&self, rank: u32) -> usize {
        (rank - self.rank_min) as usize
    }

    /// Record the observed ADU for the rank just used, then sample a value
    /// per rank from its posterior and return the argmax (lowest rank on
    /// ties).
    pub fn step(&mut self, rank_used: u32, adu_curr: f64, rng: &mut impl Rng) -> u32 {
        let i = self.idx(rank_used);
        let (mean, m2, n) = self.stats[i];
        let n1 = n + 1;
        let delta = adu_curr - mean;
        let mean1 = mean + delta / n1 as f64;
        let m21 = m2 + delta * (adu_curr - mean1);
        self.stats[i] = (mean1, m21, n1);

        let mut best = (f64::NEG_INFINITY, self.rank_min);
        for rank in self.rank_min..=self.rank_max {
            let (mean, m2, n) = self.stats[self.idx(rank)];
            let (mu, var) = if n == 0 {
                (0.0, self.prior_variance)
            } else {
                let sample_var = if n > 1 { m2 / (n - 1) as f64 } else { self.prior_variance };
                (mean, sample_var / n as f64)
            };
            let draw = if var > 0.0 {
                mu + var.sqrt() * standard_normal(rng)
            } else {
                mu
            };
            if draw > best.0 {
                best = (draw, rank);
            }
        }
        best.1
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}
