//! Per-slot order stream: CSV replay from taxi-trip records or a synthetic
//! Poisson process over a spatial rate matrix.

use std::path::Path;

use chrono::NaiveDateTime;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridMap, Order};

#[derive(Debug, Error)]
pub enum DemandError {
    #[error("cannot open csv file {0}: {1}")]
    MissingFile(String, std::io::Error),
    #[error("csv is missing required column `{0}`")]
    MissingColumn(String),
    #[error("csv produced no usable orders")]
    EmptyResult,
    #[error("csv read error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DemandMode {
    CsvReplay,
    #[default]
    Synthetic,
}

/// Synthetic demand: expected orders per slot per grid, with a linear
/// distance-based price model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandModel {
    pub mode: DemandMode,
    /// G-length vector of Poisson rates (Synthetic mode).
    pub rate: Vec<f64>,
    pub price_base: f64,
    pub price_per_step: f64,
    pub seed: u64,
}

impl DemandModel {
    pub fn uniform(map: &GridMap, per_grid_rate: f64, seed: u64) -> Self {
        DemandModel {
            mode: DemandMode::Synthetic,
            rate: vec![per_grid_rate; map.num_grids()],
            price_base: 2.0,
            price_per_step: 1.0,
            seed,
        }
    }
}

/// Substream seed for (seed, t, g): splitmix64 over the packed key, so each
/// grid/slot pair draws from an independent deterministic stream.
pub(crate) fn substream(seed: u64, t: u64, g: u64) -> u64 {
    let mut x = seed ^ t.wrapping_mul(0x9e3779b97f4a7c15) ^ g.wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

pub(crate) fn poisson_count(rng: &mut impl Rng, rate: f64) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive finite rate").sample(rng) as u64
}

/// Generate the synthetic orders appearing at slot `t`. `next_id` supplies
/// unique ids and is advanced per emitted order.
pub fn generate_orders(
    model: &DemandModel,
    map: &GridMap,
    t: u64,
    expiry_slots: u64,
    next_id: &mut u64,
) -> Vec<Order> {
    let grids = map.num_grids();
    assert_eq!(model.rate.len(), grids, "rate vector length must equal G");
    let mut out = Vec::new();
    for g in 0..grids {
        let mut rng = ChaCha8Rng::seed_from_u64(substream(model.seed, t, g as u64));
        let count = poisson_count(&mut rng, model.rate[g]);
        for _ in 0..count {
            // Destination uniform over all grids != origin.
            let destination = if grids == 1 {
                g
            } else {
                let d = rng.gen_range(0..grids - 1);
                if d >= g { d + 1 } else { d }
            };
            let travel_time = map.manhattan(g, destination).max(1) as u64;
            out.push(Order {
                id: *next_id,
                origin: g,
                destination,
                price: model.price_base + model.price_per_step * travel_time as f64,
                created_at: t,
                travel_time,
                expiry_slots,
            });
            *next_id += 1;
        }
    }
    out
}

/// Ingest a taxi-trip CSV into a sorted order stream. Rows with endpoints
/// outside the bbox, non-positive fares, or unparseable fields are dropped
/// and counted.
pub struct IngestResult {
    pub orders: Vec<Order>,
    pub dropped: u64,
}

const REQUIRED_COLUMNS: [&str; 6] = [
    "pickup_datetime",
    "pickup_latitude",
    "pickup_longitude",
    "dropoff_latitude",
    "dropoff_longitude",
    "fare_amount",
];

pub fn ingest_csv(
    path: &Path,
    map: &GridMap,
    slot_seconds: u64,
    expiry_slots: u64,
) -> Result<IngestResult, DemandError> {
    assert!(slot_seconds >= 1);
    let file = std::fs::File::open(path)
        .map_err(|e| DemandError::MissingFile(path.display().to_string(), e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    let mut col = std::collections::HashMap::new();
    for name in REQUIRED_COLUMNS {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DemandError::MissingColumn(name.to_string()))?;
        col.insert(name, idx);
    }

    let parse_dt = |s: &str| -> Option<NaiveDateTime> {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
            .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
            .ok()
    };

    let mut rows: Vec<(NaiveDateTime, usize, usize, f64)> = Vec::new();
    let mut dropped = 0u64;
    for record in reader.records() {
        let record = record?;
        let parsed = (|| -> Option<(NaiveDateTime, usize, usize, f64)> {
            let dt = parse_dt(record.get(col["pickup_datetime"])?)?;
            let plat: f64 = record.get(col["pickup_latitude"])?.trim().parse().ok()?;
            let plon: f64 = record.get(col["pickup_longitude"])?.trim().parse().ok()?;
            let dlat: f64 = record.get(col["dropoff_latitude"])?.trim().parse().ok()?;
            let dlon: f64 = record.get(col["dropoff_longitude"])?.trim().parse().ok()?;
            let fare: f64 = record.get(col["fare_amount"])?.trim().parse().ok()?;
            if fare <= 0.0 {
                return None;
            }
            let origin = map.bin_coordinate(plat, plon).ok()??;
            let destination = map.bin_coordinate(dlat, dlon).ok()??;
            Some((dt, origin, destination, fare))
        })();
        match parsed {
            Some(row) => rows.push(row),
            None => dropped += 1,
        }
    }
    if rows.is_empty() {
        return Err(DemandError::EmptyResult);
    }

    let start = rows.iter().map(|r| r.0).min().expect("non-empty");
    let mut orders: Vec<Order> = rows
        .into_iter()
        .enumerate()
        .map(|(i, (dt, origin, destination, fare))| {
            let created_at = ((dt - start).num_seconds() as u64) / slot_seconds;
            Order {
                id: i as u64,
                origin,
                destination,
                price: fare,
                created_at,
                travel_time: map.manhattan(origin, destination).max(1) as u64,
                expiry_slots,
            }
        })
        .collect();
    orders.sort_by_key(|o| (o.created_at, o.id));
    Ok(IngestResult { orders, dropped })
}

/// Serialize orders to a JSONL cache, one order object per line.
pub fn write_order_cache(path: &Path, orders: &[Order]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for o in orders {
        serde_json::to_writer(&mut f, o)?;
        writeln!(f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bbox, Connectivity};
    use std::io::Write;

    fn map() -> GridMap {
        GridMap::new(4, 4, Connectivity::VonNeumann4)
            .with_bbox(Bbox { min_lat: 0.0, max_lat: 4.0, min_lon: 0.0, max_lon: 4.0 })
    }

    #[test]
    fn zero_rate_generates_nothing() {
        let model = DemandModel::uniform(&map(), 0.0, 7);
        let mut id = 0;
        for t in 0..20 {
            assert!(generate_orders(&model, &map(), t, 15, &mut id).is_empty());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let model = DemandModel::uniform(&map(), 1.5, 42);
        let (mut a, mut b) = (0, 0);
        let x = generate_orders(&model, &map(), 9, 15, &mut a);
        let y = generate_orders(&model, &map(), 9, 15, &mut b);
        assert_eq!(serde_json::to_string(&x).unwrap(), serde_json::to_string(&y).unwrap());
    }

    #[test]
    fn generated_orders_satisfy_invariants() {
        let model = DemandModel::uniform(&map(), 2.0, 1);
        let mut id = 0;
        for t in 0..50 {
            for o in generate_orders(&model, &map(), t, 15, &mut id) {
                assert!(o.price >= 0.0);
                assert!(o.travel_time >= 1);
                assert_ne!(o.origin, o.destination);
                assert_eq!(o.created_at, t);
                assert!(o.is_valid_at(t));
            }
        }
    }

    #[test]
    fn poisson_empirical_mean() {
        // rate 3 on a single grid; LLN check over 10k slots
        let m = GridMap::new(1, 2, Connectivity::VonNeumann4);
        let mut model = DemandModel::uniform(&m, 0.0, 99);
        model.rate[0] = 3.0;
        let mut id = 0;
        let total: u64 = (0..10_000)
            .map(|t| generate_orders(&model, &m, t, 15, &mut id).len() as u64)
            .sum();
        let mean = total as f64 / 10_000.0;
        assert!((2.9..=3.1).contains(&mean), "mean {mean} outside [2.9, 3.1]");
    }

    fn write_fixture(dir: &std::path::Path, rows: &[&str]) -> std::path::PathBuf {
        let path = dir.join("trips.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(
            f,
            "pickup_datetime,pickup_latitude,pickup_longitude,dropoff_latitude,dropoff_longitude,fare_amount"
        )
        .unwrap();
        for r in rows {
            writeln!(f, "{r}").unwrap();
        }
        path
    }

    #[test]
    fn ingest_drops_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = vec![];
        for i in 0..8 {
            rows.push(format!("2015-01-01 00:0{i}:00,0.5,0.5,2.5,1.5,10.0"));
        }
        rows.push("2015-01-01 00:09:00,9.5,0.5,2.5,1.5,10.0".to_string()); // out of bbox
        rows.push("2015-01-01 00:09:30,0.5,-1.0,2.5,1.5,10.0".to_string()); // out of bbox
        let refs: Vec<&str> = rows.iter().map(|s| s.as_str()).collect();
        let path = write_fixture(dir.path(), &refs);
        let res = ingest_csv(&path, &map(), 60, 15).unwrap();
        assert_eq!(res.orders.len(), 8);
        assert_eq!(res.dropped, 2);
    }

    #[test]
    fn ingest_same_cell_travel_time_floor() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), &["2015-01-01 00:00:00,0.5,0.5,0.6,0.4,5.0"]);
        let res = ingest_csv(&path, &map(), 60, 15).unwrap();
        assert_eq!(res.orders[0].travel_time, 1);
    }

    #[test]
    fn ingest_manhattan_and_fare() {
        // (0.5,0.5) -> cell (0,0); (2.5,1.5) -> cell (2,1): distance 2+1 = 3
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), &["2015-01-01 00:00:00,0.5,0.5,2.5,1.5,12.5"]);
        let res = ingest_csv(&path, &map(), 60, 15).unwrap();
        assert_eq!(res.orders[0].price, 12.5);
        assert_eq!(res.orders[0].travel_time, 3);
    }

    #[test]
    fn ingest_sorted_and_slotted() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(
            dir.path(),
            &[
                "2015-01-01 00:03:30,0.5,0.5,2.5,1.5,4.0",
                "2015-01-01 00:00:00,0.5,0.5,2.5,1.5,4.0",
                "2015-01-01 00:01:10,0.5,0.5,2.5,1.5,4.0",
            ],
        );
        let res = ingest_csv(&path, &map(), 60, 15).unwrap();
        let slots: Vec<u64> = res.orders.iter().map(|o| o.created_at).collect();
        assert_eq!(slots, vec![0, 1, 3]);
    }

    #[test]
    fn ingest_error_paths() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest_csv(&dir.path().join("nope.csv"), &map(), 60, 15),
            Err(DemandError::MissingFile(..))
        ));
        let path = dir.path().join("badcols.csv");
        std::fs::write(&path, "a,b,c\n1,2,3\n").unwrap();
        assert!(matches!(
            ingest_csv(&path, &map(), 60, 15),
            Err(DemandError::MissingColumn(..))
        ));
        let path2 = write_fixture(dir.path(), &["2015-01-01 00:00:00,9.0,9.0,9.0,9.0,1.0"]);
        assert!(matches!(ingest_csv(&path2, &map(), 60, 15), Err(DemandError::EmptyResult)));
    }
}
