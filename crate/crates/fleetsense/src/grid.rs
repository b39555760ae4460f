//! Grid-world geometry and the domain value types shared by every module.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid index {0} out of range (G = {1})")]
    IndexOutOfRange(usize, usize),
    #[error("map has no bounding box configured")]
    MissingBbox,
}

/// Lattice connectivity for vehicle dispatch moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Connectivity {
    #[default]
    VonNeumann4,
    Moore8,
}

/// Geographic bounding box used to bin raw coordinates into grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

/// The discretized target area: a rows x cols lattice of grids, row-major
/// indexed, with optional geographic extent for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub connectivity: Connectivity,
    #[serde(default)]
    pub bbox: Option<Bbox>,
}

impl GridMap {
    pub fn new(rows: usize, cols: usize, connectivity: Connectivity) -> Self {
        assert!(rows >= 1 && cols >= 1, "grid must have at least one cell");
        GridMap { rows, cols, connectivity, bbox: None }
    }

    pub fn with_bbox(mut self, bbox: Bbox) -> Self {
        self.bbox = Some(bbox);
        self
    }

    /// Total number of grids G.
    pub fn num_grids(&self) -> usize {
        self.rows * self.cols
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn row_col(&self, g: usize) -> (usize, usize) {
        (g / self.cols, g % self.cols)
    }

    /// Grid coordinates normalized to [0, 1], for feature vectors.
    pub fn norm_coords(&self, g: usize) -> (f64, f64) {
        let (r, c) = self.row_col(g);
        (
            r as f64 / (self.rows.max(2) - 1) as f64,
            c as f64 / (self.cols.max(2) - 1) as f64,
        )
    }

    /// The neighborhood N(g): g itself followed by adjacent grids in fixed
    /// order (N, S, W, E, then NW, NE, SW, SE for Moore8). Off-lattice
    /// entries are omitted.
    pub fn neighbors(&self, g: usize) -> Result<Vec<usize>, GridError> {
        let grids = self.num_grids();
        if g >= grids {
            return Err(GridError::IndexOutOfRange(g, grids));
        }
        let (r, c) = self.row_col(g);
        let mut out = vec![g];
        for (dr, dc) in self.offsets() {
            let nr = r as isize + dr;
            let nc = c as isize + dc;
            if nr >= 0 && nr < self.rows as isize && nc >= 0 && nc < self.cols as isize {
                out.push(self.index(nr as usize, nc as usize));
            }
        }
        Ok(out)
    }

    fn offsets(&self) -> &'static [(isize, isize)] {
        match self.connectivity {
            Connectivity::VonNeumann4 => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Moore8 => &[
                (-1, 0),
                (1, 0),
                (0, -1),
                (0, 1),
                (-1, -1),
                (-1, 1),
                (1, -1),
                (1, 1),
            ],
        }
    }

    /// Number of directional move offsets (excluding stay).
    pub fn num_directions(&self) -> usize {
        self.offsets().len()
    }

    /// Bin a geographic coordinate into a cell. Points exactly on the max
    /// edge bin into the last row/column; points outside the bbox yield
    /// `Ok(None)`.
    pub fn bin_coordinate(&self, lat: f64, lon: f64) -> Result<Option<usize>, GridError> {
        let bbox = self.bbox.ok_or(GridError::MissingBbox)?;
        if !lat.is_finite() || !lon.is_finite() {
            return Ok(None);
        }
        if lat < bbox.min_lat || lat > bbox.max_lat || lon < bbox.min_lon || lon > bbox.max_lon {
            return Ok(None);
        }
        let frac_r = (lat - bbox.min_lat) / (bbox.max_lat - bbox.min_lat);
        let frac_c = (lon - bbox.min_lon) / (bbox.max_lon - bbox.min_lon);
        let row = ((frac_r * self.rows as f64) as usize).min(self.rows - 1);
        let col = ((frac_c * self.cols as f64) as usize).min(self.cols - 1);
        Ok(Some(self.index(row, col)))
    }

    /// Manhattan distance between two grids, in lattice steps.
    pub fn manhattan(&self, a: usize, b: usize) -> usize {
        let (ar, ac) = self.row_col(a);
        let (br, bc) = self.row_col(b);
        ar.abs_diff(br) + ac.abs_diff(bc)
    }
}

/// A ride request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub id: u64,
    pub origin: usize,
    pub destination: usize,
    pub price: f64,
    pub created_at: u64,
    pub travel_time: u64,
    pub expiry_slots: u64,
}

impl Order {
    /// An order is valid at slot t iff created_at <= t < created_at + expiry_slots.
    pub fn is_valid_at(&self, t: u64) -> bool {
        t >= self.created_at && t < self.created_at + self.expiry_slots
    }
}

/// A data point-of-interest: a grid-located batch of task-typed sensing data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: u64,
    pub grid: usize,
    pub task: usize,
    pub volume: u64,
    pub created_at: u64,
}

impl Poi {
    /// Age of information at slot t.
    pub fn aoi(&self, t: u64) -> u64 {
        t.saturating_sub(self.created_at)
    }
}

/// Vehicle availability phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Available,
    Serving,
    Collecting,
}

/// Per-vehicle simulator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: usize,
    pub grid: usize,
    pub phase: Phase,
    /// Slot at which the current job ends and the vehicle is available again.
    pub busy_until: u64,
    /// Grid where the vehicle reappears when the job ends.
    pub release_grid: usize,
}

impl VehicleState {
    pub fn available(&self) -> bool {
        self.phase == Phase::Available
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map4() -> GridMap {
        GridMap::new(4, 4, Connectivity::VonNeumann4)
    }

    #[test]
    fn neighbors_corner() {
        // corner (0,0): self, S, E
        let n = map4().neighbors(0).unwrap();
        assert_eq!(n.len(), 3);
        assert_eq!(n[0], 0);
        assert!(n.contains(&4) && n.contains(&1));
    }

    #[test]
    fn neighbors_interior() {
        let g = map4().index(1, 1);
        assert_eq!(map4().neighbors(g).unwrap().len(), 5);
    }

    #[test]
    fn neighbors_degenerate() {
        let m = GridMap::new(1, 1, Connectivity::Moore8);
        assert_eq!(m.neighbors(0).unwrap(), vec![0]);
    }

    #[test]
    fn neighbors_out_of_range() {
        assert_eq!(map4().neighbors(16), Err(GridError::IndexOutOfRange(16, 16)));
    }

    #[test]
    fn neighbors_moore8_interior() {
        let m = GridMap::new(4, 4, Connectivity::Moore8);
        assert_eq!(m.neighbors(m.index(2, 2)).unwrap().len(), 9);
    }

    #[test]
    fn bin_quadrant_midpoint() {
        let m = GridMap::new(2, 2, Connectivity::VonNeumann4)
            .with_bbox(Bbox { min_lat: 0.0, max_lat: 1.0, min_lon: 0.0, max_lon: 1.0 });
        assert_eq!(m.bin_coordinate(0.25, 0.25).unwrap(), Some(0));
    }

    #[test]
    fn bin_max_edge() {
        let m = GridMap::new(2, 2, Connectivity::VonNeumann4)
            .with_bbox(Bbox { min_lat: 0.0, max_lat: 1.0, min_lon: 0.0, max_lon: 1.0 });
        assert_eq!(m.bin_coordinate(1.0, 1.0).unwrap(), Some(3));
    }

    #[test]
    fn bin_outside() {
        let m = GridMap::new(2, 2, Connectivity::VonNeumann4)
            .with_bbox(Bbox { min_lat: 0.0, max_lat: 1.0, min_lon: 0.0, max_lon: 1.0 });
        assert_eq!(m.bin_coordinate(1.5, 0.5).unwrap(), None);
    }

    #[test]
    fn bin_without_bbox_errors() {
        assert_eq!(map4().bin_coordinate(0.5, 0.5), Err(GridError::MissingBbox));
    }

    #[test]
    fn order_validity_window() {
        let o = Order {
            id: 0,
            origin: 0,
            destination: 1,
            price: 5.0,
            created_at: 10,
            travel_time: 1,
            expiry_slots: 15,
        };
        assert!(!o.is_valid_at(9));
        assert!(o.is_valid_at(10));
        assert!(o.is_valid_at(24));
        assert!(!o.is_valid_at(25));
        assert_eq!((10..=30).filter(|&t| o.is_valid_at(t)).count() as u64, o.expiry_slots);
    }

    proptest! {
        #[test]
        fn neighbors_symmetric(rows in 1usize..6, cols in 1usize..6, moore in any::<bool>()) {
            let conn = if moore { Connectivity::Moore8 } else { Connectivity::VonNeumann4 };
            let m = GridMap::new(rows, cols, conn);
            for g in 0..m.num_grids() {
                for &h in m.neighbors(g).unwrap().iter().skip(1) {
                    prop_assert!(m.neighbors(h).unwrap().contains(&g));
                }
            }
        }

        #[test]
        fn bin_partitions_bbox(lat in 0.0f64..=1.0, lon in 0.0f64..=1.0,
                               rows in 1usize..5, cols in 1usize..5) {
            let m = GridMap::new(rows, cols, Connectivity::VonNeumann4)
                .with_bbox(Bbox { min_lat: 0.0, max_lat: 1.0, min_lon: 0.0, max_lon: 1.0 });
            let g = m.bin_coordinate(lat, lon).unwrap();
            prop_assert!(matches!(g, Some(g) if g < m.num_grids()));
        }
    }
}
