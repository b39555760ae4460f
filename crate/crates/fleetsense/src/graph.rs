//! Topology-graph construction from an environment snapshot and the R-GCN
//! that turns it into fixed-width per-vehicle state embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Env;
use crate::grid::Phase;
use crate::nn::{ParamStore, Tape, TensorId};

/// Typed node classes, in global node-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeType {
    Shortcut,
    Grid,
    Vehicle,
    Order,
    Poi,
}

/// Directed edge relations. Both directions of each association are kept
/// as distinct relations so information reaches the vehicle rows.
pub const NUM_RELATIONS: usize = 9;
pub const REL_VEHICLE_TO_GRID: usize = 0;
pub const REL_GRID_TO_VEHICLE: usize = 1;
pub const REL_ORDER_TO_GRID: usize = 2;
pub const REL_GRID_TO_ORDER: usize = 3;
pub const REL_POI_TO_GRID: usize = 4;
pub const REL_GRID_TO_POI: usize = 5;
pub const REL_GRID_TO_GRID: usize = 6;
pub const REL_SHORTCUT_TO_GRID: usize = 7;
pub const REL_GRID_TO_SHORTCUT: usize = 8;

/// Normalization bounds for raw features. Taken from config, not data, so
/// features stay stationary during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBounds {
    pub max_price: f64,
    pub max_travel_time: f64,
    pub max_order_age: f64,
    pub max_aoi: f64,
    pub max_volume: f64,
    pub max_count: f64,
}

impl FeatureBounds {
    pub fn from_env(env: &Env) -> Self {
        let map = &env.config.map;
        let diameter = (map.rows + map.cols) as f64;
        let max_price = (env.config.demand.price_base
            + env.config.demand.price_per_step * diameter)
            .max(25.0);
        let max_aoi = env
            .config
            .tasks
            .iter()
            .map(|t| t.freshness_horizon)
            .max()
            .unwrap_or(60) as f64;
        FeatureBounds {
            max_price,
            max_travel_time: diameter.max(1.0),
            max_order_age: env.config.expiry_slots as f64,
            max_aoi,
            max_volume: env.config.pois.volume_max as f64,
            max_count: 10.0,
        }
    }
}

/// Raw feature matrix for one node type.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Typed-node, typed-edge snapshot of the world at one slot.
#[derive(Debug, Clone)]
pub struct TopologyGraph {
    pub num_grids: usize,
    pub num_vehicles: usize,
    pub num_orders: usize,
    pub num_pois: usize,
    /// Raw features in node order: shortcut, grid, vehicle, order, poi.
    pub shortcut: FeatureBlock,
    pub grid: FeatureBlock,
    pub vehicle: FeatureBlock,
    pub order: FeatureBlock,
    pub poi: FeatureBlock,
    /// Per relation: (src, dst) pairs over global node indices.
    pub relations: Vec<Vec<(usize, usize)>>,
}

impl TopologyGraph {
    pub fn num_nodes(&self) -> usize {
        1 + self.num_grids + self.num_vehicles + self.num_orders + self.num_pois
    }

    pub fn grid_node(&self, g: usize) -> usize {
        1 + g
    }

    pub fn vehicle_node(&self, m: usize) -> usize {
        1 + self.num_grids + m
    }

    pub fn order_node(&self, i: usize) -> usize {
        1 + self.num_grids + self.num_vehicles + i
    }

    pub fn poi_node(&self, i: usize) -> usize {
        1 + self.num_grids + self.num_vehicles + self.num_orders + i
    }

    /// Drop the shortcut relations; used to test message-passing locality.
    pub fn remove_shortcut_edges(&mut self) {
        self.relations[REL_SHORTCUT_TO_GRID].clear();
        self.relations[REL_GRID_TO_SHORTCUT].clear();
    }

    /// Relabel nodes of one type by `perm` (new position i holds old node
    /// perm[i]): feature rows move with their nodes and edges are remapped.
    pub fn permute_type(&mut self, ty: NodeType, perm: &[usize]) {
        let block = match ty {
            NodeType::Shortcut => return,
            NodeType::Grid => &mut self.grid,
            NodeType::Vehicle => &mut self.vehicle,
            NodeType::Order => &mut self.order,
            NodeType::Poi => &mut self.poi,
        };
        assert_eq!(perm.len(), block.rows);
        let c = block.cols;
        let mut data = Vec::with_capacity(block.data.len());
        for &old in perm {
            data.extend_from_slice(&block.data[old * c..(old + 1) * c]);
        }
        block.data = data;
        // inverse map: old local index -> new local index
        let mut inv = vec![0usize; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let base = match ty {
            NodeType::Shortcut => 0,
            NodeType::Grid => 1,
            NodeType::Vehicle => 1 + self.num_grids,
            NodeType::Order => 1 + self.num_grids + self.num_vehicles,
            NodeType::Poi => 1 + self.num_grids + self.num_vehicles + self.num_orders,
        };
        let end = base + perm.len();
        for rel in &mut self.relations {
            for (s, d) in rel.iter_mut() {
                if (base..end).contains(s) {
                    *s = base + inv[*s - base];
                }
                if (base..end).contains(d) {
                    *d = base + inv[*d - base];
                }
            }
        }
    }
}

fn one_hot(len: usize, idx: usize) -> impl Iterator<Item = f64> {
    (0..len).map(move |i| if i == idx { 1.0 } else { 0.0 })
}

/// Build the topology graph from the current environment state.
pub fn build_graph(env: &Env, bounds: &FeatureBounds) -> TopologyGraph {
    let map = &env.config.map;
    let g = map.num_grids();
    let m = env.config.num_vehicles;
    let k = env.config.tasks.len();
    let t = env.t;

    // shortcut: constant scalar feature
    let shortcut = FeatureBlock { rows: 1, cols: 1, data: vec![1.0] };

    // grid: counts + one-hot id
    let mut order_count = vec![0u64; g];
    for o in &env.orders {
        order_count[o.origin] += 1;
    }
    let mut poi_count = vec![0u64; g];
    for p in &env.pois {
        poi_count[p.grid] += 1;
    }
    let mut avail_count = vec![0u64; g];
    for v in &env.vehicles {
        if v.available() {
            avail_count[v.grid] += 1;
        }
    }
    let mut grid_data = Vec::with_capacity(g * (g + 3));
    for i in 0..g {
        grid_data.push(order_count[i] as f64 / bounds.max_count);
        grid_data.push(avail_count[i] as f64 / bounds.max_count);
        grid_data.push(poi_count[i] as f64 / bounds.max_count);
        grid_data.extend(one_hot(g, i));
    }
    let grid = FeatureBlock { rows: g, cols: g + 3, data: grid_data };

    // vehicle: coords, phase one-hot, episode progress, agent one-hot
    let mut vehicle_data = Vec::with_capacity(m * (m + 6));
    for v in &env.vehicles {
        let (r, c) = map.norm_coords(v.grid);
        vehicle_data.push(r);
        vehicle_data.push(c);
        let phase = match v.phase {
            Phase::Available => 0,
            Phase::Serving => 1,
            Phase::Collecting => 2,
        };
        vehicle_data.extend(one_hot(3, phase));
        vehicle_data.push(t as f64 / env.config.horizon as f64);
        vehicle_data.extend(one_hot(m, v.id));
    }
    let vehicle = FeatureBlock { rows: m, cols: m + 6, data: vehicle_data };

    // order: price, age, travel time (normalized), origin/dest coords
    let mut order_data = Vec::with_capacity(env.orders.len() * 7);
    for o in &env.orders {
        order_data.push(o.price / bounds.max_price);
        order_data.push((t - o.created_at) as f64 / bounds.max_order_age);
        order_data.push(o.travel_time as f64 / bounds.max_travel_time);
        let (or, oc) = map.norm_coords(o.origin);
        let (dr, dc) = map.norm_coords(o.destination);
        order_data.extend([or, oc, dr, dc]);
    }
    let order = FeatureBlock { rows: env.orders.len(), cols: 7, data: order_data };

    // poi: volume, aoi, task one-hot, coords
    let mut poi_data = Vec::with_capacity(env.pois.len() * (k + 4));
    for p in &env.pois {
        poi_data.push(p.volume as f64 / bounds.max_volume);
        poi_data.push(p.aoi(t) as f64 / bounds.max_aoi);
        poi_data.extend(one_hot(k, p.task));
        let (r, c) = map.norm_coords(p.grid);
        poi_data.extend([r, c]);
    }
    let poi = FeatureBlock { rows: env.pois.len(), cols: k + 4, data: poi_data };

    let mut graph = TopologyGraph {
        num_grids: g,
        num_vehicles: m,
        num_orders: env.orders.len(),
        num_pois: env.pois.len(),
        shortcut,
        grid,
        vehicle,
        order,
        poi,
        relations: vec![Vec::new(); NUM_RELATIONS],
    };

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); NUM_RELATIONS];
    for v in &env.vehicles {
        let vn = graph.vehicle_node(v.id);
        let gn = graph.grid_node(v.grid);
        edges[REL_VEHICLE_TO_GRID].push((vn, gn));
        edges[REL_GRID_TO_VEHICLE].push((gn, vn));
    }
    for (i, o) in env.orders.iter().enumerate() {
        let on = graph.order_node(i);
        let gn = graph.grid_node(o.origin);
        edges[REL_ORDER_TO_GRID].push((on, gn));
        edges[REL_GRID_TO_ORDER].push((gn, on));
    }
    for (i, p) in env.pois.iter().enumerate() {
        let pn = graph.poi_node(i);
        let gn = graph.grid_node(p.grid);
        edges[REL_POI_TO_GRID].push((pn, gn));
        edges[REL_GRID_TO_POI].push((gn, pn));
    }
    for a in 0..g {
        for &b in map.neighbors(a).expect("in range").iter().skip(1) {
            edges[REL_GRID_TO_GRID].push((graph.grid_node(a), graph.grid_node(b)));
        }
    }
    for a in 0..g {
        edges[REL_SHORTCUT_TO_GRID].push((0, graph.grid_node(a)));
        edges[REL_GRID_TO_SHORTCUT].push((graph.grid_node(a), 0));
    }
    graph.relations = edges;
    graph
}

/// R-GCN shape configuration. The per-relation weights live in a
/// [`ParamStore`] under the `gcn.` prefix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RgcnConfig {
    pub hidden: usize,
    pub output: usize,
}

impl Default for RgcnConfig {
    fn default() -> Self {
        RgcnConfig { hidden: 128, output: 10 }
    }
}

const TYPE_NAMES: [&str; 5] = ["shortcut", "grid", "vehicle", "order", "poi"];

pub struct Rgcn {
    pub config: RgcnConfig,
    /// Raw feature width per node type, in TYPE_NAMES order.
    pub input_dims: [usize; 5],
}

impl Rgcn {
    /// Feature widths for a world with G grids, M vehicles, K task types.
    pub fn input_dims(g: usize, m: usize, k: usize) -> [usize; 5] {
        [1, g + 3, m + 6, 7, k + 4]
    }

    pub fn declare(
        store: &mut ParamStore,
        config: RgcnConfig,
        input_dims: [usize; 5],
        rng: &mut impl Rng,
    ) -> Rgcn {
        for (name, dim) in TYPE_NAMES.iter().zip(input_dims) {
            store.declare(&format!("gcn.proj.{name}.w"), dim, config.hidden, rng);
            store.declare_zeros(&format!("gcn.proj.{name}.b"), 1, config.hidden);
        }
        for (layer, out) in [(0, config.hidden), (1, config.output)] {
            store.declare(&format!("gcn.l{layer}.self"), config.hidden, out, rng);
            for r in 0..NUM_RELATIONS {
                store.declare(&format!("gcn.l{layer}.rel{r}"), config.hidden, out, rng);
            }
            store.declare_zeros(&format!("gcn.l{layer}.b"), 1, out);
        }
        Rgcn { config, input_dims }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for name in TYPE_NAMES {
            names.push(format!("gcn.proj.{name}.w"));
            names.push(format!("gcn.proj.{name}.b"));
        }
        for layer in 0..2 {
            names.push(format!("gcn.l{layer}.self"));
            for r in 0..NUM_RELATIONS {
                names.push(format!("gcn.l{layer}.rel{r}"));
            }
            names.push(format!("gcn.l{layer}.b"));
        }
        names
    }

    /// Run the two-layer propagation and return the vehicle-node rows of
    /// the final layer: an M x output matrix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        leaves: &std::collections::HashMap<String, TensorId>,
        graph: &TopologyGraph,
    ) -> TensorId {
        let blocks = [&graph.shortcut, &graph.grid, &graph.vehicle, &graph.order, &graph.poi];
        let mut projected = Vec::new();
        for (name, block) in TYPE_NAMES.iter().zip(blocks) {
            assert_eq!(
                block.cols,
                self.input_dims[TYPE_NAMES.iter().position(|n| n == name).unwrap()],
                "feature width mismatch for node type {name}"
            );
            if block.rows == 0 {
                continue;
            }
            let x = tape.leaf(block.rows, block.cols, block.data.clone());
            let w = leaves[&format!("gcn.proj.{name}.w")];
            let b = leaves[&format!("gcn.proj.{name}.b")];
            let h = tape.matmul(x, w);
            projected.push((block.rows, tape.add_bias(h, b)));
        }
        let parts: Vec<TensorId> = projected.iter().map(|&(_, id)| id).collect();
        let mut h = tape.concat_rows(&parts);
        let n = graph.num_nodes();
        debug_assert_eq!(tape.shape(h).0, n);

        for layer in 0..2 {
            let w_self = leaves[&format!("gcn.l{layer}.self")];
            let mut acc = tape.matmul(h, w_self);
            for (r, edges) in graph.relations.iter().enumerate() {
                if edges.is_empty() {
                    continue;
                }
                let srcs: Vec<usize> = edges.iter().map(|&(s, _)| s).collect();
                let dsts: Vec<usize> = edges.iter().map(|&(_, d)| d).collect();
                let msg = tape.gather_rows(h, &srcs);
                let agg = tape.segment_mean(msg, &dsts, n);
                let w_r = leaves[&format!("gcn.l{layer}.rel{r}")];
                let term = tape.matmul(agg, w_r);
                acc = tape.add(acc, term);
            }
            let b = leaves[&format!("gcn.l{layer}.b")];
            h = tape.add_bias(acc, b);
            if layer == 0 {
                h = tape.relu(h);
            }
        }
        let vehicle_rows: Vec<usize> =
            (0..graph.num_vehicles).map(|m| graph.vehicle_node(m)).collect();
        tape.gather_rows(h, &vehicle_rows)
    }
}
