//! Procedural navigation worlds.
//!
//! A world is a small connected graph embedded in a square patch of ground.
//! Nodes are viewpoints with coordinates in meters; edges are traversable
//! hops weighted by Euclidean distance. Every node annotates each of its
//! eight compass sectors with a landmark, which is what instructions talk
//! about and what the navigator steers by.
//!
//! Bearings are measured in degrees clockwise from north (so +x is east at
//! 90 degrees). Sectors are 45-degree wedges centered on the eight compass
//! directions; sector 0 is centered on north. Relative sectors rotate with
//! the agent's heading: 0 is ahead, 1 is 45 degrees right, 4 is behind,
//! 7 is 45 degrees left.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of compass sectors around a node.
pub const NUM_SECTORS: usize = 8;

/// Width of one sector in degrees.
pub const SECTOR_DEG: f64 = 360.0 / NUM_SECTORS as f64;

/// Identifier of a landmark type; an index into the shared landmark lexicon.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct LandmarkId(pub u16);

/// A point in the plane, in meters. `x` grows east, `y` grows north.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Bearing from one point to another, in degrees clockwise from north,
/// normalized to `[0, 360)`. The bearing of a point to itself is 0.
pub fn bearing_deg(from: &Point, to: &Point) -> f64 {
    let dx = to.x - from.x;
    let dy = to.y - from.y;
    if dx == 0.0 && dy == 0.0 {
        return 0.0;
    }
    norm_360(dx.atan2(dy).to_degrees())
}

/// Normalize an angle to `[0, 360)`.
pub fn norm_360(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    if r == 360.0 {
        0.0
    } else {
        r
    }
}

/// Normalize a turn delta to `(-180, 180]`. Positive deltas are clockwise
/// (rightward) turns.
pub fn norm_delta(deg: f64) -> f64 {
    let r = norm_360(deg);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Compass sector of an absolute bearing. Sectors are centered on the
/// eight compass directions, so sector 0 covers `[-22.5, 22.5)` degrees.
pub fn sector_of(bearing_deg: f64) -> u8 {
    (((norm_360(bearing_deg) + SECTOR_DEG / 2.0) / SECTOR_DEG).floor() as usize % NUM_SECTORS)
        as u8
}

/// Relative sector of an absolute bearing as seen under a heading.
///
/// Both angles are snapped to their compass sector first and the sectors
/// are subtracted, so a landmark stored in some compass sector of a node
/// and a candidate edge pointing into that same compass sector always land
/// in the same relative sector, even right at a wedge boundary.
pub fn rel_sector(heading_deg: f64, bearing_deg: f64) -> u8 {
    ((sector_of(bearing_deg) as usize + NUM_SECTORS - sector_of(heading_deg) as usize)
        % NUM_SECTORS) as u8
}

/// Center angle of the relative sector, in signed degrees `(-180, 180]`.
/// Sector 0 is 0 (ahead), sector 2 is +90 (right), sector 6 is -90 (left),
/// sector 4 is 180 (behind).
pub fn rel_sector_center_deg(sector: u8) -> f64 {
    norm_delta(f64::from(sector) * SECTOR_DEG)
}

/// Which dataset split a world belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::ValSeen => "val_seen",
            Split::ValUnseen => "val_unseen",
        })
    }
}

/// A viewpoint in a world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub id: u32,
    pub pos: Point,
    /// Landmarks by compass sector (index 0 = north). Each sector holds a
    /// sorted set of landmark ids; generated worlds place exactly one per
    /// sector, but consumers must not rely on that.
    pub landmarks: [Vec<LandmarkId>; NUM_SECTORS],
}

/// A connected navigation graph with landmark annotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Environment {
    pub env_id: String,
    pub split: Split,
    pub vocab_size: u16,
    pub nodes: Vec<Node>,
    /// Undirected edges as ordered pairs `(a, b)` with `a < b`, sorted.
    pub edges: Vec<(u32, u32)>,
    /// Seed this environment was generated from.
    pub seed: u64,
    #[serde(skip)]
    adjacency: OnceLock<Vec<Vec<u32>>>,
}

/// What the agent perceives standing at a node under a heading.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub node: u32,
    pub heading_deg: f64,
    /// Landmarks by relative sector (index 0 = ahead).
    pub visible: [Vec<LandmarkId>; NUM_SECTORS],
    /// Adjacent nodes, sorted by id.
    pub candidates: Vec<Candidate>,
}

/// An adjacent node as a movement option.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub node: u32,
    /// Signed turn required to face it, degrees in `(-180, 180]`.
    pub delta_deg: f64,
    /// Edge length in meters.
    pub distance: f64,
    /// Relative sector the candidate lies in.
    pub rel_sector: u8,
    /// Landmarks found at the candidate node itself, sorted by id: what
    /// you would see around you after taking this edge.
    pub landmarks: Vec<LandmarkId>,
}

/// Knobs for world generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldGenConfig {
    /// Number of nodes; at least 2.
    pub nodes: usize,
    /// Target mean degree; generation aims for `nodes * mean_degree / 2`
    /// edges and may fall short on tiny graphs.
    pub mean_degree: f64,
    /// Landmark vocabulary size; at least 8 so every sector of a node can
    /// carry a distinct landmark.
    pub vocab_size: u16,
    /// Side of the square patch, meters.
    pub area_m: f64,
}

impl Default for WorldGenConfig {
    fn default() -> Self {
        WorldGenConfig {
            nodes: 30,
            mean_degree: 4.0,
            vocab_size: 40,
            area_m: 30.0,
        }
    }
}

impl WorldGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 2 {
            return Err(Error::InvalidConfig(format!(
                "world needs at least 2 nodes, got {}",
                self.nodes
            )));
        }
        if self.vocab_size < NUM_SECTORS as u16 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} is smaller than the {} sectors of a node",
                self.vocab_size, NUM_SECTORS
            )));
        }
        if !(self.mean_degree >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mean_degree must be at least 1, got {}",
                self.mean_degree
            )));
        }
        if !(self.area_m > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "area_m must be positive, got {}",
                self.area_m
            )));
        }
        Ok(())
    }
}

impl Environment {
    /// Neighbors of each node, sorted by id. Built lazily; not serialized.
    fn adjacency(&self) -> &Vec<Vec<u32>> {
        self.adjacency.get_or_init(|| {
            let mut adj = vec![Vec::new(); self.nodes.len()];
            for &(a, b) in &self.edges {
                adj[a as usize].push(b);
                adj[b as usize].push(a);
            }
            for list in &mut adj {
                list.sort_unstable();
            }
            adj
        })
    }

    pub fn node(&self, id: u32) -> Result<&Node> {
        self.nodes.get(id as usize).ok_or_else(|| Error::UnknownNode {
            env_id: self.env_id.clone(),
            node: id,
        })
    }

    pub fn neighbors(&self, id: u32) -> Result<&[u32]> {
        self.node(id)?;
        Ok(&self.adjacency()[id as usize])
    }

    pub fn are_adjacent(&self, a: u32, b: u32) -> bool {
        a != b
            && (a as usize) < self.nodes.len()
            && self.adjacency()[a as usize].binary_search(&b).is_ok()
    }

    pub fn edge_len(&self, a: u32, b: u32) -> Result<f64> {
        if !self.are_adjacent(a, b) {
            return Err(Error::NotAdjacent {
                env_id: self.env_id.clone(),
                a,
                b,
            });
        }
        Ok(self.node(a)?.pos.dist(&self.node(b)?.pos))
    }

    /// Landmarks at `node` seen from `heading`, re-bucketed into relative
    /// sectors, plus each neighbor as a movement candidate.
    pub fn observation(&self, node: u32, heading_deg: f64) -> Result<Observation> {
        let n = self.node(node)?;
        let heading_sector = sector_of(heading_deg) as usize;
        let mut visible: [Vec<LandmarkId>; NUM_SECTORS] = Default::default();
        for rel in 0..NUM_SECTORS {
            let abs = (heading_sector + rel) % NUM_SECTORS;
            visible[rel] = n.landmarks[abs].clone();
        }
        let candidates = self.adjacency()[node as usize]
            .iter()
            .map(|&nbr| {
                let there = &self.nodes[nbr as usize];
                let bearing = bearing_deg(&n.pos, &there.pos);
                let mut landmarks: Vec<LandmarkId> =
                    there.landmarks.iter().flatten().copied().collect();
                landmarks.sort_unstable();
                Candidate {
                    node: nbr,
                    delta_deg: norm_delta(bearing - heading_deg),
                    distance: n.pos.dist(&there.pos),
                    rel_sector: rel_sector(heading_deg, bearing),
                    landmarks,
                }
            })
            .collect();
        Ok(Observation {
            node,
            heading_deg: norm_360(heading_deg),
            visible,
            candidates,
        })
    }

    /// Metric shortest path by Dijkstra over Euclidean edge weights.
    ///
    /// Exact distance ties are broken toward the lexicographically smaller
    /// node sequence, so the result is a pure function of the graph.
    pub fn shortest_path(&self, start: u32, goal: u32) -> Result<Vec<u32>> {
        self.node(start)?;
        self.node(goal)?;
        if start == goal {
            return Ok(vec![start]);
        }

        #[derive(PartialEq)]
        struct Entry {
            dist: f64,
            path: Vec<u32>,
        }
        impl Eq for Entry {}
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> std::cmp::Ordering {
                // Reversed: BinaryHeap is a max-heap and we want the
                // cheapest (then lexicographically smallest) entry on top.
                other
                    .dist
                    .total_cmp(&self.dist)
                    .then_with(|| other.path.cmp(&self.path))
            }
        }
        impl PartialOrd for Entry {
            fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(other))
            }
        }

        let mut heap = std::collections::BinaryHeap::new();
        let mut done = vec![false; self.nodes.len()];
        heap.push(Entry {
            dist: 0.0,
            path: vec![start],
        });
        while let Some(Entry { dist, path }) = heap.pop() {
            let at = *path.last().expect("paths are never empty");
            if done[at as usize] {
                continue;
            }
            done[at as usize] = true;
            if at == goal {
                return Ok(path);
            }
            for &nbr in &self.adjacency()[at as usize] {
                if done[nbr as usize] {
                    continue;
                }
                let step = self.nodes[at as usize]
                    .pos
                    .dist(&self.nodes[nbr as usize].pos);
                let mut next = path.clone();
                next.push(nbr);
                heap.push(Entry {
                    dist: dist + step,
                    path: next,
                });
            }
        }
        Err(Error::NoPath {
            env_id: self.env_id.clone(),
            start,
            goal,
        })
    }

    /// Hop distances from `start` to every node (BFS). Unreachable nodes
    /// would get `usize::MAX`, but generated worlds are connected.
    pub fn hop_distances(&self, start: u32) -> Result<Vec<usize>> {
        self.node(start)?;
        let mut dist = vec![usize::MAX; self.nodes.len()];
        let mut queue = VecDeque::new();
        dist[start as usize] = 0;
        queue.push_back(start);
        while let Some(at) = queue.pop_front() {
            for &nbr in &self.adjacency()[at as usize] {
                if dist[nbr as usize] == usize::MAX {
                    dist[nbr as usize] = dist[at as usize] + 1;
                    queue.push_back(nbr);
                }
            }
        }
        Ok(dist)
    }

    /// Check the structural invariants every environment must satisfy:
    /// dense node ids, valid sorted edges, no self-loops, connectivity,
    /// and in-vocabulary landmarks.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invariant(format!("{}: {}", self.env_id, msg)));
        if self.nodes.len() < 2 {
            return fail("fewer than 2 nodes".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id as usize != i {
                return fail(format!("node id {} at index {}", node.id, i));
            }
            for sector in &node.landmarks {
                for lm in sector {
                    if lm.0 >= self.vocab_size {
                        return fail(format!(
                            "node {} references landmark {} outside vocab {}",
                            node.id, lm.0, self.vocab_size
                        ));
                    }
                }
                if sector.windows(2).any(|w| w[0] >= w[1]) {
                    return fail(format!("node {} has an unsorted landmark set", node.id));
                }
            }
        }
        let mut prev: Option<(u32, u32)> = None;
        for &(a, b) in &self.edges {
            if a >= b {
                return fail(format!("edge ({a}, {b}) is not ordered"));
            }
            if b as usize >= self.nodes.len() {
                return fail(format!("edge ({a}, {b}) references an unknown node"));
            }
            if let Some(p) = prev {
                if p >= (a, b) {
                    return fail("edges are not sorted and deduplicated".into());
                }
            }
            prev = Some((a, b));
        }
        let hops = self.hop_distances(0)?;
        if hops.iter().any(|&d| d == usize::MAX) {
            return fail("graph is not connected".into());
        }
        Ok(())
    }
}

/// Generate one environment from a config, split, ordinal, and seed.
///
/// Layout: nodes are scattered with a minimum separation, joined by a
/// nearest-neighbor spanning tree, then densified with short edges until
/// the target edge budget is met. Each node then draws eight distinct
/// landmarks, one per compass sector.
pub fn generate_environment(
    config: &WorldGenConfig,
    split: Split,
    index: usize,
    seed: u64,
) -> Result<Environment> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.nodes;

    // Scatter positions with rejection sampling for minimum separation.
    let min_sep = 0.3 * config.area_m / (n as f64).sqrt();
    let mut positions: Vec<Point> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best = Point {
            x: rng.gen_range(0.0..config.area_m),
            y: rng.gen_range(0.0..config.area_m),
        };
        for _attempt in 0..200 {
            if positions.iter().all(|p| p.dist(&best) >= min_sep) {
                break;
            }
            best = Point {
                x: rng.gen_range(0.0..config.area_m),
                y: rng.gen_range(0.0..config.area_m),
            };
        }
        positions.push(best);
    }

    // Spanning tree: visit nodes in random order, hook each to the nearest
    // node already in the tree (ties toward the smaller id).
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut rng);
    let mut edges: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut degree = vec![0usize; n];
    let mut in_tree: Vec<u32> = vec![order[0]];
    for &v in &order[1..] {
        let nearest = in_tree
            .iter()
            .copied()
            .min_by(|&a, &b| {
                positions[a as usize]
                    .dist(&positions[v as usize])
                    .total_cmp(&positions[b as usize].dist(&positions[v as usize]))
                    .then(a.cmp(&b))
            })
            .expect("tree is never empty");
        let e = (nearest.min(v), nearest.max(v));
        edges.insert(e);
        degree[e.0 as usize] += 1;
        degree[e.1 as usize] += 1;
        in_tree.push(v);
    }

    // Densify with short edges. Candidates are all unused pairs sorted by
    // length; each step picks randomly among the three shortest whose
    // endpoints still have degree headroom.
    let target_edges = ((n as f64) * config.mean_degree / 2.0).round() as usize;
    let max_degree = (config.mean_degree.ceil() as usize + 3).max(4);
    let mut candidates: Vec<(f64, u32, u32)> = Vec::new();
    for a in 0..n as u32 {
        for b in (a + 1)..n as u32 {
            if !edges.contains(&(a, b)) {
                candidates.push((positions[a as usize].dist(&positions[b as usize]), a, b));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    while edges.len() < target_edges {
        let open: Vec<usize> = candidates
            .iter()
            .enumerate()
            .filter(|(_, &(_, a, b))| {
                degree[a as usize] < max_degree && degree[b as usize] < max_degree
            })
            .map(|(i, _)| i)
            .take(3)
            .collect();
        if open.is_empty() {
            break;
        }
        let pick = open[rng.gen_range(0..open.len())];
        let (_, a, b) = candidates.remove(pick);
        edges.insert((a, b));
        degree[a as usize] += 1;
        degree[b as usize] += 1;
    }

    // Landmarks: eight distinct draws per node, one per compass sector.
    let mut vocab_pool: Vec<u16> = (0..config.vocab_size).collect();
    let nodes = (0..n as u32)
        .map(|id| {
            vocab_pool.shuffle(&mut rng);
            let mut landmarks: [Vec<LandmarkId>; NUM_SECTORS] = Default::default();
            for (sector, slot) in landmarks.iter_mut().enumerate() {
                slot.push(LandmarkId(vocab_pool[sector]));
            }
            Node {
                id,
                pos: positions[id as usize],
                landmarks,
            }
        })
        .collect();

    let env = Environment {
        env_id: format!("{split}-{index:03}"),
        split,
        vocab_size: config.vocab_size,
        nodes,
        edges: edges.into_iter().collect(),
        seed,
        adjacency: OnceLock::new(),
    };
    env.validate()?;
    Ok(env)
}

/// An indexed collection of environments, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct WorldSet {
    envs: BTreeMap<String, Environment>,
}

impl WorldSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, env: Environment) {
        self.envs.insert(env.env_id.clone(), env);
    }

    pub fn get(&self, env_id: &str) -> Result<&Environment> {
        self.envs
            .get(env_id)
            .ok_or_else(|| Error::UnknownEnvironment(env_id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Environment> {
        self.envs.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.envs.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    /// Environments of one split, in id order.
    pub fn split(&self, split: Split) -> Vec<&Environment> {
        self.envs.values().filter(|e| e.split == split).collect()
    }
}

impl FromIterator<Environment> for WorldSet {
    fn from_iter<I: IntoIterator<Item = Environment>>(iter: I) -> Self {
        let mut set = WorldSet::new();
        for env in iter {
            set.insert(env);
        }
        set
    }
}
