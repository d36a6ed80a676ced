use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::{Observation, SceneSplit, WorldError};

/// Edge from a viewpoint to one of its neighbours.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub node: usize,
    pub sector: usize,
    /// Meters.
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub node_id: usize,
    pub position: [f64; 2],
    /// Landmark standing at this viewpoint.
    pub landmark: usize,
    pub neighbors: Vec<Neighbor>,
    /// `views x feature_dim`, row-major.
    pub view_features: Vec<f64>,
    /// Landmark visible through each navigable sector.
    pub landmark_tags: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GraphRecord {
    scene_id: String,
    split: SceneSplit,
    seed: u64,
    num_views_per_panorama: usize,
    feature_dim: usize,
    style_vector: Vec<f64>,
    nodes: Vec<Viewpoint>,
}

/// Viewpoint graph of one scene. Immutable after construction; all-pairs
/// geodesic distances are computed on construction and on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphRecord", into = "GraphRecord")]
pub struct EnvironmentGraph {
    pub scene_id: String,
    pub split: SceneSplit,
    pub seed: u64,
    pub num_views_per_panorama: usize,
    pub feature_dim: usize,
    pub style_vector: Vec<f64>,
    pub nodes: Vec<Viewpoint>,
    dist: Vec<f64>,
    mean_edge: f64,
}

impl From<EnvironmentGraph> for GraphRecord {
    fn from(g: EnvironmentGraph) -> Self {
        GraphRecord {
            scene_id: g.scene_id,
            split: g.split,
            seed: g.seed,
            num_views_per_panorama: g.num_views_per_panorama,
            feature_dim: g.feature_dim,
            style_vector: g.style_vector,
            nodes: g.nodes,
        }
    }
}

impl TryFrom<GraphRecord> for EnvironmentGraph {
    type Error = WorldError;
    fn try_from(r: GraphRecord) -> Result<Self, WorldError> {
        EnvironmentGraph::new(
            r.scene_id,
            r.split,
            r.seed,
            r.num_views_per_panorama,
            r.feature_dim,
            r.style_vector,
            r.nodes,
        )
    }
}

/// Sector of the direction `from -> to` when the panorama is split into
/// `views` equal angular slices starting at the +x axis.
pub fn sector_of(from: [f64; 2], to: [f64; 2], views: usize) -> usize {
    let angle = (to[1] - from[1]).atan2(to[0] - from[0]).rem_euclid(2.0 * PI);
    ((angle / (2.0 * PI / views as f64)).floor() as usize).min(views - 1)
}

pub fn heading(from: [f64; 2], to: [f64; 2]) -> f64 {
    (to[1] - from[1]).atan2(to[0] - from[0])
}

impl EnvironmentGraph {
    pub fn new(
        scene_id: String,
        split: SceneSplit,
        seed: u64,
        views: usize,
        feature_dim: usize,
        style_vector: Vec<f64>,
        nodes: Vec<Viewpoint>,
    ) -> Result<Self, WorldError> {
        let mut g = Self {
            scene_id,
            split,
            seed,
            num_views_per_panorama: views,
            feature_dim,
            style_vector,
            nodes,
            dist: Vec::new(),
            mean_edge: 0.0,
        };
        g.validate()?;
        g.dist = g.all_pairs();
        let (total, count) = g
            .nodes
            .iter()
            .flat_map(|n| n.neighbors.iter().map(|e| e.length))
            .fold((0.0, 0usize), |(s, c), l| (s + l, c + 1));
        g.mean_edge = total / count as f64;
        if g.dist.iter().any(|d| d.is_infinite()) {
            return Err(WorldError::InvalidGraph(format!("scene {} is not connected", g.scene_id)));
        }
        Ok(g)
    }

    fn validate(&self) -> Result<(), WorldError> {
        let v = self.num_views_per_panorama;
        let d = self.feature_dim;
        let bad = |msg: String| Err(WorldError::InvalidGraph(format!("scene {}: {msg}", self.scene_id)));
        if self.style_vector.len() != d {
            return bad("style vector length".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.node_id != i {
                return bad(format!("node {i} has id {}", n.node_id));
            }
            if n.view_features.len() != v * d || n.landmark_tags.len() != v {
                return bad(format!("node {i} feature shape"));
            }
            if n.neighbors.len() < 2 || n.neighbors.len() > v {
                return bad(format!("node {i} has degree {}", n.neighbors.len()));
            }
            let mut used = vec![false; v];
            for e in &n.neighbors {
                if e.node >= self.nodes.len() || e.sector >= v || used[e.sector] || !(e.length > 0.0) {
                    return bad(format!("node {i} has an invalid edge"));
                }
                used[e.sector] = true;
                let back = self.nodes[e.node].neighbors.iter().find(|b| b.node == i);
                match back {
                    Some(b) if b.length == e.length => {}
                    _ => return bad(format!("edge {i}-{} is not symmetric", e.node)),
                }
            }
        }
        Ok(())
    }

    fn all_pairs(&self) -> Vec<f64> {
        let n = self.nodes.len();
        let mut dist = vec![f64::INFINITY; n * n];
        for (i, node) in self.nodes.iter().enumerate() {
            dist[i * n + i] = 0.0;
            for e in &node.neighbors {
                dist[i * n + e.node] = e.length;
            }
        }
        for k in 0..n {
            for i in 0..n {
                let dik = dist[i * n + k];
                if dik.is_infinite() {
                    continue;
                }
                for j in 0..n {
                    let via = dik + dist[k * n + j];
                    if via < dist[i * n + j] {
                        dist[i * n + j] = via;
                    }
                }
            }
        }
        // symmetrise so that d(a,b) == d(b,a) bitwise
        for i in 0..n {
            for j in i + 1..n {
                let m = dist[i * n + j].min(dist[j * n + i]);
                dist[i * n + j] = m;
                dist[j * n + i] = m;
            }
        }
        dist
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn views(&self) -> usize {
        self.num_views_per_panorama
    }

    /// Index of the STOP action (one past the last sector).
    pub fn stop_action(&self) -> usize {
        self.num_views_per_panorama
    }

    fn check(&self, node: usize) -> Result<(), WorldError> {
        if node < self.nodes.len() {
            Ok(())
        } else {
            Err(WorldError::UnknownNode { scene: self.scene_id.clone(), node })
        }
    }

    /// Geodesic distance in meters.
    pub fn distance(&self, a: usize, b: usize) -> Result<f64, WorldError> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.dist[a * self.nodes.len() + b])
    }

    pub fn edge_length(&self, a: usize, b: usize) -> Option<f64> {
        self.nodes.get(a)?.neighbors.iter().find(|e| e.node == b).map(|e| e.length)
    }

    pub fn neighbor_in_sector(&self, node: usize, sector: usize) -> Option<usize> {
        self.nodes.get(node)?.neighbors.iter().find(|e| e.sector == sector).map(|e| e.node)
    }

    pub fn sector_towards(&self, node: usize, to: usize) -> Option<usize> {
        self.nodes.get(node)?.neighbors.iter().find(|e| e.node == to).map(|e| e.sector)
    }

    pub fn mean_edge_length(&self) -> f64 {
        self.mean_edge
    }

    /// Success threshold: 1.5 times the mean edge length of the scene.
    pub fn success_radius(&self) -> f64 {
        1.5 * self.mean_edge
    }

    /// Raw panoramic features and navigability mask at `node`.
    pub fn observe(&self, node: usize) -> Result<Observation, WorldError> {
        self.check(node)?;
        let vp = &self.nodes[node];
        let mut navigable = vec![false; self.num_views_per_panorama];
        for e in &vp.neighbors {
            navigable[e.sector] = true;
        }
        Ok(Observation {
            views: self.num_views_per_panorama,
            dim: self.feature_dim,
            features: vp.view_features.clone(),
            navigable,
        })
    }

    /// Sector of the shortest-path next hop towards `target`, or the STOP
    /// action when already there. Ties go to the lowest sector.
    pub fn teacher_action(&self, current: usize, target: usize) -> Result<usize, WorldError> {
        self.check(current)?;
        self.check(target)?;
        if current == target {
            return Ok(self.stop_action());
        }
        let mut best: Option<(f64, usize)> = None;
        let mut edges: Vec<&Neighbor> = self.nodes[current].neighbors.iter().collect();
        edges.sort_by_key(|e| e.sector);
        for e in edges {
            let remaining = e.length + self.dist[e.node * self.nodes.len() + target];
            match best {
                Some((b, _)) if remaining >= b - 1e-9 => {}
                _ => best = Some((remaining, e.sector)),
            }
        }
        Ok(best.expect("validated graphs have neighbours").1)
    }

    /// Node sequence obtained by following the teacher from `start`.
    pub fn shortest_path(&self, start: usize, target: usize) -> Result<Vec<usize>, WorldError> {
        let mut path = vec![start];
        let mut node = start;
        while node != target {
            let sector = self.teacher_action(node, target)?;
            node = self.neighbor_in_sector(node, sector).expect("teacher picks navigable sectors");
            path.push(node);
            if path.len() > self.nodes.len() {
                return Err(WorldError::InvalidGraph("teacher does not terminate".into()));
            }
        }
        Ok(path)
    }

    /// Sum of edge lengths along consecutive nodes; `None` if two
    /// consecutive nodes are not adjacent.
    pub fn path_length(&self, path: &[usize]) -> Option<f64> {
        path.windows(2).try_fold(0.0, |acc, w| {
            if w[0] == w[1] {
                Some(acc)
            } else {
                self.edge_length(w[0], w[1]).map(|l| acc + l)
            }
        })
    }
}
