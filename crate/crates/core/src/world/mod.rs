//! Procedurally generated viewpoint graphs, templated instructions and
//! the seen/unseen scene splits.
//!
//! Every viewpoint carries a panoramic observation of `views` sectors with
//! `feature_dim` features each. A navigable sector shows the landmark of the
//! neighbour it leads to; every feature row is
//!
//! ```text
//! signature(landmark) + scene jitter(landmark) + style(scene) + noise
//! ```
//!
//! Unseen scenes draw their style vector from a distribution whose mean is
//! offset by `shift` (per-dimension RMS) along a fixed direction, and every
//! scene draws fresh landmark jitter, so landmark appearance in unseen scenes
//! was never observed during training.

mod episodes;
mod graph;
mod io;

pub use episodes::{generate_episodes, Dataset, Episode, Split};
pub use graph::{heading, sector_of, EnvironmentGraph, Neighbor, Viewpoint};
pub use io::{EpisodeFile, WorldFile, EPISODE_FORMAT, FORMAT_VERSION, WORLD_FORMAT};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

use crate::rng::{self, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("unknown node {node} in scene {scene}")]
    UnknownNode { scene: String, node: usize },
    #[error("unknown scene `{0}`")]
    SceneMissing(String),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("world format: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneSplit {
    Seen,
    Unseen,
}

/// Raw panoramic observation at one viewpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub views: usize,
    pub dim: usize,
    /// `views x dim`, row-major.
    pub features: Vec<f64>,
    pub navigable: Vec<bool>,
}

impl Observation {
    pub fn row(&self, sector: usize) -> &[f64] {
        &self.features[sector * self.dim..(sector + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seen_scenes: usize,
    pub unseen_scenes: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Sectors per panorama.
    pub views: usize,
    pub feature_dim: usize,
    /// Number of landmark nouns used (at most the built-in list size).
    pub landmarks: usize,
    /// Per-dimension std of scene style vectors.
    pub style_sigma: f64,
    /// Per-dimension RMS offset of unseen style vectors.
    pub shift: f64,
    /// Per-element observation noise std.
    pub noise_sigma: f64,
    /// Per-dimension std of the per-scene landmark appearance jitter.
    pub landmark_jitter: f64,
    /// Typical distance between neighbouring viewpoints, meters.
    pub node_spacing: f64,
    pub min_hops: usize,
    pub max_hops: usize,
    pub train_per_scene: usize,
    pub val_seen_per_scene: usize,
    pub val_unseen_per_scene: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seen_scenes: 20,
            unseen_scenes: 10,
            min_nodes: 20,
            max_nodes: 40,
            views: 12,
            feature_dim: 32,
            landmarks: 40,
            style_sigma: 0.3,
            shift: 0.5,
            noise_sigma: 0.1,
            landmark_jitter: 0.3,
            node_spacing: 2.0,
            min_hops: 4,
            max_hops: 7,
            train_per_scene: 50,
            val_seen_per_scene: 5,
            val_unseen_per_scene: 10,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let fail = |m: &str| Err(WorldError::InvalidConfig(m.to_string()));
        if self.seen_scenes == 0 || self.unseen_scenes == 0 {
            return fail("scene counts must be positive");
        }
        if self.views < 4 {
            return fail("views must be at least 4");
        }
        if self.feature_dim < 8 {
            return fail("feature_dim must be at least 8");
        }
        if self.min_nodes < 4 || self.min_nodes > self.max_nodes {
            return fail("node range must satisfy 4 <= min_nodes <= max_nodes");
        }
        if self.min_hops == 0 || self.min_hops > self.max_hops || self.max_hops >= self.min_nodes {
            return fail("hop range must satisfy 1 <= min_hops <= max_hops < min_nodes");
        }
        if self.landmarks < 8 || self.landmarks > episodes::LANDMARK_NOUNS.len() {
            return fail("landmarks must be between 8 and the built-in noun count");
        }
        let reals = [self.style_sigma, self.shift, self.noise_sigma, self.landmark_jitter];
        if reals.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return fail("noise and shift magnitudes must be finite and non-negative");
        }
        if !(self.node_spacing > 0.0 && self.node_spacing.is_finite()) {
            return fail("node_spacing must be positive");
        }
        if self.train_per_scene == 0 || self.val_seen_per_scene == 0 || self.val_unseen_per_scene == 0 {
            return fail("episodes per scene must be positive");
        }
        Ok(())
    }
}

/// Fixed instruction vocabulary for a given landmark count.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(landmarks: usize) -> Self {
        let tokens: Vec<String> = episodes::FUNCTION_WORDS
            .iter()
            .chain(episodes::LANDMARK_NOUNS.iter().take(landmarks))
            .map(|s| s.to_string())
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize, WorldError> {
        self.index.get(token).copied().ok_or_else(|| WorldError::UnknownToken(token.to_string()))
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>, WorldError> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

/// All scenes of one generated world.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub landmark_names: Vec<String>,
    pub scenes: Vec<EnvironmentGraph>,
}

impl World {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.config.landmarks)
    }

    pub fn scene(&self, scene_id: &str) -> Result<&EnvironmentGraph, WorldError> {
        self.scenes
            .iter()
            .find(|s| s.scene_id == scene_id)
            .ok_or_else(|| WorldError::SceneMissing(scene_id.to_string()))
    }

    pub fn scenes_of(&self, split: SceneSplit) -> impl Iterator<Item = &EnvironmentGraph> {
        self.scenes.iter().filter(move |s| s.split == split)
    }
}

fn normal_vec(rng: &mut Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Mean Euclidean distance between every seen and every unseen style.
pub fn mean_style_distance(world: &World) -> f64 {
    let seen: Vec<&EnvironmentGraph> = world.scenes_of(SceneSplit::Seen).collect();
    let unseen: Vec<&EnvironmentGraph> = world.scenes_of(SceneSplit::Unseen).collect();
    let mut total = 0.0;
    for a in &seen {
        for b in &unseen {
            total += euclid(&a.style_vector, &b.style_vector);
        }
    }
    total / (seen.len() * unseen.len()) as f64
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Shared landmark appearance vectors plus the appearance of a wall
/// (non-navigable sector), all unit-variance Gaussian.
pub fn landmark_signatures(config: &WorldConfig, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = config.feature_dim;
    let mut sig_rng = rng::stream(seed, "world/signatures");
    let signatures = (0..config.landmarks).map(|_| normal_vec(&mut sig_rng, d, 1.0)).collect();
    let wall = normal_vec(&mut sig_rng, d, 1.0);
    (signatures, wall)
}

/// Generates every scene of the world. Deterministic in `(config, seed)`.
pub fn build_world(config: &WorldConfig, seed: u64) -> Result<World, WorldError> {
    config.validate()?;
    let d = config.feature_dim;
    let (signatures, wall) = landmark_signatures(config, seed);

    let total = config.seen_scenes + config.unseen_scenes;
    let mut style_rng = rng::stream(seed, "world/styles");
    let base_styles: Vec<Vec<f64>> = (0..total).map(|_| normal_vec(&mut style_rng, d, config.style_sigma)).collect();

    // The shift direction is oriented so that the mean seen/unseen style
    // distance is non-decreasing in the shift magnitude: that distance is
    // convex in the magnitude, so a non-negative slope at zero suffices.
    let mut dir = normal_vec(&mut rng::stream(seed, "world/shift"), d, 1.0);
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|x| *x /= norm);
    let mut slope = 0.0;
    for a in &base_styles[..config.seen_scenes] {
        for b in &base_styles[config.seen_scenes..] {
            let delta: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
            let len = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
            if len > 0.0 {
                slope += delta.iter().zip(&dir).map(|(x, u)| x * u).sum::<f64>() / len;
            }
        }
    }
    if slope < 0.0 {
        dir.iter_mut().for_each(|x| *x = -*x);
    }
    let offset = config.shift * (d as f64).sqrt();

    let landmark_names: Vec<String> =
        episodes::LANDMARK_NOUNS.iter().take(config.landmarks).map(|s| s.to_string()).collect();
    let mut scenes = Vec::with_capacity(total);
    for (i, base) in base_styles.into_iter().enumerate() {
        let (split, id) = if i < config.seen_scenes {
            (SceneSplit::Seen, format!("seen-{i:03}"))
        } else {
            (SceneSplit::Unseen, format!("unseen-{:03}", i - config.seen_scenes))
        };
        let style: Vec<f64> = match split {
            SceneSplit::Seen => base,
            SceneSplit::Unseen => base.iter().zip(&dir).map(|(b, u)| b + offset * u).collect(),
        };
        let scene_seed = rng::next_seed(&mut rng::substream(seed, "world/scene", i as u64));
        let graph = generate_scene(config, id, split, scene_seed, style, &signatures, &wall)?;
        scenes.push(graph);
    }
    Ok(World { config: config.clone(), seed, landmark_names, scenes })
}

/// Builds one scene from its own seed; the same inputs regenerate the same
/// graph bit-exactly.
pub fn generate_scene(
    config: &WorldConfig,
    scene_id: String,
    split: SceneSplit,
    scene_seed: u64,
    style: Vec<f64>,
    signatures: &[Vec<f64>],
    wall: &[f64],
) -> Result<EnvironmentGraph, WorldError> {
    let mut rng = rng::stream(scene_seed, "scene");
    let v = config.views;
    let d = config.feature_dim;
    for _attempt in 0..200 {
        let Some((positions, adjacency)) = layout(config, &mut rng) else { continue };
        let Some(landmarks) = assign_landmarks(&adjacency, config.landmarks, &mut rng) else { continue };
        let jitter: Vec<Vec<f64>> = (0..config.landmarks).map(|_| normal_vec(&mut rng, d, config.landmark_jitter)).collect();
        let mut nodes = Vec::with_capacity(positions.len());
        for (i, p) in positions.iter().enumerate() {
            let mut neighbors: Vec<Neighbor> = adjacency[i]
                .iter()
                .map(|&j| {
                    let q = positions[j];
                    let length = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                    Neighbor { node: j, sector: sector_of(*p, q, v), length }
                })
                .collect();
            neighbors.sort_by_key(|e| e.sector);
            let mut tags = vec![None; v];
            for e in &neighbors {
                tags[e.sector] = Some(landmarks[e.node]);
            }
            let mut features = Vec::with_capacity(v * d);
            for tag in &tags {
                for k in 0..d {
                    let base = match tag {
                        Some(l) => signatures[*l][k] + jitter[*l][k],
                        None => wall[k],
                    };
                    let noise: f64 = rng.sample(StandardNormal);
                    features.push(base + style[k] + config.noise_sigma * noise);
                }
            }
            nodes.push(Viewpoint {
                node_id: i,
                position: *p,
                landmark: landmarks[i],
                neighbors,
                view_features: features,
                landmark_tags: tags,
            });
        }
        return EnvironmentGraph::new(scene_id, split, scene_seed, v, d, style, nodes);
    }
    Err(WorldError::InvalidConfig(format!(
        "could not lay out scene {scene_id} with {} views; try more views or fewer nodes",
        v
    )))
}

type Layout = (Vec<[f64; 2]>, Vec<Vec<usize>>);

/// Random positions plus an undirected adjacency in which every node has
/// degree in `[2, views]` with one neighbour per sector, and the graph is
/// connected.
fn layout(config: &WorldConfig, rng: &mut Rng) -> Option<Layout> {
    let v = config.views;
    let n = rng.random_range(config.min_nodes..=config.max_nodes);
    let spacing = config.node_spacing;
    let side = spacing * (n as f64).sqrt() * 1.2;
    let mut pos: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut tries = 0;
    while pos.len() < n {
        tries += 1;
        if tries > 200 * n {
            return None;
        }
        let p = [rng.random_range(0.0..side), rng.random_range(0.0..side)];
        let min_sep = 0.6 * spacing;
        if pos.iter().all(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) >= min_sep * min_sep) {
            pos.push(p);
        }
    }
    let dist = |a: usize, b: usize| ((pos[a][0] - pos[b][0]).powi(2) + (pos[a][1] - pos[b][1]).powi(2)).sqrt();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut occupied = vec![vec![false; v]; n];
    let mut connect = |a: usize, b: usize, adj: &mut Vec<Vec<usize>>| -> bool {
        if a == b || adj[a].contains(&b) {
            return false;
        }
        let sa = sector_of(pos[a], pos[b], v);
        let sb = sector_of(pos[b], pos[a], v);
        if occupied[a][sa] || occupied[b][sb] {
            return false;
        }
        occupied[a][sa] = true;
        occupied[b][sb] = true;
        adj[a].push(b);
        adj[b].push(a);
        true
    };
    let by_distance = |a: usize| {
        let mut others: Vec<usize> = (0..n).filter(|&b| b != a).collect();
        others.sort_by(|&x, &y| dist(a, x).total_cmp(&dist(a, y)));
        others
    };
    for a in 0..n {
        for b in by_distance(a) {
            if adj[a].len() >= 3 || dist(a, b) > 1.8 * spacing {
                break;
            }
            connect(a, b, &mut adj);
        }
    }
    loop {
        let comp = components(&adj);
        if comp.iter().all(|&c| c == 0) {
            break;
        }
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if comp[a] == 0 && comp[b] != 0 {
                    pairs.push((a, b));
                }
            }
        }
        pairs.sort_by(|x, y| dist(x.0, x.1).total_cmp(&dist(y.0, y.1)));
        if !pairs.into_iter().any(|(a, b)| connect(a, b, &mut adj)) {
            return None;
        }
    }
    for a in 0..n {
        if adj[a].len() >= 2 {
            continue;
        }
        if !by_distance(a).into_iter().any(|b| connect(a, b, &mut adj)) {
            return None;
        }
    }
    Some((pos, adj))
}

fn components(adj: &[Vec<usize>]) -> Vec<usize> {
    let mut comp = vec![usize::MAX; adj.len()];
    let mut next = 0;
    for s in 0..adj.len() {
        if comp[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        comp[s] = next;
        while let Some(u) = stack.pop() {
            for &w in &adj[u] {
                if comp[w] == usize::MAX {
                    comp[w] = next;
                    stack.push(w);
                }
            }
        }
        next += 1;
    }
    comp
}

/// Distance-2 colouring: a node, its neighbours and its neighbours'
/// neighbours all carry distinct landmarks.
fn assign_landmarks(adj: &[Vec<usize>], count: usize, rng: &mut Rng) -> Option<Vec<usize>> {
    let n = adj.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut label = vec![usize::MAX; n];
    for &u in &order {
        let mut forbidden = vec![false; count];
        for &w in &adj[u] {
            if label[w] != usize::MAX {
                forbidden[label[w]] = true;
            }
            for &x in &adj[w] {
                if x != u && label[x] != usize::MAX {
                    forbidden[label[x]] = true;
                }
            }
        }
        let allowed: Vec<usize> = (0..count).filter(|&l| !forbidden[l]).collect();
        label[u] = *allowed.as_slice().choose(rng)?;
    }
    Some(label)
}
