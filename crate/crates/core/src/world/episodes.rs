//! Episodes and the instruction grammar.
//!
//! An instruction walks through every node of the ground-truth path after
//! the start, naming the landmark seen at that node:
//!
//! ```text
//! instruction := VERB "to the" L1 { "then" TURN "to the" Li } "then" TURN "and stop at the" Ln
//! VERB        := "go" | "walk" | "head" | "move"
//! TURN        := "turn left" | "turn right" | "go straight"
//! ```
//!
//! `TURN` is derived from the heading change between consecutive path
//! segments: within ±30° is straight, a counter-clockwise change is left.
//! A single-hop path reduces to `VERB "and stop at the" L1`.

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::f64::consts::PI;

use super::graph::{heading, EnvironmentGraph};
use super::{SceneSplit, World, WorldError};
use crate::rng;

pub(crate) const FUNCTION_WORDS: [&str; 14] = [
    "go", "walk", "head", "move", "to", "the", "then", "turn", "left", "right", "straight", "and", "stop", "at",
];

pub(crate) const LANDMARK_NOUNS: [&str; 40] = [
    "sofa", "table", "chair", "door", "stairs", "lamp", "plant", "window", "bed", "sink", "fridge", "oven", "piano",
    "painting", "mirror", "fireplace", "bathtub", "shower", "toilet", "desk", "bookshelf", "cabinet", "television",
    "rug", "closet", "dresser", "counter", "hallway", "balcony", "archway", "pillar", "statue", "vase", "clock",
    "curtain", "bench", "stool", "shelf", "fountain", "railing",
];

const VERBS: [&str; 4] = ["go", "walk", "head", "move"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValSeen => "val_seen",
            Split::ValUnseen => "val_unseen",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val_seen" => Ok(Split::ValSeen),
            "val_unseen" => Ok(Split::ValUnseen),
            other => Err(WorldError::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub scene_id: String,
    pub instruction: Vec<String>,
    pub start: usize,
    pub target: usize,
    pub gt_path: Vec<usize>,
    pub split: Split,
}

impl Episode {
    pub fn hops(&self) -> usize {
        self.gt_path.len() - 1
    }
}

/// Landmark names of the path nodes after the start, in path order.
pub fn path_landmarks(graph: &EnvironmentGraph, path: &[usize], names: &[String]) -> Vec<String> {
    path[1..].iter().map(|&n| names[graph.nodes[n].landmark].clone()).collect()
}

fn turn_words(graph: &EnvironmentGraph, a: usize, b: usize, c: usize) -> [&'static str; 2] {
    let p = |n: usize| graph.nodes[n].position;
    let mut delta = heading(p(b), p(c)) - heading(p(a), p(b));
    while delta > PI {
        delta -= 2.0 * PI;
    }
    while delta <= -PI {
        delta += 2.0 * PI;
    }
    if delta.abs() < PI / 6.0 {
        ["go", "straight"]
    } else if delta > 0.0 {
        ["turn", "left"]
    } else {
        ["turn", "right"]
    }
}

/// Renders the templated instruction for `path`.
pub fn instruction_for(graph: &EnvironmentGraph, path: &[usize], names: &[String], verb: &str) -> Vec<String> {
    let marks = path_landmarks(graph, path, names);
    let mut out: Vec<String> = vec![verb.to_string()];
    let n = marks.len();
    if n == 1 {
        out.extend(["and", "stop", "at", "the"].map(String::from));
        out.push(marks[0].clone());
        return out;
    }
    out.extend(["to", "the"].map(String::from));
    out.push(marks[0].clone());
    for i in 1..n {
        out.push("then".into());
        out.extend(turn_words(graph, path[i - 1], path[i], path[i + 1]).map(String::from));
        if i + 1 == n {
            out.extend(["and", "stop", "at", "the"].map(String::from));
        } else {
            out.extend(["to", "the"].map(String::from));
        }
        out.push(marks[i].clone());
    }
    out
}

/// Draws `per_scene` episodes from each graph with distinct start/target
/// pairs whose shortest path spans `hops` (inclusive range). Pairs listed in
/// `exclude` as `(scene_id, start, target)` are never drawn.
#[allow(clippy::too_many_arguments)]
pub fn generate_episodes(
    graphs: &[&EnvironmentGraph],
    per_scene: usize,
    split: Split,
    hops: (usize, usize),
    names: &[String],
    seed: u64,
    exclude: &HashSet<(String, usize, usize)>,
) -> Result<Vec<Episode>, WorldError> {
    if per_scene == 0 {
        return Err(WorldError::InvalidConfig("per_scene must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(graphs.len() * per_scene);
    for (gi, graph) in graphs.iter().enumerate() {
        let mut rng = rng::substream(seed, &format!("episodes/{}", split.as_str()), gi as u64);
        let mut candidates = Vec::new();
        for s in 0..graph.num_nodes() {
            for t in 0..graph.num_nodes() {
                if s == t || exclude.contains(&(graph.scene_id.clone(), s, t)) {
                    continue;
                }
                let path = graph.shortest_path(s, t)?;
                let h = path.len() - 1;
                if h >= hops.0 && h <= hops.1 {
                    candidates.push(path);
                }
            }
        }
        if candidates.len() < per_scene {
            return Err(WorldError::InvalidConfig(format!(
                "scene {} has only {} start/target pairs in the hop range, need {per_scene}",
                graph.scene_id,
                candidates.len()
            )));
        }
        candidates.shuffle(&mut rng);
        for (k, path) in candidates.into_iter().take(per_scene).enumerate() {
            let verb = *VERBS.choose(&mut rng).expect("non-empty");
            out.push(Episode {
                episode_id: format!("{}-{}-{k}", graph.scene_id, split.as_str()),
                scene_id: graph.scene_id.clone(),
                instruction: instruction_for(graph, &path, names, verb),
                start: path[0],
                target: *path.last().expect("non-empty path"),
                gt_path: path,
                split,
            });
        }
    }
    Ok(out)
}

/// Train, seen-validation and unseen-validation episodes of one world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Episode>,
    pub val_seen: Vec<Episode>,
    pub val_unseen: Vec<Episode>,
}

impl Dataset {
    /// Builds all three splits. Seen-validation pairs never coincide with
    /// training pairs of the same scene.
    pub fn generate(world: &World, seed: u64) -> Result<Self, WorldError> {
        let cfg = &world.config;
        let hops = (cfg.min_hops, cfg.max_hops);
        let seen: Vec<&EnvironmentGraph> = world.scenes_of(SceneSplit::Seen).collect();
        let unseen: Vec<&EnvironmentGraph> = world.scenes_of(SceneSplit::Unseen).collect();
        let names = &world.landmark_names;
        let none = HashSet::new();
        let train = generate_episodes(&seen, cfg.train_per_scene, Split::Train, hops, names, seed, &none)?;
        let used: HashSet<(String, usize, usize)> =
            train.iter().map(|e| (e.scene_id.clone(), e.start, e.target)).collect();
        let val_seen = generate_episodes(&seen, cfg.val_seen_per_scene, Split::ValSeen, hops, names, seed, &used)?;
        let val_unseen =
            generate_episodes(&unseen, cfg.val_unseen_per_scene, Split::ValUnseen, hops, names, seed, &none)?;
        Ok(Self { train, val_seen, val_unseen })
    }

    pub fn split(&self, split: Split) -> &[Episode] {
        match split {
            Split::Train => &self.train,
            Split::ValSeen => &self.val_seen,
            Split::ValUnseen => &self.val_unseen,
        }
    }
}
