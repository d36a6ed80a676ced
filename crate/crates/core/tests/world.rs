use std::collections::HashSet;

use proptest::prelude::*;
use tvc_core::rng;
use tvc_core::world::{
    build_world, generate_episodes, landmark_signatures, mean_style_distance, Dataset, EnvironmentGraph, SceneSplit,
    Split, WorldConfig,
};

/// Every simple path from `from` to `to`, by depth-first enumeration.
fn all_simple_paths(g: &EnvironmentGraph, from: usize, to: usize) -> Vec<Vec<usize>> {
    fn walk(g: &EnvironmentGraph, path: &mut Vec<usize>, to: usize, seen: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        let u = *path.last().unwrap();
        if u == to {
            out.push(path.clone());
            return;
        }
        for e in &g.nodes[u].neighbors {
            if !seen[e.node] {
                seen[e.node] = true;
                path.push(e.node);
                walk(g, path, to, seen, out);
                path.pop();
                seen[e.node] = false;
            }
        }
    }
    let mut seen = vec![false; g.num_nodes()];
    seen[from] = true;
    let mut out = Vec::new();
    walk(g, &mut vec![from], to, &mut seen, &mut out);
    out
}

fn oracle_length(g: &EnvironmentGraph, from: usize, to: usize) -> f64 {
    all_simple_paths(g, from, to)
        .iter()
        .map(|p| g.path_length(p).unwrap())
        .fold(f64::INFINITY, f64::min)
}

fn fifteen_node_world(seed: u64) -> Vec<EnvironmentGraph> {
    let cfg = WorldConfig {
        seen_scenes: 3,
        unseen_scenes: 1,
        min_nodes: 15,
        max_nodes: 15,
        min_hops: 2,
        max_hops: 5,
        ..WorldConfig::default()
    };
    build_world(&cfg, seed).unwrap().scenes
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn teacher_matches_path_enumeration_oracle() {
    let graphs = fifteen_node_world(21);
    let mut r = rng::stream(5, "test/queries");
    let mut checked = 0;
    while checked < 100 {
        let g = &graphs[checked % graphs.len()];
        let n = g.num_nodes();
        let (a, b) = (rand::Rng::random_range(&mut r, 0..n), rand::Rng::random_range(&mut r, 0..n));
        let got = g.teacher_action(a, b).unwrap();
        if a == b {
            assert_eq!(got, g.stop_action());
        } else {
            let paths = all_simple_paths(g, a, b);
            let best = paths.iter().map(|p| g.path_length(p).unwrap()).fold(f64::INFINITY, f64::min);
            let expect = paths
                .iter()
                .filter(|p| g.path_length(p).unwrap() <= best + 1e-9)
                .map(|p| g.sector_towards(a, p[1]).unwrap())
                .min()
                .unwrap();
            assert_eq!(got, expect, "scene {} {a}->{b}", g.scene_id);
            assert!((g.distance(a, b).unwrap() - best).abs() < 1e-9);
        }
        checked += 1;
    }
}

#[test]
fn greedy_teacher_reaches_target_in_shortest_hops() {
    for g in fifteen_node_world(4) {
        for a in 0..g.num_nodes() {
            for b in 0..g.num_nodes() {
                let path = g.shortest_path(a, b).unwrap();
                assert_eq!(path[0], a);
                assert_eq!(*path.last().unwrap(), b);
                let len = g.path_length(&path).unwrap();
                assert!((len - g.distance(a, b).unwrap()).abs() < 1e-9);
                // a path of equal length with fewer hops would contradict the teacher walk
                let min_hops = all_simple_paths(&g, a, b)
                    .iter()
                    .filter(|p| g.path_length(p).unwrap() <= len + 1e-9)
                    .map(|p| p.len())
                    .min()
                    .unwrap();
                assert!(path.len() <= min_hops || a == b);
            }
        }
    }
}

#[test]
fn default_scenes_are_connected_with_valid_degrees() {
    let cfg = WorldConfig { seen_scenes: 6, unseen_scenes: 4, ..WorldConfig::default() };
    let w = build_world(&cfg, 8).unwrap();
    assert_eq!(w.scenes.len(), 10);
    for g in &w.scenes {
        assert!((20..=40).contains(&g.num_nodes()));
        let mut reached = vec![false; g.num_nodes()];
        let mut stack = vec![0];
        reached[0] = true;
        while let Some(u) = stack.pop() {
            for e in &g.nodes[u].neighbors {
                if !reached[e.node] {
                    reached[e.node] = true;
                    stack.push(e.node);
                }
            }
        }
        assert!(reached.iter().all(|r| *r), "{} disconnected", g.scene_id);
        for node in &g.nodes {
            let deg = node.neighbors.len();
            assert!(deg >= 2 && deg <= g.views());
            let sectors: HashSet<usize> = node.neighbors.iter().map(|e| e.sector).collect();
            assert_eq!(sectors.len(), deg);
            for e in &node.neighbors {
                assert_eq!(g.edge_length(e.node, node.node_id), Some(e.length));
                assert!(e.length > 0.0);
            }
        }
    }
}

#[test]
fn neighbour_sectors_resemble_landmark_signatures() {
    let cfg = WorldConfig { seen_scenes: 4, unseen_scenes: 2, noise_sigma: 0.1, ..WorldConfig::default() };
    let seed = 13;
    let w = build_world(&cfg, seed).unwrap();
    let (sigs, _) = landmark_signatures(&cfg, seed);
    let mut total = 0.0;
    let mut count = 0;
    for g in &w.scenes {
        for n in 0..g.num_nodes() {
            let obs = g.observe(n).unwrap();
            for e in &g.nodes[n].neighbors {
                total += cosine(obs.row(e.sector), &sigs[g.nodes[e.node].landmark]);
                count += 1;
            }
        }
    }
    let mean = total / count as f64;
    assert!(mean > 0.5, "mean cosine {mean}");
}

#[test]
fn observe_is_pure_and_mask_matches_degree() {
    let w = build_world(&WorldConfig { seen_scenes: 2, unseen_scenes: 1, ..WorldConfig::default() }, 2).unwrap();
    for g in &w.scenes {
        for n in 0..g.num_nodes() {
            let a = g.observe(n).unwrap();
            assert_eq!(a, g.observe(n).unwrap());
            assert_eq!(a.navigable.iter().filter(|m| **m).count(), g.nodes[n].neighbors.len());
        }
    }
}

#[test]
fn shift_increases_mean_style_distance() {
    let mut prev = 0.0;
    for shift in [0.0, 0.25, 0.5, 1.0, 2.0] {
        let cfg = WorldConfig { seen_scenes: 5, unseen_scenes: 3, min_nodes: 10, max_nodes: 12, shift, ..WorldConfig::default() };
        let d = mean_style_distance(&build_world(&cfg, 17).unwrap());
        assert!(d >= prev - 1e-12, "shift {shift}: {d} < {prev}");
        prev = d;
    }
}

#[test]
fn episodes_follow_shortest_paths_and_name_landmarks_in_order() {
    let graphs = fifteen_node_world(30);
    let refs: Vec<&EnvironmentGraph> = graphs.iter().collect();
    let names: Vec<String> = build_world(&WorldConfig::default(), 0).unwrap().landmark_names;
    let eps = generate_episodes(&refs, 6, Split::Train, (2, 5), &names, 1, &HashSet::new()).unwrap();
    assert_eq!(eps.len(), 6 * graphs.len());
    for ep in &eps {
        let g = graphs.iter().find(|g| g.scene_id == ep.scene_id).unwrap();
        assert_ne!(ep.start, ep.target);
        assert!((2..=5).contains(&ep.hops()));
        let len = g.path_length(&ep.gt_path).unwrap();
        assert!((len - oracle_length(g, ep.start, ep.target)).abs() < 1e-9);
        let mentioned: Vec<&String> = ep.instruction.iter().filter(|t| names.contains(t)).collect();
        let expected: Vec<&String> = ep.gt_path[1..].iter().map(|&n| &names[g.nodes[n].landmark]).collect();
        assert_eq!(mentioned, expected);
    }
}

#[test]
fn one_episode_per_scene_gives_one_per_scene() {
    let cfg = WorldConfig { seen_scenes: 6, unseen_scenes: 4, ..WorldConfig::default() };
    let w = build_world(&cfg, 3).unwrap();
    let refs: Vec<&EnvironmentGraph> = w.scenes.iter().collect();
    let eps = generate_episodes(&refs, 1, Split::ValSeen, (4, 7), &w.landmark_names, 0, &HashSet::new()).unwrap();
    assert_eq!(eps.len(), 10);
}

#[test]
fn dataset_splits_are_disjoint_and_encodable() {
    let cfg = WorldConfig { seen_scenes: 4, unseen_scenes: 2, ..WorldConfig::default() };
    let w = build_world(&cfg, 6).unwrap();
    let d = Dataset::generate(&w, 6).unwrap();
    let vocab = w.vocabulary();
    let train: HashSet<(String, usize, usize)> = d.train.iter().map(|e| (e.scene_id.clone(), e.start, e.target)).collect();
    for e in &d.val_seen {
        assert!(!train.contains(&(e.scene_id.clone(), e.start, e.target)));
        assert_eq!(w.scene(&e.scene_id).unwrap().split, SceneSplit::Seen);
    }
    for e in &d.val_unseen {
        assert_eq!(w.scene(&e.scene_id).unwrap().split, SceneSplit::Unseen);
    }
    for e in d.train.iter().chain(&d.val_seen).chain(&d.val_unseen) {
        vocab.encode(&e.instruction).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn worlds_are_deterministic(seed in 0u64..1000) {
        let cfg = WorldConfig { seen_scenes: 2, unseen_scenes: 1, min_nodes: 10, max_nodes: 14, max_hops: 5, ..WorldConfig::default() };
        let a = build_world(&cfg, seed).unwrap();
        let b = build_world(&cfg, seed).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
    }
}
