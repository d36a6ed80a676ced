mod common;

use proptest::prelude::*;
use rand::Rng;
use tvc_core::evalkit::{
    cls, compute_metrics, dtw, greedy_metrics, ndtw, run_benchmark, train_runs, Aggregate, StopReason,
    TrajectoryRecord, Variant,
};
use tvc_core::objectives::Switches;
use tvc_core::rng;
use tvc_core::world::{EnvironmentGraph, Episode, Split, World};

use common::{tiny_run_config, tiny_world};

fn world() -> World {
    tiny_world(&tiny_run_config()).0
}

/// Minimum cost over every monotone alignment from (0,0) to (n-1,m-1),
/// enumerated explicitly.
fn brute_dtw(g: &EnvironmentGraph, a: &[usize], b: &[usize]) -> f64 {
    fn walk(g: &EnvironmentGraph, a: &[usize], b: &[usize], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + g.distance(a[i], b[j]).unwrap();
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() {
            walk(g, a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(g, a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(g, a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(g, a, b, 0, 0, 0.0, &mut best);
    best
}

fn random_walk(g: &EnvironmentGraph, r: &mut rng::Rng, len: usize) -> Vec<usize> {
    let mut path = vec![r.random_range(0..g.num_nodes())];
    while path.len() < len {
        let here = *path.last().unwrap();
        let nbrs = &g.nodes[here].neighbors;
        path.push(nbrs[r.random_range(0..nbrs.len())].node);
    }
    path
}

fn record(episode: &Episode, nodes: Vec<usize>) -> TrajectoryRecord {
    TrajectoryRecord {
        episode_id: episode.episode_id.clone(),
        scene_id: episode.scene_id.clone(),
        actions: Vec::new(),
        action_probs: Vec::new(),
        entropies: Vec::new(),
        nodes,
        stop_reason: StopReason::Stopped,
    }
}

#[test]
fn ndtw_matches_exhaustive_alignment() {
    let w = world();
    let mut r = rng::stream(0, "ndtw");
    for case in 0..200 {
        let g = &w.scenes[case % w.scenes.len()];
        let (la, lb) = (r.random_range(1..=8), r.random_range(1..=8));
        let a = random_walk(g, &mut r, la);
        let b = random_walk(g, &mut r, lb);
        let d_th = g.success_radius();
        let brute = (-brute_dtw(g, &a, &b) / (b.len() as f64 * d_th)).exp();
        assert!((ndtw(g, &a, &b, d_th).unwrap() - brute).abs() < 1e-9, "case {case}");
        assert!((dtw(g, &a, &b).unwrap() - brute_dtw(g, &a, &b)).abs() < 1e-9);
    }
}

#[test]
fn following_the_reference_scores_one_everywhere() {
    let (w, data) = tiny_world(&tiny_run_config());
    for e in data.val_seen.iter().take(20) {
        let g = w.scene(&e.scene_id).unwrap();
        let m = compute_metrics(&record(e, e.gt_path.clone()), e, g, g.success_radius()).unwrap();
        assert_eq!((m.sr, m.spl, m.ndtw, m.sdtw), (1.0, 1.0, 1.0, 1.0), "{}", e.episode_id);
        assert_eq!(m.ne, 0.0);
        assert!((m.cls - 1.0).abs() < 1e-12);
    }
}

#[test]
fn detours_scale_spl_by_length_ratio() {
    let (w, data) = tiny_world(&tiny_run_config());
    let e = data.val_seen.iter().find(|e| e.hops() >= 1).unwrap();
    let g = w.scene(&e.scene_id).unwrap();
    // Walk the reference, back to the start, and along the reference again.
    let mut nodes = e.gt_path.clone();
    nodes.extend(e.gt_path.iter().rev().skip(1));
    nodes.extend(e.gt_path.iter().skip(1));
    let m = compute_metrics(&record(e, nodes), e, g, g.success_radius()).unwrap();
    assert_eq!(m.sr, 1.0);
    assert!((m.spl - 1.0 / 3.0).abs() < 1e-12);

    let mut nodes = e.gt_path.clone();
    let last = *nodes.last().unwrap();
    let back = g.nodes[last].neighbors[0].node;
    nodes.extend([back, last]);
    let extra = 2.0 * g.edge_length(last, back).unwrap();
    let reference = g.path_length(&e.gt_path).unwrap();
    let m = compute_metrics(&record(e, nodes), e, g, g.success_radius()).unwrap();
    assert!((m.spl - reference / (reference + extra)).abs() < 1e-12);
}

#[test]
fn metrics_reject_broken_trajectories() {
    let (w, data) = tiny_world(&tiny_run_config());
    let e = &data.val_seen[0];
    let g = w.scene(&e.scene_id).unwrap();
    assert!(compute_metrics(&record(e, vec![]), e, g, 1.0).is_err());
    assert!(compute_metrics(&record(e, vec![g.num_nodes()]), e, g, 1.0).is_err());
    let other = w.scenes.iter().find(|s| s.scene_id != e.scene_id).unwrap();
    assert!(compute_metrics(&record(e, e.gt_path.clone()), e, other, 1.0).is_err());
}

#[test]
fn greedy_runs_keep_spl_within_sr() {
    let config = tiny_run_config();
    let (w, data) = tiny_world(&config);
    let runs = train_runs(&config, &w, &data, Switches::ALL, &[0]).unwrap();
    for split in [Split::ValSeen, Split::ValUnseen, Split::Train] {
        let rows = greedy_metrics(&runs[0].checkpoint.params, &w, data.split(split)).unwrap();
        assert!(rows.iter().all(|m| m.spl <= m.sr && (0.0..=1.0).contains(&m.spl)));
        assert!(rows.iter().all(|m| m.ndtw > 0.0 && m.ndtw <= 1.0 && m.sdtw <= m.ndtw && m.cls <= 1.0));
    }
}

#[test]
fn benchmark_reports_are_reproducible_and_nnc_is_tta_without_steps() {
    let mut config = tiny_run_config();
    let (w, data) = tiny_world(&config);
    let runs = train_runs(&config, &w, &data, Switches::ALL, &config.seeds).unwrap();
    let splits = [Split::ValUnseen];
    let a = run_benchmark(&runs, &config, &w, &data, &splits, Variant::Tta).unwrap();
    let b = run_benchmark(&runs, &config, &w, &data, &splits, Variant::Tta).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.report.tta_iters, config.tta.iters);

    let nnc = run_benchmark(&runs, &config, &w, &data, &splits, Variant::Nnc).unwrap();
    config.tta.iters = 0;
    let zero = run_benchmark(&runs, &config, &w, &data, &splits, Variant::Tta).unwrap();
    assert_eq!(nnc.report.splits, zero.report.splits);
    assert_eq!(nnc.report.tta_iters, 0);
    assert!(nnc.trajectories.iter().all(|t| t.entropy_curve.is_empty()));

    let unseen = a.report.split(Split::ValUnseen).unwrap();
    assert_eq!(unseen.per_seed.len(), config.seeds.len());
    assert_eq!(unseen.episodes.len(), config.seeds.len() * data.split(Split::ValUnseen).len());
    let table = a.report.to_table();
    assert!(table.contains("SR") && table.contains("±"));
}

#[test]
fn aggregate_mean_and_population_std() {
    let mk = |sr: f64| Aggregate { episodes: 1, tl: 0.0, ne: 0.0, sr, spl: sr, cls: 0.0, ndtw: 0.0, sdtw: 0.0 };
    let (mean, std) = Aggregate::mean_std(&[mk(0.2), mk(0.4)]);
    assert!((mean.sr - 0.3).abs() < 1e-15);
    assert!((std.sr - 0.1).abs() < 1e-15);
}

#[test]
fn variant_names_round_trip() {
    for v in [Variant::Base, Variant::Nnc, Variant::Tta] {
        assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
    }
    assert!("adaptive".parse::<Variant>().is_err());
}

proptest! {
    #[test]
    fn path_metrics_stay_in_range(seed in 0u64..10_000, la in 1usize..8, lb in 2usize..8) {
        let w = world();
        let mut r = rng::stream(seed, "walks");
        let g = &w.scenes[(seed as usize) % w.scenes.len()];
        let a = random_walk(g, &mut r, la);
        let b = random_walk(g, &mut r, lb);
        let d = g.success_radius();
        let n = ndtw(g, &a, &b, d).unwrap();
        prop_assert!(n > 0.0 && n <= 1.0);
        let c = cls(g, &a, &b, d).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
        prop_assert!((ndtw(g, &b, &b, d).unwrap() - 1.0).abs() < 1e-15);
    }
}
