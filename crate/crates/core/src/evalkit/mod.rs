//! Metrics, benchmark orchestration and the ablation harness.

mod metrics;

pub use metrics::{cls, compute_metrics, dtw, ndtw, MetricRow, StopReason, TrajectoryRecord, METRIC_NAMES};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::agent::AgentParams;
use crate::objectives::Switches;
use crate::trainer::{adapt_test_time, rollout, train_joint, ActionSource, Checkpoint, Result, RunConfig, TrainError};
use crate::world::{Dataset, Episode, Split, World};

/// Mean of one field over metric rows (0 for an empty slice).
pub fn mean_of(rows: &[MetricRow], f: impl Fn(&MetricRow) -> f64) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

/// Greedy navigation with frozen parameters, scored per episode.
pub fn greedy_metrics(params: &AgentParams, world: &World, episodes: &[Episode]) -> Result<Vec<MetricRow>> {
    episodes
        .iter()
        .map(|e| {
            let traj = rollout(params, world, e, ActionSource::Greedy, None)?;
            score(&traj, e, world)
        })
        .collect()
}

pub fn score(traj: &TrajectoryRecord, episode: &Episode, world: &World) -> Result<MetricRow> {
    let scene = world.scene(&episode.scene_id)?;
    Ok(compute_metrics(traj, episode, scene, scene.success_radius())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Supervised-only model, frozen at test time.
    Base,
    /// Model trained with the consistency objectives, frozen at test time.
    Nnc,
    /// `Nnc` plus per-episode test-time adaptation.
    Tta,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Nnc => "nnc",
            Variant::Tta => "tta",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "base" => Ok(Variant::Base),
            "nnc" => Ok(Variant::Nnc),
            "tta" => Ok(Variant::Tta),
            other => Err(format!("unknown variant `{other}` (expected base, nnc or tta)")),
        }
    }
}

/// Means of every metric over a set of episodes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub episodes: usize,
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub spl: f64,
    pub cls: f64,
    pub ndtw: f64,
    pub sdtw: f64,
}

impl Aggregate {
    pub fn of(rows: &[MetricRow]) -> Self {
        Self {
            episodes: rows.len(),
            tl: mean_of(rows, |r| r.tl),
            ne: mean_of(rows, |r| r.ne),
            sr: mean_of(rows, |r| r.sr),
            spl: mean_of(rows, |r| r.spl),
            cls: mean_of(rows, |r| r.cls),
            ndtw: mean_of(rows, |r| r.ndtw),
            sdtw: mean_of(rows, |r| r.sdtw),
        }
    }

    pub fn values(&self) -> [f64; 7] {
        [self.tl, self.ne, self.sr, self.spl, self.cls, self.ndtw, self.sdtw]
    }

    fn from_values(episodes: usize, v: [f64; 7]) -> Self {
        Self { episodes, tl: v[0], ne: v[1], sr: v[2], spl: v[3], cls: v[4], ndtw: v[5], sdtw: v[6] }
    }

    /// Mean and population standard deviation across per-seed aggregates.
    pub fn mean_std(items: &[Aggregate]) -> (Aggregate, Aggregate) {
        let n = items.len().max(1) as f64;
        let mut mean = [0.0; 7];
        for a in items {
            for (m, v) in mean.iter_mut().zip(a.values()) {
                *m += v / n;
            }
        }
        let mut var = [0.0; 7];
        for a in items {
            for ((s, v), m) in var.iter_mut().zip(a.values()).zip(mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let episodes = items.iter().map(|a| a.episodes).sum();
        (Self::from_values(episodes, mean), Self::from_values(episodes, var.map(f64::sqrt)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub seed: u64,
    pub metrics: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub seed: u64,
    #[serde(flatten)]
    pub row: MetricRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: Split,
    pub per_seed: Vec<SeedAggregate>,
    pub mean: Aggregate,
    pub std: Aggregate,
    pub episodes: Vec<EpisodeMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: Variant,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub tta_iters: usize,
    pub splits: Vec<SplitReport>,
}

impl MetricsReport {
    pub fn split(&self, split: Split) -> Option<&SplitReport> {
        self.splits.iter().find(|s| s.split == split)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table, one row per split with mean ± std over seeds.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "variant: {}  seeds: {:?}  tta_iters: {}", self.variant.as_str(), self.seeds, self.tta_iters);
        let _ = write!(out, "{:<12}", "split");
        for name in METRIC_NAMES {
            let _ = write!(out, " {:>15}", name);
        }
        out.push('\n');
        for s in &self.splits {
            let _ = write!(out, "{:<12}", s.split.as_str());
            for (m, d) in s.mean.values().iter().zip(s.std.values()) {
                let _ = write!(out, " {:>15}", format!("{m:.3}±{d:.3}"));
            }
            out.push('\n');
        }
        out
    }
}

/// One trained model of a multi-seed benchmark.
#[derive(Clone, Debug)]
pub struct BenchmarkRun {
    pub seed: u64,
    pub checkpoint: Checkpoint,
}

/// A scored trajectory with node coordinates, for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub seed: u64,
    pub variant: Variant,
    pub split: Split,
    #[serde(flatten)]
    pub record: TrajectoryRecord,
    pub coordinates: Vec<[f64; 2]>,
    pub gt_coordinates: Vec<[f64; 2]>,
    pub metrics: MetricRow,
    /// Adaptation entropy per step (empty without adaptation).
    pub entropy_curve: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BenchmarkOutput {
    pub report: MetricsReport,
    pub trajectories: Vec<TrajectoryRow>,
}

/// Evaluates every run on `splits`. `base` and `nnc` navigate greedily
/// with the checkpoint as is; `tta` adapts per episode first. The
/// variant names which kind of checkpoint the runs are expected to hold.
pub fn run_benchmark(
    runs: &[BenchmarkRun],
    config: &RunConfig,
    world: &World,
    dataset: &Dataset,
    splits: &[Split],
    variant: Variant,
) -> Result<BenchmarkOutput> {
    let world_hash = world.content_hash();
    for r in runs {
        r.checkpoint.verify(config, &world_hash)?;
    }
    let tta_iters = if variant == Variant::Tta { config.tta.iters } else { 0 };
    let mut eval_config = config.clone();
    eval_config.tta.iters = tta_iters;
    let mut trajectories = Vec::new();
    let mut reports = Vec::new();
    for &split in splits {
        let episodes = dataset.split(split);
        let mut per_seed = Vec::new();
        let mut rows = Vec::new();
        for run in runs {
            let mut seed_rows = Vec::with_capacity(episodes.len());
            for e in episodes {
                let out = adapt_test_time(&run.checkpoint, &eval_config, world, e, run.seed)?;
                let m = score(&out.trajectory, e, world)?;
                let scene = world.scene(&e.scene_id)?;
                let coords = |nodes: &[usize]| nodes.iter().map(|n| scene.nodes[*n].position).collect::<Vec<_>>();
                trajectories.push(TrajectoryRow {
                    seed: run.seed,
                    variant,
                    split,
                    coordinates: coords(&out.trajectory.nodes),
                    gt_coordinates: coords(&e.gt_path),
                    record: out.trajectory,
                    metrics: m.clone(),
                    entropy_curve: out.entropy_curve,
                });
                seed_rows.push(m);
            }
            per_seed.push(SeedAggregate { seed: run.seed, metrics: Aggregate::of(&seed_rows) });
            rows.extend(seed_rows.into_iter().map(|row| EpisodeMetrics { seed: run.seed, row }));
        }
        let (mean, std) = Aggregate::mean_std(&per_seed.iter().map(|s| s.metrics.clone()).collect::<Vec<_>>());
        reports.push(SplitReport { split, per_seed, mean, std, episodes: rows });
    }
    Ok(BenchmarkOutput {
        report: MetricsReport {
            variant,
            config_hash: config.model_hash(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            tta_iters,
            splits: reports,
        },
        trajectories,
    })
}

/// Trains one model per seed with the given switches.
pub fn train_runs(config: &RunConfig, world: &World, dataset: &Dataset, switches: Switches, seeds: &[u64]) -> Result<Vec<BenchmarkRun>> {
    seeds
        .iter()
        .map(|&seed| {
            let mut c = config.clone();
            c.seed = seed;
            c.switches = switches;
            let out = train_joint(&c, world, dataset, |_, _| Ok(()))?;
            Ok(BenchmarkRun { seed, checkpoint: out.checkpoint })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub switches: Switches,
    pub label: String,
    pub val_seen: Aggregate,
    pub val_seen_std: Aggregate,
    pub val_unseen: Aggregate,
    pub val_unseen_std: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub variant: Variant,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, switches: Switches) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.switches == switches)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>3} {:>6} {:>6}  {:>15} {:>15}  {:>15} {:>15}",
            "ML", "CL_IL", "CL_RL", "seen SR", "seen SPL", "unseen SR", "unseen SPL"
        );
        let mark = |b: bool| if b { "x" } else { "" };
        for r in &self.rows {
            let cell = |m: f64, s: f64| format!("{:.3}±{:.3}", m, s);
            let _ = writeln!(
                out,
                "{:>3} {:>6} {:>6}  {:>15} {:>15}  {:>15} {:>15}",
                mark(r.switches.ml),
                mark(r.switches.cl_il),
                mark(r.switches.cl_rl),
                cell(r.val_seen.sr, r.val_seen_std.sr),
                cell(r.val_seen.spl, r.val_seen_std.spl),
                cell(r.val_unseen.sr, r.val_unseen_std.sr),
                cell(r.val_unseen.spl, r.val_unseen_std.spl),
            );
        }
        out
    }
}

/// One row from already trained runs of a switch combination.
pub fn ablation_row(
    switches: Switches,
    runs: &[BenchmarkRun],
    config: &RunConfig,
    world: &World,
    dataset: &Dataset,
    variant: Variant,
) -> Result<AblationRow> {
    let out = run_benchmark(runs, config, world, dataset, &[Split::ValSeen, Split::ValUnseen], variant)?;
    let seen = out.report.split(Split::ValSeen).expect("requested");
    let unseen = out.report.split(Split::ValUnseen).expect("requested");
    Ok(AblationRow {
        switches,
        label: switches.label(),
        val_seen: seen.mean.clone(),
        val_seen_std: seen.std.clone(),
        val_unseen: unseen.mean.clone(),
        val_unseen_std: unseen.std.clone(),
    })
}

/// Trains and evaluates one model per seed for every switch combination.
/// `on_runs` sees each combination's trained runs, e.g. to keep checkpoints.
pub fn run_ablation(
    config: &RunConfig,
    world: &World,
    dataset: &Dataset,
    grid: &[Switches],
    seeds: &[u64],
    variant: Variant,
    mut on_runs: impl FnMut(Switches, &[BenchmarkRun]) -> Result<()>,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(TrainError::Config("ablation grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|s| !s.any()) {
        return Err(TrainError::Config(format!("switch combination `{}` trains nothing", bad.label())));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &switches in grid {
        let runs = train_runs(config, world, dataset, switches, seeds)?;
        on_runs(switches, &runs)?;
        rows.push(ablation_row(switches, &runs, config, world, dataset, variant)?);
    }
    Ok(AblationTable { seeds: seeds.to_vec(), variant, rows })
}
