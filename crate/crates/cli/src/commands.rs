use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::Serialize;
use tvc_core::evalkit::{
    run_ablation, run_benchmark, train_runs, Aggregate, BenchmarkRun, TrajectoryRow, Variant,
};
use tvc_core::objectives::Switches;
use tvc_core::trainer::{Checkpoint, RunConfig, Trainer};
use tvc_core::world::{build_world, mean_style_distance, Dataset, Split, World};

use crate::artifacts::{digest, FileDigest, OutDir};
use crate::config::to_toml;
use crate::{AblateArgs, EvalArgs, ExportCommand, Failure, TrainArgs, WorldArgs};

const WORLD_FILE: &str = "world.json";
const EPISODE_FILE: &str = "episodes.json";
const CONFIG_FILE: &str = "config.toml";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const LOG_FILE: &str = "train_log.jsonl";

pub fn world(args: WorldArgs) -> Result<()> {
    let mut config = args.config.load()?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let world = build_world(&config.world, config.seed).context(Failure::Config)?;
    let data = Dataset::generate(&world, config.seed)?;
    let mut out = OutDir::create(&args.out, "world")?;
    if let Some(path) = &args.config.config {
        out.input(path)?;
    }
    out.write(WORLD_FILE, world.to_json())?;
    out.write(EPISODE_FILE, data.to_json(&world.content_hash()))?;
    out.write(CONFIG_FILE, to_toml(&config))?;
    out.finish(Some(&config))?;
    eprintln!(
        "wrote {} scenes, {} / {} / {} episodes to {}",
        world.scenes.len(),
        data.train.len(),
        data.val_seen.len(),
        data.val_unseen.len(),
        args.out.display()
    );
    Ok(())
}

/// Reads a world directory; any failure means the artifacts are unusable.
fn load_world(dir: &Path) -> Result<(World, Dataset, Vec<FileDigest>)> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read_to_string(&path).with_context(|| format!("reading {}", path.display())).context(Failure::Artifact)
    };
    let world = World::from_json(&read(WORLD_FILE)?).context(Failure::Artifact)?;
    let data = Dataset::from_json(&read(EPISODE_FILE)?, &world).context(Failure::Artifact)?;
    let digests = vec![digest(&dir.join(WORLD_FILE))?, digest(&dir.join(EPISODE_FILE))?];
    Ok((world, data, digests))
}

fn check_world(config: &RunConfig, world: &World, dir: &Path) -> Result<()> {
    if config.world != world.config {
        return Err(anyhow!("the [world] section of the config differs from the one {} was built with", dir.display())
            .context(Failure::Artifact));
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).context(Failure::Artifact)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let (world, data, inputs) = load_world(&args.world)?;
    let mut config = args.config.load()?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(switches) = args.switches {
        config.switches = switches;
    }
    check_world(&config, &world, &args.world)?;

    let mut out = OutDir::create(&args.out, "train")?;
    out.inputs(inputs);
    if let Some(path) = &args.config.config {
        out.input(path)?;
    }
    let log_path = out.path(LOG_FILE);
    let mut trainer = match &args.resume {
        Some(path) => {
            let path = path.clone().unwrap_or_else(|| out.path(CHECKPOINT_FILE));
            let ckpt = load_checkpoint(&path)?;
            out.input(&path)?;
            if ckpt.switches != config.switches {
                return Err(anyhow!(
                    "checkpoint was trained with switches `{}`, not `{}`",
                    ckpt.switches.label(),
                    config.switches.label()
                )
                .context(Failure::Artifact));
            }
            truncate_log(&log_path, ckpt.iteration)?;
            eprintln!("resuming at iteration {}", ckpt.iteration);
            Trainer::resume(config.clone(), &world, &data, ckpt)?
        }
        None => {
            fs::write(&log_path, "").with_context(|| format!("writing {}", log_path.display()))?;
            Trainer::new(config.clone(), &world, &data)?
        }
    };
    out.write(CONFIG_FILE, to_toml(&config))?;

    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let every = config.train.checkpoint_every;
    while trainer.iteration < config.train.iters {
        let line = trainer.step()?;
        writeln!(log, "{}", serde_json::to_string(&line)?)?;
        log.flush()?;
        if let Some(val) = &line.val {
            eprintln!(
                "iter {:>5}  il {:.4}  total {:.4}  seen SR {:.3}  unseen SR {:.3}",
                line.iteration, line.il_loss, line.total_loss, val.seen_sr, val.unseen_sr
            );
        }
        if every > 0 && trainer.iteration % every == 0 && trainer.iteration < config.train.iters {
            let text = trainer.checkpoint().to_json();
            out.write(&format!("checkpoints/iter_{:06}.json", trainer.iteration), &text)?;
            out.write(CHECKPOINT_FILE, &text)?;
        }
    }
    out.write(CHECKPOINT_FILE, trainer.checkpoint().to_json())?;
    out.record(LOG_FILE);
    // Checkpoints from before a resume stay part of the run.
    let dir = out.path("checkpoints");
    if dir.is_dir() {
        let mut names: Vec<String> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".json"))
            .collect();
        names.sort();
        for n in names {
            out.record(&format!("checkpoints/{n}"));
        }
    }
    out.finish(Some(&config))?;
    eprintln!("trained {} iterations into {}", trainer.iteration, args.out.display());
    Ok(())
}

/// Keeps the first `iterations` lines of a training log.
fn truncate_log(path: &Path, iterations: u64) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut kept = String::new();
    for line in text.lines().take(iterations as usize) {
        kept.push_str(line);
        kept.push('\n');
    }
    fs::write(path, kept).with_context(|| format!("writing {}", path.display()))
}

/// Pairs checkpoints with seeds: one each, or one checkpoint for all.
fn pair_runs(checkpoints: &[PathBuf], seeds: Option<Vec<u64>>, config: &RunConfig) -> Result<Vec<(u64, PathBuf)>> {
    let seeds = match seeds {
        Some(s) => s,
        None if checkpoints.len() == 1 => vec![config.seed],
        None if checkpoints.len() == config.seeds.len() => config.seeds.clone(),
        None => {
            return Err(anyhow!("{} checkpoints need --seeds of the same length", checkpoints.len()).context(Failure::Config))
        }
    };
    if checkpoints.len() == 1 {
        return Ok(seeds.into_iter().map(|s| (s, checkpoints[0].clone())).collect());
    }
    if checkpoints.len() != seeds.len() {
        return Err(anyhow!("{} checkpoints for {} seeds", checkpoints.len(), seeds.len()).context(Failure::Config));
    }
    Ok(seeds.into_iter().zip(checkpoints.iter().cloned()).collect())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (world, data, inputs) = load_world(&args.world)?;
    let fallback = args.checkpoint[0].parent().map(|p| p.join(CONFIG_FILE));
    let mut config = args.config.load_or(fallback.as_deref())?;
    if let Some(n) = args.tta_iters {
        config.tta.iters = n;
    }
    let pairs = pair_runs(&args.checkpoint, args.seeds.clone(), &config)?;

    let mut out = OutDir::create(&args.out, "eval")?;
    out.inputs(inputs);
    let mut runs = Vec::with_capacity(pairs.len());
    for (seed, path) in &pairs {
        runs.push(BenchmarkRun { seed: *seed, checkpoint: load_checkpoint(path)? });
    }
    for path in &args.checkpoint {
        out.input(path)?;
    }
    let bench = run_benchmark(&runs, &config, &world, &data, &args.split, args.variant)?;
    let mut lines = String::new();
    for row in &bench.trajectories {
        lines.push_str(&serde_json::to_string(row)?);
        lines.push('\n');
    }
    out.write("report.json", bench.report.to_json())?;
    out.write("report.txt", bench.report.to_table())?;
    out.write("trajectories.jsonl", lines)?;
    out.write(CONFIG_FILE, to_toml(&config))?;
    out.finish(Some(&config))?;
    print!("{}", bench.report.to_table());
    Ok(())
}

fn parse_grid(items: &[String]) -> Result<Vec<Switches>> {
    let mut grid = Vec::new();
    for item in items {
        let add: Vec<Switches> = if item == "full" {
            Switches::grid()
        } else {
            vec![item.parse::<Switches>().map_err(|e| anyhow!("--grid: {e}")).context(Failure::Config)?]
        };
        for s in add {
            if !grid.contains(&s) {
                grid.push(s);
            }
        }
    }
    Ok(grid)
}

fn row_dir(switches: Switches) -> String {
    format!("rows/{}", switches.label().replace(',', "+"))
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let (world, data, inputs) = load_world(&args.world)?;
    let mut config = args.config.load()?;
    if let Some(seeds) = args.seeds {
        config.seeds = seeds;
    }
    check_world(&config, &world, &args.world)?;
    let grid = parse_grid(&args.grid)?;

    let mut out = OutDir::create(&args.out, "ablate")?;
    out.inputs(inputs);
    if let Some(path) = &args.config.config {
        out.input(path)?;
    }
    let seeds = config.seeds.clone();
    let table = run_ablation(&config, &world, &data, &grid, &seeds, args.variant, |switches, runs| {
        let dir = row_dir(switches);
        let mut row_config = config.clone();
        row_config.switches = switches;
        let written = (|| -> Result<()> {
            out.write(&format!("{dir}/{CONFIG_FILE}"), to_toml(&row_config))?;
            for r in runs {
                out.write(&format!("{dir}/seed_{}.json", r.seed), r.checkpoint.to_json())?;
            }
            Ok(())
        })();
        eprintln!("trained {} over {} seeds", switches.label(), runs.len());
        written.map_err(|e| tvc_core::trainer::TrainError::Format(format!("{e:#}")))
    })?;
    out.write("ablation.json", table.to_json())?;
    out.write("ablation.txt", table.to_table())?;
    out.write(CONFIG_FILE, to_toml(&config))?;
    out.finish(Some(&config))?;
    print!("{}", table.to_table());
    Ok(())
}

fn read_trajectories(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).context(Failure::Artifact)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .with_context(|| format!("{} line {}", path.display(), i + 1))
                .context(Failure::Artifact)
        })
        .collect()
}

#[derive(Serialize)]
struct EntropyCurve<'a> {
    seed: u64,
    split: Split,
    episode_id: &'a str,
    curve: &'a [f64],
}

#[derive(Serialize)]
struct EntropySeries<'a> {
    /// Mean over episodes at each adaptation step (index 0 is before any step).
    mean: Vec<f64>,
    episodes: Vec<EntropyCurve<'a>>,
}

#[derive(Serialize)]
struct BirdView<'a> {
    seed: u64,
    variant: Variant,
    split: Split,
    episode_id: &'a str,
    scene_id: &'a str,
    success: bool,
    path: &'a [[f64; 2]],
    reference: &'a [[f64; 2]],
}

#[derive(Serialize)]
struct ShiftPoint {
    shift: f64,
    /// Mean distance between seen and unseen scene styles in the built world.
    style_distance: f64,
    mean: Aggregate,
    std: Aggregate,
}

#[derive(Serialize)]
struct ShiftSeries {
    variant: Variant,
    seeds: Vec<u64>,
    points: Vec<ShiftPoint>,
}

fn mean_curve(curves: &[&[f64]]) -> Vec<f64> {
    let len = curves.iter().map(|c| c.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let vals: Vec<f64> = curves.iter().filter_map(|c| c.get(i).copied()).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}

pub fn export(command: ExportCommand) -> Result<()> {
    match command {
        ExportCommand::Entropy { trajectories, out } => {
            let rows = read_trajectories(&trajectories)?;
            let adapted: Vec<&TrajectoryRow> = rows.iter().filter(|r| !r.entropy_curve.is_empty()).collect();
            if adapted.is_empty() {
                return Err(anyhow!("{} holds no adapted episodes", trajectories.display()).context(Failure::Artifact));
            }
            let series = EntropySeries {
                mean: mean_curve(&adapted.iter().map(|r| r.entropy_curve.as_slice()).collect::<Vec<_>>()),
                episodes: adapted
                    .iter()
                    .map(|r| EntropyCurve {
                        seed: r.seed,
                        split: r.split,
                        episode_id: &r.record.episode_id,
                        curve: &r.entropy_curve,
                    })
                    .collect(),
            };
            let mut dir = OutDir::create(&out, "export entropy")?;
            dir.input(&trajectories)?;
            dir.write("entropy.json", serde_json::to_string_pretty(&series)?)?;
            dir.finish(None)?;
        }
        ExportCommand::Birdview { trajectories, episode, out } => {
            let rows = read_trajectories(&trajectories)?;
            let views: Vec<BirdView> = rows
                .iter()
                .filter(|r| episode.is_empty() || episode.contains(&r.record.episode_id))
                .map(|r| BirdView {
                    seed: r.seed,
                    variant: r.variant,
                    split: r.split,
                    episode_id: &r.record.episode_id,
                    scene_id: &r.record.scene_id,
                    success: r.metrics.sr == 1.0,
                    path: &r.coordinates,
                    reference: &r.gt_coordinates,
                })
                .collect();
            let mut dir = OutDir::create(&out, "export birdview")?;
            dir.input(&trajectories)?;
            dir.write("birdview.json", serde_json::to_string_pretty(&views)?)?;
            dir.finish(None)?;
        }
        ExportCommand::Shift { config, shifts, variant, seeds, out } => {
            let mut base = config.load()?;
            if let Some(s) = seeds {
                base.seeds = s;
            }
            let switches = if variant == Variant::Base { Switches::ML_ONLY } else { base.switches };
            let mut dir = OutDir::create(&out, "export shift")?;
            if let Some(path) = &config.config {
                dir.input(path)?;
            }
            let mut points = Vec::with_capacity(shifts.len());
            for shift in shifts {
                let mut c = base.clone();
                c.world.shift = shift;
                c.validate().context(Failure::Config)?;
                let world = build_world(&c.world, c.seed)?;
                let data = Dataset::generate(&world, c.seed)?;
                let runs = train_runs(&c, &world, &data, switches, &c.seeds)?;
                let bench = run_benchmark(&runs, &c, &world, &data, &[Split::ValUnseen], variant)?;
                let unseen = bench.report.split(Split::ValUnseen).expect("requested");
                eprintln!("shift {shift}: unseen SR {:.3}", unseen.mean.sr);
                points.push(ShiftPoint {
                    shift,
                    style_distance: mean_style_distance(&world),
                    mean: unseen.mean.clone(),
                    std: unseen.std.clone(),
                });
            }
            let series = ShiftSeries { variant, seeds: base.seeds.clone(), points };
            dir.write("shift.json", serde_json::to_string_pretty(&series)?)?;
            dir.finish(Some(&base))?;
        }
    }
    Ok(())
}
