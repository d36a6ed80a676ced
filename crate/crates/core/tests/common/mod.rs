#![allow(dead_code)]

use tvc_core::numcore::{DiffTensor, Graph, ParamId, ParamStore, Tape};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator so coordinates whose
/// true gradient is ~0 are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Max relative error between tape gradients and central differences for a
/// scalar function of several leaf tensors.
pub fn check_leaves(shapes: &[[usize; 2]], values: &[Vec<f64>], build: impl Fn(&mut Tape, &[DiffTensor]) -> DiffTensor) -> f64 {
    let forward = |vals: &[Vec<f64>]| {
        let mut t = Tape::new();
        let leaves: Vec<DiffTensor> =
            shapes.iter().zip(vals).map(|(s, v)| t.leaf(s[0], s[1], v.clone()).unwrap()).collect();
        let out = build(&mut t, &leaves);
        (t, leaves, out)
    };
    let (mut t, leaves, out) = forward(values);
    t.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = t.grad(*leaf);
        let numeric = numeric_grad(&values[i], |x| {
            let mut vals = values.to_vec();
            vals[i] = x.to_vec();
            let (t, _, out) = forward(&vals);
            t.item(out)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

/// Max relative error of parameter gradients of `loss` over the listed
/// coordinates `(param, index)`.
pub fn check_params(
    store: &ParamStore,
    trainable: &[ParamId],
    coords: &[(ParamId, usize)],
    loss: impl Fn(&mut Graph) -> DiffTensor,
) -> f64 {
    let mut g = Graph::new(store, trainable);
    let l = loss(&mut g);
    let grads = g.backward(l).unwrap();
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for &(id, i) in coords {
        let orig = probe.get(id).values[i];
        let eval = |v: f64, probe: &mut ParamStore| {
            probe.get_mut(id).values[i] = v;
            let mut g = Graph::frozen(probe);
            let l = loss(&mut g);
            g.item(l)
        };
        let up = eval(orig + FD_STEP, &mut probe);
        let down = eval(orig - FD_STEP, &mut probe);
        probe.get_mut(id).values[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads.get(id).expect("trainable")[i];
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

use tvc_core::agent::AgentConfig;
use tvc_core::trainer::RunConfig;
use tvc_core::world::{build_world, Dataset, World, WorldConfig};

pub fn tiny_world_config() -> WorldConfig {
    WorldConfig {
        seen_scenes: 3,
        unseen_scenes: 2,
        min_nodes: 8,
        max_nodes: 12,
        views: 6,
        feature_dim: 8,
        landmarks: 12,
        min_hops: 2,
        max_hops: 4,
        train_per_scene: 8,
        val_seen_per_scene: 2,
        val_unseen_per_scene: 3,
        ..WorldConfig::default()
    }
}

pub fn tiny_agent_config() -> AgentConfig {
    AgentConfig {
        hidden: 8,
        embed: 6,
        word_dim: 5,
        proj_dim: 4,
        critic_hidden: 5,
        max_steps: 8,
        queue_capacity: 16,
        ..AgentConfig::default()
    }
}

/// Small but complete run: a few iterations on a five-scene world.
pub fn tiny_run_config() -> RunConfig {
    let mut c = RunConfig { world: tiny_world_config(), agent: tiny_agent_config(), ..RunConfig::default() };
    c.train.iters = 4;
    c.train.batch_size = 4;
    c.train.learning_rate = 1e-3;
    c.train.replay_capacity = 64;
    c.train.val_every = 2;
    c.train.val_episodes = 4;
    c.tta.iters = 3;
    c.tta.batch = 2;
    c.seeds = vec![0, 1];
    c
}

pub fn tiny_world(config: &RunConfig) -> (World, Dataset) {
    let world = build_world(&config.world, config.seed).unwrap();
    let data = Dataset::generate(&world, config.seed).unwrap();
    (world, data)
}
