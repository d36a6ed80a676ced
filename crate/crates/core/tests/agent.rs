mod common;

use proptest::prelude::*;
use rand::Rng;
use tvc_core::agent::{
    attend_visual, critic_all, critic_q, decode_step, embed_observation, encode_instruction, initial_state,
    AgentConfig, AgentError, AgentParams, Dims, KeyQueue,
};
use tvc_core::numcore::{Graph, ParamId, ParamStore};
use tvc_core::rng;
use tvc_core::trainer::{dims_of, Checkpoint, RunConfig};

use common::{check_params, tiny_agent_config, tiny_run_config, tiny_world};

fn dims() -> Dims {
    Dims { views: 6, feature_dim: 8, vocab: 20 }
}

fn params(seed: u64) -> AgentParams {
    AgentParams::init(&tiny_agent_config(), dims(), seed).unwrap()
}

fn random_matrix(r: &mut rng::Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Decodes one step on random features with the given navigability mask.
fn step_probs(p: &AgentParams, navigable: &[bool], seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "features");
    let mut g = Graph::frozen(&p.store);
    let instr = encode_instruction(&mut g, p, &[1, 4, 2]).unwrap();
    let state = initial_state(&mut g, p, &instr).unwrap();
    let x = g.constant(p.dims.views, p.dims.feature_dim, random_matrix(&mut r, p.dims.views, p.dims.feature_dim)).unwrap();
    let f = embed_observation(&mut g, p.ids.obs, x).unwrap();
    let out = decode_step(&mut g, p, &state, f, navigable, &instr).unwrap();
    assert_eq!(out.logits.shape(), [1, p.dims.views + 1]);
    let probs = g.softmax(out.logits).unwrap();
    g.value(probs).to_vec()
}

#[test]
fn instruction_encoding_shapes_determinism_and_order() {
    let p = params(0);
    let run = |tokens: &[usize]| {
        let mut g = Graph::frozen(&p.store);
        let i = encode_instruction(&mut g, &p, tokens).unwrap();
        (i.tokens.shape(), g.value(i.tokens).to_vec(), g.value(i.summary).to_vec())
    };
    let (shape, _, _) = run(&[3]);
    assert_eq!(shape, [1, p.config.hidden]);
    assert_eq!(run(&[3, 5, 7]), run(&[3, 5, 7]));
    let (_, a, _) = run(&[3, 5, 7]);
    let (_, b, _) = run(&[7, 5, 3]);
    let delta: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    assert!(delta > 0.0);

    let mut g = Graph::frozen(&p.store);
    assert_eq!(encode_instruction(&mut g, &p, &[]).unwrap_err(), AgentError::EmptyInstruction);
    assert_eq!(encode_instruction(&mut g, &p, &[20]).unwrap_err(), AgentError::UnknownToken(20));
}

#[test]
fn visual_attention_matches_direct_summation() {
    let mut r = rng::stream(3, "attention");
    let (v, e, h) = (6, 5, 4);
    for _ in 0..20 {
        let feats = random_matrix(&mut r, v, e);
        let w = random_matrix(&mut r, h, e);
        let hid = random_matrix(&mut r, 1, h);
        let store = ParamStore::new();
        let mut t = Graph::frozen(&store);
        let f = t.constant(v, e, feats.clone()).unwrap();
        let wt = t.constant(h, e, w.clone()).unwrap();
        let ht = t.row(&hid).unwrap();
        let out = attend_visual(&mut t, f, wt, ht).unwrap();

        // score_i = f_i . (W^T h) with W stored [h, e]
        let query: Vec<f64> = (0..e).map(|c| (0..h).map(|k| hid[k] * w[k * e + c]).sum()).collect();
        let scores: Vec<f64> = (0..v).map(|i| (0..e).map(|c| feats[i * e + c] * query[c]).sum()).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for c in 0..e {
            let expected: f64 = (0..v).map(|i| scores[i].exp() / z * feats[i * e + c]).sum();
            assert!((t.value(out)[c] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn visual_attention_limits() {
    let store = ParamStore::new();
    let mut t = Graph::frozen(&store);
    let feats = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let f = t.constant(3, 2, feats.clone()).unwrap();
    let w = t.constant(1, 2, vec![0.0, 0.0]).unwrap();
    let h = t.row(&[1.0]).unwrap();
    let mean = attend_visual(&mut t, f, w, h).unwrap();
    assert!((t.value(mean)[0] - 3.0).abs() < 1e-12 && (t.value(mean)[1] - 4.0).abs() < 1e-12);

    // Row 1 scores 50 above the others.
    let f = t.constant(3, 2, vec![0.0, 0.0, 50.0, 1.0, 0.0, 0.0]).unwrap();
    let w = t.constant(1, 2, vec![1.0, 0.0]).unwrap();
    let top = attend_visual(&mut t, f, w, h).unwrap();
    assert!((t.value(top)[0] - 50.0).abs() < 1e-9 * 50.0 && (t.value(top)[1] - 1.0).abs() < 1e-9);
}

#[test]
fn masking_and_distribution_shape() {
    let p = params(1);
    let mut only_stop = vec![false; 6];
    let probs = step_probs(&p, &only_stop, 0);
    assert!(probs[6] > 1.0 - 1e-6);
    only_stop[2] = true;
    let probs = step_probs(&p, &only_stop, 0);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(probs.iter().enumerate().filter(|(i, _)| *i != 2 && *i != 6).all(|(_, p)| *p < 1e-6));
}

#[test]
fn decoder_refuses_to_run_past_max_steps() {
    let p = params(2);
    let mut g = Graph::frozen(&p.store);
    let instr = encode_instruction(&mut g, &p, &[1]).unwrap();
    let mut state = initial_state(&mut g, &p, &instr).unwrap();
    state.step = p.config.max_steps;
    let x = g.constant(6, 8, vec![0.1; 48]).unwrap();
    let f = embed_observation(&mut g, p.ids.obs, x).unwrap();
    let err = decode_step(&mut g, &p, &state, f, &[true; 6], &instr).unwrap_err();
    assert_eq!(err, AgentError::MaxStepsExceeded(p.config.max_steps));
}

fn distance(p: &AgentParams, a: &[ParamId], b: &[ParamId]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| p.store.get(*x).values.iter().zip(&p.store.get(*y).values).map(|(u, v)| (u - v).powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// Moves the key copies away from the query networks.
fn perturb_keys(p: &mut AgentParams, seed: u64) {
    let mut r = rng::stream(seed, "perturb");
    for id in p.momentum_ids() {
        for v in p.store.get_mut(id).values.iter_mut() {
            *v += r.random_range(-1.0..1.0);
        }
    }
}

#[test]
fn momentum_updates_decay_geometrically() {
    for m in [0.0, 0.5, 0.999] {
        let cfg = AgentConfig { momentum: m, ..tiny_agent_config() };
        let mut p = AgentParams::init(&cfg, dims(), 0).unwrap();
        perturb_keys(&mut p, 1);
        let i = p.ids;
        let enc = ([i.obs_key.w, i.obs_key.b], [i.obs.w, i.obs.b]);
        let critic_key: Vec<ParamId> = i.critic_key.iter().flat_map(|c| [c.w1, c.b1, c.w2, c.b2]).collect();
        let critic: Vec<ParamId> = i.critic.iter().flat_map(|c| [c.w1, c.b1, c.w2, c.b2]).collect();
        let d_enc = distance(&p, &enc.0, &enc.1);
        let d_critic = distance(&p, &critic_key, &critic);
        for n in 1..=100 {
            p.momentum_update_encoder().unwrap();
            p.momentum_update_critic().unwrap();
            let factor = m.powi(n);
            assert!((distance(&p, &enc.0, &enc.1) - factor * d_enc).abs() < 1e-10, "m={m} n={n}");
            assert!((distance(&p, &critic_key, &critic) - factor * d_critic).abs() < 1e-10, "m={m} n={n}");
        }
    }
}

#[test]
fn momentum_update_arithmetic_and_partition() {
    let cfg = AgentConfig { momentum: 0.999, ..tiny_agent_config() };
    let mut p = AgentParams::init(&cfg, dims(), 0).unwrap();
    let (k, q) = (p.ids.obs_key.b, p.ids.obs.b);
    p.store.get_mut(k).values.fill(1.0);
    p.store.get_mut(q).values.fill(0.0);
    let critic_before = p.hash_of(&[p.ids.critic_key[0].w1, p.ids.critic_key[1].w1]);
    p.momentum_update_encoder().unwrap();
    assert!(p.store.get(k).values.iter().all(|v| (*v - 0.999).abs() < 1e-15));
    assert_eq!(critic_before, p.hash_of(&[p.ids.critic_key[0].w1, p.ids.critic_key[1].w1]));

    let enc_before = p.hash_of(&[p.ids.obs_key.w, p.ids.obs_key.b]);
    p.momentum_update_critic().unwrap();
    assert_eq!(enc_before, p.hash_of(&[p.ids.obs_key.w, p.ids.obs_key.b]), "critic update touched the key encoder");

    let cfg = AgentConfig { momentum: 0.0, ..tiny_agent_config() };
    let mut p = AgentParams::init(&cfg, dims(), 0).unwrap();
    perturb_keys(&mut p, 2);
    p.momentum_update_encoder().unwrap();
    p.momentum_update_critic().unwrap();
    assert_eq!(p.store.get(p.ids.obs_key.w).values, p.store.get(p.ids.obs.w).values);
    assert_eq!(p.store.get(p.ids.critic_key[1].w2).values, p.store.get(p.ids.critic[1].w2).values);
}

#[test]
fn momentum_copies_are_never_trainable() {
    let p = params(0);
    let train = p.train_ids();
    assert!(p.momentum_ids().iter().all(|id| !train.contains(id)));
    let mut ids = p.ml_ids();
    ids.extend(p.cl_trainable_ids());
    let g = Graph::new(&p.store, &ids);
    assert!(p.momentum_ids().iter().all(|id| !g.is_trainable(*id)));
}

#[test]
fn critic_head_values_and_gradients() {
    let p = params(4);
    let a = p.dims.actions();
    let width = p.config.hidden + a;
    let mut r = rng::stream(5, "critic");
    let obs = random_matrix(&mut r, 1, width);
    let q_of = |action: usize| {
        let mut g = Graph::frozen(&p.store);
        let o = g.row(&obs).unwrap();
        let q = critic_q(&mut g, p.ids.critic[0], o, action, a).unwrap();
        g.item(q)
    };
    assert_eq!(q_of(3).to_bits(), q_of(3).to_bits());
    let mut g = Graph::frozen(&p.store);
    let o = g.row(&obs).unwrap();
    let all = critic_all(&mut g, p.ids.critic[0], o, a, false).unwrap();
    let all = g.value(all).to_vec();
    for (action, q) in all.iter().enumerate() {
        assert!(q.is_finite());
        assert!((q_of(action) - q).abs() < 1e-12);
    }
    assert_eq!(critic_q(&mut g, p.ids.critic[0], o, a, a).unwrap_err(), AgentError::InvalidAction { action: a, max: a - 1 });

    let ids: Vec<ParamId> = p.ids.critic.iter().flat_map(|c| [c.w1, c.b1, c.w2, c.b2]).collect();
    let coords: Vec<(ParamId, usize)> = ids.iter().map(|id| (*id, p.store.get(*id).len() / 2)).collect();
    let err = check_params(&p.store, &ids, &coords, |g| {
        let o = g.row(&obs).unwrap();
        let q0 = critic_q(g, p.ids.critic[0], o, 2, a).unwrap();
        let q1 = critic_q(g, p.ids.critic[1], o, 4, a).unwrap();
        g.mul(q0, q1).unwrap()
    });
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn decoder_parameter_gradients_match_finite_differences() {
    let p = params(6);
    let mut ids = p.ml_ids();
    ids.extend(p.cl_trainable_ids());
    let mut r = rng::stream(8, "coords");
    let coords: Vec<(ParamId, usize)> =
        ids.iter().map(|id| (*id, r.random_range(0..p.store.get(*id).len()))).collect();
    let mut fr = rng::stream(9, "features");
    let feats = random_matrix(&mut fr, 6, 8);
    let err = check_params(&p.store, &ids, &coords, |g| {
        let instr = encode_instruction(g, &p, &[2, 7, 1]).unwrap();
        let state = initial_state(g, &p, &instr).unwrap();
        let x = g.constant(6, 8, feats.clone()).unwrap();
        let f = embed_observation(g, p.ids.obs, x).unwrap();
        let out = decode_step(g, &p, &state, f, &[true, false, true, true, false, true], &instr).unwrap();
        let lp = g.log_softmax(out.logits).unwrap();
        let pick = g.slice(lp, 0, 2, 1, 1).unwrap();
        g.scale(pick, -1.0).unwrap()
    });
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn key_queue_contract() {
    let mut q = KeyQueue::new(2);
    for k in [[3.0, 4.0], [1.0, 0.0], [0.0, 2.0]] {
        q.push(&k).unwrap();
    }
    let entries: Vec<Vec<f64>> = q.iter().cloned().collect();
    assert_eq!(entries, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert!(q.push(&[f64::NAN, 1.0]).is_err());
    let mut a = KeyQueue::new(3);
    let mut b = KeyQueue::new(3);
    for k in [[0.3, 0.4], [0.1, -2.0]] {
        a.push(&k).unwrap();
        b.push(&k).unwrap();
    }
    assert_eq!(a, b);
    assert!(a.iter().all(|k| (k.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12));
}

#[test]
fn checkpoint_round_trip_reproduces_decoder_outputs_bitwise() {
    let config: RunConfig = tiny_run_config();
    let (world, _) = tiny_world(&config);
    let p = AgentParams::init(&config.agent, dims_of(&world), 3).unwrap();
    let ckpt = Checkpoint::new(&config, &world.content_hash(), 0, &p, &KeyQueue::new(4), &KeyQueue::new(4), &tvc_core::numcore::OptimizerState::new(1e-3).unwrap());
    let back = Checkpoint::from_json(&ckpt.to_json()).unwrap();
    assert_eq!(back, ckpt);
    let nav = [true, true, false, true, false, true];
    let a = step_probs(&ckpt.params, &nav, 11);
    let b = step_probs(&back.params, &nav, 11);
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn masked_sectors_get_negligible_mass(mask in proptest::collection::vec(any::<bool>(), 6), seed in 0u64..500) {
        let p = params(seed % 7);
        let probs = step_probs(&p, &mask, seed);
        let masked: f64 = probs.iter().zip(&mask).filter(|(_, nav)| !**nav).map(|(p, _)| p).sum();
        prop_assert!(masked < 1e-6);
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn momentum_keeps_keys_between_old_and_query(m in 0.01f64..0.99, seed in 0u64..100) {
        let cfg = AgentConfig { momentum: m, ..tiny_agent_config() };
        let mut p = AgentParams::init(&cfg, dims(), seed).unwrap();
        perturb_keys(&mut p, seed);
        let old = p.clone();
        p.momentum_update_encoder().unwrap();
        p.momentum_update_critic().unwrap();
        for (k, q) in old.momentum_ids().into_iter().zip([old.ids.obs.w, old.ids.obs.b].into_iter().chain(old.ids.critic.iter().flat_map(|c| [c.w1, c.b1, c.w2, c.b2]))) {
            for ((new, before), query) in p.store.get(k).values.iter().zip(&old.store.get(k).values).zip(&old.store.get(q).values) {
                prop_assert!(*new >= before.min(*query) - 1e-15 && *new <= before.max(*query) + 1e-15);
            }
        }
    }
}
