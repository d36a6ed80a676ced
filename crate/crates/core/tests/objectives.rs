mod common;

use proptest::prelude::*;
use rand::Rng;
use tvc_core::numcore::Tape;
use tvc_core::objectives::{
    actor_loss, critic_loss, entropy, entropy_of, expected_sac_target, il_loss, info_nce, sac_target, step_reward,
    train_objective, tta_objective, LossWeights, ObjectiveError, Switches,
};
use tvc_core::rng;

use common::check_leaves;

fn weights(gamma: f64, alpha: f64) -> LossWeights {
    LossWeights { gamma, alpha, ..LossWeights::default() }
}

/// `-ln( e^{s+} / (e^{s+} + sum e^{s_k}) )` computed without max-shifting.
fn info_nce_oracle(q: &[f64], pos: &[f64], negs: &[Vec<f64>], w: &[f64]) -> f64 {
    let p = q.len();
    let sim = |k: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..p {
            for j in 0..p {
                s += q[i] * w[i * p + j] * k[j];
            }
        }
        s
    };
    let sp = sim(pos).exp();
    let z: f64 = sp + negs.iter().map(|k| sim(k).exp()).sum::<f64>();
    -(sp / z).ln()
}

fn run_info_nce(q: &[f64], pos: &[f64], negs: &[Vec<f64>], w: &[f64]) -> f64 {
    let p = q.len();
    let mut t = Tape::new();
    let qt = t.row(q).unwrap();
    let kt = t.row(pos).unwrap();
    let nt = (!negs.is_empty()).then(|| t.constant(negs.len(), p, negs.concat()).unwrap());
    let wt = t.constant(p, p, w.to_vec()).unwrap();
    let l = info_nce(&mut t, qt, kt, nt, wt).unwrap();
    t.item(l)
}

#[test]
fn info_nce_matches_unstabilized_formula() {
    let mut r = rng::stream(0, "infonce");
    for _ in 0..1000 {
        let p = r.random_range(1..=5);
        let k = r.random_range(0..=6);
        let vec = |r: &mut rng::Rng| (0..p).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let q = vec(&mut r);
        let pos = vec(&mut r);
        let negs: Vec<Vec<f64>> = (0..k).map(|_| vec(&mut r)).collect();
        // Scale W so similarities span roughly [-30, 30].
        let w: Vec<f64> = (0..p * p).map(|_| r.random_range(-30.0..30.0) / p as f64).collect();
        let got = run_info_nce(&q, &pos, &negs, &w);
        let want = info_nce_oracle(&q, &pos, &negs, &w);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn info_nce_at_equal_similarities_is_log_of_candidates() {
    for k in [0usize, 1, 3, 16, 255] {
        let key = vec![0.6, 0.8];
        let negs = vec![key.clone(); k];
        let got = run_info_nce(&[1.0, 0.0], &key, &negs, &[2.0, 0.0, 0.0, 2.0]);
        assert_eq!(got, ((k + 1) as f64).ln(), "K={k}");
    }
}

#[test]
fn info_nce_gradients_match_finite_differences() {
    let mut r = rng::stream(1, "infonce-fd");
    for _ in 0..10 {
        let vals: Vec<Vec<f64>> =
            [3, 3, 12, 9].iter().map(|n| (0..*n).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let err = check_leaves(&[[1, 3], [1, 3], [4, 3], [3, 3]], &vals, |t, xs| {
            info_nce(t, xs[0], xs[1], Some(xs[2]), xs[3]).unwrap()
        });
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn sac_target_worked_example_and_terminal_cases() {
    let w = weights(0.9, 0.1);
    let y = sac_target(1.0, false, -1.0, 2.0, &w).unwrap();
    assert!((y - 2.89).abs() < 1e-12);
    let mut r = rng::stream(2, "sac");
    for _ in 0..50 {
        let (reward, lp, q) = (r.random_range(-3.0..3.0), r.random_range(-5.0..0.0), r.random_range(-2.0..2.0));
        let (gamma, alpha) = (r.random_range(0.5..1.0), r.random_range(0.0..0.5));
        let w = weights(gamma, alpha);
        let oracle = reward + gamma * (1.0 - 0.0) * (q - alpha * lp);
        assert!((sac_target(reward, false, lp, q, &w).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(sac_target(reward, true, lp, q, &w).unwrap(), reward);
        assert_eq!(expected_sac_target(reward, true, &[0.5, 0.5], &[q, q], &w).unwrap(), reward);
    }
    assert!(matches!(sac_target(f64::NAN, false, -1.0, 0.0, &w), Err(ObjectiveError::NonFiniteValue(_))));
}

#[test]
fn expected_sac_target_averages_single_action_targets() {
    let mut r = rng::stream(3, "expected");
    for _ in 0..50 {
        let n = r.random_range(2..6);
        let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.01..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let qs: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let w = weights(0.95, 0.05);
        let oracle: f64 = probs.iter().zip(&qs).map(|(p, q)| p * (1.0 + 0.95 * (q - 0.05 * p.ln()))).sum();
        assert!((expected_sac_target(1.0, false, &probs, &qs, &w).unwrap() - oracle).abs() < 1e-12);
    }
}

#[test]
fn critic_loss_is_mean_squared_error() {
    let mut t = Tape::new();
    let q = t.row(&[1.0, 2.0, 4.0]).unwrap();
    let l = critic_loss(&mut t, q, &[0.0, 2.0, 1.0]).unwrap();
    assert!((t.item(l) - (1.0 + 0.0 + 9.0) / 3.0).abs() < 1e-15);
    assert_eq!(critic_loss(&mut t, q, &[]).unwrap_err(), ObjectiveError::EmptyBatch);
}

#[test]
fn il_loss_sums_negative_log_likelihood() {
    let mut t = Tape::new();
    let a = t.row(&[0.2f64.ln(), 0.8f64.ln()]).unwrap();
    let b = t.row(&[0.5f64.ln(), 0.5f64.ln()]).unwrap();
    let l = il_loss(&mut t, &[a, b], &[1, 0]).unwrap();
    assert!((t.item(l) - (-(0.8f64.ln()) - 0.5f64.ln())).abs() < 1e-12);
    assert_eq!(il_loss(&mut t, &[a], &[0, 1]).unwrap_err(), ObjectiveError::LengthMismatch(1, 2));
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Gradient descent on the logits of the actor loss converges to the
/// Boltzmann policy `pi ∝ exp(Q / alpha)`.
#[test]
fn actor_loss_minimizer_is_the_boltzmann_policy() {
    let q = [0.3, -0.2, 0.5, 0.0];
    for alpha in [0.2, 0.5, 1.0] {
        let mut logits = vec![0.0; 4];
        for _ in 0..4000 {
            let mut t = Tape::new();
            let x = t.leaf(1, 4, logits.clone()).unwrap();
            let l = actor_loss(&mut t, x, &q, alpha).unwrap();
            t.backward(l).unwrap();
            let g = t.grad(x).to_vec();
            logits.iter_mut().zip(&g).for_each(|(v, d)| *v -= 2.0 * d);
        }
        let want = softmax(&q.map(|v| v / alpha));
        for (a, b) in softmax(&logits).iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "alpha {alpha}: {a} vs {b}");
        }
    }
}

#[test]
fn optimal_policy_entropy_grows_with_temperature() {
    let q = [0.3, -0.2, 0.5, 0.0];
    let mut prev = 0.0;
    for alpha in [0.05, 0.1, 0.3, 1.0, 3.0] {
        let h = entropy_of(&softmax(&q.map(|v| v / alpha)));
        assert!(h > prev);
        prev = h;
    }
}

#[test]
fn actor_loss_value_and_gradient() {
    let q = [0.3, -0.2, 0.5];
    let logits = [0.1, 0.4, -0.3];
    let p = softmax(&logits);
    let oracle: f64 = p.iter().zip(&q).map(|(p, q)| p * (0.2 * p.ln() - q)).sum();
    let mut t = Tape::new();
    let x = t.row(&logits).unwrap();
    let l = actor_loss(&mut t, x, &q, 0.2).unwrap();
    assert!((t.item(l) - oracle).abs() < 1e-12);
    let err = check_leaves(&[[1, 3]], &[logits.to_vec()], |t, xs| actor_loss(t, xs[0], &q, 0.2).unwrap());
    assert!(err < 1e-4);
}

#[test]
fn entropy_examples() {
    let mut t = Tape::new();
    let u = t.row(&[0.25; 4]).unwrap();
    let h = entropy(&mut t, u).unwrap();
    assert!((t.item(h) - 4f64.ln()).abs() < 1e-15);
    let one_hot = t.row(&[0.0, 1.0, 0.0]).unwrap();
    let h = entropy(&mut t, one_hot).unwrap();
    assert_eq!(t.item(h), 0.0);
    let bad = t.row(&[0.5, 0.6]).unwrap();
    assert!(matches!(entropy(&mut t, bad), Err(ObjectiveError::InvalidDistribution(_))));
    let h = tta_objective(&mut t, &[u, one_hot]).unwrap();
    assert!((t.item(h) - 4f64.ln() / 2.0).abs() < 1e-15);
    assert_eq!(tta_objective(&mut t, &[]).unwrap_err(), ObjectiveError::EmptyBatch);
}

#[test]
fn train_objective_is_the_weighted_sum_of_enabled_terms() {
    let w = LossWeights { lambda_cl_il: 0.3, lambda_cl_rl: 0.7, ..LossWeights::default() };
    for s in Switches::grid() {
        let mut t = Tape::new();
        let ml = t.scalar(2.0).unwrap();
        let il = t.scalar(5.0).unwrap();
        let rl = t.scalar(11.0).unwrap();
        let total = train_objective(&mut t, Some(ml), Some(il), Some(rl), &w, s).unwrap();
        let want = [(s.ml, 2.0), (s.cl_il, 0.3 * 5.0), (s.cl_rl, 0.7 * 11.0)]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, v)| v)
            .sum::<f64>();
        match total {
            Some(x) => assert!((t.item(x) - want).abs() < 1e-12, "{s:?}"),
            None => assert!(!s.any()),
        }
    }
}

#[test]
fn disabled_terms_receive_no_gradient() {
    let w = LossWeights::default();
    let s = Switches { ml: false, cl_il: true, cl_rl: true };
    let mut t = Tape::new();
    let ml = t.leaf(1, 1, vec![2.0]).unwrap();
    let il = t.leaf(1, 1, vec![5.0]).unwrap();
    let rl = t.leaf(1, 1, vec![1.0]).unwrap();
    let total = train_objective(&mut t, Some(ml), Some(il), Some(rl), &w, s).unwrap().unwrap();
    t.backward(total).unwrap();
    assert_eq!(t.grad(ml), &[0.0]);
    assert_eq!(t.grad(il), &[w.lambda_cl_il]);
    assert_eq!(t.grad(rl), &[w.lambda_cl_rl]);
}

#[test]
fn train_objective_gradient_matches_finite_differences() {
    let w = LossWeights::default();
    let vals = vec![vec![0.3, -0.1, 0.7], vec![0.2, 0.4, -0.5], vec![1.0, 0.0, 0.5, -0.5, 0.2, 0.1, 0.3, 0.3, -0.2]];
    let err = check_leaves(&[[1, 3], [1, 3], [3, 3]], &vals, |t, xs| {
        let actor = actor_loss(t, xs[0], &[0.1, 0.2, -0.3], w.alpha).unwrap();
        let q = t.sum(xs[1]).unwrap();
        let critic = critic_loss(t, q, &[0.5]).unwrap();
        let l_rl = t.add(critic, actor).unwrap();
        let lp = t.log_softmax(xs[0]).unwrap();
        let il = il_loss(t, &[lp], &[2]).unwrap();
        let ml = tvc_core::objectives::ml_aggregate(t, l_rl, il, &w).unwrap();
        let cl = info_nce(t, xs[0], xs[1], None, xs[2]).unwrap();
        train_objective(t, Some(ml), Some(cl), None, &w, Switches::ALL).unwrap().unwrap()
    });
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn reward_signs() {
    assert_eq!(step_reward(5.0, 3.5, false, 3.0, 2.0), 1.5);
    assert_eq!(step_reward(3.5, 5.0, false, 3.0, 2.0), -1.5);
    assert_eq!(step_reward(2.0, 2.0, true, 3.0, 2.0), 2.0);
    assert_eq!(step_reward(4.0, 4.0, true, 3.0, 2.0), -2.0);
}

proptest! {
    #[test]
    fn info_nce_is_non_negative_and_bounded_below_by_zero(
        q in proptest::collection::vec(-1.0f64..1.0, 3),
        k in proptest::collection::vec(-1.0f64..1.0, 3),
        n in proptest::collection::vec(-1.0f64..1.0, 6),
    ) {
        let w = [3.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 3.0];
        let negs = vec![n[..3].to_vec(), n[3..].to_vec()];
        let l = run_info_nce(&q, &k, &negs, &w);
        prop_assert!(l >= 0.0);
        prop_assert!((l - info_nce_oracle(&q, &k, &negs, &w)).abs() < 1e-9);
    }

    #[test]
    fn entropy_is_between_zero_and_log_n(raw in proptest::collection::vec(0.0f64..1.0, 2..10)) {
        let z: f64 = raw.iter().sum();
        prop_assume!(z > 1e-6);
        let p: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let h = entropy_of(&p);
        prop_assert!(h >= -1e-12 && h <= (p.len() as f64).ln() + 1e-12);
    }
}
