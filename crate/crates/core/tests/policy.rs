mod common;

use common::{boxed, fd_worst, room};
use pushnav::keypoints::lift_keypoints;
use pushnav::nie::{raw_observation, NieConfig, NieInput};
use pushnav::policy::*;
use pushnav::tensor::{Graph, ParamStore, Tensor};
use pushnav::worldsim::{render, step, Action, Observation, NUM_ACTIONS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(target_category: bool) -> (PolicyConfig, NieConfig) {
    let p = PolicyConfig {
        resolution: 16,
        channels: [2, 3, 4],
        kernels: [5, 3, 3],
        visual_dim: 6,
        goal_hidden: 5,
        goal_dim: 4,
        hidden: 8,
        categories: 4,
        target_category,
        max_depth: 10.0,
    };
    let n = NieConfig {
        hidden: 8,
        embed: 4,
        state_hidden: 4,
        attn_dim: 4,
        out_dim: 3,
        ..NieConfig::default()
    };
    (p, n)
}

fn build(variant: Variant, target_category: bool, seed: u64) -> (ParamStore<f64>, PolicyNetwork) {
    let (p, n) = tiny(target_category);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = PolicyNetwork::new(&mut store, p, variant, n, &mut rng).unwrap();
    (store, net)
}

fn frames() -> Vec<Observation> {
    let mut s = room(12, 12, [5, 2], 0);
    s.params.resolution = 16;
    s.objects.push(boxed(0, 1, [0.5, 0.5, 0.5], 1.375, 1.375));
    s.objects.push(boxed(1, 3, [0.3, 0.6, 0.8], 1.875, 1.875));
    let mut out = vec![render(&s)];
    for a in [Action::RotateRight, Action::LookDown] {
        s = step(&s, a).unwrap().0;
        out.push(render(&s));
    }
    out
}

fn input(frames: &[&Observation], net: &PolicyNetwork) -> PolicyInput<f64> {
    let goals: Vec<[f64; 2]> = (0..frames.len()).map(|i| [0.5 - i as f64, 1.25]).collect();
    let mut inp = PolicyInput::new(frames, &goals, 10.0).unwrap();
    if net.cfg.target_category {
        inp.target_category = Some((0..frames.len()).map(|i| i % 4).collect());
    }
    if net.variant.has_engine() {
        let sets: Vec<_> = frames.iter().map(|o| lift_keypoints(o, 4)).collect();
        let raws: Vec<_> = frames.iter().map(|o| raw_observation(o, 10.0)).collect();
        let s: Vec<_> = sets.iter().collect();
        let r: Vec<&[f64]> = raws.iter().map(|r| r.as_slice()).collect();
        inp.keypoints = Some(NieInput::new(&s, &r).unwrap());
    }
    inp
}

fn zero_hidden(g: &mut Graph<'_, f64>, b: usize, net: &PolicyNetwork) -> pushnav::tensor::Var {
    g.input(Tensor::zeros(vec![b, net.cfg.hidden]))
}

#[test]
fn output_is_a_distribution_and_deterministic() {
    for variant in [Variant::Nie, Variant::Ppo, Variant::Rgbdk] {
        let (store, net) = build(variant, false, 1);
        let fs = frames();
        let refs: Vec<_> = fs.iter().collect();
        let inp = input(&refs, &net);
        let run = || {
            let mut g = Graph::new(store.values());
            let h = zero_hidden(&mut g, 3, &net);
            let out = policy_forward(&mut g, &net, &inp, h).unwrap();
            (g.tensor(out.probs), g.tensor(out.value), g.tensor(out.hidden))
        };
        let first = run();
        assert_eq!(first, run());
        let probs = first.0.data();
        for b in 0..3 {
            let row = &probs[b * NUM_ACTIONS..(b + 1) * NUM_ACTIONS];
            assert!(row.iter().all(|&p| p > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        assert_eq!(first.1.shape(), &[3, 1]);
    }
}

#[test]
fn ppo_variant_has_no_engine_parameters() {
    let (store, net) = build(Variant::Ppo, false, 2);
    assert!(net.nie.is_none());
    assert!(store.names().iter().all(|n| !n.starts_with("nie")));
    let (store, _) = build(Variant::Rgbdk, false, 2);
    assert!(store.names().iter().any(|n| n.starts_with("nie")));
}

#[test]
fn engine_variants_require_keypoints() {
    let (store, net) = build(Variant::Nie, false, 3);
    let fs = frames();
    let mut inp = input(&[&fs[0]], &net);
    inp.keypoints = None;
    let mut g = Graph::new(store.values());
    let h = zero_hidden(&mut g, 1, &net);
    assert!(policy_forward(&mut g, &net, &inp, h).is_err());
}

#[test]
fn object_placement_goal_uses_target_category() {
    let (store, net) = build(Variant::Nie, true, 4);
    let fs = frames();
    let mut inp = input(&[&fs[0]], &net);
    let probs = |inp: &PolicyInput<f64>| {
        let mut g = Graph::new(store.values());
        let h = zero_hidden(&mut g, 1, &net);
        let out = policy_forward(&mut g, &net, inp, h).unwrap();
        g.value(out.probs).to_vec()
    };
    let a = probs(&inp);
    inp.target_category = Some(vec![2]);
    assert_ne!(a, probs(&inp));
    inp.target_category = None;
    let mut g = Graph::new(store.values());
    let h = zero_hidden(&mut g, 1, &net);
    assert!(policy_forward(&mut g, &net, &inp, h).is_err());
}

#[test]
fn different_histories_ending_in_same_frame_differ() {
    let (store, net) = build(Variant::Nie, false, 5);
    let fs = frames();
    let run = |first: &Observation| {
        let mut g = Graph::new(store.values());
        let h = zero_hidden(&mut g, 1, &net);
        let o1 = policy_forward(&mut g, &net, &input(&[first], &net), h).unwrap();
        let o2 = policy_forward(&mut g, &net, &input(&[&fs[2]], &net), o1.hidden).unwrap();
        (g.value(o2.hidden).to_vec(), g.value(o2.probs).to_vec())
    };
    let (ha, pa) = run(&fs[0]);
    let (hb, pb) = run(&fs[1]);
    assert_ne!(ha, hb);
    assert_ne!(pa, pb);
}

/// Two-step loss over actor and critic heads, as used in training.
fn two_step(values: &[Tensor<f64>], net: &PolicyNetwork, inputs: &[PolicyInput<f64>], actions: &[usize], actor: bool, critic: bool) -> (f64, pushnav::tensor::Gradients<f64>) {
    let mut g = Graph::new(values);
    let mut h = zero_hidden(&mut g, 1, net);
    let mut terms = Vec::new();
    for (inp, &a) in inputs.iter().zip(actions) {
        let out = policy_forward(&mut g, net, inp, h).unwrap();
        h = out.hidden;
        if actor {
            let lp = g.slice_cols(out.log_probs, a, 1).unwrap();
            terms.push(g.scale(lp, -1.0));
        }
        if critic {
            let v = g.mul(out.value, out.value).unwrap();
            terms.push(v);
        }
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = g.add(loss, t).unwrap();
    }
    let loss = g.sum(loss);
    (g.scalar(loss), g.backward(loss).unwrap())
}

#[test]
fn actor_and_critic_gradients_match_finite_differences() {
    let (store, net) = build(Variant::Nie, true, 6);
    let fs = frames();
    let inputs = vec![input(&[&fs[0]], &net), input(&[&fs[2]], &net)];
    let actions = [5, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (actor, critic) in [(true, false), (false, true)] {
        let (_, grads) = two_step(store.values(), &net, &inputs, &actions, actor, critic);
        for prefix in ["policy", "nie"] {
            let (worst, checked) = fd_worst(&store, &grads, prefix, 4, &mut rng, |v| {
                two_step(v, &net, &inputs, &actions, actor, critic).0
            });
            assert!(checked > 10);
            assert!(worst <= 1e-4, "{prefix} actor={actor}: {worst:e}");
        }
    }
}

#[test]
fn heads_are_gradient_isolated() {
    let (store, net) = build(Variant::Nie, false, 8);
    let fs = frames();
    let inputs = vec![input(&[&fs[1]], &net)];
    let zero = |g: Option<&Tensor<f64>>| g.is_none_or(|t| t.data().iter().all(|&x| x == 0.0));
    let (_, ga) = two_step(store.values(), &net, &inputs, &[3], true, false);
    let (_, gc) = two_step(store.values(), &net, &inputs, &[3], false, true);
    for id in store.ids() {
        let name = store.name(id);
        if name.starts_with("policy.critic") {
            assert!(zero(ga.param(id)), "{name}");
            assert!(!zero(gc.param(id)), "{name}");
        }
        if name.starts_with("policy.actor") {
            assert!(zero(gc.param(id)), "{name}");
            assert!(!zero(ga.param(id)), "{name}");
        }
    }
}

#[test]
fn sampling_helpers() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let probs = [0.0, 0.0, 1.0, 0.0];
    for _ in 0..100 {
        assert_eq!(sample_action(&probs, &mut rng), 2);
    }
    assert_eq!(greedy_action(&[0.1, 0.5, 0.4]), 1);
    let probs = [0.25, 0.75];
    let hits = (0..10_000).filter(|_| sample_action(&probs, &mut rng) == 1).count();
    assert!((hits as f64 / 10_000.0 - 0.75).abs() < 0.02);
}
