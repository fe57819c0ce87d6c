//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 7-9 are multi-hour training runs. They print NOT RUN unless
//! the binary gets `--include-ignored` (or `--ignored`), e.g.
//! `cargo test --release --test acceptance -- --include-ignored 7`.
//! Positional arguments filter criteria by number.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{boxed, corner_oracle, fd_worst, random_blob, random_keypoints, room};
use nalgebra::Point3;
use pushnav::geometry::{backproject, ground_truth_affine, project, CameraModel};
use pushnav::keypoints::{detect_corners, lift_keypoints, KeypointSet};
use pushnav::nie::{nie_forward, nie_loss, raw_observation, NieConfig, NieInput, NieNetwork, NieTarget, RAW_DIM};
use pushnav::policy::{policy_forward, PolicyConfig, PolicyInput, PolicyNetwork, Variant};
use pushnav::tasks::*;
use pushnav::tensor::{Graph, ParamStore, Tensor};
use pushnav::trainer::*;
use pushnav::worldsim::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Criterion {
    number: u32,
    name: &'static str,
    long: bool,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 10] = [
    Criterion { number: 1, name: "corner detector matches exhaustive scan", long: false, run: corners },
    Criterion { number: 2, name: "geometry round trips", long: false, run: geometry },
    Criterion { number: 3, name: "finite-difference gradient suite", long: false, run: gradients },
    Criterion { number: 4, name: "engine loss masking", long: false, run: masking },
    Criterion { number: 5, name: "reward and metric traces", long: false, run: traces },
    Criterion { number: 6, name: "supervised engine beats identity", long: false, run: supervised },
    Criterion { number: 7, name: "PPO point-goal sanity", long: true, run: pointnav },
    Criterion { number: 8, name: "ObsNav: engine over PPO baseline", long: true, run: obsnav_ordering },
    Criterion { number: 9, name: "ObjPlace: engine over baselines", long: true, run: objplace_ordering },
    Criterion { number: 10, name: "episode generation validity", long: false, run: generation },
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for c in &CRITERIA {
            println!("criterion-{}: test", c.number);
        }
        return;
    }
    let long = args.iter().any(|a| a == "--include-ignored" || a == "--ignored");
    let filters: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| filters.is_empty() || filters.contains(&c.number)) {
        if c.long && !long {
            println!("criterion {:>2} NOT RUN {}: multi-hour training run, pass --include-ignored", c.number, c.name);
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::new(false, format!("panicked: {msg}"))
            });
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {:>2} {verdict} {}: {} [{:.1} s]",
            c.number,
            c.name,
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        failed += !outcome.pass as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn within(start: Instant, limit: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t <= limit, format!("{:.1} s of {} s", t.as_secs_f64(), limit.as_secs()))
}

fn corners() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let mask = random_blob(&mut rng);
        if detect_corners(&mask).ok() != Some(corner_oracle(&mask)) {
            mismatches += 1;
        }
    }
    let (fast, time) = within(start, Duration::from_secs(10));
    Outcome::new(mismatches == 0 && fast, format!("{mismatches}/1000 masks differ, {time}"))
}

/// Box corners of every object, in the camera frame.
fn camera_corners(state: &WorldState, cam: &CameraModel) -> Vec<(u32, [Point3<f64>; 8])> {
    state
        .objects
        .iter()
        .map(|o| (o.id, o.corners().map(|p| cam.world_to_camera(&p))))
        .collect()
}

fn geometry() -> Outcome {
    let start = Instant::now();
    let cam = CameraModel::new(64, 64, 90.0, [0.7, 0.9, -2.3], 90.0, 30.0).unwrap();
    let mut round_trip: f64 = 0.0;
    for v in 0..64 {
        for u in 0..64 {
            let d = 0.05 + ((7 * u + 13 * v) % 101) as f64 * 0.099;
            let p = backproject(u as f64, v as f64, d, &cam).unwrap();
            let (pu, pv, pd) = project(&p, &cam).unwrap();
            round_trip = round_trip
                .max((pu - u as f64).abs())
                .max((pv - v as f64).abs())
                .max((pd - d).abs());
        }
    }

    // Random transitions over generated scenes, with pushes overrepresented.
    let cfg = TaskConfig::default();
    let mut episodes = Dataset::generate(Task::ObsNav, Split::Train, 20, 7, &cfg).unwrap().episodes;
    episodes.extend(Dataset::generate(Task::ObjPlace, Split::Train, 20, 7, &cfg).unwrap().episodes);
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut motion: f64 = 0.0;
    let (mut transitions, mut moved) = (0, 0);
    'outer: for ep in episodes.iter().cycle() {
        let mut state = ep.scene.clone();
        for _ in 0..25 {
            let action = if rng.gen_bool(0.5) {
                Action::ALL[rng.gen_range(5..9)]
            } else {
                Action::ALL[rng.gen_range(0..5)]
            };
            let (next, ev) = step(&state, action).unwrap();
            moved += (ev.displacement > 0.0) as usize;
            let (c0, c1) = (state.camera().unwrap(), next.camera().unwrap());
            let before = camera_corners(&state, &c0);
            let after = camera_corners(&next, &c1);
            for ((id, b), (_, a)) in before.iter().zip(&after) {
                let (p0, p1) = (state.object(*id).unwrap().pose, next.object(*id).unwrap().pose);
                let m = ground_truth_affine(&p0, &p1, &c0, &c1);
                for (pb, pa) in b.iter().zip(a) {
                    motion = motion.max((m.transform(pb) - pa).norm());
                }
            }
            state = next;
            transitions += 1;
            if transitions == 1000 {
                break 'outer;
            }
        }
    }
    let (fast, time) = within(start, Duration::from_secs(30));
    Outcome::new(
        round_trip <= 1e-9 && motion <= 1e-6 && moved > 0 && fast,
        format!(
            "round trip {round_trip:.1e} (<= 1e-9), corner motion {motion:.1e} (<= 1e-6) over {transitions} transitions with {moved} object moves, {time}"
        ),
    )
}

fn engine_config() -> NieConfig {
    NieConfig {
        categories: 6,
        hidden: 12,
        embed: 6,
        visual_dim: 4,
        state_hidden: 6,
        attn_dim: 6,
        out_dim: 5,
    }
}

fn perturb(store: &mut ParamStore<f64>, prefix: &str, rng: &mut impl Rng) {
    for id in store.ids() {
        if store.name(id).starts_with(prefix) {
            for x in store.get_mut(id).data_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
    }
}

fn engine_input(sets: &[KeypointSet], rng: &mut impl Rng) -> NieInput<f64> {
    let raws: Vec<Vec<f64>> = sets.iter().map(|_| (0..RAW_DIM).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let s: Vec<&KeypointSet> = sets.iter().collect();
    let r: Vec<&[f64]> = raws.iter().map(|r| r.as_slice()).collect();
    NieInput::new(&s, &r).unwrap()
}

fn engine_target(targets: &[KeypointSet], observed_from: &[KeypointSet], actions: Vec<usize>) -> NieTarget<f64> {
    let t: Vec<&[[f64; 24]]> = targets.iter().map(|s| s.points.as_slice()).collect();
    let observed = observed_from.iter().flat_map(|s| s.present.iter().copied()).collect();
    NieTarget::new(&t, actions, observed).unwrap()
}

fn jitter(sets: &[KeypointSet], rng: &mut impl Rng) -> Vec<KeypointSet> {
    let mut out = sets.to_vec();
    for s in &mut out {
        for p in s.points.iter_mut().flatten() {
            *p += rng.gen_range(-0.3..0.3);
        }
    }
    out
}

fn policy_frames() -> Vec<Observation> {
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

fn policy_loss(values: &[Tensor<f64>], net: &PolicyNetwork, inputs: &[PolicyInput<f64>], actions: &[usize]) -> (f64, pushnav::tensor::Gradients<f64>) {
    let mut g = Graph::new(values);
    let mut h = g.input(Tensor::zeros(vec![1, net.cfg.hidden]));
    let mut terms = Vec::new();
    for (k, (inp, &a)) in inputs.iter().zip(actions).enumerate() {
        let out = policy_forward(&mut g, net, inp, h).unwrap();
        h = out.hidden;
        let lp = g.slice_cols(out.log_probs, a, 1).unwrap();
        terms.push(g.scale(lp, -1.0 - k as f64));
        let v = g.add_scalar(out.value, -0.3);
        terms.push(g.mul(v, v).unwrap());
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = g.add(loss, t).unwrap();
    }
    let loss = g.sum(loss);
    (g.scalar(loss), g.backward(loss).unwrap())
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut rows = Vec::new();

    // Engine: keypoint loss plus a random projection of r^a.
    let cfg = engine_config();
    let mut store = ParamStore::<f64>::new();
    let net = NieNetwork::new(&mut store, "nie", cfg, &mut rng).unwrap();
    perturb(&mut store, "nie.affine.1", &mut rng);
    let sets: Vec<KeypointSet> = (0..3).map(|_| random_keypoints(&mut rng, 6, 0.6)).collect();
    let targets = jitter(&sets, &mut rng);
    let inp = engine_input(&sets, &mut rng);
    let visual = Tensor::from_f64(vec![3, 4], &(0..12).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
    let t = engine_target(&targets, &sets, vec![0, 5, 7]);
    let proj = Tensor::from_f64(
        vec![3 * NUM_ACTIONS, 5],
        &(0..3 * NUM_ACTIONS * 5).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
    )
    .unwrap();
    let eval = |values: &[Tensor<f64>]| {
        let mut g = Graph::new(values);
        let v = g.input(visual.clone());
        let out = nie_forward(&mut g, &net, &inp, Some(v)).unwrap();
        let l = nie_loss(&mut g, &out, &t).unwrap();
        let r = g.mul_const(out.repr, &proj).unwrap();
        let r = g.sum(r);
        let total = g.add(l, r).unwrap();
        (g.scalar(total), g.backward(total).unwrap())
    };
    let (_, grads) = eval(store.values());
    for (label, prefixes) in [
        ("engine affine head", &["nie.affine.", "nie.embed", "nie.kp."][..]),
        ("attention", &["nie.q.", "nie.k.", "nie.v.", "nie.out.", "nie.state."][..]),
    ] {
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for p in prefixes {
            let (w, c) = fd_worst(&store, &grads, p, 8, &mut rng, |v| eval(v).0);
            worst = worst.max(w);
            checked += c;
        }
        rows.push((label, worst, checked));
    }

    // Policy: two recurrent steps of actor and critic losses.
    let pcfg = PolicyConfig {
        resolution: 16,
        channels: [2, 3, 4],
        kernels: [5, 3, 3],
        visual_dim: 6,
        goal_hidden: 5,
        goal_dim: 4,
        hidden: 8,
        categories: 4,
        target_category: false,
        max_depth: 10.0,
    };
    let ncfg = NieConfig {
        categories: 4,
        hidden: 8,
        embed: 4,
        visual_dim: 6,
        state_hidden: 4,
        attn_dim: 4,
        out_dim: 3,
    };
    let mut store = ParamStore::<f64>::new();
    let net = PolicyNetwork::new(&mut store, pcfg, Variant::Nie, ncfg, &mut rng).unwrap();
    // Zero biases over blank image patches put pre-activations exactly on
    // the ReLU kink, where central differences see half a slope.
    for id in store.ids() {
        if store.name(id).ends_with(".b") {
            for x in store.get_mut(id).data_mut() {
                *x += rng.gen_range(-0.05..0.05);
            }
        }
    }
    let frames = policy_frames();
    let inputs: Vec<PolicyInput<f64>> = [&frames[0], &frames[2]]
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut inp = PolicyInput::new(&[*f], &[[0.5 - i as f64, 1.25]], 10.0).unwrap();
            let set = lift_keypoints(f, 4);
            let raw = raw_observation(f, 10.0);
            inp.keypoints = Some(NieInput::new(&[&set], &[raw.as_slice()]).unwrap());
            inp
        })
        .collect();
    let actions = [5, 2];
    let (_, grads) = policy_loss(store.values(), &net, &inputs, &actions);
    for (label, prefixes) in [
        ("actor", &["policy.actor"][..]),
        ("critic", &["policy.critic"][..]),
        ("recurrent cell", &["policy.gru"][..]),
        ("encoders", &["policy.color", "policy.depth", "policy.fuse", "policy.goal"][..]),
    ] {
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for p in prefixes {
            let (w, c) = fd_worst(&store, &grads, p, 12, &mut rng, |v| policy_loss(v, &net, &inputs, &actions).0);
            worst = worst.max(w);
            checked += c;
        }
        rows.push((label, worst, checked));
    }

    let (fast, time) = within(start, Duration::from_secs(120));
    let pass = fast && rows.iter().all(|&(_, w, c)| c > 0 && w <= 1e-4);
    let detail = rows
        .iter()
        .map(|(l, w, c)| format!("{l} {w:.1e} ({c} entries)"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(pass, format!("{detail}; bound 1e-4, {time}"))
}

fn masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let cfg = NieConfig {
        visual_dim: 0,
        ..engine_config()
    };
    let mut store = ParamStore::<f64>::new();
    let net = NieNetwork::new(&mut store, "nie", cfg, &mut rng).unwrap();
    perturb(&mut store, "nie.affine.1", &mut rng);
    let b = 6;
    let sets: Vec<KeypointSet> = (0..b).map(|_| random_keypoints(&mut rng, 6, 0.5)).collect();
    let targets = jitter(&sets, &mut rng);
    let actions: Vec<usize> = (0..b).map(|_| rng.gen_range(0..NUM_ACTIONS)).collect();
    let inp = engine_input(&sets, &mut rng);
    let mut g = Graph::new(store.values());
    let out = nie_forward(&mut g, &net, &inp, None).unwrap();
    let l = nie_loss(&mut g, &out, &engine_target(&targets, &sets, actions.clone())).unwrap();
    let grads = g.backward_watch(l, &[out.affine]).unwrap();
    let gm = grads.wrt(out.affine).unwrap().data();
    let (mut masked, mut leaks, mut live) = (0, 0, 0);
    for (s, set) in sets.iter().enumerate() {
        for a in 0..NUM_ACTIONS {
            for c in 0..6 {
                let r = out.row(s, a, c);
                let row = &gm[r * 12..r * 12 + 12];
                if a == actions[s] && set.present[c] {
                    live += row.iter().any(|&x| x != 0.0) as usize;
                } else {
                    masked += 1;
                    leaks += row.iter().any(|&x| x != 0.0) as usize;
                }
            }
        }
    }
    // Embedding rows of actions nobody executed get exactly nothing.
    let act = grads.param(store.id("nie.act").unwrap()).unwrap();
    let d = act.shape()[1];
    let stray = (0..NUM_ACTIONS)
        .filter(|a| !actions.contains(a))
        .filter(|&a| act.data()[a * d..(a + 1) * d].iter().any(|&x| x != 0.0))
        .count();
    Outcome::new(
        leaks == 0 && stray == 0 && live > 0,
        format!("{leaks} of {masked} masked affine rows and {stray} unexecuted action embeddings got gradient; {live} live rows"),
    )
}

/// One hand-computed step: the action and the distance, path term and
/// success term it should produce.
struct Hand {
    action: Action,
    distance: f64,
    path: f64,
    success: f64,
}

fn hand(action: Action, distance: f64, path: f64, success: f64) -> Hand {
    Hand {
        action,
        distance,
        path,
        success,
    }
}

fn check_trace(ep: &Episode, d0: f64, steps: &[Hand], penalty: f64) -> Result<EpisodeResult, String> {
    let mut env = Env::new(ep.clone(), RewardConfig::default());
    let mut d_prev = d0;
    for (t, h) in steps.iter().enumerate() {
        let tr = env.step(h.action).map_err(|e| e.to_string())?;
        let expect = h.success + h.path + (d_prev - h.distance) + penalty;
        if tr.reward.to_bits() != expect.to_bits() {
            return Err(format!("step {t} {}: reward {} expected {expect}", h.action.name(), tr.reward));
        }
        let d = task_distance(&env.state, &ep.goal);
        if d != h.distance {
            return Err(format!("step {t}: distance {d} expected {}", h.distance));
        }
        d_prev = h.distance;
    }
    if !env.done() {
        return Err("episode did not end".into());
    }
    Ok(env.result())
}

/// Corridor along row 2 with an alcove at (5, 1) and a tall box blocking
/// (5, 2). The agent starts at (3, 2) facing +x; the goal is (7, 2).
fn obsnav_trace() -> Result<EpisodeResult, String> {
    let mut s = room(10, 5, [3, 2], 90);
    for i in 0..10 {
        s.grid.set_wall(i, 3, true);
        if i != 5 {
            s.grid.set_wall(i, 1, true);
        }
    }
    s.objects.push(boxed(3, 0, [0.24, 0.24, 1.2], 1.375, 0.625));
    s.target = Grid::cell_center(7, 2);
    s.validate().map_err(|e| e.to_string())?;
    let ep = Episode {
        seed: 0,
        goal: Goal {
            task: Task::ObsNav,
            target_object: None,
        },
        scene: s,
        shortest_path: 1.0,
        template: "hand".into(),
    };
    if path_exists(&ep.scene) {
        return Err("spawn should be blocked".into());
    }
    // Blocked at spawn: distance falls back to the walls-only 4 cells.
    let steps = [
        hand(Action::MoveAhead, 0.75, 0.0, 0.0),
        // Box slides into the alcove: path opens.
        hand(Action::RightPush, 0.75, 0.5, 0.0),
        // And back out: blocked again.
        hand(Action::LeftPush, 0.75, -0.5, 0.0),
        hand(Action::RightPush, 0.75, 0.5, 0.0),
        hand(Action::MoveAhead, 0.5, 0.0, 0.0),
        hand(Action::MoveAhead, 0.25, 0.0, 0.0),
        hand(Action::LookDown, 0.25, 0.0, 0.0),
        hand(Action::LookUp, 0.25, 0.0, 0.0),
        hand(Action::MoveAhead, 0.0, 0.0, 0.0),
        hand(Action::End, 0.0, 0.0, 10.0),
    ];
    check_trace(&ep, 1.0, &steps, -0.01)
}

/// A mass-1 box pushed 0.5 m at a time along row 2 to a target four cells
/// ahead of it.
fn objplace_trace() -> Result<EpisodeResult, String> {
    let mut s = room(10, 6, [2, 2], 90);
    s.objects.push(boxed(3, 1, [0.24, 0.24, 1.2], 1.125, 0.625));
    s.target = Grid::cell_center(8, 2);
    s.validate().map_err(|e| e.to_string())?;
    let ep = Episode {
        seed: 0,
        goal: Goal {
            task: Task::ObjPlace,
            target_object: Some(3),
        },
        scene: s,
        shortest_path: 1.0,
        template: "hand".into(),
    };
    let steps = [
        hand(Action::Push, 0.5, 0.0, 0.0),
        hand(Action::MoveAhead, 0.5, 0.0, 0.0),
        hand(Action::RotateRight, 0.5, 0.0, 0.0),
        hand(Action::RotateLeft, 0.5, 0.0, 0.0),
        hand(Action::LookDown, 0.5, 0.0, 0.0),
        hand(Action::LookUp, 0.5, 0.0, 0.0),
        hand(Action::Pull, 1.0, 0.0, 0.0),
        hand(Action::Push, 0.5, 0.0, 0.0),
        hand(Action::Push, 0.0, 0.0, 0.0),
        hand(Action::End, 0.0, 0.0, 10.0),
    ];
    check_trace(&ep, 1.0, &steps, -0.002)
}

fn traces() -> Outcome {
    let mut problems = Vec::new();
    let mut results = Vec::new();
    for (label, trace, path) in [("obsnav", obsnav_trace as fn() -> _, 1.0), ("objplace", objplace_trace, 2.0)] {
        match trace() {
            Ok(r) => {
                let want = EpisodeResult {
                    success: true,
                    final_distance: 0.0,
                    path_length: path,
                    shortest_path: 1.0,
                    steps: 10,
                };
                if r != want {
                    problems.push(format!("{label} result {r:?}"));
                }
                results.push(r);
            }
            Err(e) => problems.push(format!("{label}: {e}")),
        }
    }
    if let Ok(m) = compute_metrics(&results) {
        // SPL terms 1.0 / max(1.0, 1.0) and 1.0 / max(2.0, 1.0).
        if (m.sr, m.fdt, m.spl) != (100.0, 0.0, 0.75) {
            problems.push(format!("trace metrics {m:?}"));
        }
    }
    let ep = |success, final_distance, path_length, shortest_path| EpisodeResult {
        success,
        final_distance,
        path_length,
        shortest_path,
        steps: 1,
    };
    let m = compute_metrics(&[ep(true, 0.1, 4.0, 2.0)]).unwrap();
    if (m.sr, m.fdt, m.spl) != (100.0, 0.1, 0.5) {
        problems.push(format!("S=1 L=2 P=4 gave {m:?}"));
    }
    let m = compute_metrics(&[ep(true, 0.0, 2.0, 2.0), ep(false, 1.5, 3.0, 1.0), ep(false, 2.5, 0.0, 1.0), ep(true, 0.0, 1.0, 2.0)]).unwrap();
    if (m.sr, m.fdt, m.spl) != (50.0, 1.0, 0.5) {
        problems.push(format!("four-episode example gave {m:?}"));
    }
    Outcome::new(
        problems.is_empty(),
        if problems.is_empty() {
            "10-step traces bitwise (+10, +0.5, -0.5, -0.01, -0.002 branches), SPL/SR/FDT exact".to_string()
        } else {
            problems.join("; ")
        },
    )
}

fn desk_sets(task: Task, seed: u64) -> (Dataset, Dataset, Dataset) {
    let cfg = TaskConfig::default();
    let gen = |split, count| Dataset::generate(task, split, count, seed, &cfg).unwrap();
    (gen(Split::Train, 500), gen(Split::Val, 100), gen(Split::Test, 100))
}

fn supervised() -> Outcome {
    let start = Instant::now();
    let (train, val, _) = desk_sets(Task::ObsNav, 1);
    let perception = Perception {
        categories: NieConfig::default().categories,
        max_depth: 10.0,
        corruption: Default::default(),
    };
    let train = collect_transitions(&train.episodes, 50_000, 11, &perception, 60).unwrap();
    let test = collect_transitions(&val.episodes, 5_000, 12, &perception, 60).unwrap();
    let report = train_supervised(&train, &test, &SupervisedConfig { seed: 13, ..Default::default() }).unwrap();
    let closed_form = identity_l1(&test);
    let ratio = report.trained_l1 / closed_form;
    let (fast, time) = within(start, Duration::from_secs(30 * 60));
    Outcome::new(
        ratio < 0.5 && fast,
        format!(
            "held-out L1 {:.4} vs identity {closed_form:.4} (ratio {ratio:.3}, needs < 0.5), {time}",
            report.trained_l1
        ),
    )
}

fn generation() -> Outcome {
    let start = Instant::now();
    let mut problems = Vec::new();
    let mut counts = [0usize; 2];
    for (k, task) in [Task::ObsNav, Task::ObjPlace].into_iter().enumerate() {
        let (a, b, c) = desk_sets(task, 1);
        let (a2, b2, c2) = desk_sets(task, 1);
        for (x, y) in [(&a, &a2), (&b, &b2), (&c, &c2)] {
            if x.to_json() != y.to_json() {
                problems.push(format!("{} {:?} not deterministic", task.name(), x.split));
            }
        }
        for ep in a.episodes.iter().chain(&b.episodes).chain(&c.episodes) {
            counts[k] += 1;
            let s = &ep.scene;
            let ok = match task {
                Task::ObsNav => !path_exists(s),
                _ => {
                    let o = s.object(ep.goal.target_object.unwrap()).unwrap();
                    let [x, z] = o.center();
                    ((x - s.target[0]).powi(2) + (z - s.target[1]).powi(2)).sqrt() >= 2.0
                }
            };
            if !ok {
                problems.push(format!("{} episode seed {}", task.name(), ep.seed));
            }
        }
    }
    // Same bytes on disk.
    let dir = tempfile::tempdir().unwrap();
    let files: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let p = dir.path().join(format!("{i}.json"));
            Dataset::generate(Task::ObsNav, Split::Test, 100, 1, &TaskConfig::default()).unwrap().save(&p).unwrap();
            std::fs::read(&p).unwrap()
        })
        .collect();
    if files[0] != files[1] {
        problems.push("saved files differ".into());
    }
    let time = format!("{:.1} s", start.elapsed().as_secs_f64());
    Outcome::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{} ObsNav episodes blocked, {} ObjPlace episodes separated, files byte-identical, {time}", counts[0], counts[1])
        } else {
            problems.join("; ")
        },
    )
}

/// Full desk-scale run: train on the desk train split, then evaluate the
/// final checkpoint on 100 test episodes. Returns SR in percent.
fn desk_run(task: Task, variant: Variant, seed: u64, root: &Path) -> f64 {
    let (train, val, test) = desk_sets(task, 1);
    let dir = root.join(format!("{}-{}-{seed}", task.name(), variant.name()));
    std::fs::create_dir_all(&dir).unwrap();
    let (tp, vp) = (dir.join("train.json"), dir.join("val.json"));
    train.save(&tp).unwrap();
    val.save(&vp).unwrap();
    let cfg = TrainConfig {
        task,
        variant,
        seed,
        ..Default::default()
    };
    train_loop(
        &cfg,
        &RunPaths {
            train: tp,
            val: Some(vp),
            run_dir: dir.join("run"),
        },
    )
    .unwrap();
    let (cfg, store, net) = load_model(&dir.join("run").join("final.pnck")).unwrap();
    let eval = EvalConfig {
        reward: cfg.reward,
        perception: perception(&cfg),
        seed,
        batch: cfg.workers,
        greedy: false,
    };
    let trajs = evaluate(&net, store.values(), &test.episodes, &eval).unwrap();
    let results: Vec<_> = trajs.iter().map(|t| t.result).collect();
    let sr = compute_metrics(&results).unwrap().sr;
    println!("  {} {} seed {seed}: test SR {sr:.1}", task.name(), variant.name());
    sr
}

fn run_root() -> tempfile::TempDir {
    tempfile::Builder::new().prefix("pushnav-acceptance").tempdir().unwrap()
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn mean_sr(task: Task, variant: Variant, root: &Path) -> f64 {
    SEEDS.iter().map(|&s| desk_run(task, variant, s, root)).sum::<f64>() / SEEDS.len() as f64
}

fn pointnav() -> Outcome {
    let start = Instant::now();
    let root = run_root();
    let sr = desk_run(Task::PointNav, Variant::Ppo, 1, root.path());
    let (fast, time) = within(start, Duration::from_secs(4 * 3600));
    Outcome::new(sr >= 90.0 && fast, format!("test SR {sr:.1} (needs >= 90), {time}"))
}

fn obsnav_ordering() -> Outcome {
    let start = Instant::now();
    let root = run_root();
    let nie = mean_sr(Task::ObsNav, Variant::Nie, root.path());
    let ppo = mean_sr(Task::ObsNav, Variant::Ppo, root.path());
    let (fast, time) = within(start, Duration::from_secs(12 * 3600));
    Outcome::new(
        nie - ppo >= 5.0 && fast,
        format!("mean SR engine {nie:.1} vs PPO {ppo:.1} (needs a 5 point lead), {time}"),
    )
}

fn objplace_ordering() -> Outcome {
    let root = run_root();
    let nie = mean_sr(Task::ObjPlace, Variant::Nie, root.path());
    let ppo = mean_sr(Task::ObjPlace, Variant::Ppo, root.path());
    let rgbdk = mean_sr(Task::ObjPlace, Variant::Rgbdk, root.path());
    Outcome::new(
        nie > ppo && rgbdk <= nie,
        format!("mean SR engine {nie:.1}, PPO {ppo:.1}, keypoints without engine loss {rgbdk:.1}"),
    )
}
