#![allow(dead_code)]

use pushnav::geometry::ObjectPose;
use pushnav::worldsim::{AgentState, Grid, ObjectInstance, SimParams, WorldState};

/// Walled room of `w x d` cells with the agent at `cell` facing `azimuth`.
pub fn room(w: usize, d: usize, cell: [usize; 2], azimuth: u32) -> WorldState {
    WorldState {
        params: SimParams::default(),
        grid: Grid::room(w, d),
        objects: Vec::new(),
        agent: AgentState {
            cell,
            azimuth,
            elevation: 0,
            camera_height_mm: 900,
        },
        target: [w as f64 * 0.125, d as f64 * 0.125],
        steps: 0,
        seed: 0,
        terminal: false,
    }
}

pub fn boxed(id: u32, category: u32, size: [f64; 3], x: f64, z: f64) -> ObjectInstance {
    ObjectInstance {
        id,
        category,
        size,
        pose: ObjectPose::new([x, 0.0, z], 0.0),
        mass: 1.0,
    }
}

use pushnav::tensor::{Gradients, ParamStore, Tensor};
use rand::Rng;

/// Central difference at step `h` for entry `i` of parameter `p`.
fn central(values: &mut [Tensor<f64>], p: usize, i: usize, h: f64, f: &impl Fn(&[Tensor<f64>]) -> f64) -> f64 {
    let x = values[p].data()[i];
    values[p].data_mut()[i] = x + h;
    let up = f(values);
    values[p].data_mut()[i] = x - h;
    let down = f(values);
    values[p].data_mut()[i] = x;
    (up - down) / (2.0 * h)
}

/// Worst relative error between analytic gradients and central differences
/// over `per_tensor` sampled entries of every parameter named with `prefix`.
/// Two step sizes are tried per entry so a ReLU kink straddled by one step
/// does not register as a gradient bug.
pub fn fd_worst(
    store: &ParamStore<f64>,
    grads: &Gradients<f64>,
    prefix: &str,
    per_tensor: usize,
    rng: &mut impl Rng,
    f: impl Fn(&[Tensor<f64>]) -> f64,
) -> (f64, usize) {
    let mut values = store.values().to_vec();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in store.ids() {
        if !store.name(id).starts_with(prefix) {
            continue;
        }
        let p = id.index();
        let zero = Tensor::zeros(values[p].shape().to_vec());
        let analytic = grads.param(id).unwrap_or(&zero).clone();
        for _ in 0..per_tensor.min(values[p].len()) {
            let i = rng.gen_range(0..values[p].len());
            let a = analytic.data()[i];
            let err = [1e-5, 1e-6]
                .iter()
                .map(|&h| {
                    let n = central(&mut values, p, i, h, &f);
                    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
                })
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

use pushnav::keypoints::KeypointSet;

/// Keypoint set with each category present with probability `p`; present
/// categories get points scattered in front of the camera.
pub fn random_keypoints(rng: &mut impl Rng, categories: usize, p: f64) -> KeypointSet {
    let mut set = KeypointSet::empty(categories);
    for c in 0..categories {
        if rng.gen_bool(p) {
            set.present[c] = true;
            set.source[c] = Some(c as u32);
            for k in 0..8 {
                set.points[c][3 * k] = rng.gen_range(-1.0..1.0);
                set.points[c][3 * k + 1] = rng.gen_range(-0.9..0.5);
                set.points[c][3 * k + 2] = rng.gen_range(0.5..3.0);
            }
        }
    }
    set
}

/// Small networks and 16 px frames, for tests that run the trainer.
pub fn tiny_train_config(
    task: pushnav::tasks::Task,
    variant: pushnav::policy::Variant,
) -> pushnav::trainer::TrainConfig {
    use pushnav::nie::NieConfig;
    use pushnav::policy::PolicyConfig;
    pushnav::trainer::TrainConfig {
        task,
        variant,
        seed: 3,
        workers: 1,
        horizon: 6,
        epochs: 2,
        minibatches: 1,
        total_steps: 18,
        eval_period: 12,
        eval_episodes: 2,
        log_trajectories: 2,
        policy: PolicyConfig {
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
        },
        nie: NieConfig {
            categories: 4,
            hidden: 8,
            embed: 4,
            visual_dim: 6,
            state_hidden: 5,
            attn_dim: 6,
            out_dim: 3,
        },
        reward: pushnav::tasks::RewardConfig {
            max_steps: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Task generation matching [`tiny_train_config`].
pub fn tiny_task_config() -> pushnav::tasks::TaskConfig {
    let mut cfg = pushnav::tasks::TaskConfig {
        categories: 4,
        ..Default::default()
    };
    cfg.sim.resolution = 16;
    cfg
}

/// Exhaustive two-pass scan: find the best score, then the first
/// row-major member attaining it.
pub fn corner_oracle(mask: &pushnav::keypoints::Mask) -> [pushnav::keypoints::Pixel; 8] {
    let members: Vec<(usize, usize)> = (0..mask.height)
        .flat_map(|v| (0..mask.width).map(move |u| (u, v)))
        .filter(|&(u, v)| mask.get(u, v))
        .collect();
    let scores: [Box<dyn Fn(i64, i64) -> i64>; 8] = [
        Box::new(|x, _| x),
        Box::new(|_, y| y),
        Box::new(|x, _| -x),
        Box::new(|_, y| -y),
        Box::new(|x, y| x + y),
        Box::new(|x, y| -x - y),
        Box::new(|x, y| x - y),
        Box::new(|x, y| y - x),
    ];
    let mut out = [(0, 0); 8];
    for (k, f) in scores.iter().enumerate() {
        let s = |&(u, v): &(usize, usize)| f(u as i64, v as i64);
        let best = members.iter().map(s).max().unwrap();
        let mut ties: Vec<_> = members.iter().filter(|p| s(p) == best).copied().collect();
        ties.sort_by_key(|&(u, v)| (v, u));
        out[k] = ties[0];
    }
    out
}

/// Union of a few rectangles plus scattered pixels.
pub fn random_blob(rng: &mut impl Rng) -> pushnav::keypoints::Mask {
    let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
    let mut mask = pushnav::keypoints::Mask::new(w, h);
    for _ in 0..rng.gen_range(1..4) {
        let (u0, v0) = (rng.gen_range(0..w), rng.gen_range(0..h));
        let (u1, v1) = (rng.gen_range(u0..w), rng.gen_range(v0..h));
        for v in v0..=v1 {
            for u in u0..=u1 {
                mask.set(u, v, true);
            }
        }
    }
    for _ in 0..rng.gen_range(0..20) {
        mask.set(rng.gen_range(0..w), rng.gen_range(0..h), true);
    }
    mask
}
