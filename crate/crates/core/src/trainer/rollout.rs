use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::geometry::{ground_truth_affine, GeometryError};
use crate::keypoints::{lift_keypoints, lift_keypoints_corrupted, KeypointSet, MaskCorruption, NUM_KEYPOINTS};
use crate::nie::{raw_observation, NieInput};
use crate::policy::{policy_forward, sample_action, PolicyInput, PolicyNetwork};
use crate::tasks::{derive_seed, Env, Episode, EpisodeResult, RewardConfig, Task};
use crate::tensor::{Graph, Scalar, Tensor, TensorError};
use crate::worldsim::{render, Action, Observation, WorldState};

const WORKER_STREAM: u64 = 0x776f_726b_6572_0001;

/// Everything the networks read from one simulator state.
#[derive(Debug, Clone)]
pub struct Frame {
    pub obs: Observation,
    pub keypoints: KeypointSet,
    /// Pooled depth for the engine.
    pub raw: Vec<f64>,
    /// Target offset (right, forward) in the agent frame.
    pub goal: [f64; 2],
    pub target_category: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perception {
    pub categories: usize,
    pub max_depth: f64,
    pub corruption: MaskCorruption,
}

impl Perception {
    pub fn frame(&self, state: &WorldState, episode: &Episode, rng: &mut impl Rng) -> Frame {
        let obs = render(state);
        let keypoints = if self.corruption == MaskCorruption::default() {
            lift_keypoints(&obs, self.categories)
        } else {
            lift_keypoints_corrupted(&obs, self.categories, &self.corruption, rng)
        };
        let raw = raw_observation(&obs, self.max_depth);
        let target_category = match episode.goal.task {
            Task::ObjPlace => episode
                .goal
                .target_object
                .and_then(|id| state.object(id))
                .map(|o| o.category as usize),
            _ => None,
        };
        Frame {
            goal: state.agent.relative(state.target),
            obs,
            keypoints,
            raw,
            target_category,
        }
    }
}

/// Batched network input for a set of frames.
pub fn policy_input<T: Scalar>(frames: &[&Frame], net: &PolicyNetwork) -> Result<PolicyInput<T>, TensorError> {
    let obs: Vec<&Observation> = frames.iter().map(|f| &f.obs).collect();
    let goals: Vec<[f64; 2]> = frames.iter().map(|f| f.goal).collect();
    let mut input = PolicyInput::new(&obs, &goals, net.cfg.max_depth)?;
    if net.cfg.target_category {
        input.target_category = Some(frames.iter().map(|f| f.target_category.unwrap_or(0)).collect());
    }
    if net.nie.is_some() {
        let sets: Vec<&KeypointSet> = frames.iter().map(|f| &f.keypoints).collect();
        let raws: Vec<&[f64]> = frames.iter().map(|f| f.raw.as_slice()).collect();
        input.keypoints = Some(NieInput::new(&sets, &raws)?);
    }
    Ok(input)
}

/// `t^{a*}`: where each observed category's keypoints land in the next
/// camera frame, from the true object and camera motion. Unobserved rows
/// are zero.
pub fn nie_target(
    prev: &WorldState,
    next: &WorldState,
    keypoints: &KeypointSet,
) -> Result<Vec<[f64; NUM_KEYPOINTS * 3]>, GeometryError> {
    let cam_t = prev.camera()?;
    let cam_t1 = next.camera()?;
    let mut out = vec![[0.0; NUM_KEYPOINTS * 3]; keypoints.categories()];
    for c in keypoints.observed() {
        let Some(id) = keypoints.source[c] else { continue };
        let (Some(o0), Some(o1)) = (prev.object(id), next.object(id)) else {
            continue;
        };
        let m = ground_truth_affine(&o0.pose, &o1.pose, &cam_t, &cam_t1);
        for k in 0..NUM_KEYPOINTS {
            let p = m.transform(&keypoints.point(c, k));
            out[c][3 * k..3 * k + 3].copy_from_slice(&[p.x, p.y, p.z]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub frame: Frame,
    pub episode_seed: u64,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    /// The episode ended with this step.
    pub done: bool,
    pub nie_target: Vec<[f64; NUM_KEYPOINTS * 3]>,
}

/// One worker's contribution to an update.
#[derive(Debug, Clone)]
pub struct Segment {
    pub worker: usize,
    /// Recurrent state entering the first step.
    pub hidden0: Vec<f64>,
    pub steps: Vec<StepRecord>,
    /// Value of the state after the last step.
    pub bootstrap: f64,
    pub finished: Vec<EpisodeResult>,
}

/// A simulator, its policy state and its own random stream.
pub struct Worker {
    pub id: usize,
    env: Env,
    frame: Frame,
    hidden: Vec<f64>,
    rng: ChaCha8Rng,
    episodes: Arc<[Episode]>,
    reward: RewardConfig,
    perception: Perception,
}

impl Worker {
    pub fn new(
        id: usize,
        episodes: Arc<[Episode]>,
        seed: u64,
        perception: Perception,
        reward: RewardConfig,
        hidden_size: usize,
    ) -> Result<Self, TrainError> {
        if episodes.is_empty() {
            return Err(TrainError::Config("no episodes to train on".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, WORKER_STREAM, id as u64));
        let episode = episodes[rng.gen_range(0..episodes.len())].clone();
        let env = Env::new(episode, reward);
        let frame = perception.frame(&env.state, &env.episode, &mut rng);
        Ok(Self {
            id,
            env,
            frame,
            hidden: vec![0.0; hidden_size],
            rng,
            episodes,
            reward,
            perception,
        })
    }

    fn reset(&mut self) {
        let episode = self.episodes[self.rng.gen_range(0..self.episodes.len())].clone();
        self.env = Env::new(episode, self.reward);
        self.hidden.iter_mut().for_each(|h| *h = 0.0);
    }

    fn act<T: Scalar>(&self, net: &PolicyNetwork, params: &[Tensor<T>]) -> Result<Policy, TrainError> {
        let mut g = Graph::new(params);
        let input = policy_input::<T>(&[&self.frame], net)?;
        let h = g.input(Tensor::from_f64(vec![1, self.hidden.len()], &self.hidden)?);
        let out = policy_forward(&mut g, net, &input, h)?;
        let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        Ok(Policy {
            probs: f(g.value(out.probs)),
            log_probs: f(g.value(out.log_probs)),
            value: g.value(out.value)[0].as_f64(),
            hidden: f(g.value(out.hidden)),
        })
    }

    /// Runs `horizon` steps with the given parameters.
    pub fn collect<T: Scalar>(
        &mut self,
        net: &PolicyNetwork,
        params: &[Tensor<T>],
        horizon: usize,
    ) -> Result<Segment, TrainError> {
        let hidden0 = self.hidden.clone();
        let mut steps = Vec::with_capacity(horizon);
        let mut finished = Vec::new();
        for _ in 0..horizon {
            let p = self.act(net, params)?;
            let action = sample_action(&p.probs, &mut self.rng);
            let prev = self.env.state.clone();
            let seed = self.env.episode.seed;
            let tr = self.env.step(Action::from_index(action)?)?;
            let target = nie_target(&prev, &self.env.state, &self.frame.keypoints)?;
            if tr.done {
                finished.push(self.env.result());
                self.reset();
            } else {
                self.hidden = p.hidden;
            }
            let next = self.perception.frame(&self.env.state, &self.env.episode, &mut self.rng);
            steps.push(StepRecord {
                frame: std::mem::replace(&mut self.frame, next),
                episode_seed: seed,
                action,
                log_prob: p.log_probs[action],
                value: p.value,
                reward: tr.reward,
                done: tr.done,
                nie_target: target,
            });
        }
        let bootstrap = self.act(net, params)?.value;
        Ok(Segment {
            worker: self.id,
            hidden0,
            steps,
            bootstrap,
            finished,
        })
    }
}

struct Policy {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    value: f64,
    hidden: Vec<f64>,
}

/// One segment from every worker, in worker order. More than one worker
/// runs on scoped threads; segments come back over a channel.
pub fn collect_all<T: Scalar>(
    workers: &mut [Worker],
    net: &PolicyNetwork,
    params: &[Tensor<T>],
    horizon: usize,
) -> Result<Vec<Segment>, TrainError> {
    if workers.len() == 1 {
        return Ok(vec![workers[0].collect(net, params, horizon)?]);
    }
    let (tx, rx) = crossbeam_channel::unbounded();
    std::thread::scope(|s| {
        for w in workers.iter_mut() {
            let tx = tx.clone();
            s.spawn(move || {
                let r = w.collect(net, params, horizon);
                let _ = tx.send((w.id, r));
            });
        }
    });
    drop(tx);
    let mut out: Vec<(usize, Result<Segment, TrainError>)> = rx.iter().collect();
    out.sort_by_key(|(id, _)| *id);
    out.into_iter().map(|(_, r)| r).collect()
}
