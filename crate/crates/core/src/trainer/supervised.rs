//! Standalone supervised training of the engine on simulator transitions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{nie_target, zero_fill, Perception, TrainError};
use crate::keypoints::{KeypointSet, NUM_KEYPOINTS};
use crate::nie::{nie_predict, nie_predict_loss, NieConfig, NieInput, NieNetwork, NieTarget};
use crate::tasks::{derive_seed, Env, Episode, RewardConfig};
use crate::tensor::{adam_step, clip_gradients, AdamConfig, Graph, LrSchedule, ParamStore, Scalar};
use crate::worldsim::{Action, NUM_ACTIONS};

const COLLECT_STREAM: u64 = 0x7375_7076_0000_0001;
const KP_DIM: usize = NUM_KEYPOINTS * 3;

/// One executed action with the keypoints before it and their true
/// positions after it.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub keypoints: KeypointSet,
    pub raw: Vec<f64>,
    pub action: usize,
    pub target: Vec<[f64; KP_DIM]>,
}

/// Random-action transitions with at least one observed category. Each
/// episode runs for at most `max_len` steps; `End` is never drawn.
pub fn collect_transitions(
    episodes: &[Episode],
    count: usize,
    seed: u64,
    perception: &Perception,
    max_len: usize,
) -> Result<Vec<Transition>, TrainError> {
    if episodes.is_empty() {
        return Err(TrainError::Config("no episodes to collect from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, COLLECT_STREAM, 0));
    let reward = RewardConfig {
        max_steps: max_len as u32,
        ..RewardConfig::default()
    };
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let ep = &episodes[rng.gen_range(0..episodes.len())];
        let mut env = Env::new(ep.clone(), reward);
        let mut frame = perception.frame(&env.state, &env.episode, &mut rng);
        while !env.done() && out.len() < count {
            let action = rng.gen_range(0..NUM_ACTIONS - 1);
            let prev = env.state.clone();
            env.step(Action::from_index(action)?)?;
            if frame.keypoints.observed().next().is_some() {
                let target = nie_target(&prev, &env.state, &frame.keypoints)?;
                out.push(Transition {
                    keypoints: frame.keypoints,
                    raw: frame.raw,
                    action,
                    target,
                });
            }
            frame = perception.frame(&env.state, &env.episode, &mut rng);
        }
    }
    Ok(out)
}

/// Mean absolute keypoint error of predicting "nothing moves", over every
/// coordinate of every observed category.
pub fn identity_l1(samples: &[Transition]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        for c in s.keypoints.observed() {
            for (p, t) in s.keypoints.points[c].iter().zip(&s.target[c]) {
                sum += (p - t).abs();
            }
            n += KP_DIM;
        }
    }
    sum / n.max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub nie: NieConfig,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch: 64,
            lr: 1e-3,
            grad_clip: 1.0,
            seed: 0,
            nie: NieConfig {
                visual_dim: 0,
                ..NieConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedReport {
    /// Held-out error of the identity prediction.
    pub identity_l1: f64,
    /// Held-out error before training.
    pub initial_l1: f64,
    pub trained_l1: f64,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

fn batch_inputs<T: Scalar>(
    samples: &[&Transition],
) -> Result<(NieInput<T>, NieTarget<T>), TrainError> {
    let sets: Vec<&KeypointSet> = samples.iter().map(|s| &s.keypoints).collect();
    let raws: Vec<&[f64]> = samples.iter().map(|s| s.raw.as_slice()).collect();
    let input = NieInput::new(&sets, &raws)?;
    let actions: Vec<usize> = samples.iter().map(|s| s.action).collect();
    let targets: Vec<&[[f64; KP_DIM]]> = samples.iter().map(|s| s.target.as_slice()).collect();
    let observed: Vec<bool> = samples.iter().flat_map(|s| s.keypoints.present.iter().copied()).collect();
    let target = NieTarget::new(&targets, actions, observed)?;
    Ok((input, target))
}

/// Held-out L1 under the same normalization as [`identity_l1`].
pub fn evaluate_l1<T: Scalar>(
    net: &NieNetwork,
    store: &ParamStore<T>,
    samples: &[Transition],
    batch: usize,
) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Transition> = chunk.iter().collect();
        let (input, target) = batch_inputs::<T>(&refs)?;
        let mut g = Graph::new(store.values());
        let pred = nie_predict(&mut g, net, &input, None, &target.action)?;
        let pred = g.value(pred);
        let c = input.categories;
        for (b, s) in chunk.iter().enumerate() {
            for ci in s.keypoints.observed() {
                let row = &pred[(b * c + ci) * KP_DIM..(b * c + ci + 1) * KP_DIM];
                for (p, t) in row.iter().zip(&s.target[ci]) {
                    sum += (p.as_f64() - t).abs();
                }
                n += KP_DIM;
            }
        }
    }
    Ok(sum / n.max(1) as f64)
}

/// Trains a fresh engine with Adam on the executed-action loss.
pub fn train_supervised(
    train: &[Transition],
    test: &[Transition],
    cfg: &SupervisedConfig,
) -> Result<SupervisedReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let nie_cfg = NieConfig {
        visual_dim: 0,
        ..cfg.nie
    };
    let net = NieNetwork::new(&mut store, "nie", nie_cfg, &mut rng)?;
    let initial_l1 = evaluate_l1(&net, &store, test, cfg.batch)?;
    let per_epoch = train.len().div_ceil(cfg.batch.max(1));
    let mut schedule = LrSchedule::linear(cfg.lr, (per_epoch * cfg.epochs) as u64);
    let adam = AdamConfig::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch.max(1)) {
            let refs: Vec<&Transition> = idx.iter().map(|&i| &train[i]).collect();
            let (input, target) = batch_inputs::<f32>(&refs)?;
            let mut grads = {
                let mut g = Graph::new(store.values());
                let pred = nie_predict(&mut g, &net, &input, None, &target.action)?;
                let loss = nie_predict_loss(&mut g, pred, refs.len(), input.categories, &target)?;
                total += g.scalar(loss).as_f64();
                g.backward(loss)?
            };
            zero_fill(&mut grads, &store);
            clip_gradients(&mut grads, cfg.grad_clip);
            adam_step(&mut store, &grads, &schedule, &adam)?;
            schedule.advance();
        }
        epoch_loss.push(total / per_epoch.max(1) as f64);
    }
    Ok(SupervisedReport {
        identity_l1: identity_l1(test),
        initial_l1,
        trained_l1: evaluate_l1(&net, &store, test, cfg.batch)?,
        epoch_loss,
    })
}
