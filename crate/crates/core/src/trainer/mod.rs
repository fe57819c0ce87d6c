//! On-policy training: rollout collection, GAE, the clipped PPO objective
//! with the engine's auxiliary loss, evaluation and the outer loop.

mod eval;
mod rollout;
mod run;
mod supervised;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryError;
use crate::keypoints::MaskCorruption;
use crate::nie::{nie_loss, NieConfig, NieTarget};
use crate::policy::{policy_forward, PolicyConfig, PolicyNetwork, Variant};
use crate::tasks::{RewardConfig, Task, TaskError};
use crate::tensor::{
    adam_step, clip_gradients, AdamConfig, Gradients, Graph, LrSchedule, ParamStore, Scalar, Tensor,
    TensorError, Var,
};
use crate::worldsim::{SimError, NUM_ACTIONS};

pub use eval::{evaluate, write_reward_csv, EvalConfig, Trajectory};
pub use rollout::{collect_all, nie_target, policy_input, Frame, Perception, Segment, StepRecord, Worker};
pub use run::{build_model, load_model, perception, train_loop, EvalRow, RunPaths, TrainSummary, UpdateLog};
pub use supervised::{
    collect_transitions, evaluate_l1, identity_l1, train_supervised, SupervisedConfig, SupervisedReport, Transition,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("length mismatch: {what} has {found}, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("dataset file {0} does not exist")]
    DatasetMissing(PathBuf),
    #[error("non-finite loss at update {}", .0.update)]
    NonFinite(Box<MinibatchDump>),
    #[error("training diverged at update {update}; minibatch dump written to {}", dump.display())]
    Diverged { update: u64, dump: PathBuf },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: Task,
    pub variant: Variant,
    pub seed: u64,
    pub workers: usize,
    /// Environment steps per worker per update.
    pub horizon: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Weight of the engine loss; ignored unless the variant supervises it.
    pub alpha: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub total_steps: u64,
    pub eval_period: u64,
    pub eval_episodes: usize,
    /// Evaluation trajectories written to disk per evaluation.
    pub log_trajectories: usize,
    pub policy: PolicyConfig,
    pub nie: NieConfig,
    pub reward: RewardConfig,
    pub corruption: MaskCorruption,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::ObsNav,
            variant: Variant::Nie,
            seed: 0,
            workers: 8,
            horizon: 30,
            epochs: 4,
            minibatches: 2,
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            alpha: 3.0,
            lr: 3e-4,
            grad_clip: 0.5,
            value_coef: 0.5,
            entropy_coef: 0.01,
            total_steps: 2_000_000,
            eval_period: 200_000,
            eval_episodes: 100,
            log_trajectories: 4,
            policy: PolicyConfig::default(),
            nie: NieConfig::default(),
            reward: RewardConfig::default(),
            corruption: MaskCorruption::default(),
        }
    }
}

impl TrainConfig {
    // Negated comparisons so NaN fields are rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("lambda must lie in (0, 1]");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.workers == 0 || self.horizon == 0 || self.epochs == 0 {
            return bad("workers, horizon and epochs must be positive");
        }
        if self.minibatches == 0 || self.minibatches > self.workers {
            return bad("minibatches must lie in 1..=workers");
        }
        if !(self.lr >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("lr must be non-negative and grad_clip positive");
        }
        if self.total_steps < self.steps_per_update() {
            return bad("total_steps must cover at least one update");
        }
        if self.policy.categories != self.nie.categories {
            return bad("policy.categories and nie.categories differ");
        }
        Ok(())
    }

    /// The engine weight actually applied.
    pub fn effective_alpha(&self) -> f64 {
        if self.variant.supervises_engine() {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn steps_per_update(&self) -> u64 {
        (self.workers * self.horizon) as u64
    }

    pub fn updates(&self) -> u64 {
        self.total_steps / self.steps_per_update()
    }

    /// Policy config with the target-category input switched on for object
    /// placement.
    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            target_category: self.task == Task::ObjPlace,
            categories: self.nie.categories,
            ..self.policy
        }
    }
}

/// Generalized advantage estimation over one segment. `bootstrap` is the
/// value of the state following the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let n = rewards.len();
    for (what, found) in [("values", values.len()), ("dones", dones.len())] {
        if found != n {
            return Err(TrainError::Length {
                what,
                expected: n,
                found,
            });
        }
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Segments from every worker with their advantages and returns.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub segments: Vec<Segment>,
    pub advantages: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
}

impl RolloutBuffer {
    pub fn new(segments: Vec<Segment>, gamma: f64, lambda: f64) -> Result<Self, TrainError> {
        let horizon = segments.first().map_or(0, |s| s.steps.len());
        let mut advantages = Vec::with_capacity(segments.len());
        let mut returns = Vec::with_capacity(segments.len());
        for s in &segments {
            if s.steps.len() != horizon {
                return Err(TrainError::Length {
                    what: "segment",
                    expected: horizon,
                    found: s.steps.len(),
                });
            }
            let r: Vec<f64> = s.steps.iter().map(|x| x.reward).collect();
            let v: Vec<f64> = s.steps.iter().map(|x| x.value).collect();
            let d: Vec<bool> = s.steps.iter().map(|x| x.done).collect();
            let (a, ret) = compute_gae(&r, &v, &d, s.bootstrap, gamma, lambda)?;
            advantages.push(a);
            returns.push(ret);
        }
        Ok(Self {
            segments,
            advantages,
            returns,
        })
    }

    pub fn horizon(&self) -> usize {
        self.segments.first().map_or(0, |s| s.steps.len())
    }

    pub fn steps(&self) -> usize {
        self.segments.len() * self.horizon()
    }

    /// Shifts and scales all advantages to mean 0 and standard deviation 1.
    /// A constant batch is only centered.
    pub fn normalize_advantages(&mut self) {
        let n = self.steps() as f64;
        if n == 0.0 {
            return;
        }
        let mean = self.advantages.iter().flatten().sum::<f64>() / n;
        let var = self.advantages.iter().flatten().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
        for a in self.advantages.iter_mut().flatten() {
            *a = (*a - mean) * scale;
        }
    }
}

/// Mean over the batch of `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`
/// with `rho = exp(log_prob - old_log_prob)`. This is the quantity PPO
/// maximizes.
pub fn clipped_surrogate<T: Scalar>(
    g: &mut Graph<'_, T>,
    log_prob: Var,
    old_log_prob: &[f64],
    advantages: &[f64],
    clip: f64,
) -> Result<Var, TensorError> {
    let n = old_log_prob.len();
    let old = g.input(Tensor::from_f64(vec![n], old_log_prob)?);
    let adv = Tensor::from_f64(vec![n], advantages)?;
    let diff = g.sub(log_prob, old)?;
    let ratio = g.exp(diff);
    let unclipped = g.mul_const(ratio, &adv)?;
    let lo = T::from_f64(1.0 - clip);
    let hi = T::from_f64(1.0 + clip);
    let clipped = g.clamp(ratio, lo, hi);
    let clipped = g.mul_const(clipped, &adv)?;
    let m = g.minimum(unclipped, clipped)?;
    Ok(g.mean(m))
}

/// Log-probability of the chosen action per row of a `[B, 10]` tensor.
pub fn chosen_log_prob<T: Scalar>(
    g: &mut Graph<'_, T>,
    log_probs: Var,
    actions: &[usize],
) -> Result<Var, TensorError> {
    let mut onehot = vec![0.0; actions.len() * NUM_ACTIONS];
    for (i, &a) in actions.iter().enumerate() {
        onehot[i * NUM_ACTIONS + a] = 1.0;
    }
    let mask = Tensor::from_f64(vec![actions.len(), NUM_ACTIONS], &onehot)?;
    let picked = g.mul_const(log_probs, &mask)?;
    Ok(g.row_sum(picked))
}

/// Scalar nodes of one minibatch objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    /// Negated clipped surrogate.
    pub policy: Var,
    /// Mean squared error of the value head against the returns.
    pub value: Var,
    pub entropy: Var,
    pub nie: Var,
}

/// Builds the full objective for the given workers of a buffer:
/// `policy + value_coef * value - entropy_coef * entropy + alpha * nie`,
/// unrolling the recurrent state through the segment and zeroing it after
/// each episode end.
pub fn ppo_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    net: &PolicyNetwork,
    buf: &RolloutBuffer,
    workers: &[usize],
    cfg: &TrainConfig,
) -> Result<LossVars, TrainError> {
    let b = workers.len();
    let horizon = buf.horizon();
    let hidden_size = net.cfg.hidden;
    let alpha = cfg.effective_alpha();
    let h0: Vec<f64> = workers
        .iter()
        .flat_map(|&w| buf.segments[w].hidden0.iter().copied())
        .collect();
    let mut hidden = g.input(Tensor::from_f64(vec![b, hidden_size], &h0)?);
    let zero = g.input(Tensor::scalar(T::zero()));
    let (mut policy, mut value, mut entropy, mut nie) = (zero, zero, zero, zero);
    let mut nie_steps = 0usize;
    for t in 0..horizon {
        let steps: Vec<&StepRecord> = workers.iter().map(|&w| &buf.segments[w].steps[t]).collect();
        let frames: Vec<&Frame> = steps.iter().map(|s| &s.frame).collect();
        let input = policy_input::<T>(&frames, net)?;
        let out = policy_forward(g, net, &input, hidden)?;

        let actions: Vec<usize> = steps.iter().map(|s| s.action).collect();
        let old: Vec<f64> = steps.iter().map(|s| s.log_prob).collect();
        let adv: Vec<f64> = workers.iter().map(|&w| buf.advantages[w][t]).collect();
        let ret: Vec<f64> = workers.iter().map(|&w| buf.returns[w][t]).collect();

        let lp = chosen_log_prob(g, out.log_probs, &actions)?;
        let surr = clipped_surrogate(g, lp, &old, &adv, cfg.clip)?;
        policy = g.add(policy, surr)?;

        let v = g.reshape(out.value, &[b])?;
        let r = g.input(Tensor::from_f64(vec![b], &ret)?);
        let dv = g.sub(v, r)?;
        let sq = g.mul(dv, dv)?;
        let sq = g.mean(sq);
        value = g.add(value, sq)?;

        let plogp = g.mul(out.probs, out.log_probs)?;
        let ent = g.row_sum(plogp);
        let ent = g.mean(ent);
        entropy = g.sub(entropy, ent)?;

        if alpha > 0.0 {
            if let Some(out_nie) = &out.nie {
                let observed: Vec<bool> = steps
                    .iter()
                    .flat_map(|s| s.frame.keypoints.present.iter().copied())
                    .collect();
                if observed.iter().any(|&o| o) {
                    let targets: Vec<&[[f64; 24]]> = steps.iter().map(|s| s.nie_target.as_slice()).collect();
                    let target = NieTarget::<T>::new(&targets, actions.clone(), observed)?;
                    let l = nie_loss(g, out_nie, &target)?;
                    nie = g.add(nie, l)?;
                    nie_steps += 1;
                }
            }
        }

        let live: Vec<f64> = steps
            .iter()
            .flat_map(|s| std::iter::repeat_n(if s.done { 0.0 } else { 1.0 }, hidden_size))
            .collect();
        hidden = g.mul_const(out.hidden, &Tensor::from_f64(vec![b, hidden_size], &live)?)?;
    }
    let inv_t = T::from_f64(1.0 / horizon.max(1) as f64);
    let policy = g.scale(policy, -inv_t);
    let value = g.scale(value, inv_t);
    let entropy = g.scale(entropy, inv_t);
    let nie = g.scale(nie, T::from_f64(1.0 / nie_steps.max(1) as f64));

    let v = g.scale(value, T::from_f64(cfg.value_coef));
    let e = g.scale(entropy, T::from_f64(-cfg.entropy_coef));
    let mut total = g.add(policy, v)?;
    total = g.add(total, e)?;
    if alpha > 0.0 {
        let n = g.scale(nie, T::from_f64(alpha));
        total = g.add(total, n)?;
    }
    Ok(LossVars {
        total,
        policy,
        value,
        entropy,
        nie,
    })
}

/// Loss components averaged over every minibatch of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub nie: f64,
    /// Mean global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// What the learner saw when a loss turned non-finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinibatchDump {
    pub update: u64,
    pub epoch: usize,
    pub workers: Vec<usize>,
    pub episode_seeds: Vec<Vec<u64>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<Vec<f64>>,
    pub old_log_probs: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
    pub loss: LossReport,
}

impl MinibatchDump {
    fn new(buf: &RolloutBuffer, update: u64, epoch: usize, workers: &[usize], loss: LossReport) -> Self {
        let per = |f: &dyn Fn(&StepRecord) -> f64| -> Vec<Vec<f64>> {
            workers
                .iter()
                .map(|&w| buf.segments[w].steps.iter().map(f).collect())
                .collect()
        };
        Self {
            update,
            epoch,
            workers: workers.to_vec(),
            episode_seeds: workers
                .iter()
                .map(|&w| buf.segments[w].steps.iter().map(|s| s.episode_seed).collect())
                .collect(),
            actions: workers
                .iter()
                .map(|&w| buf.segments[w].steps.iter().map(|s| s.action).collect())
                .collect(),
            rewards: per(&|s| s.reward),
            old_log_probs: per(&|s| s.log_prob),
            advantages: workers.iter().map(|&w| buf.advantages[w].clone()).collect(),
            returns: workers.iter().map(|&w| buf.returns[w].clone()).collect(),
            loss,
        }
    }
}

/// Replaces absent parameter gradients with zeros so every parameter takes
/// part in the optimizer step.
pub fn zero_fill<T: Scalar>(grads: &mut Gradients<T>, store: &ParamStore<T>) {
    grads.params.resize(store.len(), None);
    for (g, v) in grads.params.iter_mut().zip(store.values()) {
        if g.is_none() {
            *g = Some(Tensor::zeros(v.shape().to_vec()));
        }
    }
}

/// `epochs` passes over the buffer in `minibatches` worker groups, one Adam
/// step per group at the schedule's current rate. Advantages are expected
/// to be normalized already.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<T: Scalar>(
    store: &mut ParamStore<T>,
    net: &PolicyNetwork,
    buf: &RolloutBuffer,
    cfg: &TrainConfig,
    schedule: &LrSchedule,
    adam: &AdamConfig,
    update: u64,
    rng: &mut impl Rng,
) -> Result<LossReport, TrainError> {
    let w = buf.segments.len();
    let per_batch = w.div_ceil(cfg.minibatches.min(w).max(1));
    let mut report = LossReport {
        lr: schedule.rate(),
        ..LossReport::default()
    };
    let mut count = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..w).collect();
        order.shuffle(rng);
        for chunk in order.chunks(per_batch) {
            let mut workers = chunk.to_vec();
            workers.sort_unstable();
            let (mut grads, l) = {
                let mut g = Graph::new(store.values());
                let lv = ppo_loss(&mut g, net, buf, &workers, cfg)?;
                let l = LossReport {
                    total: g.scalar(lv.total).as_f64(),
                    policy: g.scalar(lv.policy).as_f64(),
                    value: g.scalar(lv.value).as_f64(),
                    entropy: g.scalar(lv.entropy).as_f64(),
                    nie: g.scalar(lv.nie).as_f64(),
                    grad_norm: 0.0,
                    lr: schedule.rate(),
                };
                if !l.total.is_finite() {
                    return Err(TrainError::NonFinite(Box::new(MinibatchDump::new(
                        buf, update, epoch, &workers, l,
                    ))));
                }
                (g.backward(lv.total)?, l)
            };
            zero_fill(&mut grads, store);
            let norm = clip_gradients(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                let l = LossReport { grad_norm: norm, ..l };
                return Err(TrainError::NonFinite(Box::new(MinibatchDump::new(
                    buf, update, epoch, &workers, l,
                ))));
            }
            adam_step(store, &grads, schedule, adam)?;
            report.total += l.total;
            report.policy += l.policy;
            report.value += l.value;
            report.entropy += l.entropy;
            report.nie += l.nie;
            report.grad_norm += norm;
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    report.total /= n;
    report.policy /= n;
    report.value /= n;
    report.entropy /= n;
    report.nie /= n;
    report.grad_norm /= n;
    Ok(report)
}
