use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{policy_input, Frame, Perception, TrainError};
use crate::policy::{greedy_action, policy_forward, sample_action, PolicyNetwork};
use crate::tasks::{derive_seed, task_distance, Env, Episode, EpisodeResult, RewardConfig};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::worldsim::Action;

const EVAL_STREAM: u64 = 0x6576_616c_0000_0001;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub reward: RewardConfig,
    pub perception: Perception,
    pub seed: u64,
    /// Episodes advanced together through one batched forward pass.
    pub batch: usize,
    pub greedy: bool,
}

/// One evaluated episode, enough to re-simulate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_index: usize,
    pub episode_seed: u64,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Task distance after each step.
    pub distances: Vec<f64>,
    pub result: EpisodeResult,
    /// Reward settings the rewards were computed under.
    pub reward: RewardConfig,
}

struct Live {
    index: usize,
    env: Env,
    frame: Frame,
    hidden: Vec<f64>,
    rng: ChaCha8Rng,
    traj: Trajectory,
}

/// Runs every episode to completion. Each episode draws actions from its
/// own seeded stream, so results do not depend on which episodes share a
/// batch.
pub fn evaluate<T: Scalar>(
    net: &PolicyNetwork,
    params: &[Tensor<T>],
    episodes: &[Episode],
    cfg: &EvalConfig,
) -> Result<Vec<Trajectory>, TrainError> {
    let hidden_size = net.cfg.hidden;
    let mut out = Vec::with_capacity(episodes.len());
    for (chunk_idx, chunk) in episodes.chunks(cfg.batch.max(1)).enumerate() {
        let mut live: Vec<Live> = chunk
            .iter()
            .enumerate()
            .map(|(i, ep)| {
                let index = chunk_idx * cfg.batch.max(1) + i;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, EVAL_STREAM, index as u64));
                let env = Env::new(ep.clone(), cfg.reward);
                let frame = cfg.perception.frame(&env.state, &env.episode, &mut rng);
                Live {
                    index,
                    frame,
                    hidden: vec![0.0; hidden_size],
                    rng,
                    traj: Trajectory {
                        episode_index: index,
                        episode_seed: ep.seed,
                        actions: Vec::new(),
                        rewards: Vec::new(),
                        distances: Vec::new(),
                        result: env.result(),
                        reward: cfg.reward,
                    },
                    env,
                }
            })
            .collect();
        let mut done = Vec::new();
        while !live.is_empty() {
            let b = live.len();
            let (probs, hidden) = {
                let mut g = Graph::new(params);
                let frames: Vec<&Frame> = live.iter().map(|l| &l.frame).collect();
                let input = policy_input::<T>(&frames, net)?;
                let h: Vec<f64> = live.iter().flat_map(|l| l.hidden.iter().copied()).collect();
                let h = g.input(Tensor::from_f64(vec![b, hidden_size], &h)?);
                let o = policy_forward(&mut g, net, &input, h)?;
                let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
                (f(g.value(o.probs)), f(g.value(o.hidden)))
            };
            for (i, l) in live.iter_mut().enumerate() {
                let p = &probs[i * crate::worldsim::NUM_ACTIONS..(i + 1) * crate::worldsim::NUM_ACTIONS];
                let a = if cfg.greedy {
                    greedy_action(p)
                } else {
                    sample_action(p, &mut l.rng)
                };
                let tr = l.env.step(Action::from_index(a)?)?;
                l.traj.actions.push(a);
                l.traj.rewards.push(tr.reward);
                l.traj.distances.push(task_distance(&l.env.state, &l.env.episode.goal));
                l.hidden = hidden[i * hidden_size..(i + 1) * hidden_size].to_vec();
                if !tr.done {
                    l.frame = cfg.perception.frame(&l.env.state, &l.env.episode, &mut l.rng);
                }
            }
            let (finished, running): (Vec<Live>, Vec<Live>) = live.into_iter().partition(|l| l.env.done());
            for mut l in finished {
                l.traj.result = l.env.result();
                done.push((l.index, l.traj));
            }
            live = running;
        }
        done.sort_by_key(|(i, _)| *i);
        out.extend(done.into_iter().map(|(_, t)| t));
    }
    Ok(out)
}

/// `step,action,reward,distance` rows; the format `replay` reproduces.
pub fn write_reward_csv(out: impl Write, actions: &[usize], rewards: &[f64], distances: &[f64]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "action", "reward", "distance"])?;
    for (i, ((a, r), d)) in actions.iter().zip(rewards).zip(distances).enumerate() {
        w.write_record([i.to_string(), Action::from_index(*a)?.name().to_string(), r.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
