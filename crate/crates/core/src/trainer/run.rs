use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    collect_all, evaluate, ppo_update, write_reward_csv, EvalConfig, LossReport, Perception, RolloutBuffer,
    TrainConfig, TrainError, Worker,
};
use crate::policy::PolicyNetwork;
use crate::tasks::{compute_metrics, derive_seed, Dataset, Episode, Metrics};
use crate::tensor::{load_checkpoint, save_checkpoint, AdamConfig, LrSchedule, ParamStore};

const INIT_STREAM: u64 = 0x696e_6974_0000_0001;
const SHUFFLE_STREAM: u64 = 0x7368_7566_0000_0001;

/// Fresh parameters and network for a config.
pub fn build_model(cfg: &TrainConfig) -> Result<(ParamStore<f32>, PolicyNetwork), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_STREAM, 0));
    let mut store = ParamStore::new();
    let net = PolicyNetwork::new(&mut store, cfg.policy_config(), cfg.variant, cfg.nie, &mut rng)?;
    Ok((store, net))
}

/// Rebuilds the model a checkpoint was written from; the config travels in
/// the checkpoint metadata.
pub fn load_model(path: &Path) -> Result<(TrainConfig, ParamStore<f32>, PolicyNetwork), TrainError> {
    let (meta, values) = load_checkpoint::<f32>(path)?;
    let cfg: TrainConfig = serde_json::from_str(&meta)?;
    let (mut store, net) = build_model(&cfg)?;
    store.load_values(values)?;
    Ok((cfg, store, net))
}

pub fn perception(cfg: &TrainConfig) -> Perception {
    Perception {
        categories: cfg.nie.categories,
        max_depth: cfg.policy.max_depth,
        corruption: cfg.corruption,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub train: PathBuf,
    pub val: Option<PathBuf>,
    pub run_dir: PathBuf,
}

/// One row of `train_log.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub update: u64,
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub nie: f64,
    pub grad_norm: f64,
    pub mean_reward: f64,
    pub episodes: usize,
    pub successes: usize,
}

/// One row of `eval.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "FDT")]
    pub fdt: f64,
    #[serde(rename = "SPL")]
    pub spl: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub updates: u64,
    pub env_steps: u64,
    /// Learning rate after the last update.
    pub final_lr: f64,
    pub log: Vec<UpdateLog>,
    pub evals: Vec<EvalRow>,
}

fn load_dataset(path: &Path, cfg: &TrainConfig) -> Result<Dataset, TrainError> {
    if !path.exists() {
        return Err(TrainError::DatasetMissing(path.to_path_buf()));
    }
    let data = Dataset::load(path)?;
    if data.task != cfg.task {
        return Err(TrainError::Config(format!(
            "{} holds {} episodes but the run trains {}",
            path.display(),
            data.task.name(),
            cfg.task.name()
        )));
    }
    if data.config.sim.resolution != cfg.policy.resolution {
        return Err(TrainError::Config(format!(
            "{} renders at {} px but the policy expects {}",
            path.display(),
            data.config.sim.resolution,
            cfg.policy.resolution
        )));
    }
    Ok(data)
}

/// Evaluates, writes the first trajectories and returns the metrics row.
fn run_eval(
    cfg: &TrainConfig,
    net: &PolicyNetwork,
    store: &ParamStore<f32>,
    episodes: &[Episode],
    step: u64,
    dir: &Path,
) -> Result<EvalRow, TrainError> {
    let eval_cfg = EvalConfig {
        reward: cfg.reward,
        perception: perception(cfg),
        seed: cfg.seed,
        batch: cfg.workers,
        greedy: false,
    };
    let trajs = evaluate(net, store.values(), episodes, &eval_cfg)?;
    let results: Vec<_> = trajs.iter().map(|t| t.result).collect();
    let m: Metrics = compute_metrics(&results)?;
    let traj_dir = dir.join("trajectories").join(format!("step-{step}"));
    fs::create_dir_all(&traj_dir)?;
    for t in trajs.iter().take(cfg.log_trajectories) {
        let stem = traj_dir.join(format!("episode-{:04}", t.episode_index));
        fs::write(stem.with_extension("json"), serde_json::to_string_pretty(t)?)?;
        write_reward_csv(fs::File::create(stem.with_extension("csv"))?, &t.actions, &t.rewards, &t.distances)?;
    }
    Ok(EvalRow {
        step,
        sr: m.sr,
        fdt: m.fdt,
        spl: m.spl,
        episodes: m.episodes,
    })
}

/// Collect, update, log; evaluate and checkpoint every eval period.
///
/// Run directory: `config.json`, `train_log.csv`, `eval.csv`,
/// `ckpt-<step>.pnck`, `final.pnck`, `trajectories/step-<step>/`.
pub fn train_loop(cfg: &TrainConfig, paths: &RunPaths) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    let train = load_dataset(&paths.train, cfg)?;
    let val = paths.val.as_deref().map(|p| load_dataset(p, cfg)).transpose()?;
    let val_episodes: Vec<Episode> = val
        .map(|d| d.episodes.into_iter().take(cfg.eval_episodes).collect())
        .unwrap_or_default();

    let dir = &paths.run_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let meta = serde_json::to_string(cfg)?;

    let (mut store, net) = build_model(cfg)?;
    let episodes: Arc<[Episode]> = train.episodes.into();
    let mut workers = (0..cfg.workers)
        .map(|w| Worker::new(w, episodes.clone(), cfg.seed, perception(cfg), cfg.reward, net.cfg.hidden))
        .collect::<Result<Vec<_>, _>>()?;

    let updates = cfg.updates();
    let mut schedule = LrSchedule::linear(cfg.lr, updates);
    let adam = AdamConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM, 0));
    let mut log_csv = csv::Writer::from_path(dir.join("train_log.csv"))?;
    let mut eval_csv = csv::Writer::from_path(dir.join("eval.csv"))?;
    let mut summary = TrainSummary {
        updates: 0,
        env_steps: 0,
        final_lr: schedule.rate(),
        log: Vec::new(),
        evals: Vec::new(),
    };

    for update in 0..updates {
        let snapshot = store.snapshot();
        let segments = collect_all(&mut workers, &net, &snapshot, cfg.horizon)?;
        let mut buf = RolloutBuffer::new(segments, cfg.gamma, cfg.lambda)?;
        buf.normalize_advantages();
        let report: LossReport = match ppo_update(&mut store, &net, &buf, cfg, &schedule, &adam, update, &mut rng) {
            Err(TrainError::NonFinite(dump)) => {
                let path = dir.join(format!("divergence-{update}.json"));
                fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
                return Err(TrainError::Diverged { update, dump: path });
            }
            r => r?,
        };
        schedule.advance();
        let prev_steps = summary.env_steps;
        summary.env_steps += buf.steps() as u64;
        summary.updates += 1;

        let finished: Vec<_> = buf.segments.iter().flat_map(|s| s.finished.iter()).collect();
        let reward_sum: f64 = buf.segments.iter().flat_map(|s| s.steps.iter()).map(|s| s.reward).sum();
        let row = UpdateLog {
            update,
            step: summary.env_steps,
            lr: report.lr,
            total: report.total,
            policy: report.policy,
            value: report.value,
            entropy: report.entropy,
            nie: report.nie,
            grad_norm: report.grad_norm,
            mean_reward: reward_sum / buf.steps().max(1) as f64,
            episodes: finished.len(),
            successes: finished.iter().filter(|r| r.success).count(),
        };
        log_csv.serialize(row)?;
        log_csv.flush()?;
        summary.log.push(row);

        let last = update + 1 == updates;
        let crossed = cfg.eval_period > 0 && summary.env_steps / cfg.eval_period > prev_steps / cfg.eval_period;
        if crossed || last {
            if !val_episodes.is_empty() {
                let row = run_eval(cfg, &net, &store, &val_episodes, summary.env_steps, dir)?;
                eval_csv.serialize(row)?;
                eval_csv.flush()?;
                summary.evals.push(row);
            }
            save_checkpoint(&dir.join(format!("ckpt-{}.pnck", summary.env_steps)), &store, &meta)?;
        }
    }
    save_checkpoint(&dir.join("final.pnck"), &store, &meta)?;
    summary.final_lr = schedule.rate();
    Ok(summary)
}
