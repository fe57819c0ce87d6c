//! Argument parsing, run configuration and the subcommands behind the
//! `pushnav` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pushnav::keypoints::{lift_keypoints, overlay_keypoints, write_ppm};
use pushnav::tasks::{
    compute_metrics, replay, task_distance, write_metrics_csv, Dataset, MetricsRow, Split, Task, TaskConfig,
};
use pushnav::trainer::{
    build_model, evaluate, load_model, perception, train_loop, write_reward_csv, EvalConfig, RunPaths,
    TrainConfig, Trajectory,
};
use pushnav::worldsim::{category_color, render, Action, Observation, OBJECT_ID_BASE};

pub const SEED_ENV: &str = "PUSHNAV_SEED";

/// Everything a command reads besides its flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed for generation, training and evaluation.
    pub seed: u64,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub counts: Counts,
    pub tasks: TaskConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Counts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Self {
            train: 500,
            val: 100,
            test: 100,
        }
    }
}

impl Counts {
    fn of(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: "data".into(),
            run_dir: "runs/default".into(),
            counts: Counts::default(),
            tasks: TaskConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn dataset_path(&self, task: Task, split: Split) -> PathBuf {
        self.data_dir.join(format!("{}-{}.json", task.name(), split.name()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "pushnav", version, about = "Interactive navigation: data, training, evaluation, replay")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed and the PUSHNAV_SEED variable.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an episode dataset.
    GenData {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        split: Split,
        /// Episode count; defaults to the config's count for the split.
        #[arg(long)]
        count: Option<usize>,
        /// Output file; defaults to `<data_dir>/<task>-<split>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a policy.
    Train {
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Validation set evaluated every eval period.
        #[arg(long)]
        val_data: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or the untrained model when none is given.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate only the first N episodes.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        greedy: bool,
        /// Metrics CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-simulate a logged trajectory, writing frames and a reward CSV.
    Replay {
        #[arg(long)]
        data: PathBuf,
        /// Trajectory JSON written during evaluation.
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the image frames.
        #[arg(long)]
        no_frames: bool,
    },
    /// Print the effective configuration as TOML.
    DumpConfig,
}

/// Config from file, then seed from the environment, then from the flag.
pub fn effective_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.seed = s
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={s} is not an unsigned integer"))?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.common)?;
    match cli.command {
        Command::DumpConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::GenData {
            task,
            split,
            count,
            out,
        } => {
            let count = count.unwrap_or(cfg.counts.of(split));
            let out = out.unwrap_or_else(|| cfg.dataset_path(task, split));
            eprintln!("gen-data: {} {} x{count} seed {}", task.name(), split.name(), cfg.seed);
            let data = Dataset::generate(task, split, count, cfg.seed, &cfg.tasks)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            data.save(&out)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Train {
            train_data,
            val_data,
            run_dir,
        } => {
            let task = cfg.train.task;
            let paths = RunPaths {
                train: train_data.unwrap_or_else(|| cfg.dataset_path(task, Split::Train)),
                val: Some(val_data.unwrap_or_else(|| cfg.dataset_path(task, Split::Val))),
                run_dir: run_dir.unwrap_or_else(|| cfg.run_dir.clone()),
            };
            eprintln!("train: seed {}\n{}", cfg.seed, toml::to_string_pretty(&cfg.train)?);
            let s = train_loop(&cfg.train, &paths)?;
            println!(
                "updates {} steps {} final lr {}; logs in {}",
                s.updates,
                s.env_steps,
                s.final_lr,
                paths.run_dir.display()
            );
            if let Some(e) = s.evals.last() {
                println!("last eval at {}: SR {:.1} FDT {:.3} SPL {:.3}", e.step, e.sr, e.fdt, e.spl);
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            episodes,
            greedy,
            out,
        } => eval_cmd(&cfg, checkpoint.as_deref(), &data, episodes, greedy, out.as_deref()),
        Command::Replay {
            data,
            trajectory,
            out,
            no_frames,
        } => replay_cmd(&data, &trajectory, &out, !no_frames),
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    ensure!(path.exists(), "dataset {} does not exist", path.display());
    Dataset::load(path).with_context(|| format!("loading {}", path.display()))
}

fn eval_cmd(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    data: &Path,
    episodes: Option<usize>,
    greedy: bool,
    out: Option<&Path>,
) -> Result<()> {
    let dataset = load_data(data)?;
    let (train_cfg, store, net) = match checkpoint {
        Some(p) => {
            ensure!(p.exists(), "checkpoint {} does not exist", p.display());
            load_model(p).with_context(|| format!("loading checkpoint {}", p.display()))?
        }
        None => {
            let (store, net) = build_model(&cfg.train)?;
            (cfg.train.clone(), store, net)
        }
    };
    if dataset.task != train_cfg.task {
        bail!(
            "model was trained for {} but {} holds {} episodes",
            train_cfg.task.name(),
            data.display(),
            dataset.task.name()
        );
    }
    if dataset.config.sim.resolution != train_cfg.policy.resolution {
        bail!(
            "model expects {} px frames but the dataset renders {} px",
            train_cfg.policy.resolution,
            dataset.config.sim.resolution
        );
    }
    let n = episodes.unwrap_or(dataset.episodes.len()).min(dataset.episodes.len());
    let eval_cfg = EvalConfig {
        reward: train_cfg.reward,
        perception: perception(&train_cfg),
        seed: cfg.seed,
        batch: train_cfg.workers,
        greedy,
    };
    eprintln!("eval: {} episodes, seed {}, greedy {greedy}", n, cfg.seed);
    let trajs = evaluate(&net, store.values(), &dataset.episodes[..n], &eval_cfg)?;
    let results: Vec<_> = trajs.iter().map(|t| t.result).collect();
    let m = compute_metrics(&results)?;
    let row = MetricsRow {
        task: dataset.task.name().to_string(),
        sr: m.sr,
        fdt: m.fdt,
        spl: m.spl,
        seeds: cfg.seed.to_string(),
        steps: results.iter().map(|r| r.steps as u64).sum(),
    };
    write_metrics_csv(std::io::stdout(), std::slice::from_ref(&row))?;
    if let Some(p) = out {
        write_metrics_csv(fs::File::create(p)?, &[row])?;
    }
    Ok(())
}

fn depth_image(obs: &Observation, max_depth: f64) -> Vec<[u8; 3]> {
    obs.depth
        .iter()
        .map(|&d| {
            let v = (255.0 * (1.0 - (d / max_depth).clamp(0.0, 1.0))).round() as u8;
            [v, v, v]
        })
        .collect()
}

fn segmentation_image(obs: &Observation) -> Vec<[u8; 3]> {
    obs.category
        .iter()
        .map(|&c| match c {
            0 => [0, 0, 0],
            1 => [90, 90, 90],
            2 => [200, 200, 200],
            c => category_color(c - OBJECT_ID_BASE),
        })
        .collect()
}

fn write_frames(dir: &Path, step: usize, obs: &Observation, categories: usize) -> Result<()> {
    let (w, h) = (obs.width, obs.height);
    let kp = lift_keypoints(obs, categories);
    let images = [
        ("color", obs.color.clone()),
        ("depth", depth_image(obs, 10.0)),
        ("segmentation", segmentation_image(obs)),
        ("keypoints", overlay_keypoints(obs, &kp)),
    ];
    for (name, img) in images {
        let f = fs::File::create(dir.join(format!("{step:04}-{name}.ppm")))?;
        write_ppm(std::io::BufWriter::new(f), w, h, &img)?;
    }
    Ok(())
}

fn replay_cmd(data: &Path, trajectory: &Path, out: &Path, frames: bool) -> Result<()> {
    let dataset = load_data(data)?;
    ensure!(trajectory.exists(), "trajectory {} does not exist", trajectory.display());
    let traj: Trajectory = serde_json::from_str(&fs::read_to_string(trajectory)?)
        .with_context(|| format!("parsing {}", trajectory.display()))?;
    let log_dir = trajectory.parent().map(fs::canonicalize).transpose()?;
    fs::create_dir_all(out)?;
    ensure!(
        log_dir.as_deref() != Some(fs::canonicalize(out)?.as_path()),
        "replay output must not be the directory it reads from"
    );
    let episode = dataset
        .episodes
        .get(traj.episode_index)
        .with_context(|| format!("episode {} not in {}", traj.episode_index, data.display()))?;
    ensure!(
        episode.seed == traj.episode_seed,
        "trajectory was recorded on episode seed {} but the dataset holds {}",
        traj.episode_seed,
        episode.seed
    );
    let actions = traj
        .actions
        .iter()
        .map(|&a| Action::from_index(a))
        .collect::<Result<Vec<_>, _>>()?;
    let trs = replay(episode, &actions, &traj.reward)?;
    let rewards: Vec<f64> = trs.iter().map(|t| t.reward).collect();

    let mut state = episode.scene.clone();
    let mut distances = Vec::with_capacity(actions.len());
    let categories = dataset.config.categories;
    for (i, &a) in actions.iter().enumerate() {
        if frames {
            write_frames(out, i, &render(&state), categories)?;
        }
        state = pushnav::worldsim::step(&state, a)?.0;
        distances.push(task_distance(&state, &episode.goal));
    }
    if frames {
        write_frames(out, actions.len(), &render(&state), categories)?;
    }
    write_reward_csv(fs::File::create(out.join("rewards.csv"))?, &traj.actions, &rewards, &distances)?;
    if rewards != traj.rewards {
        eprintln!("warning: replayed rewards differ from the logged ones");
    }
    println!("replayed {} steps into {}", actions.len(), out.display());
    Ok(())
}
