//! Episode generation, reward shaping, success and navigation metrics.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::ObjectPose;
use crate::worldsim::{
    cell_of, geodesic_distance, path_exists, step, traversable, Action, AgentState, DistanceField,
    Grid, Mover, ObjectInstance, SimError, SimParams, StepEvent, WorldState, CELL,
};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("template `{template}` is infeasible: {reason}")]
    Infeasible { template: String, reason: String },
    #[error("placement failed for template `{template}` after {attempts} attempts")]
    Placement { template: String, attempts: usize },
    #[error("episode {index} has non-positive shortest path {length}")]
    Degenerate { index: usize, length: f64 },
    #[error("no episodes to score")]
    Empty,
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Reach the target; every path is blocked at spawn.
    ObsNav,
    /// Push the designated object onto the target mark.
    ObjPlace,
    /// Empty-room point goal, the training sanity check.
    PointNav,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::ObsNav => "obsnav",
            Task::ObjPlace => "objplace",
            Task::PointNav => "pointnav",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "obsnav" => Ok(Task::ObsNav),
            "objplace" => Ok(Task::ObjPlace),
            "pointnav" => Ok(Task::PointNav),
            other => Err(format!("unknown task `{other}` (obsnav, objplace, pointnav)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Independent seed stream per split, so template seeds never coincide.
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Val => 0x7661_6c00_0000_0002,
            Split::Test => 0x7465_7374_0000_0003,
        }
    }

    /// Object-size variants drawn from; the held-out variants never appear
    /// in training.
    pub fn size_variants(self) -> &'static [usize] {
        match self {
            Split::Train => &[0, 1, 2],
            Split::Val => &[3],
            Split::Test => &[4],
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (train, val, test)")),
        }
    }
}

/// SplitMix64 finalizer over `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Footprint width, depth and height per category before variant scaling.
const CATEGORY_SIZES: [[f64; 3]; 8] = [
    [0.40, 0.40, 0.40],
    [0.42, 0.42, 0.90],
    [0.45, 0.35, 0.70],
    [0.30, 0.30, 0.50],
    [0.44, 0.44, 0.44],
    [0.35, 0.35, 0.45],
    [0.45, 0.30, 1.00],
    [0.30, 0.30, 0.80],
];
const VARIANT_SCALES: [f64; 5] = [1.0, 0.9, 1.1, 0.95, 1.05];
const BLOCKER_MASSES: [f64; 4] = [1.0, 1.0, 1.5, 2.0];
/// Placed objects move one cell per push.
const PLACED_OBJECT_MASS: f64 = 2.0;

pub fn object_size(category: u32, variant: usize) -> [f64; 3] {
    let base = CATEGORY_SIZES[category as usize % CATEGORY_SIZES.len()];
    let s = VARIANT_SCALES[variant % VARIANT_SCALES.len()];
    [base[0] * s, base[1] * s, base[2] * s]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    /// Random rectangular room with internal walls and doorways.
    Rooms,
    /// Two rooms joined by one two-cell-wide corridor; blockers go in the
    /// corridor.
    Corridor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub template: Template,
    /// Interior side length range in meters.
    pub room_min: f64,
    pub room_max: f64,
    pub max_internal_walls: usize,
    pub categories: usize,
    pub max_blockers: usize,
    pub max_distractors: usize,
    /// Minimum walls-only geodesic from agent to target for navigation tasks.
    pub min_goal_distance: f64,
    /// Minimum straight-line object-to-target separation for placement.
    pub min_separation: f64,
    pub attempts: usize,
    pub sim: SimParams,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            template: Template::Rooms,
            room_min: 3.0,
            room_max: 6.0,
            max_internal_walls: 3,
            categories: 8,
            max_blockers: 6,
            max_distractors: 2,
            min_goal_distance: 1.5,
            min_separation: 2.0,
            attempts: 200,
            sim: SimParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub success: f64,
    pub path_change: f64,
    pub step_obsnav: f64,
    pub step_objplace: f64,
    pub success_radius: f64,
    pub max_steps: u32,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            success: 10.0,
            path_change: 0.5,
            step_obsnav: -0.01,
            step_objplace: -0.002,
            success_radius: 0.2,
            max_steps: 500,
        }
    }
}

impl RewardConfig {
    pub fn step_penalty(&self, task: Task) -> f64 {
        match task {
            Task::ObjPlace => self.step_objplace,
            Task::ObsNav | Task::PointNav => self.step_obsnav,
        }
    }
}

/// What counts as reaching the goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub task: Task,
    /// The object to place (object placement only).
    pub target_object: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub seed: u64,
    pub goal: Goal,
    /// Spawn state; its `target` field is the goal point.
    pub scene: WorldState,
    /// Reference shortest path `L_n` in meters.
    pub shortest_path: f64,
    pub template: String,
}

impl Episode {
    pub fn target(&self) -> [f64; 2] {
        self.scene.target
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Straight-line floor distance from the goal entity to the target.
pub fn goal_distance(state: &WorldState, goal: &Goal) -> f64 {
    match goal.target_object.and_then(|id| state.object(id)) {
        Some(o) if goal.task == Task::ObjPlace => dist2(o.center(), state.target),
        _ => dist2(state.agent.position(), state.target),
    }
}

/// Geodesic distance driving the progress reward: the agent's walking
/// distance, or the placed object's, to the target. Unreachable targets
/// fall back to the walls-only distance, then to straight-line distance.
pub fn task_distance(state: &WorldState, goal: &Goal) -> f64 {
    let (from, mover) = match (goal.task, goal.target_object.and_then(|id| state.object(id))) {
        (Task::ObjPlace, Some(o)) => (o.center(), Mover::Object(o.id)),
        _ => (state.agent.position(), Mover::Agent),
    };
    geodesic_distance(state, from, state.target, mover)
        .or_else(|| geodesic_distance(state, from, state.target, Mover::WallsOnly))
        .unwrap_or_else(|| dist2(from, state.target))
}

/// Success: `End` invoked with the goal entity within the radius.
pub fn is_success(state: &WorldState, invoked_end: bool, goal: &Goal, cfg: &RewardConfig) -> bool {
    invoked_end && goal_distance(state, goal) <= cfg.success_radius
}

/// The four additive reward components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    pub success: f64,
    pub path: f64,
    pub progress: f64,
    pub step: f64,
}

impl RewardTerms {
    /// Summed in a fixed order so replays agree bitwise.
    pub fn total(&self) -> f64 {
        self.success + self.path + self.progress + self.step
    }
}

/// Reward terms from precomputed distances and event flags.
pub fn reward_terms(
    task: Task,
    d_prev: f64,
    d_next: f64,
    success: bool,
    event: &StepEvent,
    cfg: &RewardConfig,
) -> RewardTerms {
    let path = if task == Task::ObjPlace {
        0.0
    } else if event.path_opened {
        cfg.path_change
    } else if event.path_blocked {
        -cfg.path_change
    } else {
        0.0
    };
    RewardTerms {
        success: if success { cfg.success } else { 0.0 },
        path,
        progress: d_prev - d_next,
        step: cfg.step_penalty(task),
    }
}

pub fn compute_reward(
    prev: &WorldState,
    action: Action,
    next: &WorldState,
    event: &StepEvent,
    goal: &Goal,
    cfg: &RewardConfig,
) -> f64 {
    let success = is_success(next, action == Action::End, goal, cfg);
    reward_terms(
        goal.task,
        task_distance(prev, goal),
        task_distance(next, goal),
        success,
        event,
        cfg,
    )
    .total()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub final_distance: f64,
    /// Distance traveled by the agent, or by the placed object.
    pub path_length: f64,
    pub shortest_path: f64,
    pub steps: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percent.
    pub sr: f64,
    pub fdt: f64,
    pub spl: f64,
    pub episodes: usize,
}

pub fn compute_metrics(results: &[EpisodeResult]) -> Result<Metrics, TaskError> {
    if results.is_empty() {
        return Err(TaskError::Empty);
    }
    let n = results.len() as f64;
    let mut successes = 0usize;
    let mut fdt = 0.0;
    let mut spl = 0.0;
    for (index, r) in results.iter().enumerate() {
        if r.shortest_path <= 0.0 || r.shortest_path.is_nan() {
            return Err(TaskError::Degenerate {
                index,
                length: r.shortest_path,
            });
        }
        fdt += r.final_distance;
        if r.success {
            successes += 1;
            spl += r.shortest_path / r.path_length.max(r.shortest_path);
        }
    }
    Ok(Metrics {
        sr: 100.0 * successes as f64 / n,
        fdt: fdt / n,
        spl: spl / n,
        episodes: results.len(),
    })
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: String,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "FDT")]
    pub fdt: f64,
    #[serde(rename = "SPL")]
    pub spl: f64,
    pub seeds: String,
    pub steps: u64,
}

pub fn write_metrics_csv(out: impl Write, rows: &[MetricsRow]) -> Result<(), TaskError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A live episode: simulator state plus the bookkeeping rewards and metrics
/// need.
#[derive(Debug, Clone)]
pub struct Env {
    pub episode: Episode,
    pub state: WorldState,
    pub reward: RewardConfig,
    distance: f64,
    path_length: f64,
    success: bool,
    done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub event: StepEvent,
    pub terms: RewardTerms,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

impl Env {
    pub fn new(episode: Episode, reward: RewardConfig) -> Self {
        let state = episode.scene.clone();
        let distance = task_distance(&state, &episode.goal);
        Self {
            episode,
            state,
            reward,
            distance,
            path_length: 0.0,
            success: false,
            done: false,
        }
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn step(&mut self, action: Action) -> Result<Transition, SimError> {
        if self.done {
            return Err(SimError::Terminal);
        }
        let goal = self.episode.goal;
        let (next, event) = step(&self.state, action)?;
        let d_next = task_distance(&next, &goal);
        let success = is_success(&next, action == Action::End, &goal, &self.reward);
        let terms = reward_terms(goal.task, self.distance, d_next, success, &event, &self.reward);
        self.path_length += match goal.task {
            Task::ObjPlace => {
                if event.pushed.is_some() && event.pushed == goal.target_object {
                    event.displacement
                } else {
                    0.0
                }
            }
            _ => {
                if next.agent.cell != self.state.agent.cell {
                    CELL
                } else {
                    0.0
                }
            }
        };
        self.state = next;
        self.distance = d_next;
        self.success = success;
        self.done = event.terminal || self.state.steps >= self.reward.max_steps;
        Ok(Transition {
            event,
            terms,
            reward: terms.total(),
            done: self.done,
            success,
        })
    }

    pub fn result(&self) -> EpisodeResult {
        EpisodeResult {
            success: self.success,
            final_distance: goal_distance(&self.state, &self.episode.goal),
            path_length: self.path_length,
            shortest_path: self.episode.shortest_path,
            steps: self.state.steps,
        }
    }
}

/// Re-simulates an action sequence, returning every transition.
pub fn replay(episode: &Episode, actions: &[Action], reward: &RewardConfig) -> Result<Vec<Transition>, SimError> {
    let mut env = Env::new(episode.clone(), *reward);
    actions.iter().map(|&a| env.step(a)).collect()
}

// ---- generation ------------------------------------------------------------

struct Layout {
    grid: Grid,
    /// Cells where blockers may go (`None`: anywhere on the path).
    slot: Option<Vec<[usize; 2]>>,
    /// Spawn regions for agent and target (`None`: anywhere).
    agent_region: Option<Vec<[usize; 2]>>,
    target_region: Option<Vec<[usize; 2]>>,
    name: String,
}

fn free_cells(grid: &Grid) -> Vec<[usize; 2]> {
    (0..grid.depth)
        .flat_map(|j| (0..grid.width).map(move |i| [i, j]))
        .filter(|&[i, j]| !grid.is_wall(i, j))
        .collect()
}

fn connected(grid: &Grid) -> bool {
    let free = free_cells(grid);
    let Some(&start) = free.first() else {
        return false;
    };
    let mask: Vec<bool> = (0..grid.depth)
        .flat_map(|j| (0..grid.width).map(move |i| (i, j)))
        .map(|(i, j)| !grid.is_wall(i, j))
        .collect();
    let field = DistanceField::new(grid, &mask, start);
    free.iter().all(|&c| field.hops(c).is_some())
}

fn rooms_layout(rng: &mut ChaCha8Rng, cfg: &TaskConfig, max_walls: usize) -> Option<Layout> {
    let lo = (cfg.room_min / CELL).round() as usize;
    let hi = ((cfg.room_max / CELL).round() as usize).max(lo);
    let (w, d) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
    let mut grid = Grid::room(w + 2, d + 2);
    let walls = rng.gen_range(0..=max_walls);
    let mut lines: Vec<(bool, usize)> = Vec::new();
    for _ in 0..walls {
        let vertical = rng.gen_bool(0.5);
        let span = if vertical { w } else { d };
        if span < 8 {
            continue;
        }
        let at = rng.gen_range(4..=span - 3);
        if lines
            .iter()
            .any(|&(v, p)| v == vertical && (p as isize - at as isize).abs() < 4)
        {
            continue;
        }
        let along = if vertical { d } else { w };
        let door = rng.gen_range(2..=3);
        let door_at = rng.gen_range(1..=along + 1 - door);
        for k in 1..=along {
            if (door_at..door_at + door).contains(&k) {
                continue;
            }
            if vertical {
                grid.set_wall(at, k, true);
            } else {
                grid.set_wall(k, at, true);
            }
        }
        lines.push((vertical, at));
    }
    if !connected(&grid) {
        return None;
    }
    Some(Layout {
        name: format!("rooms-{}x{}-w{}", w, d, lines.len()),
        grid,
        slot: None,
        agent_region: None,
        target_region: None,
    })
}

fn corridor_layout() -> Layout {
    // Interior 16 x 9 cells; a 4-cell-thick partition at interior columns
    // 7..=10 leaves a corridor on interior rows 4 and 5.
    let (w, d) = (16, 9);
    let mut grid = Grid::room(w + 2, d + 2);
    let mut slot = Vec::new();
    for i in 7..=10 {
        for j in 1..=d {
            if j == 4 || j == 5 {
                slot.push([i, j]);
            } else {
                grid.set_wall(i, j, true);
            }
        }
    }
    let region = |range: std::ops::RangeInclusive<usize>| -> Vec<[usize; 2]> {
        range.flat_map(|i| (1..=d).map(move |j| [i, j])).collect()
    };
    Layout {
        name: "corridor".into(),
        grid,
        slot: Some(slot),
        agent_region: Some(region(1..=4)),
        target_region: Some(region(13..=16)),
    }
}

fn layout(rng: &mut ChaCha8Rng, cfg: &TaskConfig, max_walls: usize) -> Option<Layout> {
    match cfg.template {
        Template::Rooms => rooms_layout(rng, cfg, max_walls),
        Template::Corridor => Some(corridor_layout()),
    }
}

fn base_state(grid: Grid, cfg: &TaskConfig, seed: u64) -> WorldState {
    WorldState {
        params: cfg.sim,
        grid,
        objects: Vec::new(),
        agent: AgentState {
            cell: [1, 1],
            azimuth: 0,
            elevation: 0,
            camera_height_mm: 900,
        },
        target: [0.0, 0.0],
        steps: 0,
        seed,
        terminal: false,
    }
}

fn pick(rng: &mut ChaCha8Rng, cells: &[[usize; 2]]) -> Option<[usize; 2]> {
    cells.choose(rng).copied()
}

/// Object fits: clear of walls and other objects, and leaves the agent's
/// cell free.
fn fits(state: &WorldState, o: &ObjectInstance) -> bool {
    let fp = o.footprint();
    !state.grid.obb_hits_wall(&fp)
        && !state.objects.iter().any(|p| p.footprint().overlaps(&fp))
        && !fp.overlaps_aabb(&state.agent_box(state.agent.cell))
}

/// Cells of one shortest agent path from the agent to the target.
fn agent_path(state: &WorldState) -> Option<Vec<[usize; 2]>> {
    let mask = traversable(state, Mover::Agent);
    let target = cell_of(&state.grid, state.target);
    let field = DistanceField::new(&state.grid, &mask, target);
    let mut cur = state.agent.cell;
    let mut h = field.hops(cur)?;
    let mut path = vec![cur];
    while h > 0 {
        let [i, j] = cur;
        let next = [
            [i.wrapping_sub(1), j],
            [i + 1, j],
            [i, j.wrapping_sub(1)],
            [i, j + 1],
        ]
        .into_iter()
        .find(|&[a, b]| a < state.grid.width && b < state.grid.depth && field.hops([a, b]) == Some(h - 1))?;
        cur = next;
        h -= 1;
        path.push(cur);
    }
    Some(path)
}

fn random_object(rng: &mut ChaCha8Rng, id: u32, cfg: &TaskConfig, variant: usize, center: [f64; 2]) -> ObjectInstance {
    let category = rng.gen_range(0..cfg.categories.max(1)) as u32;
    ObjectInstance {
        id,
        category,
        size: object_size(category, variant),
        pose: ObjectPose::new([center[0], 0.0, center[1]], if rng.gen_bool(0.5) { 0.0 } else { 90.0 }),
        mass: *BLOCKER_MASSES.choose(rng).expect("non-empty"),
    }
}

fn add_distractors(rng: &mut ChaCha8Rng, state: &mut WorldState, cfg: &TaskConfig, variant: usize, keep_clear: &[[usize; 2]]) {
    let count = rng.gen_range(0..=cfg.max_distractors);
    let free = free_cells(&state.grid);
    for _ in 0..count {
        for _ in 0..20 {
            let Some(c) = pick(rng, &free) else { return };
            let id = state.objects.len() as u32;
            let o = random_object(rng, id, cfg, variant, Grid::cell_center(c[0], c[1]));
            let mut trial = state.clone();
            trial.objects.push(o.clone());
            let clear = keep_clear.iter().all(|&k| trial.agent_can_occupy(k));
            if fits(state, &o) && clear {
                state.objects.push(o);
                break;
            }
        }
    }
}

fn spawn_agent(rng: &mut ChaCha8Rng, state: &mut WorldState, region: &Option<Vec<[usize; 2]>>) -> bool {
    let cells = region.clone().unwrap_or_else(|| free_cells(&state.grid));
    for _ in 0..50 {
        let Some(c) = pick(rng, &cells) else { return false };
        if state.agent_can_occupy(c) {
            state.agent.cell = c;
            state.agent.azimuth = 90 * rng.gen_range(0..4);
            return true;
        }
    }
    false
}

fn size_variant(rng: &mut ChaCha8Rng, split: Split) -> usize {
    *split.size_variants().choose(rng).expect("non-empty")
}

fn obsnav_attempt(rng: &mut ChaCha8Rng, cfg: &TaskConfig, split: Split, seed: u64) -> Option<Episode> {
    let lay = layout(rng, cfg, cfg.max_internal_walls)?;
    let variant = size_variant(rng, split);
    let mut state = base_state(lay.grid.clone(), cfg, seed);
    if !spawn_agent(rng, &mut state, &lay.agent_region) {
        return None;
    }
    let targets = lay.target_region.clone().unwrap_or_else(|| free_cells(&state.grid));
    let t = pick(rng, &targets)?;
    state.target = Grid::cell_center(t[0], t[1]);
    let goal = Goal {
        task: Task::ObsNav,
        target_object: None,
    };
    let walls_only = geodesic_distance(&state, state.agent.position(), state.target, Mover::WallsOnly)?;
    if walls_only < cfg.min_goal_distance {
        return None;
    }
    if lay.slot.is_none() {
        add_distractors(rng, &mut state, cfg, variant, &[t]);
    }
    let mut blockers = 0;
    while path_exists(&state) {
        if blockers == cfg.max_blockers {
            return None;
        }
        let path = agent_path(&state)?;
        let margin = |k: usize| k >= 2 && k + 2 < path.len();
        let mut candidates: Vec<[usize; 2]> = path
            .iter()
            .enumerate()
            .filter(|&(k, c)| margin(k) && lay.slot.as_ref().is_none_or(|s| s.contains(c)))
            .map(|(_, &c)| c)
            .collect();
        candidates.shuffle(rng);
        let mut placed = false;
        'cells: for c in candidates {
            let center = Grid::cell_center(c[0], c[1]);
            let mut offsets = Vec::new();
            for dx in [-0.125, 0.0, 0.125] {
                for dz in [-0.125, 0.0, 0.125] {
                    offsets.push([dx, dz]);
                }
            }
            offsets.shuffle(rng);
            let id = state.objects.len() as u32;
            let proto = random_object(rng, id, cfg, variant, center);
            for [dx, dz] in offsets {
                let mut o = proto.clone();
                o.pose = ObjectPose::new([center[0] + dx, 0.0, center[1] + dz], proto.pose.yaw);
                if !fits(&state, &o) {
                    continue;
                }
                let mut trial = state.clone();
                trial.objects.push(o);
                if trial.agent_can_occupy(c) || !trial.agent_can_occupy(t) {
                    continue;
                }
                state = trial;
                placed = true;
                break 'cells;
            }
        }
        if !placed {
            return None;
        }
        blockers += 1;
    }
    state.validate().ok()?;
    Some(Episode {
        seed,
        goal,
        shortest_path: walls_only,
        template: lay.name,
        scene: state,
    })
}

fn objplace_attempt(rng: &mut ChaCha8Rng, cfg: &TaskConfig, split: Split, seed: u64) -> Option<Episode> {
    let lay = layout(rng, cfg, cfg.max_internal_walls.min(1))?;
    let variant = size_variant(rng, split);
    let mut state = base_state(lay.grid.clone(), cfg, seed);
    let free = free_cells(&state.grid);
    let category = rng.gen_range(0..cfg.categories.max(1)) as u32;
    let oc = pick(rng, &free)?;
    let object = ObjectInstance {
        id: 0,
        category,
        size: object_size(category, variant),
        pose: ObjectPose::new([Grid::cell_center(oc[0], oc[1])[0], 0.0, Grid::cell_center(oc[0], oc[1])[1]], 0.0),
        mass: PLACED_OBJECT_MASS,
    };
    if state.grid.obb_hits_wall(&object.footprint()) {
        return None;
    }
    state.objects.push(object.clone());
    let far: Vec<[usize; 2]> = free
        .iter()
        .copied()
        .filter(|&[i, j]| dist2(Grid::cell_center(i, j), object.center()) >= cfg.min_separation)
        .collect();
    let t = pick(rng, &far)?;
    state.target = Grid::cell_center(t[0], t[1]);
    let shortest = geodesic_distance(&state, object.center(), state.target, Mover::Object(0))?;
    add_distractors(rng, &mut state, cfg, variant, &[]);
    if !spawn_agent(rng, &mut state, &lay.agent_region) {
        return None;
    }
    state.validate().ok()?;
    Some(Episode {
        seed,
        goal: Goal {
            task: Task::ObjPlace,
            target_object: Some(0),
        },
        shortest_path: shortest,
        template: lay.name,
        scene: state,
    })
}

fn pointnav_attempt(rng: &mut ChaCha8Rng, cfg: &TaskConfig, seed: u64) -> Option<Episode> {
    let lay = layout(rng, cfg, 0)?;
    let mut state = base_state(lay.grid.clone(), cfg, seed);
    if !spawn_agent(rng, &mut state, &lay.agent_region) {
        return None;
    }
    let t = pick(rng, &free_cells(&state.grid))?;
    state.target = Grid::cell_center(t[0], t[1]);
    let d = geodesic_distance(&state, state.agent.position(), state.target, Mover::Agent)?;
    if d < 1.0 {
        return None;
    }
    Some(Episode {
        seed,
        goal: Goal {
            task: Task::PointNav,
            target_object: None,
        },
        shortest_path: d,
        template: lay.name,
        scene: state,
    })
}

fn template_name(cfg: &TaskConfig) -> String {
    match cfg.template {
        Template::Rooms => format!("rooms {}-{} m", cfg.room_min, cfg.room_max),
        Template::Corridor => "corridor".into(),
    }
}

fn generate(
    task: Task,
    seed: u64,
    split: Split,
    cfg: &TaskConfig,
) -> Result<Episode, TaskError> {
    if task == Task::ObjPlace && cfg.template == Template::Rooms {
        let diag = cfg.room_max * std::f64::consts::SQRT_2;
        if diag < cfg.min_separation {
            return Err(TaskError::Infeasible {
                template: template_name(cfg),
                reason: format!(
                    "room diagonal {diag:.2} m is below the {} m separation",
                    cfg.min_separation
                ),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.attempts {
        let ep = match task {
            Task::ObsNav => obsnav_attempt(&mut rng, cfg, split, seed),
            Task::ObjPlace => objplace_attempt(&mut rng, cfg, split, seed),
            Task::PointNav => pointnav_attempt(&mut rng, cfg, seed),
        };
        if let Some(ep) = ep {
            return Ok(ep);
        }
    }
    Err(TaskError::Placement {
        template: template_name(cfg),
        attempts: cfg.attempts,
    })
}

pub fn gen_obsnav(seed: u64, split: Split, cfg: &TaskConfig) -> Result<Episode, TaskError> {
    generate(Task::ObsNav, seed, split, cfg)
}

pub fn gen_objplace(seed: u64, split: Split, cfg: &TaskConfig) -> Result<Episode, TaskError> {
    generate(Task::ObjPlace, seed, split, cfg)
}

pub fn gen_pointnav(seed: u64, split: Split, cfg: &TaskConfig) -> Result<Episode, TaskError> {
    generate(Task::PointNav, seed, split, cfg)
}

/// One split's worth of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub format_version: u32,
    pub task: Task,
    pub split: Split,
    pub seed: u64,
    pub config: TaskConfig,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn generate(task: Task, split: Split, count: usize, seed: u64, cfg: &TaskConfig) -> Result<Self, TaskError> {
        let episodes = (0..count)
            .map(|i| generate(task, derive_seed(seed, split.stream(), i as u64), split, cfg))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            format_version: DATASET_FORMAT_VERSION,
            task,
            split,
            seed,
            config: *cfg,
            episodes,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TaskError> {
        let d: Dataset = serde_json::from_str(text).map_err(|e| TaskError::Format(e.to_string()))?;
        if d.format_version != DATASET_FORMAT_VERSION {
            return Err(TaskError::Format(format!(
                "unsupported dataset version {}",
                d.format_version
            )));
        }
        for e in &d.episodes {
            e.scene.validate()?;
        }
        Ok(d)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), TaskError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TaskError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
