//! Deterministic grid world with pushable boxes and an embodied camera agent.
//!
//! The floor is a grid of 0.25 m cells in the world x/z plane; cell `(i, j)`
//! spans `x in [0.25 i, 0.25 (i + 1)]`, `z in [0.25 j, 0.25 (j + 1)]`.
//! Objects are upright boxes resting on the floor. Pushes are kinematic:
//! an object slides along a world axis by `min(free distance,
//! base_displacement / mass)`, which keeps walls impassable and makes
//! heavy objects move less. The approximation stands in for a rigid-body
//! engine and is not a force model.

mod nav;
mod render;
pub mod shapes;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, GeometryError, ObjectPose};
use shapes::{Aabb, Obb, EPS};

pub use nav::{cell_of, geodesic_distance, path_exists, traversable, DistanceField, Mover};
pub use render::{
    category_color, render, visible_object_ids, Observation, BACKGROUND_ID, FLOOR_ID,
    OBJECT_ID_BASE, WALL_ID,
};

/// Grid pitch in meters.
pub const CELL: f64 = 0.25;
pub const NUM_ACTIONS: usize = 10;
/// Version tag written into every serialized scene.
pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("unknown action index {0}")]
    UnknownAction(usize),
    #[error("episode already terminated")]
    Terminal,
    #[error("invalid world state: {0}")]
    InvalidState(String),
    #[error("scene format: {0}")]
    Format(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    MoveAhead,
    RotateRight,
    RotateLeft,
    LookUp,
    LookDown,
    Push,
    Pull,
    RightPush,
    LeftPush,
    End,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::MoveAhead,
        Action::RotateRight,
        Action::RotateLeft,
        Action::LookUp,
        Action::LookDown,
        Action::Push,
        Action::Pull,
        Action::RightPush,
        Action::LeftPush,
        Action::End,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self, SimError> {
        Self::ALL.get(i).copied().ok_or(SimError::UnknownAction(i))
    }

    pub fn is_interaction(self) -> bool {
        matches!(
            self,
            Action::Push | Action::Pull | Action::RightPush | Action::LeftPush
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::MoveAhead => "MoveAhead",
            Action::RotateRight => "RotateRight",
            Action::RotateLeft => "RotateLeft",
            Action::LookUp => "LookUp",
            Action::LookDown => "LookDown",
            Action::Push => "Push",
            Action::Pull => "Pull",
            Action::RightPush => "RightPush",
            Action::LeftPush => "LeftPush",
            Action::End => "End",
        }
    }
}

/// Simulator constants carried with every state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// Push travel for a unit-mass object with free space ahead (meters).
    pub base_displacement: f64,
    /// Rotational slip: yaw change in degrees per meter of lateral offset
    /// between the agent and the pushed object's center. Zero disables it.
    pub slip: f64,
    /// Half side of the agent's square footprint (meters).
    pub agent_half: f64,
    pub wall_height: f64,
    pub hfov: f64,
    pub resolution: usize,
    /// Depth reported for rays that hit nothing.
    pub max_depth: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            base_displacement: 0.5,
            slip: 0.0,
            agent_half: 0.1,
            wall_height: 2.5,
            hfov: 90.0,
            resolution: 64,
            max_depth: 10.0,
        }
    }
}

/// Occupancy grid; `walls[j * width + i]` flags cell `(i, j)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "GridDoc", into = "GridDoc")]
pub struct Grid {
    pub width: usize,
    pub depth: usize,
    walls: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct GridDoc {
    width: usize,
    depth: usize,
    walls: Vec<[usize; 2]>,
}

impl From<GridDoc> for Grid {
    fn from(d: GridDoc) -> Self {
        let mut g = Grid::empty(d.width, d.depth);
        for [i, j] in d.walls {
            if i < d.width && j < d.depth {
                g.set_wall(i, j, true);
            }
        }
        g
    }
}

impl From<Grid> for GridDoc {
    fn from(g: Grid) -> Self {
        let walls = g.wall_cells().map(|(i, j)| [i, j]).collect();
        GridDoc {
            width: g.width,
            depth: g.depth,
            walls,
        }
    }
}

impl Grid {
    pub fn empty(width: usize, depth: usize) -> Self {
        Self {
            width,
            depth,
            walls: vec![false; width * depth],
        }
    }

    /// A rectangular room: free interior surrounded by one ring of wall cells.
    pub fn room(width: usize, depth: usize) -> Self {
        let mut g = Self::empty(width, depth);
        for i in 0..width {
            g.set_wall(i, 0, true);
            g.set_wall(i, depth - 1, true);
        }
        for j in 0..depth {
            g.set_wall(0, j, true);
            g.set_wall(width - 1, j, true);
        }
        g
    }

    pub fn is_wall(&self, i: usize, j: usize) -> bool {
        i >= self.width || j >= self.depth || self.walls[j * self.width + i]
    }

    pub fn set_wall(&mut self, i: usize, j: usize, wall: bool) {
        self.walls[j * self.width + i] = wall;
    }

    pub fn wall_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.depth)
            .flat_map(move |j| (0..self.width).map(move |i| (i, j)))
            .filter(|&(i, j)| self.walls[j * self.width + i])
    }

    pub fn cell_box(i: usize, j: usize) -> Aabb {
        Aabb::new(
            [i as f64 * CELL, j as f64 * CELL],
            [(i + 1) as f64 * CELL, (j + 1) as f64 * CELL],
        )
    }

    pub fn cell_center(i: usize, j: usize) -> [f64; 2] {
        [(i as f64 + 0.5) * CELL, (j as f64 + 0.5) * CELL]
    }

    /// Room extent in meters along x and z.
    pub fn extent(&self) -> [f64; 2] {
        [self.width as f64 * CELL, self.depth as f64 * CELL]
    }

    /// Wall cells whose boxes intersect `b` (touching included).
    pub fn walls_near(&self, b: &Aabb) -> impl Iterator<Item = (usize, usize)> + '_ {
        let lo_i = ((b.min[0] / CELL).floor().max(0.0) as usize).saturating_sub(1);
        let lo_j = ((b.min[1] / CELL).floor().max(0.0) as usize).saturating_sub(1);
        let hi_i = ((b.max[0] / CELL).ceil().max(0.0) as usize + 1).min(self.width);
        let hi_j = ((b.max[1] / CELL).ceil().max(0.0) as usize + 1).min(self.depth);
        (lo_j..hi_j)
            .flat_map(move |j| (lo_i..hi_i).map(move |i| (i, j)))
            .filter(|&(i, j)| self.is_wall(i, j))
    }

    /// True if `obb` overlaps any wall cell or leaves the grid.
    pub fn obb_hits_wall(&self, obb: &Obb) -> bool {
        let b = obb.bounds();
        let [ex, ez] = self.extent();
        if b.min[0] < -EPS || b.min[1] < -EPS || b.max[0] > ex + EPS || b.max[1] > ez + EPS {
            return true;
        }
        self.walls_near(&b)
            .any(|(i, j)| obb.overlaps_aabb(&Grid::cell_box(i, j)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: u32,
    pub category: u32,
    /// Width (local x), depth (local z) and height in meters.
    pub size: [f64; 3],
    pub pose: ObjectPose,
    pub mass: f64,
}

impl ObjectInstance {
    pub fn center(&self) -> [f64; 2] {
        [self.pose.position[0], self.pose.position[2]]
    }

    pub fn footprint(&self) -> Obb {
        Obb {
            center: self.center(),
            half: [self.size[0] / 2.0, self.size[1] / 2.0],
            yaw: self.pose.yaw,
        }
    }

    /// The eight box corners in world coordinates.
    pub fn corners(&self) -> [nalgebra::Point3<f64>; 8] {
        let m = self.pose.matrix();
        let [w, d, h] = self.size;
        let mut out = [nalgebra::Point3::origin(); 8];
        let mut k = 0;
        for y in [0.0, h] {
            for (sx, sz) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                let local = nalgebra::Point4::new(sx * w / 2.0, y, sz * d / 2.0, 1.0);
                let p = m * local.coords;
                out[k] = nalgebra::Point3::new(p.x, p.y, p.z);
                k += 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentState {
    pub cell: [usize; 2],
    /// Degrees in {0, 90, 180, 270}; 0 faces +z, 90 faces +x.
    pub azimuth: u32,
    /// Degrees in {-30, 0, 30}.
    pub elevation: i32,
    /// Camera height above the floor in millimeters, kept integral so the
    /// state stays bitwise comparable.
    pub camera_height_mm: u32,
}

/// Unit step on the grid for a heading in degrees.
pub fn heading_delta(azimuth: u32) -> (isize, isize) {
    match azimuth % 360 {
        0 => (0, 1),
        90 => (1, 0),
        180 => (0, -1),
        _ => (-1, 0),
    }
}

impl AgentState {
    pub fn position(&self) -> [f64; 2] {
        Grid::cell_center(self.cell[0], self.cell[1])
    }

    pub fn camera_height(&self) -> f64 {
        self.camera_height_mm as f64 / 1000.0
    }

    pub fn camera(&self, params: &SimParams) -> Result<CameraModel, GeometryError> {
        let [x, z] = self.position();
        CameraModel::new(
            params.resolution,
            params.resolution,
            params.hfov,
            [x, self.camera_height(), z],
            self.azimuth as f64,
            self.elevation as f64,
        )
    }

    /// Target displacement `(dx, dz)` expressed in the agent frame
    /// (x right, z forward).
    pub fn relative(&self, target: [f64; 2]) -> [f64; 2] {
        let [x, z] = self.position();
        let (dx, dz) = (target[0] - x, target[1] - z);
        let (s, c) = crate::geometry::sin_cos_deg(self.azimuth as f64);
        // forward = (s, c), right = (c, -s)
        [dx * c - dz * s, dx * s + dz * c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub params: SimParams,
    pub grid: Grid,
    pub objects: Vec<ObjectInstance>,
    pub agent: AgentState,
    /// Target floor point `(x, z)` in meters.
    pub target: [f64; 2],
    pub steps: u32,
    pub seed: u64,
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepEvent {
    pub collision: bool,
    pub pushed: Option<u32>,
    /// An interaction action found no visible object.
    pub no_target: bool,
    /// Distance the pushed object moved (meters).
    pub displacement: f64,
    pub path_opened: bool,
    pub path_blocked: bool,
    pub terminal: bool,
}

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    format_version: u32,
    #[serde(flatten)]
    state: WorldState,
}

impl WorldState {
    pub fn object(&self, id: u32) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn camera(&self) -> Result<CameraModel, GeometryError> {
        self.agent.camera(&self.params)
    }

    pub fn agent_box(&self, cell: [usize; 2]) -> Aabb {
        let h = self.params.agent_half;
        Aabb::centered(Grid::cell_center(cell[0], cell[1]), [h, h])
    }

    /// Whether the agent may stand in `cell`: inside the grid, not a wall,
    /// and clear of every object footprint.
    pub fn agent_can_occupy(&self, cell: [usize; 2]) -> bool {
        if self.grid.is_wall(cell[0], cell[1]) {
            return false;
        }
        let b = self.agent_box(cell);
        !self.objects.iter().any(|o| o.footprint().overlaps_aabb(&b))
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidState(m));
        if self.grid.width < 3 || self.grid.depth < 3 {
            return bad(format!("grid {}x{} too small", self.grid.width, self.grid.depth));
        }
        if ![0, 90, 180, 270].contains(&self.agent.azimuth) {
            return bad(format!("azimuth {}", self.agent.azimuth));
        }
        if ![-30, 0, 30].contains(&self.agent.elevation) {
            return bad(format!("elevation {}", self.agent.elevation));
        }
        let [ex, ez] = self.grid.extent();
        if !(self.target[0] >= 0.0 && self.target[0] <= ex && self.target[1] >= 0.0 && self.target[1] <= ez) {
            return bad(format!("target {:?} outside room", self.target));
        }
        for (k, o) in self.objects.iter().enumerate() {
            if !(o.size.iter().all(|&s| s > 0.0) && o.mass >= 1.0) {
                return bad(format!("object {} has size {:?}, mass {}", o.id, o.size, o.mass));
            }
            if self.objects[..k].iter().any(|p| p.id == o.id) {
                return bad(format!("duplicate object id {}", o.id));
            }
            let fp = o.footprint();
            if self.grid.obb_hits_wall(&fp) {
                return bad(format!("object {} overlaps a wall", o.id));
            }
            if let Some(p) = self.objects[..k].iter().find(|p| p.footprint().overlaps(&fp)) {
                return bad(format!("objects {} and {} overlap", p.id, o.id));
            }
        }
        if !self.agent_can_occupy(self.agent.cell) {
            return bad(format!("agent cell {:?} not traversable", self.agent.cell));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&SceneDoc {
            format_version: SCENE_FORMAT_VERSION,
            state: self.clone(),
        })
        .expect("world state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let doc: SceneDoc =
            serde_json::from_str(text).map_err(|e| SimError::Format(e.to_string()))?;
        if doc.format_version != SCENE_FORMAT_VERSION {
            return Err(SimError::Format(format!(
                "unsupported scene version {}",
                doc.format_version
            )));
        }
        doc.state.validate()?;
        Ok(doc.state)
    }
}

/// World-axis direction `(axis, sign)` of an agent-relative push.
fn push_direction(agent: &AgentState, action: Action) -> (usize, f64) {
    let heading = match action {
        Action::Push => agent.azimuth,
        Action::Pull => agent.azimuth + 180,
        Action::RightPush => agent.azimuth + 90,
        _ => agent.azimuth + 270,
    };
    match heading_delta(heading % 360) {
        (0, s) => (1, s as f64),
        (s, _) => (0, s as f64),
    }
}

/// The visible object closest to the agent in the floor plane, ties to the
/// lower id.
pub fn push_target(state: &WorldState) -> Option<u32> {
    let visible = visible_object_ids(state);
    let [ax, az] = state.agent.position();
    state
        .objects
        .iter()
        .filter(|o| visible.contains(&o.id))
        .map(|o| {
            let [x, z] = o.center();
            (((x - ax).powi(2) + (z - az).powi(2)).sqrt(), o.id)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
}

/// Distance object `idx` can slide along `(axis, sign)` before touching a
/// wall, another object, or the agent.
pub fn free_distance(state: &WorldState, idx: usize, axis: usize, sign: f64) -> f64 {
    let mover = state.objects[idx].footprint().bounds();
    let mut free = f64::INFINITY;
    let mut consider = |b: &Aabb| {
        if let Some(g) = mover.gap_along(b, axis, sign) {
            free = free.min(g);
        }
    };
    for (i, j) in state.grid.wall_cells() {
        consider(&Grid::cell_box(i, j));
    }
    for (k, o) in state.objects.iter().enumerate() {
        if k != idx {
            consider(&o.footprint().bounds());
        }
    }
    consider(&state.agent_box(state.agent.cell));
    free
}

fn apply_push(state: &WorldState, next: &mut WorldState, action: Action, ev: &mut StepEvent) {
    let Some(id) = push_target(state) else {
        ev.no_target = true;
        return;
    };
    ev.pushed = Some(id);
    let idx = state
        .objects
        .iter()
        .position(|o| o.id == id)
        .expect("target comes from the object list");
    let (axis, sign) = push_direction(&state.agent, action);
    let free = free_distance(state, idx, axis, sign);
    let obj = &state.objects[idx];
    let mut disp = free.min(state.params.base_displacement / obj.mass);
    if disp < EPS {
        disp = 0.0;
    }
    let mut moved = false;
    if disp > 0.0 {
        let p = &mut next.objects[idx].pose.position;
        p[if axis == 0 { 0 } else { 2 }] += sign * disp;
        moved = true;
    }
    ev.displacement = disp;
    if state.params.slip != 0.0 && disp > 0.0 {
        let [ox, oz] = obj.center();
        let [ax, az] = state.agent.position();
        // Lateral axis is the push direction turned a quarter to the right.
        let lateral = if axis == 1 {
            sign * (ox - ax)
        } else {
            -sign * (oz - az)
        };
        let old = next.objects[idx].pose;
        next.objects[idx].pose = ObjectPose::new(old.position, old.yaw + state.params.slip * lateral);
        let fp = next.objects[idx].footprint();
        let agent = next.agent_box(next.agent.cell);
        let blocked = next.grid.obb_hits_wall(&fp)
            || fp.overlaps_aabb(&agent)
            || next
                .objects
                .iter()
                .enumerate()
                .any(|(k, o)| k != idx && o.footprint().overlaps(&fp));
        if blocked {
            next.objects[idx].pose = old;
        }
    }
    if moved {
        let before = path_exists(state);
        let after = path_exists(next);
        ev.path_opened = !before && after;
        ev.path_blocked = before && !after;
    }
}

/// Advances the world by one action.
pub fn step(state: &WorldState, action: Action) -> Result<(WorldState, StepEvent), SimError> {
    if state.terminal {
        return Err(SimError::Terminal);
    }
    let mut next = state.clone();
    let mut ev = StepEvent::default();
    next.steps += 1;
    let agent = &mut next.agent;
    match action {
        Action::MoveAhead => {
            let (di, dj) = heading_delta(agent.azimuth);
            let ni = agent.cell[0] as isize + di;
            let nj = agent.cell[1] as isize + dj;
            let dest = [ni as usize, nj as usize];
            if ni >= 0 && nj >= 0 && state.agent_can_occupy(dest) {
                agent.cell = dest;
            } else {
                ev.collision = true;
            }
        }
        Action::RotateRight => agent.azimuth = (agent.azimuth + 90) % 360,
        Action::RotateLeft => agent.azimuth = (agent.azimuth + 270) % 360,
        Action::LookUp => agent.elevation = (agent.elevation + 30).min(30),
        Action::LookDown => agent.elevation = (agent.elevation - 30).max(-30),
        Action::Push | Action::Pull | Action::RightPush | Action::LeftPush => {
            apply_push(state, &mut next, action, &mut ev)
        }
        Action::End => next.terminal = true,
    }
    ev.terminal = next.terminal;
    Ok((next, ev))
}

/// [`step`] with a raw action index.
pub fn step_index(state: &WorldState, action: usize) -> Result<(WorldState, StepEvent), SimError> {
    step(state, Action::from_index(action)?)
}
