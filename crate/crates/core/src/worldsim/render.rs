//! Per-pixel ray casting against the floor, wall cells and object boxes.

use nalgebra::Vector3;

use super::{WorldState, CELL};
use crate::geometry::{rot_y, CameraModel};

pub const BACKGROUND_ID: u32 = 0;
pub const FLOOR_ID: u32 = 1;
pub const WALL_ID: u32 = 2;
/// Object `id` appears as instance `OBJECT_ID_BASE + id`; category `c`
/// appears as `OBJECT_ID_BASE + c`.
pub const OBJECT_ID_BASE: u32 = 3;

/// Radius of the painted target mark on the floor (color only).
const TARGET_MARK: f64 = 0.2;

const PALETTE: [[u8; 3]; 20] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
    [90, 60, 20],
    [20, 90, 60],
];
const BACKGROUND_RGB: [u8; 3] = [0, 0, 0];
const FLOOR_RGB: [u8; 3] = [110, 110, 110];
const WALL_RGB: [u8; 3] = [235, 235, 225];
const MARK_RGB: [u8; 3] = [255, 225, 25];

/// Flat color of an object category.
pub fn category_color(category: u32) -> [u8; 3] {
    PALETTE[category as usize % PALETTE.len()]
}

/// One rendered frame. Images are row-major, `v * width + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub width: usize,
    pub height: usize,
    /// Z-depth in meters (distance along the optical axis).
    pub depth: Vec<f64>,
    pub instance: Vec<u32>,
    pub category: Vec<u32>,
    pub color: Vec<[u8; 3]>,
    pub camera: CameraModel,
}

#[derive(Clone, Copy)]
enum Hit {
    None,
    Floor,
    Wall,
    Object(usize),
}

struct Caster<'a> {
    state: &'a WorldState,
    origin: Vector3<f64>,
    // Per-object world-to-local rotation and origin.
    locals: Vec<(nalgebra::Matrix3<f64>, Vector3<f64>, [f64; 3])>,
}

impl<'a> Caster<'a> {
    fn new(state: &'a WorldState, cam: &CameraModel) -> Self {
        let locals = state
            .objects
            .iter()
            .map(|o| {
                let r = rot_y(o.pose.yaw).transpose();
                let half = [o.size[0] / 2.0, o.size[2], o.size[1] / 2.0];
                (r, Vector3::from(o.pose.position), half)
            })
            .collect();
        Self {
            state,
            origin: Vector3::from(cam.position),
            locals,
        }
    }

    /// Nearest hit along `origin + t * dir` for `t > 0`.
    fn cast(&self, dir: &Vector3<f64>) -> (f64, Hit) {
        let o = &self.origin;
        let mut best = f64::INFINITY;
        let mut hit = Hit::None;
        if dir.y < 0.0 {
            best = -o.y / dir.y;
            hit = Hit::Floor;
        }
        if let Some(t) = self.cast_walls(dir, best) {
            best = t;
            hit = Hit::Wall;
        }
        for (k, (r, p, half)) in self.locals.iter().enumerate() {
            let lo = r * (o - p);
            let ld = r * dir;
            let bmin = [-half[0], 0.0, -half[2]];
            let bmax = [half[0], half[1], half[2]];
            if let Some(t) = slab(&lo, &ld, bmin, bmax) {
                if t < best {
                    best = t;
                    hit = Hit::Object(k);
                }
            }
        }
        (best, hit)
    }

    /// Grid traversal in the floor plane; returns the first wall face or
    /// wall top met before `limit`.
    fn cast_walls(&self, dir: &Vector3<f64>, limit: f64) -> Option<f64> {
        let g = &self.state.grid;
        let height = self.state.params.wall_height;
        let o = &self.origin;
        let (dx, dz) = (dir.x, dir.z);
        if dx == 0.0 && dz == 0.0 {
            return None;
        }
        let mut i = (o.x / CELL).floor() as isize;
        let mut j = (o.z / CELL).floor() as isize;
        let step_i: isize = if dx > 0.0 { 1 } else { -1 };
        let step_j: isize = if dz > 0.0 { 1 } else { -1 };
        let next_boundary = |c: isize, s: isize| (c + if s > 0 { 1 } else { 0 }) as f64 * CELL;
        let mut t_max_x = if dx != 0.0 {
            (next_boundary(i, step_i) - o.x) / dx
        } else {
            f64::INFINITY
        };
        let mut t_max_z = if dz != 0.0 {
            (next_boundary(j, step_j) - o.z) / dz
        } else {
            f64::INFINITY
        };
        let t_dx = if dx != 0.0 { CELL / dx.abs() } else { f64::INFINITY };
        let t_dz = if dz != 0.0 { CELL / dz.abs() } else { f64::INFINITY };
        let mut t_in = 0.0;
        loop {
            if t_in > limit {
                return None;
            }
            if i < 0 || j < 0 || i as usize >= g.width || j as usize >= g.depth {
                return None;
            }
            let t_out = t_max_x.min(t_max_z);
            if g.is_wall(i as usize, j as usize) {
                let y_in = o.y + t_in * dir.y;
                if (0.0..=height).contains(&y_in) {
                    return (t_in <= limit).then_some(t_in);
                }
                if y_in > height && dir.y < 0.0 {
                    let t_top = (height - o.y) / dir.y;
                    if t_top <= t_out {
                        return (t_top <= limit).then_some(t_top);
                    }
                }
            }
            if t_max_x < t_max_z {
                t_in = t_max_x;
                t_max_x += t_dx;
                i += step_i;
            } else {
                t_in = t_max_z;
                t_max_z += t_dz;
                j += step_j;
            }
        }
    }
}

/// Ray/box entry parameter for an axis-aligned box, `None` on a miss or
/// when the box is behind the ray origin.
fn slab(o: &Vector3<f64>, d: &Vector3<f64>, bmin: [f64; 3], bmax: [f64; 3]) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k] < bmin[k] || o[k] > bmax[k] {
                return None;
            }
            continue;
        }
        let a = (bmin[k] - o[k]) / d[k];
        let b = (bmax[k] - o[k]) / d[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if t0 > t1 || t1 <= 0.0 || t0 <= 0.0 {
        return None;
    }
    Some(t0)
}

fn rays(cam: &CameraModel) -> impl Iterator<Item = Vector3<f64>> + '_ {
    let r = cam.rotation();
    (0..cam.height).flat_map(move |v| (0..cam.width).map(move |u| r * cam.ray(u as f64, v as f64)))
}

/// Renders depth, segmentation and flat color from the agent camera.
/// Pixel `(u, v)` samples the ray through integer image coordinates.
pub fn render(state: &WorldState) -> Observation {
    let cam = state.camera().expect("validated camera parameters");
    let caster = Caster::new(state, &cam);
    let n = cam.width * cam.height;
    let mut depth = Vec::with_capacity(n);
    let mut instance = Vec::with_capacity(n);
    let mut category = Vec::with_capacity(n);
    let mut color = Vec::with_capacity(n);
    for dir in rays(&cam) {
        let (t, hit) = caster.cast(&dir);
        let (inst, cat, rgb) = match hit {
            Hit::None => (BACKGROUND_ID, BACKGROUND_ID, BACKGROUND_RGB),
            Hit::Floor => {
                let p = caster.origin + dir * t;
                let dist = ((p.x - state.target[0]).powi(2) + (p.z - state.target[1]).powi(2)).sqrt();
                let rgb = if dist <= TARGET_MARK { MARK_RGB } else { FLOOR_RGB };
                (FLOOR_ID, FLOOR_ID, rgb)
            }
            Hit::Wall => (WALL_ID, WALL_ID, WALL_RGB),
            Hit::Object(k) => {
                let o = &state.objects[k];
                (
                    OBJECT_ID_BASE + o.id,
                    OBJECT_ID_BASE + o.category,
                    category_color(o.category),
                )
            }
        };
        depth.push(if matches!(hit, Hit::None) {
            state.params.max_depth
        } else {
            t
        });
        instance.push(inst);
        category.push(cat);
        color.push(rgb);
    }
    Observation {
        width: cam.width,
        height: cam.height,
        depth,
        instance,
        category,
        color,
        camera: cam,
    }
}

/// Ids of objects covering at least one pixel of the current frame, sorted.
pub fn visible_object_ids(state: &WorldState) -> Vec<u32> {
    let Ok(cam) = state.camera() else {
        return Vec::new();
    };
    let caster = Caster::new(state, &cam);
    let mut seen = vec![false; state.objects.len()];
    for dir in rays(&cam) {
        if let (_, Hit::Object(k)) = caster.cast(&dir) {
            seen[k] = true;
        }
    }
    let mut ids: Vec<u32> = state
        .objects
        .iter()
        .zip(&seen)
        .filter(|(_, &s)| s)
        .map(|(o, _)| o.id)
        .collect();
    ids.sort_unstable();
    ids
}

impl Observation {
    pub fn pixel(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    /// Number of pixels showing instance `inst`.
    pub fn instance_pixels(&self, inst: u32) -> usize {
        self.instance.iter().filter(|&&i| i == inst).count()
    }
}
