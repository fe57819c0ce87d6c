//! Breadth-first geodesic distances on the 4-connected floor grid.

use std::collections::VecDeque;

use super::shapes::Obb;
use super::{Grid, WorldState, CELL};

/// Whose footprint decides traversability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mover {
    /// Walls and object footprints block the agent.
    Agent,
    /// Cells where the object's footprint, centered on the cell, clears
    /// every wall. Other objects are ignored.
    Object(u32),
    /// Only walls block; objects are treated as removable.
    WallsOnly,
}

/// Cell containing floor point `p`, clamped to the grid.
pub fn cell_of(grid: &Grid, p: [f64; 2]) -> [usize; 2] {
    let clamp = |v: f64, n: usize| ((v / CELL).floor().max(0.0) as usize).min(n - 1);
    [clamp(p[0], grid.width), clamp(p[1], grid.depth)]
}

/// Per-cell traversability for `mover`, row-major with `j * width + i`.
pub fn traversable(state: &WorldState, mover: Mover) -> Vec<bool> {
    let g = &state.grid;
    let mut mask: Vec<bool> = (0..g.depth)
        .flat_map(|j| (0..g.width).map(move |i| (i, j)))
        .map(|(i, j)| !g.is_wall(i, j))
        .collect();
    match mover {
        Mover::WallsOnly => {}
        Mover::Agent => {
            let h = state.params.agent_half;
            for o in &state.objects {
                let fp = o.footprint();
                let b = fp.bounds();
                let lo_i = (((b.min[0] - h) / CELL).floor().max(0.0)) as usize;
                let lo_j = (((b.min[1] - h) / CELL).floor().max(0.0)) as usize;
                let hi_i = ((((b.max[0] + h) / CELL).ceil()) as usize).min(g.width);
                let hi_j = ((((b.max[1] + h) / CELL).ceil()) as usize).min(g.depth);
                for j in lo_j..hi_j {
                    for i in lo_i..hi_i {
                        if mask[j * g.width + i] && fp.overlaps_aabb(&state.agent_box([i, j])) {
                            mask[j * g.width + i] = false;
                        }
                    }
                }
            }
        }
        Mover::Object(id) => {
            if let Some(o) = state.object(id) {
                let half = [o.size[0] / 2.0, o.size[1] / 2.0];
                for j in 0..g.depth {
                    for i in 0..g.width {
                        if mask[j * g.width + i] {
                            let fp = Obb {
                                center: Grid::cell_center(i, j),
                                half,
                                yaw: o.pose.yaw,
                            };
                            mask[j * g.width + i] = !g.obb_hits_wall(&fp);
                        }
                    }
                }
            }
        }
    }
    mask
}

/// BFS hop counts from a source cell over a traversability mask.
#[derive(Debug, Clone)]
pub struct DistanceField {
    width: usize,
    hops: Vec<Option<u32>>,
}

impl DistanceField {
    /// The source cell is always treated as traversable.
    pub fn new(grid: &Grid, mask: &[bool], source: [usize; 2]) -> Self {
        let w = grid.width;
        let mut hops = vec![None; mask.len()];
        let s = source[1] * w + source[0];
        hops[s] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some([i, j]) = queue.pop_front() {
            let d = hops[j * w + i].expect("queued cells are labeled");
            let mut visit = |ni: usize, nj: usize| {
                let k = nj * w + ni;
                if mask[k] && hops[k].is_none() {
                    hops[k] = Some(d + 1);
                    queue.push_back([ni, nj]);
                }
            };
            if i > 0 {
                visit(i - 1, j);
            }
            if i + 1 < w {
                visit(i + 1, j);
            }
            if j > 0 {
                visit(i, j - 1);
            }
            if j + 1 < grid.depth {
                visit(i, j + 1);
            }
        }
        Self { width: w, hops }
    }

    pub fn hops(&self, cell: [usize; 2]) -> Option<u32> {
        self.hops[cell[1] * self.width + cell[0]]
    }

    pub fn meters(&self, cell: [usize; 2]) -> Option<f64> {
        self.hops(cell).map(|h| h as f64 * CELL)
    }
}

/// Shortest 4-connected path length between the cells containing `from`
/// and `to`, or `None` when unreachable.
pub fn geodesic_distance(
    state: &WorldState,
    from: [f64; 2],
    to: [f64; 2],
    mover: Mover,
) -> Option<f64> {
    let mask = traversable(state, mover);
    let field = DistanceField::new(&state.grid, &mask, cell_of(&state.grid, from));
    field.meters(cell_of(&state.grid, to))
}

/// Whether the agent can walk to the target without moving anything.
pub fn path_exists(state: &WorldState) -> bool {
    geodesic_distance(state, state.agent.position(), state.target, Mover::Agent).is_some()
}
