//! Floor-plane collision primitives. Coordinates are `(x, z)` in meters.

use crate::geometry::sin_cos_deg;

/// Tolerance below which gaps and overlaps count as touching.
pub const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Aabb {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    pub fn centered(center: [f64; 2], half: [f64; 2]) -> Self {
        Self {
            min: [center[0] - half[0], center[1] - half[1]],
            max: [center[0] + half[0], center[1] + half[1]],
        }
    }

    /// True when the interiors intersect; touching boxes do not overlap.
    pub fn overlaps(&self, o: &Aabb) -> bool {
        (0..2).all(|k| self.min[k] < o.max[k] - EPS && o.min[k] < self.max[k] - EPS)
    }

    pub fn translated(&self, d: [f64; 2]) -> Self {
        Self {
            min: [self.min[0] + d[0], self.min[1] + d[1]],
            max: [self.max[0] + d[0], self.max[1] + d[1]],
        }
    }

    /// Distance `self` can travel along world axis `axis` in direction
    /// `sign` (+1 or -1) before touching `o`; `None` if `o` is not in the way.
    pub fn gap_along(&self, o: &Aabb, axis: usize, sign: f64) -> Option<f64> {
        let other = 1 - axis;
        let lateral = self.min[other] < o.max[other] - EPS && o.min[other] < self.max[other] - EPS;
        if !lateral {
            return None;
        }
        let gap = if sign > 0.0 {
            o.min[axis] - self.max[axis]
        } else {
            self.min[axis] - o.max[axis]
        };
        // Boxes already interpenetrating along the axis are ignored only if
        // they lie entirely behind the mover.
        let behind = if sign > 0.0 {
            o.max[axis] <= self.min[axis] + EPS
        } else {
            o.min[axis] >= self.max[axis] - EPS
        };
        if behind {
            return None;
        }
        Some(if gap.abs() < EPS { 0.0 } else { gap.max(0.0) })
    }
}

/// Oriented rectangle on the floor: center, half extents along the local
/// x/z axes, and yaw in degrees (same rotation sense as [`crate::geometry::rot_y`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub center: [f64; 2],
    pub half: [f64; 2],
    pub yaw: f64,
}

impl Obb {
    /// Local x and z axes expressed in world `(x, z)`.
    fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = sin_cos_deg(self.yaw);
        // rot_y maps local x to (c, -s) and local z to (s, c) in (x, z).
        [[c, -s], [s, c]]
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let [ax, az] = self.axes();
        let [hx, hz] = self.half;
        let mut out = [[0.0; 2]; 4];
        for (k, (sx, sz)) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
            .into_iter()
            .enumerate()
        {
            out[k] = [
                self.center[0] + sx * hx * ax[0] + sz * hz * az[0],
                self.center[1] + sx * hx * ax[1] + sz * hz * az[1],
            ];
        }
        out
    }

    pub fn bounds(&self) -> Aabb {
        let c = self.corners();
        let mut min = c[0];
        let mut max = c[0];
        for p in &c[1..] {
            for k in 0..2 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        Aabb { min, max }
    }

    /// Separating-axis test; touching rectangles do not overlap.
    pub fn overlaps(&self, o: &Obb) -> bool {
        let a = self.corners();
        let b = o.corners();
        for axis in self.axes().into_iter().chain(o.axes()) {
            let (amin, amax) = project(&a, axis);
            let (bmin, bmax) = project(&b, axis);
            if amax <= bmin + EPS || bmax <= amin + EPS {
                return false;
            }
        }
        true
    }

    pub fn overlaps_aabb(&self, b: &Aabb) -> bool {
        let other = Obb {
            center: [(b.min[0] + b.max[0]) / 2.0, (b.min[1] + b.max[1]) / 2.0],
            half: [(b.max[0] - b.min[0]) / 2.0, (b.max[1] - b.min[1]) / 2.0],
            yaw: 0.0,
        };
        self.overlaps(&other)
    }
}

fn project(pts: &[[f64; 2]; 4], axis: [f64; 2]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in pts {
        let d = p[0] * axis[0] + p[1] * axis[1];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}
