//! Extremal-corner keypoints on segmentation masks, lifted to 3-D.

use std::io::{self, Write};

use nalgebra::Point3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::backproject;
use crate::worldsim::{Observation, OBJECT_ID_BASE};

pub const NUM_KEYPOINTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeypointError {
    #[error("mask has no member pixels")]
    EmptyMask,
}

/// Binary membership image for one object instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|v| (0..width).map(move |u| (u, v)))
            .map(|(u, v)| f(u, v))
            .collect();
        Self {
            width,
            height,
            bits,
        }
    }

    /// Pixels of `obs` showing instance id `instance`.
    pub fn from_instance(obs: &Observation, instance: u32) -> Self {
        Self {
            width: obs.width,
            height: obs.height,
            bits: obs.instance.iter().map(|&i| i == instance).collect(),
        }
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, on: bool) {
        self.bits[v * self.width + u] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Grows (`radius > 0`) or shrinks (`radius < 0`) the mask with a
    /// square structuring element.
    pub fn morph(&self, radius: i32) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius.unsigned_abs() as isize;
        let grow = radius > 0;
        Mask::from_fn(self.width, self.height, |u, v| {
            let mut any = false;
            let mut all = true;
            for dv in -r..=r {
                for du in -r..=r {
                    let (x, y) = (u as isize + du, v as isize + dv);
                    let inside = x >= 0
                        && y >= 0
                        && (x as usize) < self.width
                        && (y as usize) < self.height
                        && self.get(x as usize, y as usize);
                    any |= inside;
                    all &= inside;
                }
            }
            if grow {
                any
            } else {
                all
            }
        })
    }
}

/// Image point `(u, v)`: column, row.
pub type Pixel = (usize, usize);

/// The eight extremal member pixels: argmax x, argmax y, argmin x, argmin y,
/// argmax x+y, argmin x+y, argmax x-y, argmin x-y. Ties go to the first
/// member in row-major order (smallest v, then smallest u).
pub fn detect_corners(mask: &Mask) -> Result<[Pixel; NUM_KEYPOINTS], KeypointError> {
    type Score = fn(i64, i64) -> i64;
    const SCORES: [Score; NUM_KEYPOINTS] = [
        |x, _| x,
        |_, y| y,
        |x, _| -x,
        |_, y| -y,
        |x, y| x + y,
        |x, y| -(x + y),
        |x, y| x - y,
        |x, y| y - x,
    ];
    let mut best: [Option<(i64, Pixel)>; NUM_KEYPOINTS] = [None; NUM_KEYPOINTS];
    for v in 0..mask.height {
        for u in 0..mask.width {
            if !mask.get(u, v) {
                continue;
            }
            let (x, y) = (u as i64, v as i64);
            for (slot, score) in best.iter_mut().zip(SCORES) {
                let s = score(x, y);
                // Strict improvement keeps the first hit on ties.
                if slot.is_none_or(|(b, _)| s > b) {
                    *slot = Some((s, (u, v)));
                }
            }
        }
    }
    let mut out = [(0, 0); NUM_KEYPOINTS];
    for (o, b) in out.iter_mut().zip(best) {
        *o = b.ok_or(KeypointError::EmptyMask)?.1;
    }
    Ok(out)
}

/// Per-category keypoints in the camera frame. Absent categories hold
/// zeros and `present = false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    /// `[category][keypoint * 3 + axis]`
    pub points: Vec<[f64; NUM_KEYPOINTS * 3]>,
    pub present: Vec<bool>,
    /// Object id whose mask produced each category's keypoints.
    pub source: Vec<Option<u32>>,
    /// Corner pixels, for overlays.
    pub pixels: Vec<[Pixel; NUM_KEYPOINTS]>,
}

impl KeypointSet {
    pub fn empty(categories: usize) -> Self {
        Self {
            points: vec![[0.0; NUM_KEYPOINTS * 3]; categories],
            present: vec![false; categories],
            source: vec![None; categories],
            pixels: vec![[(0, 0); NUM_KEYPOINTS]; categories],
        }
    }

    pub fn categories(&self) -> usize {
        self.present.len()
    }

    pub fn point(&self, category: usize, k: usize) -> Point3<f64> {
        let p = &self.points[category];
        Point3::new(p[3 * k], p[3 * k + 1], p[3 * k + 2])
    }

    pub fn observed(&self) -> impl Iterator<Item = usize> + '_ {
        self.present
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .map(|(c, _)| c)
    }
}

/// Detector imperfection: whole instances vanish with probability
/// `dropout`; surviving masks are dilated (`radius > 0`) or eroded
/// (`radius < 0`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskCorruption {
    pub dropout: f64,
    pub radius: i32,
}

/// Keypoints from ground-truth segmentation.
pub fn lift_keypoints(obs: &Observation, categories: usize) -> KeypointSet {
    lift_inner(obs, categories, None::<(&MaskCorruption, &mut rand_chacha::ChaCha8Rng)>)
}

/// Keypoints from deliberately corrupted segmentation.
pub fn lift_keypoints_corrupted(
    obs: &Observation,
    categories: usize,
    corruption: &MaskCorruption,
    rng: &mut impl Rng,
) -> KeypointSet {
    lift_inner(obs, categories, Some((corruption, rng)))
}

fn lift_inner<R: Rng>(
    obs: &Observation,
    categories: usize,
    mut corruption: Option<(&MaskCorruption, &mut R)>,
) -> KeypointSet {
    let mut set = KeypointSet::empty(categories);
    // Pixel counts per (category, instance).
    let mut counts: Vec<Vec<(u32, usize)>> = vec![Vec::new(); categories];
    for (&inst, &cat) in obs.instance.iter().zip(&obs.category) {
        if inst < OBJECT_ID_BASE || cat < OBJECT_ID_BASE {
            continue;
        }
        let c = (cat - OBJECT_ID_BASE) as usize;
        if c >= categories {
            continue;
        }
        match counts[c].iter_mut().find(|(i, _)| *i == inst) {
            Some((_, n)) => *n += 1,
            None => counts[c].push((inst, 1)),
        }
    }
    for (c, insts) in counts.iter().enumerate() {
        // Largest pixel count wins; ties to the lower instance id.
        let Some(&(inst, _)) = insts
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        else {
            continue;
        };
        let mut mask = Mask::from_instance(obs, inst);
        if let Some((cfg, rng)) = corruption.as_mut() {
            if cfg.dropout > 0.0 && rng.gen_bool(cfg.dropout.min(1.0)) {
                continue;
            }
            mask = mask.morph(cfg.radius);
        }
        let Ok(corners) = detect_corners(&mask) else {
            continue;
        };
        let mut pts = [0.0; NUM_KEYPOINTS * 3];
        for (k, &(u, v)) in corners.iter().enumerate() {
            let d = obs.depth[v * obs.width + u];
            let p = backproject(u as f64, v as f64, d, &obs.camera)
                .expect("rendered depth is positive and pixels lie in the image");
            pts[3 * k..3 * k + 3].copy_from_slice(&[p.x, p.y, p.z]);
        }
        set.points[c] = pts;
        set.present[c] = true;
        set.source[c] = Some(inst - OBJECT_ID_BASE);
        set.pixels[c] = corners;
    }
    set
}

/// Color image with each present category's corners drawn as red crosses.
pub fn overlay_keypoints(obs: &Observation, set: &KeypointSet) -> Vec<[u8; 3]> {
    let mut img = obs.color.clone();
    for c in set.observed() {
        for &(u, v) in &set.pixels[c] {
            for (du, dv) in [(0i64, 0i64), (1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (x, y) = (u as i64 + du, v as i64 + dv);
                if x >= 0 && y >= 0 && (x as usize) < obs.width && (y as usize) < obs.height {
                    img[y as usize * obs.width + x as usize] = [255, 0, 0];
                }
            }
        }
    }
    img
}

/// Writes a binary (P6) portable pixmap.
pub fn write_ppm(
    mut out: impl Write,
    width: usize,
    height: usize,
    pixels: &[[u8; 3]],
) -> io::Result<()> {
    write!(out, "P6\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels.iter().flatten().copied().collect();
    out.write_all(&bytes)
}
