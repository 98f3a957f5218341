//! Axis-aligned box geometry and the spatial kernels used by the decoders.

use ndarray::Array3;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::MASKED;

/// Lower bound on the focused-region radius, in meters. A single query
/// proposal would otherwise produce a zero radius that masks every key.
pub const R_MIN: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid box: size {0:?} has a non-positive component")]
    InvalidBox([f64; 3]),
    #[error("focused region needs at least one query center")]
    EmptyQuerySet,
    #[error("asked for {k} neighbours but only {available} other objects exist")]
    TooManyNeighbours { k: usize, available: usize },
    #[error("focus index {0} out of range")]
    FocusOutOfRange(usize),
}

pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    pub size: Vec3,
}

impl Box3D {
    pub fn new(center: Vec3, size: Vec3) -> Self {
        Self { center, size }
    }

    /// A point treated as a tiny cube of edge `eps`.
    pub fn point(p: Vec3, eps: f64) -> Self {
        Self { center: p, size: [eps; 3] }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.size.iter().all(|s| *s > 0.0 && s.is_finite()) && self.center.iter().all(|c| c.is_finite()) {
            Ok(())
        } else {
            Err(GeometryError::InvalidBox(self.size))
        }
    }

    pub fn min(&self) -> Vec3 {
        [
            self.center[0] - self.size[0] / 2.0,
            self.center[1] - self.size[1] / 2.0,
            self.center[2] - self.size[2] / 2.0,
        ]
    }

    pub fn max(&self) -> Vec3 {
        [
            self.center[0] + self.size[0] / 2.0,
            self.center[1] + self.size[1] / 2.0,
            self.center[2] + self.size[2] / 2.0,
        ]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Closed containment test.
    pub fn contains(&self, p: &Vec3) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|d| p[d] >= lo[d] && p[d] <= hi[d])
    }

    pub fn as_array(&self) -> [f64; 6] {
        let [cx, cy, cz] = self.center;
        let [sx, sy, sz] = self.size;
        [cx, cy, cz, sx, sy, sz]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self { center: [a[0], a[1], a[2]], size: [a[3], a[4], a[5]] }
    }

    /// Axis-aligned bound of this box after rotating it by `angle` about
    /// the vertical axis through the origin.
    pub fn rotated_z(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let [x, y, z] = self.center;
        let center = [c * x - s * y, s * x + c * y, z];
        let (hx, hy) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let ex = (c * hx).abs() + (s * hy).abs();
        let ey = (s * hx).abs() + (c * hy).abs();
        Self { center, size: [2.0 * ex, 2.0 * ey, self.size[2]] }
    }
}

fn overlap_volume(a: &Box3D, b: &Box3D) -> f64 {
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    (0..3).map(|d| (ahi[d].min(bhi[d]) - alo[d].max(blo[d])).max(0.0)).product()
}

fn hull_volume(a: &Box3D, b: &Box3D) -> f64 {
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    (0..3).map(|d| ahi[d].max(bhi[d]) - alo[d].min(blo[d])).product()
}

/// Volumetric intersection over union of two axis-aligned boxes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    let inter = overlap_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    Ok(inter / union)
}

/// Generalized IoU: IoU minus the share of the enclosing hull not covered
/// by the union.
pub fn giou3d(a: &Box3D, b: &Box3D) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    let inter = overlap_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    let hull = hull_volume(a, b);
    Ok(inter / union - (hull - union) / hull)
}

/// `[d, sin θh, cos θh, sin θv, cos θv]` for the line from `from` to `to`.
/// θh is the azimuth in the ground plane, θv the elevation. Coincident
/// points get both angles set to zero.
pub fn explicit_feature(from: &Vec3, to: &Vec3) -> [f64; 5] {
    let (dx, dy, dz) = (to[0] - from[0], to[1] - from[1], to[2] - from[2]);
    let horiz = (dx * dx + dy * dy).sqrt();
    let d = (horiz * horiz + dz * dz).sqrt();
    if d == 0.0 {
        return [0.0, 0.0, 1.0, 0.0, 1.0];
    }
    let th = if horiz == 0.0 { 0.0 } else { dy.atan2(dx) };
    let tv = dz.atan2(horiz);
    [d, th.sin(), th.cos(), tv.sin(), tv.cos()]
}

/// All pairwise explicit features, shape `N_Q × N_K × 5`.
pub fn pairwise_explicit_features(queries: &[Vec3], keys: &[Vec3]) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((queries.len(), keys.len(), 5));
    for (i, q) in queries.iter().enumerate() {
        for (j, k) in keys.iter().enumerate() {
            let f = explicit_feature(q, k);
            for (c, v) in f.iter().enumerate() {
                out[[i, j, c]] = *v;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocusedRegion {
    pub center: Vec3,
    pub radius: f64,
}

/// Centroid of the query centers and the largest distance to it, floored
/// at [`R_MIN`].
pub fn focused_region(centers: &[Vec3]) -> Result<FocusedRegion, GeometryError> {
    if centers.is_empty() {
        return Err(GeometryError::EmptyQuerySet);
    }
    let n = centers.len() as f64;
    let mut c = [0.0; 3];
    for p in centers {
        for d in 0..3 {
            c[d] += p[d];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let radius = centers.iter().map(|p| dist(p, &c)).fold(0.0, f64::max);
    Ok(FocusedRegion { center: c, radius: radius.max(R_MIN) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    /// Additive bias per key: `0.0` inside the region, [`MASKED`] outside.
    pub bias: Vec<f64>,
    /// Set when every key fell outside and the mask was dropped.
    pub fell_back: bool,
}

/// Keys strictly closer than `tau · R_F` to the region center keep a zero
/// bias; the rest are masked. If nothing survives the bias is all zeros.
pub fn focused_region_mask(region: &FocusedRegion, tau: f64, keys: &[Vec3]) -> RegionMask {
    let limit = tau * region.radius;
    let mut bias: Vec<f64> =
        keys.iter().map(|k| if dist(&region.center, k) < limit { 0.0 } else { MASKED }).collect();
    let fell_back = !keys.is_empty() && bias.iter().all(|b| *b != 0.0);
    if fell_back {
        bias.iter_mut().for_each(|b| *b = 0.0);
    }
    RegionMask { bias, fell_back }
}

/// Indices of the points inside the closed box, subsampled without
/// replacement to at most `max_points`. Order is ascending.
pub fn points_in_box<R: Rng + ?Sized>(points: &[Vec3], bx: &Box3D, max_points: usize, rng: &mut R) -> Vec<usize> {
    assert!(max_points >= 1, "max_points must be at least 1");
    let inside: Vec<usize> = points.iter().enumerate().filter(|(_, p)| bx.contains(p)).map(|(i, _)| i).collect();
    if inside.len() <= max_points {
        return inside;
    }
    let mut picked: Vec<usize> = sample(rng, inside.len(), max_points).into_iter().map(|i| inside[i]).collect();
    picked.sort_unstable();
    picked
}

/// The `k` objects closest to `focus` (excluding it), nearest first, ties
/// broken by lower index.
pub fn k_nearest_objects(centers: &[Vec3], focus: usize, k: usize) -> Result<Vec<usize>, GeometryError> {
    if focus >= centers.len() {
        return Err(GeometryError::FocusOutOfRange(focus));
    }
    let available = centers.len() - 1;
    if k > available {
        return Err(GeometryError::TooManyNeighbours { k, available });
    }
    let mut others: Vec<(f64, usize)> = centers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != focus)
        .map(|(i, c)| (dist(c, &centers[focus]), i))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(others.into_iter().take(k).map(|(_, i)| i).collect())
}

pub fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
