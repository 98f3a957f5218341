//! Random rooms: non-overlapping furniture boxes with surface point samples.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::WorldError;
use crate::geometry::{Box3D, Vec3};
use crate::seeding::rng_for;

pub struct ObjectClass {
    pub name: &'static str,
    pub size: Vec3,
    pub color: Vec3,
}

pub const CLASSES: [ObjectClass; 10] = [
    ObjectClass { name: "chair", size: [0.55, 0.55, 0.9], color: [0.55, 0.3, 0.15] },
    ObjectClass { name: "table", size: [1.4, 0.8, 0.75], color: [0.75, 0.6, 0.4] },
    ObjectClass { name: "bed", size: [2.0, 1.5, 0.55], color: [0.85, 0.85, 0.9] },
    ObjectClass { name: "sofa", size: [1.9, 0.9, 0.8], color: [0.2, 0.35, 0.6] },
    ObjectClass { name: "cabinet", size: [0.8, 0.5, 1.2], color: [0.45, 0.45, 0.45] },
    ObjectClass { name: "desk", size: [1.2, 0.6, 0.75], color: [0.9, 0.9, 0.75] },
    ObjectClass { name: "lamp", size: [0.35, 0.35, 1.5], color: [0.95, 0.85, 0.3] },
    ObjectClass { name: "bookshelf", size: [1.0, 0.35, 1.8], color: [0.4, 0.2, 0.1] },
    ObjectClass { name: "toilet", size: [0.45, 0.7, 0.8], color: [0.97, 0.97, 0.97] },
    ObjectClass { name: "bin", size: [0.35, 0.35, 0.5], color: [0.2, 0.6, 0.3] },
];

const FLOOR_COLOR: Vec3 = [0.5, 0.47, 0.43];
const FOOTPRINT_GAP: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Room extent in meters; the floor spans `[-x/2, x/2] × [-y/2, y/2]`
    /// at `z = 0`.
    pub room: Vec3,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_points: usize,
    pub floor_fraction: f64,
    pub min_points_per_object: usize,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            room: [8.0, 8.0, 3.0],
            min_objects: 4,
            max_objects: 16,
            num_points: 4096,
            floor_fraction: 0.2,
            min_points_per_object: 16,
            max_retries: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: Box3D,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloudScene {
    pub id: u64,
    pub seed: u64,
    pub xyz: Vec<Vec3>,
    /// Color features in `[0, 1]`.
    pub rgb: Vec<Vec3>,
    pub objects: Vec<SceneObject>,
}

impl PointCloudScene {
    pub fn num_points(&self) -> usize {
        self.xyz.len()
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.objects.iter().map(|o| o.bbox.center).collect()
    }

    pub fn class_count(&self, class_id: usize) -> usize {
        self.objects.iter().filter(|o| o.class_id == class_id).count()
    }

    /// Copy of the scene rotated about the vertical axis through the room
    /// center. Boxes become the axis-aligned bound of the rotated box.
    pub fn rotated_z(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let xyz = self.xyz.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]).collect();
        let objects = self
            .objects
            .iter()
            .map(|o| SceneObject { bbox: o.bbox.rotated_z(angle), class_id: o.class_id })
            .collect();
        Self { id: self.id, seed: self.seed, xyz, rgb: self.rgb.clone(), objects }
    }
}

fn footprints_clear(a: &Box3D, b: &Box3D) -> bool {
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    (0..2).any(|d| ahi[d] + FOOTPRINT_GAP <= blo[d] || bhi[d] + FOOTPRINT_GAP <= alo[d])
}

/// Failed positions before an object's class and size are redrawn.
const REDRAW_EVERY: usize = 100;

fn draw_shape(rng: &mut ChaCha8Rng) -> (usize, Vec3) {
    let class_id = rng.gen_range(0..CLASSES.len());
    let base = CLASSES[class_id].size;
    (class_id, [0, 1, 2].map(|d| base[d] * rng.gen_range(0.8..1.2)))
}

fn jitter_color(rng: &mut ChaCha8Rng, base: Vec3) -> Vec3 {
    let n = Normal::new(0.0, 0.04).expect("valid normal");
    [
        (base[0] + n.sample(rng)).clamp(0.0, 1.0),
        (base[1] + n.sample(rng)).clamp(0.0, 1.0),
        (base[2] + n.sample(rng)).clamp(0.0, 1.0),
    ]
}

/// A uniformly distributed point on one of the five visible faces (all but
/// the bottom). Face coordinates reuse `Box3D::min/max` so points lie in
/// the closed box exactly.
fn sample_surface(rng: &mut ChaCha8Rng, b: &Box3D) -> Vec3 {
    let (lo, hi) = (b.min(), b.max());
    let [sx, sy, sz] = b.size;
    let areas = [sx * sy, sy * sz, sy * sz, sx * sz, sx * sz];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    let mut face = 4;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let u = |rng: &mut ChaCha8Rng, d: usize| lo[d] + rng.gen::<f64>() * (hi[d] - lo[d]);
    match face {
        0 => [u(rng, 0), u(rng, 1), hi[2]],
        1 => [lo[0], u(rng, 1), u(rng, 2)],
        2 => [hi[0], u(rng, 1), u(rng, 2)],
        3 => [u(rng, 0), lo[1], u(rng, 2)],
        _ => [u(rng, 0), hi[1], u(rng, 2)],
    }
}

/// Generates one scene. The result depends only on `(seed, cfg)`.
pub fn generate_scene(seed: u64, id: u64, cfg: &SceneConfig) -> Result<PointCloudScene, WorldError> {
    let mut rng = rng_for(seed, "scene", 0);
    let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects));
    let [rx, ry, _] = cfg.room;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_obj);
    let mut shape = (0, [0.0; 3]);
    for _ in 0..n_obj {
        let mut placed = false;
        for attempt in 0..cfg.max_retries {
            // A crowded room may have no gap left for a large class.
            if attempt % REDRAW_EVERY == 0 {
                shape = draw_shape(&mut rng);
            }
            let (class_id, size) = shape;
            let hx = rx / 2.0 - size[0] / 2.0;
            let hy = ry / 2.0 - size[1] / 2.0;
            if hx <= 0.0 || hy <= 0.0 {
                continue;
            }
            let center = [rng.gen_range(-hx..hx), rng.gen_range(-hy..hy), size[2] / 2.0];
            let bbox = Box3D::new(center, size);
            if objects.iter().all(|o| footprints_clear(&o.bbox, &bbox)) {
                objects.push(SceneObject { bbox, class_id });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(WorldError::Placement { seed, placed: objects.len(), wanted: n_obj });
        }
    }

    let n_floor = ((cfg.num_points as f64) * cfg.floor_fraction).round() as usize;
    let guaranteed = cfg.min_points_per_object * objects.len();
    if guaranteed + n_floor > cfg.num_points {
        return Err(WorldError::TooFewPoints { num_points: cfg.num_points, needed: guaranteed + n_floor });
    }
    let surface = |b: &Box3D| {
        let [sx, sy, sz] = b.size;
        sx * sy + 2.0 * sy * sz + 2.0 * sx * sz
    };
    let total_area: f64 = objects.iter().map(|o| surface(&o.bbox)).sum();
    let spare = cfg.num_points - n_floor - guaranteed;
    let mut counts: Vec<usize> = objects
        .iter()
        .map(|o| cfg.min_points_per_object + (spare as f64 * surface(&o.bbox) / total_area).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum::<usize>() + n_floor;
    // Rounding leftovers go to the floor.
    let n_floor = n_floor + (cfg.num_points - assigned);

    let mut xyz = Vec::with_capacity(cfg.num_points);
    let mut rgb = Vec::with_capacity(cfg.num_points);
    for (o, count) in objects.iter().zip(counts.iter_mut()) {
        let color = CLASSES[o.class_id].color;
        for _ in 0..*count {
            xyz.push(sample_surface(&mut rng, &o.bbox));
            rgb.push(jitter_color(&mut rng, color));
        }
    }
    let mut floor_left = n_floor;
    while floor_left > 0 {
        let p = [rng.gen_range(-rx / 2.0..rx / 2.0), rng.gen_range(-ry / 2.0..ry / 2.0), 0.0];
        if objects.iter().any(|o| o.bbox.contains(&p)) {
            continue;
        }
        xyz.push(p);
        rgb.push(jitter_color(&mut rng, FLOOR_COLOR));
        floor_left -= 1;
    }
    Ok(PointCloudScene { id, seed, xyz, rgb, objects })
}
