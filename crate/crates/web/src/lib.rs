//! Browser bindings for the static demo in `www/`.
//!
//! Every export returns a JSON string; failures come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use dense_grounding::geometry::{focused_region, focused_region_mask, giou3d, iou3d, Box3D, Vec3};
use dense_grounding::seeding::rng_for;
use dense_grounding::world::paragraph::{sample_paragraph, split_tags};
use dense_grounding::world::scene::{generate_scene, SceneConfig, CLASSES};
use dense_grounding::world::{SplitTag, Vocab};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Points shipped to the page per scene.
const SHOWN_POINTS: usize = 1500;

fn respond(r: Result<Value, String>) -> String {
    r.unwrap_or_else(|e| json!({ "error": e })).to_string()
}

fn parse_box(v: &[f64]) -> Result<Box3D, String> {
    let a: [f64; 6] = v.try_into().map_err(|_| format!("a box needs 6 numbers, got {}", v.len()))?;
    let b = Box3D::from_array(a);
    b.validate().map_err(|e| e.to_string())?;
    Ok(b)
}

fn parse_points(v: &[f64]) -> Result<Vec<Vec3>, String> {
    if v.len() % 3 != 0 {
        return Err(format!("{} numbers do not form xyz triples", v.len()));
    }
    Ok(v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// IoU and GIoU of two boxes given as `[cx, cy, cz, sx, sy, sz]`.
#[wasm_bindgen]
pub fn box_overlap(a: &[f64], b: &[f64]) -> String {
    respond((|| {
        let (a, b) = (parse_box(a)?, parse_box(b)?);
        let iou = iou3d(&a, &b).map_err(|e| e.to_string())?;
        let giou = giou3d(&a, &b).map_err(|e| e.to_string())?;
        Ok(json!({ "iou": iou, "giou": giou }))
    })())
}

/// A random room with one dense paragraph of up to `k` sentences.
#[wasm_bindgen]
pub fn scene_paragraph(seed: u32, k: u32) -> String {
    respond((|| {
        let cfg = SceneConfig::default();
        let scene = generate_scene(seed as u64, 0, &cfg).map_err(|e| e.to_string())?;
        let vocab = Vocab::builtin();
        let mut rng = rng_for(seed as u64, "demo", 0);
        let sample = sample_paragraph(&scene, 0, k as usize, 4.0, &vocab, &mut rng).map_err(|e| e.to_string())?;
        let tags = split_tags(std::slice::from_ref(&scene), std::slice::from_ref(&sample)).remove(0);
        let step = scene.num_points().div_ceil(SHOWN_POINTS).max(1);
        let points: Vec<Value> =
            scene.xyz.iter().zip(&scene.rgb).step_by(step).map(|(p, c)| json!([p[0], p[1], p[2], c[0], c[1], c[2]])).collect();
        let objects: Vec<Value> = scene
            .objects
            .iter()
            .map(|o| json!({ "class": CLASSES[o.class_id].name, "box": o.bbox.as_array() }))
            .collect();
        let sentences: Vec<Value> = sample
            .valid_sentences()
            .zip(&tags)
            .map(|(s, t)| json!({ "text": s.text, "target": s.target, "unique": *t == SplitTag::Unique }))
            .collect();
        Ok(json!({
            "room": cfg.room,
            "points": points,
            "objects": objects,
            "focus": sample.focus,
            "sentences": sentences,
        }))
    })())
}

/// Focused region of the query `centers` and, for each key point, whether
/// it stays visible under the radius multiplier `tau`.
#[wasm_bindgen]
pub fn region_mask(centers: &[f64], keys: &[f64], tau: f64) -> String {
    respond((|| {
        let centers = parse_points(centers)?;
        let keys = parse_points(keys)?;
        let region = focused_region(&centers).map_err(|e| e.to_string())?;
        let mask = focused_region_mask(&region, tau, &keys);
        let inside: Vec<bool> = mask.bias.iter().map(|b| *b == 0.0).collect();
        Ok(json!({
            "center": region.center,
            "radius": region.radius,
            "inside": inside,
            "fell_back": mask.fell_back,
        }))
    })())
}
