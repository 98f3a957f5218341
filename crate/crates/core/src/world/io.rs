//! Versioned binary dataset container.
//!
//! Layout (all integers and floats little-endian, 64-bit):
//! magic `DOGSDATA`, version, config echo (length-prefixed `key = value`
//! text), seed, stream name, scenes, samples, end marker `DOGSEND\0`.

use std::fs;
use std::path::Path;

use super::language::{Anchor, Description, Relation, Sentence};
use super::paragraph::DenseSample;
use super::scene::{PointCloudScene, SceneObject};
use super::{Dataset, WorldConfig, WorldError};
use crate::binio::{Reader, Truncated, Writer};
use crate::geometry::Box3D;
use crate::kv::KvMap;

pub const DATASET_MAGIC: &[u8; 8] = b"DOGSDATA";
pub const DATASET_VERSION: u64 = 1;
const END_MARKER: &[u8; 8] = b"DOGSEND\0";

impl From<Truncated> for WorldError {
    fn from(_: Truncated) -> Self {
        WorldError::Truncated
    }
}

fn relation_code(r: Relation) -> u64 {
    Relation::ANCHORED.iter().chain(Relation::SUPERLATIVE.iter()).position(|x| *x == r).expect("known relation") as u64
}

fn relation_from(code: u64) -> Result<Relation, WorldError> {
    Relation::ANCHORED
        .iter()
        .chain(Relation::SUPERLATIVE.iter())
        .nth(code as usize)
        .copied()
        .ok_or_else(|| WorldError::Corrupt(format!("relation code {code}")))
}

fn write_sentence(w: &mut Writer, s: &Sentence) {
    w.usize(s.target);
    w.bool(s.ambiguous);
    w.usize(s.tokens.len());
    for t in &s.tokens {
        w.u64(*t as u64);
    }
    w.str(&s.text);
    match &s.description {
        Description::Plain => w.u64(0),
        Description::Relational { relation, anchor } => {
            w.u64(1);
            w.u64(relation_code(*relation));
            match anchor {
                Anchor::Object(a) => {
                    w.u64(0);
                    w.usize(*a)
                }
                Anchor::Previous(a) => {
                    w.u64(1);
                    w.usize(*a)
                }
            }
        }
        Description::Superlative(r) => {
            w.u64(2);
            w.u64(relation_code(*r));
        }
    }
}

fn read_sentence(r: &mut Reader) -> Result<Sentence, WorldError> {
    let target = r.usize()?;
    let ambiguous = r.bool()?;
    let n = r.usize()?;
    if n > r.remaining() / 8 {
        return Err(WorldError::Truncated);
    }
    let tokens = (0..n)
        .map(|_| r.u64().map(|t| t as u32))
        .collect::<Result<Vec<_>, _>>()?;
    let text = r.str()?;
    let description = match r.u64()? {
        0 => Description::Plain,
        1 => {
            let relation = relation_from(r.u64()?)?;
            let anchor = match r.u64()? {
                0 => Anchor::Object(r.usize()?),
                1 => Anchor::Previous(r.usize()?),
                k => return Err(WorldError::Corrupt(format!("anchor kind {k}"))),
            };
            Description::Relational { relation, anchor }
        }
        2 => Description::Superlative(relation_from(r.u64()?)?),
        k => return Err(WorldError::Corrupt(format!("description kind {k}"))),
    };
    Ok(Sentence { tokens, target, text, description, ambiguous })
}

pub fn write_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC);
    w.u64(DATASET_VERSION);
    w.str(&ds.config.to_kv().to_text());
    w.u64(ds.seed);
    w.str(&ds.stream);
    w.usize(ds.scenes.len());
    for s in &ds.scenes {
        w.u64(s.id);
        w.u64(s.seed);
        w.usize(s.xyz.len());
        for (p, c) in s.xyz.iter().zip(&s.rgb) {
            for v in p.iter().chain(c.iter()) {
                w.f64(*v);
            }
        }
        w.usize(s.objects.len());
        for o in &s.objects {
            for v in o.bbox.as_array() {
                w.f64(v);
            }
            w.usize(o.class_id);
        }
    }
    w.usize(ds.samples.len());
    for s in &ds.samples {
        w.usize(s.scene);
        w.usize(s.focus);
        w.usize(s.sentences.len());
        for (sent, valid) in s.sentences.iter().zip(&s.valid) {
            w.bool(*valid);
            write_sentence(&mut w, sent);
        }
    }
    w.bytes(END_MARKER);
    w.finish()
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset, WorldError> {
    let mut r = Reader::new(bytes);
    let magic = r.bytes(8).map_err(|_| WorldError::BadMagic)?;
    if magic != DATASET_MAGIC {
        return Err(WorldError::BadMagic);
    }
    let version = r.u64()?;
    if version != DATASET_VERSION {
        return Err(WorldError::Version { found: version, expected: DATASET_VERSION });
    }
    let config = WorldConfig::from_kv(&KvMap::parse(&r.str()?)?)?;
    let seed = r.u64()?;
    let stream = r.str()?;
    let n_scenes = r.usize()?;
    let mut scenes = Vec::new();
    for _ in 0..n_scenes {
        let id = r.u64()?;
        let scene_seed = r.u64()?;
        let n = r.usize()?;
        if n > r.remaining() / 48 {
            return Err(WorldError::Truncated);
        }
        let mut xyz = Vec::with_capacity(n);
        let mut rgb = Vec::with_capacity(n);
        for _ in 0..n {
            xyz.push([r.f64()?, r.f64()?, r.f64()?]);
            rgb.push([r.f64()?, r.f64()?, r.f64()?]);
        }
        let n_obj = r.usize()?;
        if n_obj > r.remaining() / 56 {
            return Err(WorldError::Truncated);
        }
        let mut objects = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let mut a = [0.0; 6];
            for v in &mut a {
                *v = r.f64()?;
            }
            objects.push(SceneObject { bbox: Box3D::from_array(a), class_id: r.usize()? });
        }
        scenes.push(PointCloudScene { id, seed: scene_seed, xyz, rgb, objects });
    }
    let n_samples = r.usize()?;
    let mut samples = Vec::new();
    for _ in 0..n_samples {
        let scene = r.usize()?;
        let focus = r.usize()?;
        let slots = r.usize()?;
        if slots > r.remaining() / 8 {
            return Err(WorldError::Truncated);
        }
        let mut sentences = Vec::with_capacity(slots);
        let mut valid = Vec::with_capacity(slots);
        for _ in 0..slots {
            valid.push(r.bool()?);
            sentences.push(read_sentence(&mut r)?);
        }
        if scene >= scenes.len() {
            return Err(WorldError::Corrupt(format!("sample refers to scene {scene}")));
        }
        samples.push(DenseSample { scene, focus, sentences, valid });
    }
    if r.bytes(8)? != END_MARKER {
        return Err(WorldError::Corrupt("missing end marker".into()));
    }
    Ok(Dataset { seed, stream, config, scenes, samples })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), WorldError> {
    fs::write(path, write_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, WorldError> {
    read_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::generate_dataset;

    fn small() -> Dataset {
        let cfg = WorldConfig { scenes: 2, paragraphs_per_scene: 2, ..Default::default() };
        generate_dataset(9, "train", &cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = small();
        let back = read_dataset(&write_dataset(&ds)).unwrap();
        assert_eq!(back, ds);
        let bits = |d: &Dataset| d.scenes[0].xyz.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ds));
    }

    #[test]
    fn damaged_files_give_structured_errors() {
        let bytes = write_dataset(&small());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(&bad), Err(WorldError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[8..16].copy_from_slice(&7u64.to_le_bytes());
        assert!(matches!(read_dataset(&v2), Err(WorldError::Version { found: 7, expected: 1 })));
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 3] {
            assert!(matches!(read_dataset(&bytes[..cut]), Err(WorldError::Truncated | WorldError::BadMagic)), "cut {cut}");
        }
    }
}
