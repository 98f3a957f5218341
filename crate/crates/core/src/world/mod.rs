//! The synthetic benchmark: rooms, referring sentences, dense paragraphs.

mod io;
pub mod language;
pub mod paragraph;
pub mod scene;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use language::{generate_sentence, Sentence, Vocab, MASK_ID, PAD_ID, T_MAX};
pub use paragraph::{sample_paragraph, split_tags, DenseSample, SplitTag, K_MAX};
pub use scene::{generate_scene, PointCloudScene, SceneConfig, SceneObject, CLASSES};

use crate::geometry::GeometryError;
use crate::kv::{KvError, KvMap};
use crate::seeding::{derive_seed, rng_for};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("could not place objects for seed {seed}: placed {placed} of {wanted}")]
    Placement { seed: u64, placed: usize, wanted: usize },
    #[error("{num_points} points cannot cover the {needed} reserved samples")]
    TooFewPoints { num_points: usize, needed: usize },
    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),
    #[error("malformed vocabulary file: {0}")]
    BadVocab(String),
    #[error("target object {0} does not exist")]
    TargetOutOfRange(usize),
    #[error("a paragraph needs at least two objects, scene has {objects}")]
    ParagraphTooShort { objects: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("dataset version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("dataset file is truncated")]
    Truncated,
    #[error("dataset file is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Config(#[from] KvError),
}

/// Everything that determines a generated dataset besides the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub scene: SceneConfig,
    pub scenes: usize,
    pub paragraphs_per_scene: usize,
    pub k_min: usize,
    pub k_max: usize,
    /// Length scale of the paragraph ordering weights, meters.
    pub order_sigma: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let order_sigma = scene.room[0] / 2.0;
        Self { scene, scenes: 256, paragraphs_per_scene: 4, k_min: 2, k_max: 12, order_sigma }
    }
}

impl WorldConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        let s = &self.scene;
        kv.set("room_x", s.room[0]);
        kv.set("room_y", s.room[1]);
        kv.set("room_z", s.room[2]);
        kv.set("min_objects", s.min_objects);
        kv.set("max_objects", s.max_objects);
        kv.set("num_points", s.num_points);
        kv.set("floor_fraction", s.floor_fraction);
        kv.set("min_points_per_object", s.min_points_per_object);
        kv.set("max_retries", s.max_retries);
        kv.set("scenes", self.scenes);
        kv.set("paragraphs_per_scene", self.paragraphs_per_scene);
        kv.set("k_min", self.k_min);
        kv.set("k_max", self.k_max);
        kv.set("order_sigma", self.order_sigma);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, KvError> {
        Ok(Self {
            scene: SceneConfig {
                room: [kv.get("room_x")?, kv.get("room_y")?, kv.get("room_z")?],
                min_objects: kv.get("min_objects")?,
                max_objects: kv.get("max_objects")?,
                num_points: kv.get("num_points")?,
                floor_fraction: kv.get("floor_fraction")?,
                min_points_per_object: kv.get("min_points_per_object")?,
                max_retries: kv.get("max_retries")?,
            },
            scenes: kv.get("scenes")?,
            paragraphs_per_scene: kv.get("paragraphs_per_scene")?,
            k_min: kv.get("k_min")?,
            k_max: kv.get("k_max")?,
            order_sigma: kv.get("order_sigma")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub seed: u64,
    pub stream: String,
    pub config: WorldConfig,
    pub scenes: Vec<PointCloudScene>,
    pub samples: Vec<DenseSample>,
}

impl Dataset {
    pub fn split_tags(&self) -> Vec<Vec<SplitTag>> {
        split_tags(&self.scenes, &self.samples)
    }
}

/// Builds a dataset as a pure function of `(seed, stream, cfg)`. `stream`
/// separates e.g. train and eval sets drawn from the same root seed.
pub fn generate_dataset(seed: u64, stream: &str, cfg: &WorldConfig) -> Result<Dataset, WorldError> {
    let vocab = Vocab::builtin();
    let mut scenes = Vec::with_capacity(cfg.scenes);
    let mut samples = Vec::with_capacity(cfg.scenes * cfg.paragraphs_per_scene);
    for i in 0..cfg.scenes {
        let scene_seed = derive_seed(seed, &format!("{stream}/scene"), i as u64);
        let scene = generate_scene(scene_seed, i as u64, &cfg.scene)?;
        let mut rng = rng_for(seed, &format!("{stream}/paragraph"), i as u64);
        for _ in 0..cfg.paragraphs_per_scene {
            if scene.objects.len() < 2 {
                break;
            }
            let k = if cfg.k_min >= cfg.k_max { cfg.k_max } else { rand::Rng::gen_range(&mut rng, cfg.k_min..=cfg.k_max) };
            samples.push(sample_paragraph(&scene, i, k, cfg.order_sigma, &vocab, &mut rng)?);
        }
        scenes.push(scene);
    }
    Ok(Dataset { seed, stream: stream.to_string(), config: cfg.clone(), scenes, samples })
}
