//! Run configuration: a flat `key = value` schema with documented defaults.
//! Unknown keys are rejected; `seed` is required.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::global::GlobalConfig;
use crate::kv::{KvError, KvMap};
use crate::world::WorldConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub text_dim: usize,
    pub heads: usize,
    pub tokens: usize,
    pub n_set: usize,
    pub scene_blocks: usize,
    pub text_layers: usize,
    pub local_blocks: usize,
    pub global_layers: usize,
    pub room: [f64; 3],
    pub global: GlobalConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            text_dim: 64,
            heads: 4,
            tokens: 256,
            n_set: 64,
            scene_blocks: 4,
            text_layers: 3,
            local_blocks: 4,
            global_layers: 4,
            room: [8.0, 8.0, 3.0],
            global: GlobalConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub iou: f64,
    pub l1: f64,
    pub cent: f64,
    pub size: f64,
    pub refine: f64,
    pub init: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { iou: 1.0, l1: 1.0, cent: 1.0, size: 1.0, refine: 1.0, init: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub batch: usize,
    pub steps: [usize; 3],
    pub p_erase: f64,
    pub rot_max_deg: f64,
    pub grad_clip: f64,
    /// Draw a fresh paragraph per training example instead of cycling
    /// through the stored ones.
    pub resample_paragraphs: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.01,
            warmup: 100,
            batch: 2,
            steps: [3000, 3000, 3000],
            p_erase: 0.15,
            rot_max_deg: 5.0,
            grad_clip: 1.0,
            resample_paragraphs: false,
            log_every: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    None,
    BeamSearch,
}

impl std::str::FromStr for Baseline {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Baseline::None),
            "beam-search" => Ok(Baseline::BeamSearch),
            other => Err(format!("unknown baseline `{other}`")),
        }
    }
}

impl std::fmt::Display for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Baseline::None => "none",
            Baseline::BeamSearch => "beam-search",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub train_world: WorldConfig,
    pub eval_scenes: usize,
    pub eval_paragraphs_per_scene: usize,
    pub eval_k: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub use_cqg: bool,
    pub k_sweep: Vec<usize>,
    pub baseline: Baseline,
    pub beam_width: usize,
    pub beam_size: usize,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            train_world: WorldConfig::default(),
            eval_scenes: 64,
            eval_paragraphs_per_scene: 4,
            eval_k: 12,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            use_cqg: true,
            k_sweep: vec![],
            baseline: Baseline::None,
            beam_width: 12,
            beam_size: 12,
        }
    }

    /// The evaluation world: same scene statistics, fixed paragraph length.
    pub fn eval_world(&self) -> WorldConfig {
        WorldConfig {
            scenes: self.eval_scenes,
            paragraphs_per_scene: self.eval_paragraphs_per_scene,
            k_min: self.eval_k,
            k_max: self.eval_k,
            ..self.train_world.clone()
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        for (key, _, get) in SCHEMA {
            kv.set_raw(key, get(self));
        }
        kv
    }

    /// Builds a config from a map, applying defaults for absent keys.
    pub fn from_kv(kv: &KvMap) -> Result<Self, ConfigError> {
        for k in kv.keys() {
            if !SCHEMA.iter().any(|(name, _, _)| *name == k) {
                return Err(KvError::Unknown(k.to_string()).into());
            }
        }
        let mut cfg = RunConfig::with_seed(kv.get("seed")?);
        for (key, set, _) in SCHEMA {
            if let Some(v) = kv.raw(key) {
                set(&mut cfg, v).map_err(|_| KvError::Parse { key: key.to_string(), value: v.to_string() })?;
            }
        }
        cfg.model.room = cfg.train_world.scene.room;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key, reason: &str| Err(ConfigError::Invalid { key, reason: reason.to_string() });
        let m = &self.model;
        if m.dim == 0 || m.heads == 0 || m.dim % m.heads != 0 {
            return bad("heads", "dim must be a positive multiple of heads");
        }
        if m.text_dim != m.dim {
            return bad("text_dim", "text and model widths must match");
        }
        if m.tokens == 0 || m.tokens > self.train_world.scene.num_points {
            return bad("tokens", "must be between 1 and num_points");
        }
        if !(m.global.tau > 0.0) {
            return bad("tau", "must be positive");
        }
        if !(m.global.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(0.0..1.0).contains(&self.train.p_erase) {
            return bad("p_erase", "must lie in [0, 1)");
        }
        if self.train.batch == 0 {
            return bad("batch", "must be positive");
        }
        let w = &self.train_world;
        if w.k_min < 2 || w.k_min > w.k_max || w.k_max > crate::world::K_MAX {
            return bad("k_min", "need 2 <= k_min <= k_max <= 12");
        }
        if self.eval_k < 2 || self.eval_k > crate::world::K_MAX {
            return bad("eval_k", "need 2 <= eval_k <= 12");
        }
        if self.k_sweep.iter().any(|k| *k < 2 || *k > crate::world::K_MAX) {
            return bad("k_sweep", "entries must lie in 2..=12");
        }
        if self.beam_width == 0 || self.beam_size == 0 {
            return bad("beam_width", "beam width and size must be positive");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical config text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().to_text().as_bytes()))
    }

    /// Keys understood by [`RunConfig::from_kv`], in schema order.
    pub fn keys() -> impl Iterator<Item = &'static str> {
        SCHEMA.iter().map(|(k, _, _)| *k)
    }
}

type Setter = fn(&mut RunConfig, &str) -> Result<(), ()>;
type Getter = fn(&RunConfig) -> String;

fn p<T: std::str::FromStr>(v: &str) -> Result<T, ()> {
    v.trim().parse().map_err(|_| ())
}

fn list(v: &str) -> Result<Vec<usize>, ()> {
    if v.trim().is_empty() {
        return Ok(vec![]);
    }
    v.split(',').map(p).collect()
}

fn show_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

macro_rules! field {
    ($key:literal, $($path:tt)+) => {
        (
            $key,
            (|c: &mut RunConfig, v: &str| {
                c.$($path)+ = p(v)?;
                Ok(())
            }) as Setter,
            (|c: &RunConfig| c.$($path)+.to_string()) as Getter,
        )
    };
}

const SCHEMA: &[(&str, Setter, Getter)] = &[
    field!("seed", seed),
    field!("train_scenes", train_world.scenes),
    field!("paragraphs_per_scene", train_world.paragraphs_per_scene),
    field!("k_min", train_world.k_min),
    field!("k_max", train_world.k_max),
    field!("order_sigma", train_world.order_sigma),
    field!("eval_scenes", eval_scenes),
    field!("eval_paragraphs_per_scene", eval_paragraphs_per_scene),
    field!("eval_k", eval_k),
    field!("room_x", train_world.scene.room[0]),
    field!("room_y", train_world.scene.room[1]),
    field!("room_z", train_world.scene.room[2]),
    field!("min_objects", train_world.scene.min_objects),
    field!("max_objects", train_world.scene.max_objects),
    field!("num_points", train_world.scene.num_points),
    field!("floor_fraction", train_world.scene.floor_fraction),
    field!("min_points_per_object", train_world.scene.min_points_per_object),
    field!("max_retries", train_world.scene.max_retries),
    field!("dim", model.dim),
    field!("text_dim", model.text_dim),
    field!("heads", model.heads),
    field!("tokens", model.tokens),
    field!("n_set", model.n_set),
    field!("scene_blocks", model.scene_blocks),
    field!("text_layers", model.text_layers),
    field!("local_blocks", model.local_blocks),
    field!("global_layers", model.global_layers),
    field!("eps", model.global.eps),
    field!("tau", model.global.tau),
    field!("max_crop_points", model.global.max_crop_points),
    field!("noise_center", model.global.noise_center),
    field!("noise_log_size", model.global.noise_log_size),
    field!("use_ae", model.global.switches.explicit),
    field!("use_ai", model.global.switches.implicit),
    field!("use_af", model.global.switches.focus),
    field!("use_cqg", use_cqg),
    field!("lr", train.lr),
    field!("weight_decay", train.weight_decay),
    field!("warmup", train.warmup),
    field!("batch", train.batch),
    field!("steps_stage1", train.steps[0]),
    field!("steps_stage2", train.steps[1]),
    field!("steps_stage3", train.steps[2]),
    field!("p_erase", train.p_erase),
    field!("rot_max_deg", train.rot_max_deg),
    field!("grad_clip", train.grad_clip),
    field!("resample_paragraphs", train.resample_paragraphs),
    field!("log_every", train.log_every),
    field!("lambda_iou", loss.iou),
    field!("lambda_l1", loss.l1),
    field!("lambda_cent", loss.cent),
    field!("lambda_size", loss.size),
    field!("lambda_refine", loss.refine),
    field!("lambda_init", loss.init),
    (
        "k_sweep",
        (|c: &mut RunConfig, v: &str| {
            c.k_sweep = list(v)?;
            Ok(())
        }) as Setter,
        (|c: &RunConfig| show_list(&c.k_sweep)) as Getter,
    ),
    field!("baseline", baseline),
    field!("beam_width", beam_width),
    field!("beam_size", beam_size),
];
