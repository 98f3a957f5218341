//! The full grounding network: encoders, contextual query generator, local
//! decoder with its box head, and the global refinement decoder.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::config::ModelConfig;
use crate::cqg::{ContextQueryGen, CqgHooks, CqgOut};
use crate::encoders::{EncoderError, PointGrouping, SceneEncoder, SceneTokens, SentenceFeatures, TextEncoder};
use crate::geometry::{Box3D, Vec3};
use crate::global::{GlobalDecoder, GlobalHooks, GlobalOut};
use crate::local::{boxes_from_rows, GroundHead, LocalDecoder, LocalOut, RoomFrame};
use crate::nn::{Init, Linear};
use crate::seeding::rng_for;

/// Parameter name prefixes per component; stage schedules select by these.
pub const SCENE: &str = "scene.";
pub const TEXT: &str = "text.";
pub const CQG: &str = "cqg.";
pub const LOCAL: &str = "local.";
pub const GLOBAL: &str = "global.";

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub scene: SceneEncoder,
    pub text: TextEncoder,
    /// `W_q`: sentence features to query width. Used with and without the
    /// context generator.
    pub w_q: Linear,
    pub cqg: ContextQueryGen,
    pub local: LocalDecoder,
    pub head: GroundHead,
    pub global: GlobalDecoder,
    pub room: RoomFrame,
}

/// One scene plus the valid sentences of a paragraph.
#[derive(Clone)]
pub struct ModelInput<'a> {
    pub xyz: &'a [Vec3],
    pub rgb: &'a [Vec3],
    pub grouping: &'a PointGrouping,
    pub sentences: Vec<Vec<u32>>,
}

#[derive(Clone, Copy, Debug)]
pub struct RunMode {
    pub training: bool,
    pub use_cqg: bool,
    pub use_global: bool,
    pub cqg_hooks: CqgHooks,
    pub global_hooks: GlobalHooks,
}

impl RunMode {
    pub fn eval(use_cqg: bool, use_global: bool) -> Self {
        Self { training: false, use_cqg, use_global, cqg_hooks: CqgHooks::default(), global_hooks: GlobalHooks::default() }
    }

    pub fn train(use_cqg: bool, use_global: bool) -> Self {
        Self { training: true, ..Self::eval(use_cqg, use_global) }
    }
}

pub struct ModelOutput {
    pub scene: SceneTokens,
    pub text: SentenceFeatures,
    pub cqg: Option<CqgOut>,
    pub queries: Var,
    pub local: LocalOut,
    /// Sentence-slot features, `K×C`.
    pub init_features: Var,
    /// Initial proposals `[center; size]`, `K×6`.
    pub init_boxes: Var,
    pub global: Option<GlobalOut>,
}

impl ModelOutput {
    pub fn initial_proposals(&self, g: &Graph) -> Vec<Box3D> {
        boxes_from_rows(g.value(self.init_boxes))
    }

    /// Final boxes: the last refinement layer when the global decoder ran,
    /// otherwise the initial proposals.
    pub fn predictions(&self, g: &Graph) -> Vec<Box3D> {
        match &self.global {
            Some(gl) => gl.final_boxes().to_vec(),
            None => self.initial_proposals(g),
        }
    }
}

impl Model {
    pub fn new(cfg: &ModelConfig, vocab: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, rng_for(seed, "init", 0));
        let (c, h) = (cfg.dim, cfg.heads);
        let scene = SceneEncoder::new(&mut init, c, h, cfg.scene_blocks);
        let text = TextEncoder::new(&mut init, vocab, cfg.text_dim, h, cfg.text_layers);
        let w_q = Linear::new(&mut init, "text.w_q", cfg.text_dim, c, false);
        let cqg = ContextQueryGen::new(&mut init, cfg.text_dim, c, h, cfg.n_set);
        let local = LocalDecoder::new(&mut init, c, h, cfg.local_blocks);
        let head = GroundHead::new(&mut init, c);
        let global = GlobalDecoder::new(&mut init, c, h, cfg.global_layers);
        Self { cfg: cfg.clone(), store, scene, text, w_q, cqg, local, head, global, room: RoomFrame::from_extent(cfg.room) }
    }

    /// Runs the network on one paragraph. Parameters are read from
    /// `self.store`; use [`Model::forward_with`] to substitute a store.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, input: &ModelInput, mode: RunMode, rng: &mut R) -> Result<ModelOutput, EncoderError> {
        self.forward_with(&self.store, g, input, mode, rng)
    }

    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        ps: &ParamStore,
        g: &mut Graph,
        input: &ModelInput,
        mode: RunMode,
        rng: &mut R,
    ) -> Result<ModelOutput, EncoderError> {
        let scene = self.scene.forward(g, ps, input.xyz, input.rgb, input.grouping);
        let refs: Vec<&[u32]> = input.sentences.iter().map(Vec::as_slice).collect();
        let text = self.text.forward(g, ps, &refs)?;
        let l_prime = self.w_q.forward(g, ps, text.rows);
        let (queries, cqg) = if mode.use_cqg {
            let out = self.cqg.forward(g, ps, &text, l_prime, scene.features, mode.cqg_hooks);
            (out.queries, Some(out))
        } else {
            (l_prime, None)
        };
        let local = self.local.forward(g, ps, queries, &text.spans, &scene);
        let slot0: Vec<usize> = text.spans.iter().map(|s| s.0).collect();
        let init_features = g.gather_rows(local.features, &slot0);
        let init_boxes = self.head.forward(g, ps, init_features, &self.room);
        let global = if mode.use_global {
            let boxes = boxes_from_rows(g.value(init_boxes));
            Some(self.global.forward(g, ps, &boxes, init_features, &scene, input.xyz, &self.cfg.global, mode.training, mode.global_hooks, rng))
        } else {
            None
        };
        Ok(ModelOutput { scene, text, cqg, queries, local, init_features, init_boxes, global })
    }

    /// Boxes for every decoded slot of sentence `k`, with the cosine
    /// similarity of each slot feature to the sentence-slot feature.
    pub fn slot_candidates(&self, g: &mut Graph, out: &ModelOutput, k: usize) -> Vec<(Box3D, f64)> {
        let (start, len) = out.text.spans[k];
        let rows = g.slice_rows(out.local.features, start, start + len);
        let boxes = self.head.forward(g, &self.store, rows, &self.room);
        let feats: Array2<f64> = g.value(rows).clone();
        let boxes = boxes_from_rows(g.value(boxes));
        let s = feats.row(0);
        let ns = s.dot(&s).sqrt().max(1e-12);
        boxes
            .into_iter()
            .enumerate()
            .map(|(i, b)| {
                let r = feats.row(i);
                let score = r.dot(&s) / (r.dot(&r).sqrt().max(1e-12) * ns);
                (self.room.clamp(&b), score)
            })
            .collect()
    }
}
