//! Staged optimisation: pretrain encoders and the local decoder, add the
//! contextual query generator, then add the global refinement decoder.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autograd::{Graph, ParamStore};
use crate::checkpoint::{Checkpoint, CheckpointError, OptimState, RngState};
use crate::config::RunConfig;
use crate::encoders::{erase_words, group_points, EncoderError, PointGrouping};
use crate::geometry::Box3D;
use crate::loss::{loss_init, loss_refine, total_loss};
use crate::model::{Model, ModelInput, RunMode, CQG, GLOBAL, LOCAL, SCENE, TEXT};
use crate::seeding::rng_for;
use crate::world::{sample_paragraph, Dataset, DenseSample, Vocab, WorldError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage must be 1, 2 or 3, got {0}")]
    BadStage(u8),
    #[error("stage {stage} needs a checkpoint from stage {needed} (or an explicit from-scratch start)")]
    MissingCheckpoint { stage: u8, needed: u8 },
    #[error("cannot run stage {stage} from a stage-{found} checkpoint")]
    StageOrder { stage: u8, found: u8 },
    #[error("stage-{stage} checkpoint is incomplete ({step} of {steps} steps); resume that stage first")]
    Incomplete { stage: u8, step: usize, steps: usize },
    #[error("training set has no paragraphs")]
    EmptyDataset,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    World(#[from] WorldError),
}

/// Parameter prefixes updated in each stage.
pub fn stage_prefixes(stage: u8) -> &'static [&'static str] {
    match stage {
        1 => &[SCENE, TEXT, LOCAL],
        2 => &[SCENE, TEXT, LOCAL, CQG],
        _ => &[SCENE, TEXT, LOCAL, CQG, GLOBAL],
    }
}

/// Adam with decoupled weight decay. Decay skips biases and normalisation
/// parameters (single-row tensors).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<f64>> = store.entries().iter().map(|e| Array2::zeros(e.value.dim())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn from_state(state: OptimState, weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: state.t, m: state.m, v: state.v }
    }

    pub fn state(&self) -> OptimState {
        OptimState { t: self.t, m: self.m.clone(), v: self.v.clone() }
    }

    /// Updates every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Array2<f64>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.0] else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let p = store.get_mut(id);
            if p.nrows() > 1 && self.weight_decay > 0.0 {
                let k = 1.0 - lr * self.weight_decay;
                p.mapv_inplace(|x| x * k);
            }
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Linear warmup to `lr`, constant afterwards.
pub fn learning_rate(base: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// Scales gradients in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Array2<f64>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

/// A dataset with scene tokenisations precomputed. Tokens depend only on
/// pairwise distances, so they stay valid for rotated copies of a scene.
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub groupings: Vec<PointGrouping>,
    pub vocab: Vocab,
}

impl<'a> TrainData<'a> {
    pub fn new(dataset: &'a Dataset, tokens: usize) -> Result<Self, EncoderError> {
        let groupings = dataset.scenes.iter().map(|s| group_points(&s.xyz, tokens)).collect::<Result<_, _>>()?;
        Ok(Self { dataset, groupings, vocab: Vocab::builtin() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_init: f64,
    pub loss_refine: Option<f64>,
    pub grad_norm: f64,
}

/// Everything needed to continue a stage: weights, optimizer and the
/// training generator.
pub struct TrainState {
    pub model: Model,
    pub stage: u8,
    pub step: usize,
    pub optim: AdamW,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Prepares `stage`, optionally from a checkpoint. A checkpoint of the
    /// same stage resumes it; a finished checkpoint of the previous stage
    /// starts the next one. Stages 2 and 3 refuse to start without their
    /// predecessor unless `from_scratch` is set.
    pub fn start(cfg: &RunConfig, stage: u8, ckpt: Option<&Checkpoint>, from_scratch: bool) -> Result<Self, TrainError> {
        if !(1..=3).contains(&stage) {
            return Err(TrainError::BadStage(stage));
        }
        let vocab = Vocab::builtin().len();
        let mut model = Model::new(&cfg.model, vocab, cfg.seed);
        model.store.set_trainable_prefixes(stage_prefixes(stage));
        let fresh_rng = rng_for(cfg.seed, "train", stage as u64);
        let Some(ckpt) = ckpt else {
            if stage > 1 && !from_scratch {
                return Err(TrainError::MissingCheckpoint { stage, needed: stage - 1 });
            }
            let optim = AdamW::new(&model.store, cfg.train.weight_decay);
            return Ok(Self { model, stage, step: 0, optim, rng: fresh_rng });
        };
        ckpt.load_into(&mut model.store)?;
        if ckpt.stage == stage {
            let optim = match &ckpt.optim {
                Some(o) => AdamW::from_state(o.clone(), cfg.train.weight_decay),
                None => AdamW::new(&model.store, cfg.train.weight_decay),
            };
            return Ok(Self { model, stage, step: ckpt.step, optim, rng: ckpt.rng.restore() });
        }
        if ckpt.stage + 1 != stage {
            return Err(TrainError::StageOrder { stage, found: ckpt.stage });
        }
        let needed = cfg.train.steps[ckpt.stage as usize - 1];
        if ckpt.step < needed {
            return Err(TrainError::Incomplete { stage: ckpt.stage, step: ckpt.step, steps: needed });
        }
        let optim = AdamW::new(&model.store, cfg.train.weight_decay);
        Ok(Self { model, stage, step: 0, optim, rng: fresh_rng })
    }

    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint {
            config: cfg.to_kv().to_text(),
            stage: self.stage,
            step: self.step,
            rng: RngState::capture(&self.rng),
            params: Checkpoint::params_of(&self.model.store),
            optim: Some(self.optim.state()),
        }
    }

    pub fn steps_total(&self, cfg: &RunConfig) -> usize {
        cfg.train.steps[self.stage as usize - 1]
    }

    pub fn finished(&self, cfg: &RunConfig) -> bool {
        self.step >= self.steps_total(cfg)
    }

    fn mode(&self, cfg: &RunConfig) -> RunMode {
        RunMode::train(cfg.use_cqg && self.stage >= 2, self.stage == 3)
    }

    /// One optimisation step over a freshly drawn batch.
    pub fn train_step(&mut self, cfg: &RunConfig, data: &TrainData) -> Result<StepRecord, TrainError> {
        let samples = &data.dataset.samples;
        if samples.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mode = self.mode(cfg);
        let batch = cfg.train.batch;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.model.store.len()];
        let (mut loss_sum, mut init_sum, mut refine_sum) = (0.0, 0.0, 0.0);
        for _ in 0..batch {
            let sample = self.draw_sample(cfg, data)?;
            let angle = if cfg.train.rot_max_deg > 0.0 {
                self.rng.gen_range(-cfg.train.rot_max_deg..=cfg.train.rot_max_deg).to_radians()
            } else {
                0.0
            };
            let scene = data.dataset.scenes[sample.scene].rotated_z(angle);
            let mut sentences = Vec::new();
            let mut gt: Vec<Box3D> = Vec::new();
            for s in sample.valid_sentences() {
                sentences.push(erase_words(&s.tokens, cfg.train.p_erase, &mut self.rng));
                gt.push(scene.objects[s.target].bbox);
            }
            let input = ModelInput { xyz: &scene.xyz, rgb: &scene.rgb, grouping: &data.groupings[sample.scene], sentences };
            let mut g = Graph::new();
            let out = self.model.forward(&mut g, &input, mode, &mut self.rng)?;
            let li = loss_init(&mut g, out.init_boxes, &gt, &cfg.loss);
            init_sum += g.scalar(li);
            let loss = match &out.global {
                Some(gl) => {
                    let lr = loss_refine(&mut g, &gl.offsets, &gl.inputs, &gt, &cfg.loss);
                    refine_sum += g.scalar(lr);
                    total_loss(&mut g, lr, li, &cfg.loss)
                }
                None => li,
            };
            loss_sum += g.scalar(loss);
            let back = g.backward(loss);
            for (id, gr) in back.params() {
                match &mut grads[id.0] {
                    Some(acc) => *acc += gr,
                    slot => *slot = Some(gr.clone()),
                }
            }
        }
        let inv = 1.0 / batch as f64;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * inv);
        }
        for id in self.model.store.ids() {
            if !self.model.store.is_trainable(id) {
                grads[id.0] = None;
            }
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.train.grad_clip);
        let lr = learning_rate(cfg.train.lr, cfg.train.warmup, self.step);
        self.optim.step(&mut self.model.store, &grads, lr);
        self.step += 1;
        Ok(StepRecord {
            stage: self.stage,
            step: self.step,
            lr,
            loss: loss_sum * inv,
            loss_init: init_sum * inv,
            loss_refine: mode.use_global.then_some(refine_sum * inv),
            grad_norm,
        })
    }

    fn draw_sample(&mut self, cfg: &RunConfig, data: &TrainData) -> Result<DenseSample, TrainError> {
        let ds = data.dataset;
        if !cfg.train.resample_paragraphs {
            let i = self.rng.gen_range(0..ds.samples.len());
            return Ok(ds.samples[i].clone());
        }
        let i = ds.samples[self.rng.gen_range(0..ds.samples.len())].scene;
        let w = &ds.config;
        let k = self.rng.gen_range(w.k_min..=w.k_max);
        Ok(sample_paragraph(&ds.scenes[i], i, k, w.order_sigma, &data.vocab, &mut self.rng)?)
    }

    /// Runs until the stage is complete or `limit` more steps have been
    /// taken, calling `on_step` after each one.
    pub fn run(
        &mut self,
        cfg: &RunConfig,
        data: &TrainData,
        limit: Option<usize>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<(), TrainError> {
        let mut taken = 0;
        while !self.finished(cfg) && limit.map_or(true, |l| taken < l) {
            let rec = self.train_step(cfg, data)?;
            on_step(&rec);
            taken += 1;
        }
        Ok(())
    }
}

/// Runs stages `1..=3` back to back and returns the final state.
pub fn train_all(cfg: &RunConfig, data: &TrainData, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainState, TrainError> {
    let mut state = TrainState::start(cfg, 1, None, false)?;
    state.run(cfg, data, None, &mut on_step)?;
    for stage in 2..=3 {
        let ckpt = state.checkpoint(cfg);
        state = TrainState::start(cfg, stage, Some(&ckpt), false)?;
        state.run(cfg, data, None, &mut on_step)?;
    }
    Ok(state)
}
