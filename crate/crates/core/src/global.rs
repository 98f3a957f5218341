//! Proposal-guided refinement. Each layer runs self-attention over the
//! sentence proposals and cross-attention to the scene tokens, both with an
//! additive spatial bias computed from the current boxes, then predicts a
//! box offset.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::encoders::{position_encoding, SceneTokens, PE_DIM};
use crate::geometry::{focused_region, focused_region_mask, pairwise_explicit_features, points_in_box, Box3D, Vec3};
use crate::local::boxes_to_rows;
use crate::nn::{Ffn, Init, LayerNorm, Linear, Mha};

/// Which spatial bias terms are active. All on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasSwitches {
    pub explicit: bool,
    pub implicit: bool,
    pub focus: bool,
}

impl Default for BiasSwitches {
    fn default() -> Self {
        Self { explicit: true, implicit: true, focus: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalConfig {
    /// Size of the point-as-box scene keys, meters.
    pub eps: f64,
    pub tau: f64,
    pub max_crop_points: usize,
    pub switches: BiasSwitches,
    pub noise_center: f64,
    pub noise_log_size: f64,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self { eps: 0.01, tau: 2.0, max_crop_points: 32, switches: BiasSwitches::default(), noise_center: 0.05, noise_log_size: 0.05 }
    }
}

/// Zero-mean Gaussian noise on centres (meters) and log-sizes. Identity
/// outside training.
pub fn add_proposal_noise<R: Rng + ?Sized>(boxes: &[Box3D], sigma_center: f64, sigma_log_size: f64, training: bool, rng: &mut R) -> Vec<Box3D> {
    if !training || (sigma_center <= 0.0 && sigma_log_size <= 0.0) {
        return boxes.to_vec();
    }
    let nc = Normal::new(0.0, sigma_center.max(0.0)).expect("finite sigma");
    let ns = Normal::new(0.0, sigma_log_size.max(0.0)).expect("finite sigma");
    boxes
        .iter()
        .map(|b| {
            let mut out = *b;
            for d in 0..3 {
                out.center[d] += nc.sample(rng);
                out.size[d] *= ns.sample(rng).exp();
            }
            out
        })
        .collect()
}

/// Point sets fed to a crop encoder: `group` rows per crop, padded, with
/// per-row validity and per-crop emptiness.
#[derive(Clone, Debug, PartialEq)]
pub struct Crops {
    pub input: Array2<f64>,
    pub valid: Vec<bool>,
    pub group: usize,
    pub empty: Vec<bool>,
}

/// Crop input features: position relative to the focused-region centre,
/// then position relative to the owning box in units of its size.
fn crop_row(p: &Vec3, focus: &Vec3, owner: Option<&Box3D>) -> [f64; 6] {
    let mut r = [0.0; 6];
    for d in 0..3 {
        r[d] = p[d] - focus[d];
        if let Some(b) = owner {
            r[3 + d] = (p[d] - b.center[d]) / b.size[d];
        }
    }
    r
}

/// Scene points inside each proposal, at most `max_points` per proposal.
pub fn proposal_crops<R: Rng + ?Sized>(points: &[Vec3], boxes: &[Box3D], focus: &Vec3, max_points: usize, rng: &mut R) -> Crops {
    let group = max_points.max(1);
    let mut input = Array2::zeros((boxes.len() * group, 6));
    let mut valid = vec![false; boxes.len() * group];
    let mut empty = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        let idx = points_in_box(points, b, group, rng);
        empty.push(idx.is_empty());
        for (j, &pi) in idx.iter().enumerate() {
            let row = crop_row(&points[pi], focus, Some(b));
            for (d, v) in row.iter().enumerate() {
                input[[i * group + j, d]] = *v;
            }
            valid[i * group + j] = true;
        }
    }
    Crops { input, valid, group, empty }
}

/// Point-as-box keys: each crop is the key point alone.
pub fn point_crops(keys: &[Vec3], focus: &Vec3) -> Crops {
    let mut input = Array2::zeros((keys.len(), 6));
    for (i, p) in keys.iter().enumerate() {
        for (d, v) in crop_row(p, focus, None).iter().enumerate() {
            input[[i, d]] = *v;
        }
    }
    Crops { input, valid: vec![true; keys.len()], group: 1, empty: vec![false; keys.len()] }
}

/// Shared per-point network, max-pooled per crop; empty crops get a
/// learned code.
pub struct CropEncoder {
    pub l1: Linear,
    pub l2: Linear,
    pub empty: ParamId,
}

impl CropEncoder {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            l1: Linear::new(init, &format!("{name}.l1"), 6, dim, true),
            l2: Linear::new(init, &format!("{name}.l2"), dim, dim, true),
            empty: init.normal(&format!("{name}.empty"), 1, dim, 0.1),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, crops: &Crops) -> Var {
        let x = g.constant(crops.input.clone());
        let h = self.l1.forward(g, ps, x);
        let h = g.relu(h);
        let h = self.l2.forward(g, ps, h);
        let h = g.relu(h);
        let pooled = g.group_max(h, crops.group, &crops.valid);
        if !crops.empty.iter().any(|e| *e) {
            return pooled;
        }
        let n = crops.empty.len();
        let keep = g.constant(Array2::from_shape_fn((n, 1), |(i, _)| if crops.empty[i] { 0.0 } else { 1.0 }));
        let fill = g.constant(Array2::from_shape_fn((n, 1), |(i, _)| if crops.empty[i] { 1.0 } else { 0.0 }));
        let e = g.param(ps, self.empty);
        let sub = g.matmul(fill, e);
        let kept = g.mul_col(pooled, keep);
        g.add(kept, sub)
    }
}

fn pair_index(nq: usize, nk: usize) -> (Vec<usize>, Vec<usize>) {
    let ii = (0..nq).flat_map(|i| std::iter::repeat(i).take(nk)).collect();
    let jj = (0..nq).flat_map(|_| 0..nk).collect();
    (ii, jj)
}

/// `A_ij = gate_i · feat_(i·nk + j)`; `gate: nq×c`, `feat: (nq·nk)×c`.
pub fn gated_pair_bias(g: &mut Graph, gate: Var, feat: Var, nq: usize, nk: usize) -> Var {
    let (ii, _) = pair_index(nq, nk);
    let gi = g.gather_rows(gate, &ii);
    let prod = g.mul(gi, feat);
    let s = g.sum_cols(prod);
    g.reshape(s, nq, nk)
}

/// Explicit pair features flattened to `(nq·nk)×5`.
pub fn explicit_features_flat(q_centers: &[Vec3], k_centers: &[Vec3]) -> Array2<f64> {
    let f = pairwise_explicit_features(q_centers, k_centers);
    let n = q_centers.len() * k_centers.len();
    f.into_shape_with_order((n, 5)).expect("contiguous")
}

/// Query-conditioned spatial proximity: explicit gate `W^E`, implicit gate
/// `W^I`, the two crop encoders and the pair MLP.
pub struct Qcspc {
    pub w_e: Linear,
    pub w_i: Linear,
    pub enc_q: CropEncoder,
    pub enc_k: CropEncoder,
    pub pair_q: Linear,
    pub pair_k: Linear,
    pub pair_out: Linear,
}

pub const GATE_STD: f64 = 0.02;

impl Qcspc {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            w_e: Linear::with_std(init, &format!("{name}.w_e"), dim, 5, false, GATE_STD),
            w_i: Linear::with_std(init, &format!("{name}.w_i"), dim, dim, false, GATE_STD),
            enc_q: CropEncoder::new(init, &format!("{name}.enc_q"), dim),
            enc_k: CropEncoder::new(init, &format!("{name}.enc_k"), dim),
            pair_q: Linear::new(init, &format!("{name}.pair_q"), dim, dim, false),
            pair_k: Linear::new(init, &format!("{name}.pair_k"), dim, dim, true),
            pair_out: Linear::new(init, &format!("{name}.pair_out"), dim, dim, true),
        }
    }

    /// `A^E_ij = (Q_i W^E) · f^E_ij`.
    pub fn explicit(&self, g: &mut Graph, ps: &ParamStore, q: Var, q_centers: &[Vec3], k_centers: &[Vec3]) -> Var {
        let gate = self.w_e.forward(g, ps, q);
        let fe = g.constant(explicit_features_flat(q_centers, k_centers));
        gated_pair_bias(g, gate, fe, q_centers.len(), k_centers.len())
    }

    /// Pair features `f^I_ij = MLP([code_q_i; code_k_j])`, `(nq·nk)×C`.
    /// The first MLP layer is split into its query and key halves so each
    /// per-proposal code is projected once.
    pub fn pair_features(&self, g: &mut Graph, ps: &ParamStore, code_q: Var, code_k: Var) -> Var {
        let (nq, nk) = (g.shape(code_q).0, g.shape(code_k).0);
        let (ii, jj) = pair_index(nq, nk);
        let a = self.pair_q.forward(g, ps, code_q);
        let b = self.pair_k.forward(g, ps, code_k);
        let a = g.gather_rows(a, &ii);
        let b = g.gather_rows(b, &jj);
        let h = g.add(a, b);
        let h = g.relu(h);
        self.pair_out.forward(g, ps, h)
    }

    /// `A^I_ij = (Q_i W^I) · f^I_ij`.
    pub fn implicit(&self, g: &mut Graph, ps: &ParamStore, q: Var, crops_q: &Crops, crops_k: &Crops) -> Var {
        let cq = self.enc_q.forward(g, ps, crops_q);
        let ck = self.enc_k.forward(g, ps, crops_k);
        let (nq, nk) = (g.shape(cq).0, g.shape(ck).0);
        let f = self.pair_features(g, ps, cq, ck);
        let gate = self.w_i.forward(g, ps, q);
        gated_pair_bias(g, gate, f, nq, nk)
    }
}

pub struct GlobalLayer {
    pub w_p: Linear,
    pub ln_sa: LayerNorm,
    pub sa: Mha,
    pub q_sa: Qcspc,
    pub ln_ca: LayerNorm,
    pub ca: Mha,
    pub q_ca: Qcspc,
    pub ln_ff: LayerNorm,
    pub ffn: Ffn,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GlobalHooks {
    /// Force every offset to zero.
    pub zero_offset: bool,
}

pub struct LayerTrace {
    pub sa_probs: Vec<Var>,
    pub ca_probs: Vec<Var>,
    pub sa_bias: Option<Var>,
    pub ca_bias: Option<Var>,
    /// `A^F` row as applied (0 or masked per key), if active.
    pub focus_bias: Option<Vec<f64>>,
}

pub struct GlobalOut {
    /// Boxes entering each layer, after noise.
    pub inputs: Vec<Vec<Box3D>>,
    /// Predicted `[Δc; Δlog s]` per layer, `K×6`.
    pub offsets: Vec<Var>,
    /// Trajectory: the initial proposals followed by each layer's output.
    pub boxes: Vec<Vec<Box3D>>,
    pub features: Vec<Var>,
    pub traces: Vec<LayerTrace>,
    /// Layers where the focused-region mask removed every key and was
    /// dropped.
    pub mask_fallbacks: usize,
}

impl GlobalOut {
    pub fn final_boxes(&self) -> &[Box3D] {
        self.boxes.last().expect("trajectory is never empty")
    }
}

/// Largest log-size step applied to the box state; keeps exp finite for
/// untrained heads.
const MAX_LOG_STEP: f64 = 4.0;

pub struct GlobalDecoder {
    pub mem_pe: Linear,
    pub ln_mem: LayerNorm,
    pub layers: Vec<GlobalLayer>,
    pub ln_off: LayerNorm,
    pub offset: Ffn,
}

impl GlobalDecoder {
    pub fn new(init: &mut Init, dim: usize, heads: usize, layers: usize) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let n = format!("global.layer{l}");
                GlobalLayer {
                    w_p: Linear::new(init, &format!("{n}.w_p"), 6, dim, true),
                    ln_sa: LayerNorm::new(init, &format!("{n}.ln_sa"), dim),
                    sa: Mha::new(init, &format!("{n}.sa"), dim, heads),
                    q_sa: Qcspc::new(init, &format!("{n}.qs_sa"), dim),
                    ln_ca: LayerNorm::new(init, &format!("{n}.ln_ca"), dim),
                    ca: Mha::new(init, &format!("{n}.ca"), dim, heads),
                    q_ca: Qcspc::new(init, &format!("{n}.qs_ca"), dim),
                    ln_ff: LayerNorm::new(init, &format!("{n}.ln_ff"), dim),
                    ffn: Ffn::new(init, &format!("{n}.ffn"), dim, 2 * dim, dim),
                }
            })
            .collect();
        let offset = Ffn::new(init, "global.offset", dim, dim, 6);
        *init.store.get_mut(offset.l2.w) *= 0.1;
        Self {
            mem_pe: Linear::new(init, "global.mem_pe", PE_DIM, dim, false),
            ln_mem: LayerNorm::new(init, "global.ln_mem", dim),
            layers,
            ln_off: LayerNorm::new(init, "global.ln_off", dim),
            offset,
        }
    }

    pub fn memory(&self, g: &mut Graph, ps: &ParamStore, scene: &SceneTokens) -> Var {
        let pe = g.constant(position_encoding(&scene.positions));
        let pe = self.mem_pe.forward(g, ps, pe);
        let m = g.add(scene.features, pe);
        self.ln_mem.forward(g, ps, m)
    }

    /// Proposal-guided self-attention over the `K` proposals.
    pub fn pgsa(&self, g: &mut Graph, ps: &ParamStore, layer: &GlobalLayer, f: Var, boxes: &[Box3D], crops: &Crops, cfg: &GlobalConfig) -> (Var, Vec<Var>, Option<Var>) {
        let h = layer.ln_sa.forward(g, ps, f);
        let centers: Vec<Vec3> = boxes.iter().map(|b| b.center).collect();
        let mut bias = None;
        if cfg.switches.explicit {
            bias = Some(layer.q_sa.explicit(g, ps, h, &centers, &centers));
        }
        if cfg.switches.implicit {
            let ai = layer.q_sa.implicit(g, ps, h, crops, crops);
            bias = Some(match bias {
                Some(b) => g.add(b, ai),
                None => ai,
            });
        }
        let a = layer.sa.forward(g, ps, h, h, h, bias);
        (g.add(f, a.out), a.probs, bias)
    }

    /// Proposal-guided cross-attention to the scene tokens, keys being
    /// point-as-boxes at the token positions.
    #[allow(clippy::too_many_arguments)]
    pub fn pgca(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        layer: &GlobalLayer,
        f: Var,
        boxes: &[Box3D],
        crops: &Crops,
        scene: &SceneTokens,
        mem: Var,
        cfg: &GlobalConfig,
    ) -> (Var, Vec<Var>, Option<Var>, Option<Vec<f64>>, bool) {
        let h = layer.ln_ca.forward(g, ps, f);
        let centers: Vec<Vec3> = boxes.iter().map(|b| b.center).collect();
        let region = focused_region(&centers).expect("at least one proposal");
        let mut bias = None;
        if cfg.switches.explicit {
            bias = Some(layer.q_ca.explicit(g, ps, h, &centers, &scene.positions));
        }
        if cfg.switches.implicit {
            let keys = point_crops(&scene.positions, &region.center);
            let ai = layer.q_ca.implicit(g, ps, h, crops, &keys);
            bias = Some(match bias {
                Some(b) => g.add(b, ai),
                None => ai,
            });
        }
        let mut focus_row = None;
        let mut fell_back = false;
        if cfg.switches.focus {
            let m = focused_region_mask(&region, cfg.tau, &scene.positions);
            fell_back = m.fell_back;
            let nq = boxes.len();
            let af = g.constant(Array2::from_shape_fn((nq, m.bias.len()), |(_, j)| m.bias[j]));
            bias = Some(match bias {
                Some(b) => g.add(b, af),
                None => af,
            });
            focus_row = Some(m.bias);
        }
        let a = layer.ca.forward(g, ps, h, mem, mem, bias);
        (g.add(f, a.out), a.probs, bias, focus_row, fell_back)
    }

    /// One refinement layer: location feature, PGSA, PGCA, FFN, offset.
    #[allow(clippy::too_many_arguments)]
    pub fn refine_layer<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        l: usize,
        f: Var,
        boxes: &[Box3D],
        scene: &SceneTokens,
        mem: Var,
        points: &[Vec3],
        cfg: &GlobalConfig,
        hooks: GlobalHooks,
        rng: &mut R,
    ) -> (Var, Var, Vec<Box3D>, LayerTrace, bool) {
        let layer = &self.layers[l];
        let centers: Vec<Vec3> = boxes.iter().map(|b| b.center).collect();
        let region = focused_region(&centers).expect("at least one proposal");
        let crops = if cfg.switches.implicit {
            proposal_crops(points, boxes, &region.center, cfg.max_crop_points, rng)
        } else {
            Crops { input: Array2::zeros((0, 6)), valid: vec![], group: 1, empty: vec![] }
        };
        let loc = g.constant(boxes_to_rows(boxes));
        let p = layer.w_p.forward(g, ps, loc);
        let f = g.add(f, p);
        let (f, sa_probs, sa_bias) = self.pgsa(g, ps, layer, f, boxes, &crops, cfg);
        let (f, ca_probs, ca_bias, focus_bias, fell_back) = self.pgca(g, ps, layer, f, boxes, &crops, scene, mem, cfg);
        let h = layer.ln_ff.forward(g, ps, f);
        let h = layer.ffn.forward(g, ps, h);
        let f = g.add(f, h);
        let o = self.ln_off.forward(g, ps, f);
        let mut delta = self.offset.forward(g, ps, o);
        if hooks.zero_offset {
            delta = g.scale(delta, 0.0);
        }
        let dv = g.value(delta);
        let next = boxes
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let mut nb = *b;
                for d in 0..3 {
                    nb.center[d] += dv[[k, d]];
                    nb.size[d] *= dv[[k, 3 + d]].clamp(-MAX_LOG_STEP, MAX_LOG_STEP).exp();
                }
                nb
            })
            .collect();
        let trace = LayerTrace { sa_probs, ca_probs, sa_bias, ca_bias, focus_bias };
        (f, delta, next, trace, fell_back)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        init_boxes: &[Box3D],
        init_features: Var,
        scene: &SceneTokens,
        points: &[Vec3],
        cfg: &GlobalConfig,
        training: bool,
        hooks: GlobalHooks,
        rng: &mut R,
    ) -> GlobalOut {
        let mem = self.memory(g, ps, scene);
        let mut out = GlobalOut {
            inputs: vec![],
            offsets: vec![],
            boxes: vec![init_boxes.to_vec()],
            features: vec![],
            traces: vec![],
            mask_fallbacks: 0,
        };
        let mut f = init_features;
        let mut boxes = init_boxes.to_vec();
        for l in 0..self.layers.len() {
            let noisy = add_proposal_noise(&boxes, cfg.noise_center, cfg.noise_log_size, training, rng);
            let (nf, delta, next, trace, fell_back) = self.refine_layer(g, ps, l, f, &noisy, scene, mem, points, cfg, hooks, rng);
            out.mask_fallbacks += fell_back as usize;
            out.inputs.push(noisy);
            out.offsets.push(delta);
            out.boxes.push(next.clone());
            out.features.push(nf);
            out.traces.push(trace);
            f = nf;
            boxes = next;
        }
        out
    }
}

