//! Per-sentence decoding of contextual queries against the scene tokens,
//! and the box head that turns the sentence slot into an initial proposal.

use ndarray::Array2;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::encoders::{position_encoding, SceneTokens, PE_DIM};
use crate::geometry::{Box3D, Vec3};
use crate::nn::{block_diagonal_mask, Ffn, Init, LayerNorm, Linear, Mha};
use crate::world::T_MAX;

pub struct DecoderBlock {
    pub ln_sa: LayerNorm,
    pub sa: Mha,
    pub ln_ca: LayerNorm,
    pub ca: Mha,
    pub ln_ff: LayerNorm,
    pub ffn: Ffn,
}

impl DecoderBlock {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            ln_sa: LayerNorm::new(init, &format!("{name}.ln_sa"), dim),
            sa: Mha::new(init, &format!("{name}.sa"), dim, heads),
            ln_ca: LayerNorm::new(init, &format!("{name}.ln_ca"), dim),
            ca: Mha::new(init, &format!("{name}.ca"), dim, heads),
            ln_ff: LayerNorm::new(init, &format!("{name}.ln_ff"), dim),
            ffn: Ffn::new(init, &format!("{name}.ffn"), dim, 2 * dim, dim),
        }
    }
}

pub struct LocalOut {
    /// Decoded features, stacked like the query rows.
    pub features: Var,
    /// Per block, per head cross-attention weights over the scene tokens.
    pub cross_attention: Vec<Vec<Var>>,
}

pub struct LocalDecoder {
    pub query_pos: ParamId,
    pub mem_pe: Linear,
    pub ln_mem: LayerNorm,
    pub blocks: Vec<DecoderBlock>,
    pub ln_out: LayerNorm,
}

impl LocalDecoder {
    pub fn new(init: &mut Init, dim: usize, heads: usize, blocks: usize) -> Self {
        Self {
            query_pos: init.normal("local.query_pos", T_MAX + 1, dim, 0.1),
            mem_pe: Linear::new(init, "local.mem_pe", PE_DIM, dim, false),
            ln_mem: LayerNorm::new(init, "local.ln_mem", dim),
            blocks: (0..blocks).map(|i| DecoderBlock::new(init, &format!("local.block{i}"), dim, heads)).collect(),
            ln_out: LayerNorm::new(init, "local.ln_out", dim),
        }
    }

    /// Scene memory with absolute position folded in; used as keys and
    /// values.
    pub fn memory(&self, g: &mut Graph, ps: &ParamStore, scene: &SceneTokens) -> Var {
        let pe = g.constant(position_encoding(&scene.positions));
        let pe = self.mem_pe.forward(g, ps, pe);
        let m = g.add(scene.features, pe);
        self.ln_mem.forward(g, ps, m)
    }

    /// Decodes all sentences at once; `spans` gives each sentence's rows.
    /// Self-attention never crosses sentence boundaries, so every sentence
    /// is decoded independently with shared weights.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, queries: Var, spans: &[(usize, usize)], scene: &SceneTokens) -> LocalOut {
        let slots: Vec<usize> = spans.iter().flat_map(|&(_, len)| 0..len).collect();
        let qp = g.param(ps, self.query_pos);
        let pos = g.gather_rows(qp, &slots);
        let mut x = g.add(queries, pos);
        let mem = self.memory(g, ps, scene);
        let lens: Vec<usize> = spans.iter().map(|s| s.1).collect();
        let mask = (spans.len() > 1).then(|| g.constant(block_diagonal_mask(&lens)));
        let mut cross_attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h = b.ln_sa.forward(g, ps, x);
            let a = b.sa.forward(g, ps, h, h, h, mask);
            x = g.add(x, a.out);
            let h = b.ln_ca.forward(g, ps, x);
            let a = b.ca.forward(g, ps, h, mem, mem, None);
            x = g.add(x, a.out);
            cross_attention.push(a.probs);
            let h = b.ln_ff.forward(g, ps, x);
            let f = b.ffn.forward(g, ps, h);
            x = g.add(x, f);
        }
        LocalOut { features: self.ln_out.forward(g, ps, x), cross_attention }
    }
}

/// Room geometry used to map normalised head outputs to meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoomFrame {
    pub center: Vec3,
    pub half: Vec3,
}

impl RoomFrame {
    /// Rooms are centred on the origin in x/y with the floor at z = 0.
    pub fn from_extent(room: Vec3) -> Self {
        Self { center: [0.0, 0.0, room[2] / 2.0], half: [room[0] / 2.0, room[1] / 2.0, room[2] / 2.0] }
    }

    /// Clamps a box into `1.2×` the room: centre inside the enlarged room,
    /// size no larger than it.
    pub fn clamp(&self, b: &Box3D) -> Box3D {
        let mut out = *b;
        for d in 0..3 {
            let h = 1.2 * self.half[d];
            out.center[d] = b.center[d].clamp(self.center[d] - h, self.center[d] + h);
            out.size[d] = b.size[d].min(2.0 * h);
        }
        out
    }
}

/// Two-layer FFN emitting 6 numbers: the first three are room-normalised
/// centre coordinates, the last three pass through softplus to give a
/// positive size in meters.
pub struct GroundHead {
    pub ffn: Ffn,
}

/// Pre-activation bias of the size outputs; softplus of it is about 0.8 m.
const SIZE_BIAS: f64 = 0.2;

impl GroundHead {
    pub fn new(init: &mut Init, dim: usize) -> Self {
        let ffn = Ffn::new(init, "local.head", dim, dim, 6);
        let b = ffn.l2.b.expect("head has bias");
        let mut bias = Array2::zeros((1, 6));
        bias.slice_mut(ndarray::s![.., 3..]).fill(SIZE_BIAS);
        *init.store.get_mut(b) = bias;
        Self { ffn }
    }

    /// `n×C` features to `n×6` boxes `[center; size]` in meters.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, features: Var, room: &RoomFrame) -> Var {
        let out = self.ffn.forward(g, ps, features);
        let c = g.slice_cols(out, 0, 3);
        let half = g.constant(Array2::from_shape_vec((1, 3), room.half.to_vec()).expect("1×3"));
        let ctr = g.constant(Array2::from_shape_vec((1, 3), room.center.to_vec()).expect("1×3"));
        let c = g.mul_row(c, half);
        let c = g.add_row(c, ctr);
        let s = g.slice_cols(out, 3, 6);
        let s = g.softplus(s);
        g.concat_cols(&[c, s])
    }
}

pub fn boxes_from_rows(rows: &Array2<f64>) -> Vec<Box3D> {
    rows.rows()
        .into_iter()
        .map(|r| Box3D::new([r[0], r[1], r[2]], [r[3], r[4], r[5]]))
        .collect()
}

pub fn boxes_to_rows(boxes: &[Box3D]) -> Array2<f64> {
    let mut a = Array2::zeros((boxes.len(), 6));
    for (i, b) in boxes.iter().enumerate() {
        for (j, v) in b.as_array().iter().enumerate() {
            a[[i, j]] = *v;
        }
    }
    a
}

