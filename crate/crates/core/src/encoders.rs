//! Point-cloud and sentence encoders.

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

use crate::autograd::{Graph, ParamId, ParamStore, Var, MASKED};
use crate::geometry::{dist, Vec3};
use crate::nn::{block_diagonal_mask, fourier_features, EncoderBlock, Init, LayerNorm, Linear};
use crate::world::{MASK_ID, PAD_ID, T_MAX};

pub const BALL_RADIUS: f64 = 0.4;
pub const BALL_NEIGHBOURS: usize = 16;
pub const MASK_RADIUS: f64 = 2.0;
/// Octaves of the positional Fourier features; the longest wavelength is
/// `PE_WAVELENGTH` meters.
pub const PE_FREQS: usize = 8;
pub const PE_WAVELENGTH: f64 = 16.0;
/// Raw coordinates are divided by this before joining the Fourier part.
pub const PE_SCALE: f64 = 4.0;
/// Width of [`position_encoding`].
pub const PE_DIM: usize = 3 + 6 * PE_FREQS;

/// Scaled raw coordinates followed by Fourier features. The raw part keeps
/// attention-weighted averages of the encoding linear in position.
pub fn position_encoding(points: &[Vec3]) -> Array2<f64> {
    let ff = fourier_features(points, PE_FREQS, PE_WAVELENGTH);
    let mut out = Array2::zeros((points.len(), PE_DIM));
    for (i, p) in points.iter().enumerate() {
        for d in 0..3 {
            out[[i, d]] = p[d] / PE_SCALE;
        }
    }
    out.slice_mut(ndarray::s![.., 3..]).assign(&ff);
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncoderError {
    #[error("scene has {points} points but {tokens} tokens were requested; lower the token count")]
    TooFewPoints { points: usize, tokens: usize },
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfVocab { id: u32, vocab: usize },
    #[error("empty sentence")]
    EmptySentence,
}

/// Farthest-point sampling. Starts from the point farthest from the
/// centroid, so the selection does not depend on input order except
/// through exact distance ties, which go to the lowest index.
pub fn farthest_point_sample(points: &[Vec3], m: usize) -> Result<Vec<usize>, EncoderError> {
    let n = points.len();
    if m > n || n == 0 {
        return Err(EncoderError::TooFewPoints { points: n, tokens: m });
    }
    let mut centroid = [0.0; 3];
    for p in points {
        for d in 0..3 {
            centroid[d] += p[d] / n as f64;
        }
    }
    let argmax = |vals: &[f64]| {
        let mut best = 0;
        for (i, v) in vals.iter().enumerate() {
            if *v > vals[best] {
                best = i;
            }
        }
        best
    };
    let from_centroid: Vec<f64> = points.iter().map(|p| dist(p, &centroid)).collect();
    let mut chosen = Vec::with_capacity(m);
    if m == 0 {
        return Ok(chosen);
    }
    let mut cur = argmax(&from_centroid);
    let mut nearest = vec![f64::INFINITY; n];
    for _ in 0..m {
        chosen.push(cur);
        let c = points[cur];
        for (i, p) in points.iter().enumerate() {
            let d = dist(p, &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
        cur = argmax(&nearest);
    }
    Ok(chosen)
}

/// Token centres and their neighbourhoods. Depends only on pairwise
/// distances, so it is unchanged by rigid motions of the scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PointGrouping {
    pub centers: Vec<usize>,
    /// `M × BALL_NEIGHBOURS` point indices, row-major; padding repeats the
    /// centre and is flagged invalid.
    pub neighbours: Vec<usize>,
    pub valid: Vec<bool>,
}

/// Up to `k` nearest points within `radius` (closed) of each centre, ties
/// by index.
pub fn ball_query(points: &[Vec3], centers: &[usize], radius: f64, k: usize) -> PointGrouping {
    let mut neighbours = Vec::with_capacity(centers.len() * k);
    let mut valid = Vec::with_capacity(centers.len() * k);
    let mut near: Vec<(f64, usize)> = Vec::new();
    for &c in centers {
        near.clear();
        near.extend(points.iter().enumerate().filter_map(|(i, p)| {
            let d = dist(p, &points[c]);
            (d <= radius).then_some((d, i))
        }));
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for j in 0..k {
            match near.get(j) {
                Some(&(_, i)) => {
                    neighbours.push(i);
                    valid.push(true);
                }
                None => {
                    neighbours.push(c);
                    valid.push(false);
                }
            }
        }
    }
    PointGrouping { centers: centers.to_vec(), neighbours, valid }
}

pub fn group_points(points: &[Vec3], m: usize) -> Result<PointGrouping, EncoderError> {
    let centers = farthest_point_sample(points, m)?;
    Ok(ball_query(points, &centers, BALL_RADIUS, BALL_NEIGHBOURS))
}

pub struct SceneTokens {
    pub positions: Vec<Vec3>,
    pub features: Var,
    /// Per block, per head attention weights.
    pub attention: Vec<Vec<Var>>,
}

pub struct SceneEncoder {
    pub sa1: Linear,
    pub sa2: Linear,
    pub pe: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub ln_out: LayerNorm,
}

impl SceneEncoder {
    pub fn new(init: &mut Init, dim: usize, heads: usize, blocks: usize) -> Self {
        Self {
            sa1: Linear::new(init, "scene.sa1", 6, dim, true),
            sa2: Linear::new(init, "scene.sa2", dim, dim, true),
            pe: Linear::new(init, "scene.pe", PE_DIM, dim, false),
            blocks: (0..blocks).map(|i| EncoderBlock::new(init, &format!("scene.block{i}"), dim, heads, 2 * dim)).collect(),
            ln_out: LayerNorm::new(init, "scene.ln_out", dim),
        }
    }

    /// Set-abstraction tokenisation: each neighbour contributes its offset
    /// from the centre (in radius units) and its colour; a shared two-layer
    /// network is max-pooled per token.
    pub fn tokenize(&self, g: &mut Graph, ps: &ParamStore, xyz: &[Vec3], rgb: &[Vec3], grouping: &PointGrouping) -> Var {
        let rows = grouping.neighbours.len();
        let mut input = Array2::zeros((rows, 6));
        for (r, &i) in grouping.neighbours.iter().enumerate() {
            let c = xyz[grouping.centers[r / BALL_NEIGHBOURS]];
            for d in 0..3 {
                input[[r, d]] = (xyz[i][d] - c[d]) / BALL_RADIUS;
                input[[r, 3 + d]] = rgb[i][d];
            }
        }
        let x = g.constant(input);
        let h = self.sa1.forward(g, ps, x);
        let h = g.relu(h);
        let h = self.sa2.forward(g, ps, h);
        let h = g.relu(h);
        g.group_max(h, BALL_NEIGHBOURS, &grouping.valid)
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, xyz: &[Vec3], rgb: &[Vec3], grouping: &PointGrouping) -> SceneTokens {
        let positions: Vec<Vec3> = grouping.centers.iter().map(|&i| xyz[i]).collect();
        let tokens = self.tokenize(g, ps, xyz, rgb, grouping);
        let pe = g.constant(position_encoding(&positions));
        let pe = self.pe.forward(g, ps, pe);
        let mut x = g.add(tokens, pe);
        let mask = g.constant(radius_mask(&positions, MASK_RADIUS));
        let mut attention = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            let (y, probs) = blk.forward(g, ps, x, (i == 0).then_some(mask));
            x = y;
            attention.push(probs);
        }
        let features = self.ln_out.forward(g, ps, x);
        SceneTokens { positions, features, attention }
    }
}

/// 0 where two tokens are within `radius`, masked otherwise.
pub fn radius_mask(positions: &[Vec3], radius: f64) -> Array2<f64> {
    let n = positions.len();
    Array2::from_shape_fn((n, n), |(i, j)| if dist(&positions[i], &positions[j]) <= radius { 0.0 } else { MASKED })
}

/// Encoded sentences stacked row-wise: sentence `k` occupies rows
/// `spans[k].0 .. spans[k].0 + spans[k].1`, the first being the
/// sentence-level slot.
pub struct SentenceFeatures {
    pub rows: Var,
    pub spans: Vec<(usize, usize)>,
    pub attention: Vec<Vec<Var>>,
}

pub struct TextEncoder {
    pub vocab: usize,
    /// `vocab + 1` rows; the last is the sentence-start embedding.
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_out: LayerNorm,
}

impl TextEncoder {
    pub fn new(init: &mut Init, vocab: usize, dim: usize, heads: usize, layers: usize) -> Self {
        Self {
            vocab,
            embed: init.normal("text.embed", vocab + 1, dim, 1.0),
            pos: init.normal("text.pos", T_MAX + 1, dim, 0.1),
            blocks: (0..layers).map(|i| EncoderBlock::new(init, &format!("text.block{i}"), dim, heads, 2 * dim)).collect(),
            ln_out: LayerNorm::new(init, "text.ln_out", dim),
        }
    }

    /// Encodes sentences independently (block-diagonal attention) in one
    /// batched pass with shared weights.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, sentences: &[&[u32]]) -> Result<SentenceFeatures, EncoderError> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut spans = Vec::with_capacity(sentences.len());
        for s in sentences {
            if s.is_empty() {
                return Err(EncoderError::EmptySentence);
            }
            let len = s.len().min(T_MAX);
            spans.push((ids.len(), len + 1));
            ids.push(self.vocab);
            positions.push(0);
            for (t, &id) in s[..len].iter().enumerate() {
                if id as usize >= self.vocab {
                    return Err(EncoderError::TokenOutOfVocab { id, vocab: self.vocab });
                }
                ids.push(id as usize);
                positions.push(t + 1);
            }
        }
        let embed = g.param(ps, self.embed);
        let pos = g.param(ps, self.pos);
        let e = g.gather_rows(embed, &ids);
        let p = g.gather_rows(pos, &positions);
        let mut x = g.add(e, p);
        let lens: Vec<usize> = spans.iter().map(|s| s.1).collect();
        let mask = (spans.len() > 1).then(|| g.constant(block_diagonal_mask(&lens)));
        let mut attention = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, probs) = blk.forward(g, ps, x, mask);
            x = y;
            attention.push(probs);
        }
        Ok(SentenceFeatures { rows: self.ln_out.forward(g, ps, x), spans, attention })
    }
}

/// Replaces each ordinary token by the mask id with probability `p`.
pub fn erase_words<R: Rng + ?Sized>(tokens: &[u32], p: f64, rng: &mut R) -> Vec<u32> {
    if p <= 0.0 {
        return tokens.to_vec();
    }
    tokens
        .iter()
        .map(|&t| if t != PAD_ID && t != MASK_ID && rng.gen::<f64>() < p { MASK_ID } else { t })
        .collect()
}
