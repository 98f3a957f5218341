//! Layers built on the autograd tape: linear maps, layer norm, feed-forward
//! blocks and multi-head attention with an additive logit bias.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::geometry::Vec3;

/// Registers freshly initialised parameters in a store.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let n = Normal::new(0.0, std).expect("finite std");
        let value = Array2::from_shape_fn((rows, cols), |_| n.sample(&mut self.rng));
        self.store.add(name, value)
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let value = Array2::from_shape_fn((rows, cols), |_| self.rng.gen_range(-bound..bound));
        self.store.add(name, value)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Array2::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Array2::ones((rows, cols)))
    }
}

/// `x W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let std = (2.0 / (input + output) as f64).sqrt();
        Self::with_std(init, name, input, output, bias, std)
    }

    pub fn with_std(init: &mut Init, name: &str, input: usize, output: usize, bias: bool, std: f64) -> Self {
        let w = init.normal(&format!("{name}.w"), input, output, std);
        let b = bias.then(|| init.zeros(&format!("{name}.b"), 1, output));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(ps, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self { gamma: init.ones(&format!("{name}.gamma"), 1, dim), beta: init.zeros(&format!("{name}.beta"), 1, dim) }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn {
    pub fn new(init: &mut Init, name: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            l1: Linear::new(init, &format!("{name}.l1"), input, hidden, true),
            l2: Linear::new(init, &format!("{name}.l2"), hidden, output, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let h = self.l1.forward(g, ps, x);
        let h = g.relu(h);
        self.l2.forward(g, ps, h)
    }
}

pub struct AttnOut {
    pub out: Var,
    /// Per-head attention weights, `N_Q×N_K` each.
    pub probs: Vec<Var>,
}

/// Multi-head scaled dot-product attention. An optional `N_Q×N_K` bias is
/// added to the logits of every head.
#[derive(Clone, Debug)]
pub struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Mha {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "model width must divide into heads");
        Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(init, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(init, &format!("{name}.v"), dim, dim, true),
            o: Linear::new(init, &format!("{name}.o"), dim, dim, true),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, xq: Var, xk: Var, xv: Var, bias: Option<Var>) -> AttnOut {
        let q = self.q.forward(g, ps, xq);
        let k = self.k.forward(g, ps, xk);
        let v = self.v.forward(g, ps, xv);
        let dim = g.shape(q).1;
        let d = dim / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * d, (h + 1) * d);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, lo, hi), g.slice_cols(k, lo, hi), g.slice_cols(v, lo, hi))
            };
            let logits = g.matmul_t(qh, kh);
            let mut logits = g.scale(logits, scale);
            if let Some(b) = bias {
                logits = g.add(logits, b);
            }
            let p = g.softmax_rows(logits);
            outs.push(g.matmul(p, vh));
            probs.push(p);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        AttnOut { out: self.o.forward(g, ps, cat), probs }
    }
}

/// Pre-norm cross-attention without a residual: `MHA(LN(q), LN(kv), LN(kv))`.
#[derive(Clone, Debug)]
pub struct CrossAttn {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub mha: Mha,
}

impl CrossAttn {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            ln_q: LayerNorm::new(init, &format!("{name}.ln_q"), dim),
            ln_kv: LayerNorm::new(init, &format!("{name}.ln_kv"), dim),
            mha: Mha::new(init, &format!("{name}.mha"), dim, heads),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, q: Var, kv: Var, bias: Option<Var>) -> AttnOut {
        let q = self.ln_q.forward(g, ps, q);
        let kv = self.ln_kv.forward(g, ps, kv);
        self.mha.forward(g, ps, q, kv, kv, bias)
    }
}

/// Pre-norm transformer encoder block: self-attention then FFN, both
/// residual.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Mha,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

impl EncoderBlock {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim),
            attn: Mha::new(init, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim),
            ffn: Ffn::new(init, &format!("{name}.ffn"), dim, hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, mask: Option<Var>) -> (Var, Vec<Var>) {
        let h = self.ln1.forward(g, ps, x);
        let a = self.attn.forward(g, ps, h, h, h, mask);
        let x = g.add(x, a.out);
        let h = self.ln2.forward(g, ps, x);
        let f = self.ffn.forward(g, ps, h);
        (g.add(x, f), a.probs)
    }
}

/// Fixed sinusoidal features of 3-D positions: for each axis and each of
/// `n_freq` octaves, `sin` and `cos` of `2π x / λ_k` with
/// `λ_k = base_wavelength / 2^k`. Output is `N × 6·n_freq`.
pub fn fourier_features(points: &[Vec3], n_freq: usize, base_wavelength: f64) -> Array2<f64> {
    let mut out = Array2::zeros((points.len(), 6 * n_freq));
    for (i, p) in points.iter().enumerate() {
        for (a, x) in p.iter().enumerate() {
            for k in 0..n_freq {
                let w = std::f64::consts::TAU * (1u64 << k) as f64 / base_wavelength;
                let col = (a * n_freq + k) * 2;
                out[[i, col]] = (w * x).sin();
                out[[i, col + 1]] = (w * x).cos();
            }
        }
    }
    out
}

/// Constant `rows×cols` matrix that is 0 inside the listed diagonal blocks
/// and masked elsewhere, so attention stays within each block.
pub fn block_diagonal_mask(blocks: &[usize]) -> Array2<f64> {
    let n: usize = blocks.iter().sum();
    let mut m = Array2::from_elem((n, n), crate::autograd::MASKED);
    let mut start = 0;
    for &b in blocks {
        m.slice_mut(ndarray::s![start..start + b, start..start + b]).fill(0.0);
        start += b;
    }
    m
}
