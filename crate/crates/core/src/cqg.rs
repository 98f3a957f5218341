//! Contextual query generation: aggregate the paragraph into a compact set,
//! fuse it with the scene through stacked co-attention, and propagate the
//! fused context back into per-sentence queries.

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::encoders::SentenceFeatures;
use crate::nn::{AttnOut, CrossAttn, Init, Linear};
use crate::world::K_MAX;

pub const CO_ATTN_STAGES: usize = 3;

/// Test switches. Both default to off.
#[derive(Clone, Copy, Debug, Default)]
pub struct CqgHooks {
    /// Drop the sentence positional embedding.
    pub zero_position: bool,
    /// Replace the propagation cross-attention output by zeros.
    pub zero_propagation: bool,
}

/// One bidirectional co-attention stage.
pub struct CoAttnStage {
    pub w_set: Linear,
    pub w_enc: Linear,
    pub wh_set: Linear,
    pub wh_enc: Linear,
}

pub struct CoAttnTrace {
    /// `A_i`, `N_s×M` each.
    pub logits: Vec<Var>,
    pub set_probs: Vec<Var>,
    pub enc_probs: Vec<Var>,
}

pub struct CqgOut {
    /// Contextual queries for all sentences, stacked like the input rows.
    pub queries: Var,
    pub f_set: Var,
    pub f_set_fused: Var,
    pub aggregate: AttnOut,
    pub co_attn: CoAttnTrace,
    pub propagate: AttnOut,
}

pub struct ContextQueryGen {
    pub w_l: Linear,
    pub e_p: ParamId,
    pub q_set: ParamId,
    pub aggregate: CrossAttn,
    pub stages: Vec<CoAttnStage>,
    pub w_f: Linear,
    pub propagate: CrossAttn,
    pub head_dim: usize,
}

impl ContextQueryGen {
    pub fn new(init: &mut Init, text_dim: usize, dim: usize, heads: usize, n_set: usize) -> Self {
        let d = dim / heads;
        let stages = (0..CO_ATTN_STAGES)
            .map(|i| CoAttnStage {
                w_set: Linear::new(init, &format!("cqg.co{i}.w_set"), dim, d, false),
                w_enc: Linear::new(init, &format!("cqg.co{i}.w_enc"), dim, d, false),
                wh_set: Linear::new(init, &format!("cqg.co{i}.wh_set"), d, dim, false),
                wh_enc: Linear::new(init, &format!("cqg.co{i}.wh_enc"), d, dim, false),
            })
            .collect();
        Self {
            w_l: Linear::new(init, "cqg.w_l", text_dim, dim, false),
            e_p: init.normal("cqg.e_p", K_MAX, dim, 0.1),
            q_set: init.normal("cqg.q_set", n_set, dim, 1.0),
            aggregate: CrossAttn::new(init, "cqg.aggregate", dim, heads),
            stages,
            w_f: Linear::new(init, "cqg.w_f", (CO_ATTN_STAGES + 1) * dim, dim, false),
            propagate: CrossAttn::new(init, "cqg.propagate", dim, heads),
            head_dim: d,
        }
    }

    /// `L' = L W_l + e_p`, then `F_set = CrossAttn(Q_set, L', L')`. Every
    /// row of sentence `k` receives the positional embedding of paragraph
    /// slot `k`.
    pub fn aggregate(&self, g: &mut Graph, ps: &ParamStore, text: &SentenceFeatures, hooks: CqgHooks) -> (Var, AttnOut) {
        let mut lp = self.w_l.forward(g, ps, text.rows);
        if !hooks.zero_position {
            let slots: Vec<usize> = text.spans.iter().enumerate().flat_map(|(k, &(_, len))| std::iter::repeat(k.min(K_MAX - 1)).take(len)).collect();
            let e_p = g.param(ps, self.e_p);
            let pos = g.gather_rows(e_p, &slots);
            lp = g.add(lp, pos);
        }
        let q_set = g.param(ps, self.q_set);
        let a = self.aggregate.forward(g, ps, q_set, lp, None);
        (a.out, a)
    }

    /// Stacked co-attention. Language side:
    /// `F_set^{i+1} = softmax(A_i) (F_enc^i W_enc^i) Ŵ_enc^i`; scene side
    /// symmetric. Returns `[F_set^0; …; F_set^3] W_f`.
    pub fn co_attend(&self, g: &mut Graph, ps: &ParamStore, f_set: Var, f_enc: Var) -> (Var, CoAttnTrace) {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut set = f_set;
        let mut enc = f_enc;
        let mut sets = vec![f_set];
        let mut trace = CoAttnTrace { logits: vec![], set_probs: vec![], enc_probs: vec![] };
        for st in &self.stages {
            let ps_ = st.w_set.forward(g, ps, set);
            let pe = st.w_enc.forward(g, ps, enc);
            let a = g.matmul_t(ps_, pe);
            let a = g.scale(a, scale);
            let p_set = g.softmax_rows(a);
            let at = g.transpose(a);
            let p_enc = g.softmax_rows(at);
            let ns = g.matmul(p_set, pe);
            let ne = g.matmul(p_enc, ps_);
            set = st.wh_enc.forward(g, ps, ns);
            enc = st.wh_set.forward(g, ps, ne);
            sets.push(set);
            trace.logits.push(a);
            trace.set_probs.push(p_set);
            trace.enc_probs.push(p_enc);
        }
        let cat = g.concat_cols(&sets);
        (self.w_f.forward(g, ps, cat), trace)
    }

    /// `Q = CrossAttn(L', F'_set, F'_set) + L'`.
    pub fn propagate(&self, g: &mut Graph, ps: &ParamStore, l_prime: Var, fused: Var, hooks: CqgHooks) -> (Var, AttnOut) {
        let a = self.propagate.forward(g, ps, l_prime, fused, None);
        if hooks.zero_propagation {
            return (l_prime, a);
        }
        (g.add(a.out, l_prime), a)
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, text: &SentenceFeatures, l_prime: Var, f_enc: Var, hooks: CqgHooks) -> CqgOut {
        let (f_set, aggregate) = self.aggregate(g, ps, text, hooks);
        let (fused, co_attn) = self.co_attend(g, ps, f_set, f_enc);
        let (queries, propagate) = self.propagate(g, ps, l_prime, fused, hooks);
        CqgOut { queries, f_set, f_set_fused: fused, aggregate, co_attn, propagate }
    }
}
