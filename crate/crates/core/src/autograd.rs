//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix (`Array2<f64>`); vectors are `1×n` rows or
//! `m×1` columns. A [`Graph`] records the forward computation and
//! [`Graph::backward`] walks it in reverse. Parameters live outside the
//! graph in a [`ParamStore`] and enter it through [`Graph::param`], which
//! deduplicates so each parameter maps to exactly one node.

use std::collections::{BTreeMap, HashMap};

use ndarray::{concatenate, s, Array2, Axis};

/// Additive logit used for masked attention keys. `exp` of this value
/// minus any realistic row maximum underflows to exactly zero.
pub const MASKED: f64 = -1.0e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
}

/// Named parameter tensors, addressable by id or by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name: that is a model
    /// construction bug, never a runtime condition.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, trainable: true });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Marks every parameter whose name starts with one of `prefixes` as
    /// trainable and freezes the rest.
    pub fn set_trainable_prefixes(&mut self, prefixes: &[&str]) {
        for e in &mut self.entries {
            e.trainable = prefixes.iter().any(|p| e.name.starts_with(p));
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    SumCols(Var),
    Reshape(Var),
    GroupMax { x: Var, argmax: Vec<Option<usize>> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// A recorded forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of every parameter that took part in the graph and
    /// received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.grads[v.0].as_ref().map(|g| (*p, g)))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(1024), params: HashMap::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A constant input. No gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that accumulates a gradient, for probing derivatives with
    /// respect to inputs that are not parameters.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Div(a, b), rg)
    }

    /// `m×n + 1×n`, broadcasting the row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1×n row");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `m×n ⊙ 1×n`, broadcasting the row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a 1×n row");
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    /// `m×n ⊙ m×1`, broadcasting the column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col expects an m×1 column");
        let value = self.value(a) * self.value(col);
        let rg = self.rg(a) || self.rg(col);
        self.push(value, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.zip_mut_with(self.value(b), |x, &y| *x = x.min(y));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Minimum(a, b), rg)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.zip_mut_with(self.value(b), |x, &y| *x = x.max(y));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Maximum(a, b), rg)
    }

    /// Row-wise softmax. Masking is done by the caller adding [`MASKED`]
    /// to the logits beforehand.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalisation with affine `1×n` gamma and beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (m, n) = xv.dim();
        let mut xhat = Array2::<f64>::zeros((m, n));
        let mut inv_std = Vec::with_capacity(m);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n as f64;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * inv;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|v| self.rg(*v));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = parts.iter().any(|v| self.rg(*v));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), idx);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums across columns: `m×n → m×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = v.sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape: element count");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Max-pools consecutive groups of `group` rows, skipping rows whose
    /// `valid` flag is false. Groups without a valid row yield zeros.
    pub fn group_max(&mut self, x: Var, group: usize, valid: &[bool]) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert_eq!(rows % group, 0, "group_max: rows not divisible by group");
        assert_eq!(valid.len(), rows);
        let groups = rows / group;
        let mut value = Array2::<f64>::zeros((groups, cols));
        let mut argmax = vec![None; groups * cols];
        for gi in 0..groups {
            for c in 0..cols {
                let mut best: Option<(usize, f64)> = None;
                for r in gi * group..(gi + 1) * group {
                    if !valid[r] {
                        continue;
                    }
                    let v = xv[[r, c]];
                    if best.map_or(true, |(_, b)| v > b) {
                        best = Some((r, v));
                    }
                }
                if let Some((r, v)) = best {
                    value[[gi, c]] = v;
                    argmax[gi * cols + c] = Some(r);
                }
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::GroupMax { x, argmax }, rg)
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones((1, 1)));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(p, v)| (*p, *v)).collect();
        params.sort();
        Gradients { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.dot(&val(*b).t()));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.dot(val(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.t().dot(val(*a)));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g * val(*b));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g * val(*a));
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g / val(*b));
                }
                if self.rg(*b) {
                    let bv = val(*b);
                    let d = -(g * val(*a)) / (bv * bv);
                    self.acc(grads, *b, d);
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*row) {
                    self.acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g * val(*row));
                }
                if self.rg(*row) {
                    let d = (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *row, d);
                }
            }
            Op::MulCol(a, col) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g * val(*col));
                }
                if self.rg(*col) {
                    let d = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.acc(grads, *col, d);
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g * *k),
            Op::Offset(a) => self.acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                d.zip_mut_with(&node.value, |d, &y| *d *= y * (1.0 - y));
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                d.zip_mut_with(&node.value, |d, &y| *d *= 1.0 - y * y);
                self.acc(grads, *a, d);
            }
            Op::Softplus(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |d, &x| *d *= sigmoid(x));
                self.acc(grads, *a, d);
            }
            Op::Exp(a) => self.acc(grads, *a, g * &node.value),
            Op::Log(a) => self.acc(grads, *a, g / val(*a)),
            Op::Abs(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |d, &x| {
                    *d *= if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (val(*a), val(*b));
                let mut da = g.clone();
                let mut db = g.clone();
                for ((x, y), (ga, gb)) in av.iter().zip(bv.iter()).zip(da.iter_mut().zip(db.iter_mut())) {
                    let pick_a = if is_min { x <= y } else { x >= y };
                    if pick_a {
                        *gb = 0.0;
                    } else {
                        *ga = 0.0;
                    }
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                if self.rg(*beta) {
                    self.acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*gamma) {
                    self.acc(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let gxhat = g * val(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut d = Array2::<f64>::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let gr = gxhat.row(r);
                        let xr = xhat.row(r);
                        let sum_g = gr.sum();
                        let sum_gx = gr.dot(&xr);
                        let inv = inv_std[r];
                        for c in 0..xhat.ncols() {
                            d[[r, c]] = inv / n * (n * gr[c] - sum_g - xr[c] * sum_gx);
                        }
                    }
                    self.acc(grads, *x, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.rg(*p) {
                        self.acc(grads, *p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    if self.rg(*p) {
                        self.acc(grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::<f64>::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.acc(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::<f64>::zeros(self.shape(*a));
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.acc(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Array2::<f64>::zeros(self.shape(*a));
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(r);
                }
                self.acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let d = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.acc(grads, *a, d);
            }
            Op::SumCols(a) => {
                let (m, n) = self.shape(*a);
                let mut d = Array2::<f64>::zeros((m, n));
                for r in 0..m {
                    d.row_mut(r).fill(g[[r, 0]]);
                }
                self.acc(grads, *a, d);
            }
            Op::Reshape(a) => {
                let flat: Vec<f64> = g.iter().copied().collect();
                let d = Array2::from_shape_vec(self.shape(*a), flat).expect("reshape grad");
                self.acc(grads, *a, d);
            }
            Op::GroupMax { x, argmax } => {
                let mut d = Array2::<f64>::zeros(self.shape(*x));
                let cols = g.ncols();
                for (k, src) in argmax.iter().enumerate() {
                    if let Some(r) = src {
                        d[[*r, k % cols]] += g[[k / cols, k % cols]];
                    }
                }
                self.acc(grads, *x, d);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}
