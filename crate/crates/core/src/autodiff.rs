//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] walks
//! the record in reverse and returns a gradient for every node that depends
//! on a parameter. Operations stay infallible: a non-finite result is noted
//! on the tape and surfaced by [`Tape::nonfinite_op`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

/// Named learnable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name; layouts are built once by the model.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update((e.value.rows() as u64).to_le_bytes());
            h.update((e.value.cols() as u64).to_le_bytes());
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Accumulated gradients, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    grads: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.rows(), e.value.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Boolean attention mask: `allowed[i * keys + j]` says whether query `i`
/// may read key `j`. Every query row must allow at least one key.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(queries: usize, keys: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(allowed.len(), queries * keys, "mask length mismatch");
        for i in 0..queries {
            assert!(
                allowed[i * keys..(i + 1) * keys].iter().any(|&a| a),
                "mask row {i} allows no keys"
            );
        }
        Self {
            queries,
            keys,
            allowed,
        }
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.keys + j]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Injected(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    nonfinite: Option<&'static str>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            nonfinite: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First operation that produced a NaN or infinity, if any.
    pub fn nonfinite_op(&self) -> Option<&'static str> {
        self.nonfinite
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Leaf for a stored parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.params.value(id).clone();
        let v = self.push(value, Op::Leaf, true, "param");
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copy of `v` cut off from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng, "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulBt(a, b), ng, "matmul_bt")
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, what: &str) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "{what} shape mismatch");
        Tensor::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p + q, "add");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p - q, "sub");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p * q, "mul");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng, "mul")
    }

    /// Adds the `1×cols` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, r) = (self.value(a), self.value(b));
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(x.cols(), r.cols(), "add_row width mismatch");
        let mut value = x.clone();
        let cols = x.cols();
        for row in value.data_mut().chunks_mut(cols.max(1)) {
            for (o, &bv) in row.iter_mut().zip(r.data()) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AddRow(a, b), ng, "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng, "scale")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| {
            let u = GELU_C * (x + 0.044_715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng, "gelu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng, "sigmoid")
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1×d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * r;
            }
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
            "layer_norm",
        )
    }

    /// Multi-head scaled dot-product attention. `q: n×d`, `k, v: m×d`.
    ///
    /// Masked keys are skipped outright, so a query's output is computed
    /// from exactly the same floating-point operations whether or not the
    /// masked keys exist.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AttnMask>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qv.rows(), qv.cols());
        let m = kv.rows();
        assert_eq!(kv.cols(), d, "attention key width mismatch");
        assert_eq!(vv.shape(), [m, d], "attention value shape mismatch");
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        if let Some(mk) = mask {
            assert_eq!((mk.queries(), mk.keys()), (n, m), "attention mask shape mismatch");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = Tensor::zeros(n, d);
        let mut scores = vec![0.0; m];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let qi = &qv.row(i)[cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for j in 0..m {
                    if mask.is_some_and(|mk| !mk.allowed(i, j)) {
                        continue;
                    }
                    let s = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut denom = 0.0;
                let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                for j in 0..m {
                    if mask.is_some_and(|mk| !mk.allowed(i, j)) {
                        continue;
                    }
                    let e = (scores[j] - max).exp();
                    p[j] = e;
                    denom += e;
                }
                let o = &mut out.row_mut(i)[cols.clone()];
                for j in 0..m {
                    if mask.is_some_and(|mk| !mk.allowed(i, j)) {
                        continue;
                    }
                    p[j] /= denom;
                    let w = p[j];
                    for (ov, &vx) in o.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *ov += w * vx;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
            "attention",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
            "concat_rows",
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows(), "slice_rows out of range");
        let cols = t.cols();
        let value = Tensor::from_vec(len, cols, t.data()[start * cols..(start + len) * cols].to_vec());
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng, "slice_rows")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_vec(idx.len(), cols, data);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), ng, "gather_rows")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng, "sum")
    }

    /// Scalar node with an externally computed value and gradient
    /// `d value / d a`. Loss functions with hand-derived gradients enter
    /// the graph this way.
    pub fn inject(&mut self, a: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.value(a).shape(), "injected gradient shape mismatch");
        let ng = self.ng(a);
        self.push(Tensor::scalar(value), Op::Injected(a, grad), ng, "injected_loss")
    }

    /// `x · w + b` for `w: in×out`, `b: 1×out`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let wv = self.param(w);
        let bv = self.param(b);
        let y = self.matmul(x, wv);
        self.add_row(y, bv)
    }

    /// Reverse pass from the scalar `root`. The result holds `d root / d node`
    /// for every node that needs a gradient.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), [1, 1], "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_bt(self.value(*b)), grads);
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).matmul_at(g), grads);
                }
            }
            Op::MatMulBt(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                if self.ng(*a) {
                    acc(*a, g.matmul(self.value(*b)), grads);
                }
                if self.ng(*b) {
                    acc(*b, g.matmul_at(self.value(*a)), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, hadamard(g, y), grads);
                }
                if self.ng(*b) {
                    acc(*b, hadamard(g, x), grads);
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone(), grads);
                if self.ng(*b) {
                    let mut col = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (c, &v) in col.data_mut().iter_mut().zip(g.row(i)) {
                            *c += v;
                        }
                    }
                    acc(*b, col, grads);
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s), grads),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = Tensor::from_vec(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| {
                            let u = GELU_C * (x + 0.044_715 * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
                            gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect(),
                );
                acc(*a, d, grads);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = Tensor::from_vec(
                    y.rows(),
                    y.cols(),
                    y.data().iter().zip(g.data()).map(|(&s, &gv)| gv * s * (1.0 - s)).collect(),
                );
                acc(*a, d, grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let (n, d) = (xhat.rows(), xhat.cols());
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = Tensor::zeros(1, d);
                    let mut db = Tensor::zeros(1, d);
                    for i in 0..n {
                        for j in 0..d {
                            dg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                            db.data_mut()[j] += g.get(i, j);
                        }
                    }
                    acc(*gamma, dg, grads);
                    acc(*beta, db, grads);
                }
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(n, d);
                    for i in 0..n {
                        let xh = xhat.row(i);
                        let gi = g.row(i);
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gi[j] * gam[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        let out = dx.row_mut(i);
                        for j in 0..d {
                            let dxh = gi[j] * gam[j];
                            out[j] = rstd[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    acc(*x, dx, grads);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = (qv.rows(), qv.cols());
                let m = kv.rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(n, d);
                let mut dk = Tensor::zeros(m, d);
                let mut dv = Tensor::zeros(m, d);
                let mut dp = vec![0.0; m];
                for h in 0..*heads {
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..n {
                        let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                        let gi = &g.row(i)[cols.clone()];
                        let mut inner = 0.0;
                        for j in 0..m {
                            if p[j] == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            dp[j] = dot(gi, &vv.row(j)[cols.clone()]);
                            inner += p[j] * dp[j];
                            for (o, &gx) in dv.row_mut(j)[cols.clone()].iter_mut().zip(gi) {
                                *o += p[j] * gx;
                            }
                        }
                        let qi = &qv.row(i)[cols.clone()];
                        for j in 0..m {
                            if p[j] == 0.0 {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - inner) * scale;
                            let kj = &kv.row(j)[cols.clone()];
                            for (o, &kx) in dq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                                *o += ds * kx;
                            }
                            for (o, &qx) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                                *o += ds * qx;
                            }
                        }
                    }
                }
                acc(*q, dq, grads);
                acc(*k, dk, grads);
                acc(*v, dv, grads);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut start = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.ng(p) {
                        let piece = Tensor::from_vec(
                            r,
                            cols,
                            g.data()[start * cols..(start + r) * cols].to_vec(),
                        );
                        acc(p, piece, grads);
                    }
                    start += r;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                let cols = src.cols();
                d.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                acc(*a, d, grads);
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &gv) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                acc(*a, d, grads);
            }
            Op::Sum(a) => {
                let s = g.item();
                let src = self.value(*a);
                acc(*a, Tensor::filled(src.rows(), src.cols(), s), grads);
            }
            Op::Injected(a, local) => {
                let s = g.item();
                acc(*a, local.map(|x| x * s), grads);
            }
        }
    }

    /// Adds the parameter gradients in `grads` into `into`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, into: &mut Grads) {
        for (pid, slot) in self.param_vars.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = &grads.grads[v.0] {
                    into.grads[pid].add_assign(g);
                }
            }
        }
    }
}

/// Output of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-5, 1.0 - 1e-5);
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| s.register(*n, t.clone()))
            .collect();
        (s, ids)
    }

    fn lcg_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut x = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| {
                    x ^= x << 13;
                    x ^= x >> 7;
                    x ^= x << 17;
                    (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
                })
                .collect(),
        )
    }

    /// Central-difference check of `f` over every scalar in every parameter.
    fn check(store: &ParamStore, f: impl Fn(&mut Tape) -> Var) {
        let mut tape = Tape::new(store);
        let root = f(&mut tape);
        let grads = tape.backward(root);
        let mut acc = Grads::zeros_like(store);
        tape.accumulate_param_grads(&grads, &mut acc);
        let h = 1e-6;
        for id in store.ids() {
            for k in 0..store.value(id).len() {
                let eval = |delta: f64| {
                    let mut s = store.clone();
                    s.value_mut(id).data_mut()[k] += delta;
                    let mut t = Tape::new(&s);
                    let r = f(&mut t);
                    t.value(r).item()
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = acc.get(id).data()[k];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel < 1e-5, "{} [{k}]: analytic {ana} vs numeric {num}", store.name(id));
            }
        }
    }

    #[test]
    fn gradients_of_elementwise_and_matmul_ops() {
        let (store, ids) = store_with(&[
            ("a", lcg_tensor(3, 4, 1)),
            ("b", lcg_tensor(4, 2, 2)),
            ("c", lcg_tensor(3, 2, 3)),
            ("r", lcg_tensor(1, 2, 4)),
        ]);
        check(&store, |t| {
            let a = t.param(ids[0]);
            let b = t.param(ids[1]);
            let c = t.param(ids[2]);
            let r = t.param(ids[3]);
            let ab = t.matmul(a, b);
            let x = t.add_row(ab, r);
            let y = t.gelu(x);
            let z = t.mul(y, c);
            let s = t.sigmoid(z);
            let w = t.sub(s, c);
            let bt = t.matmul_bt(w, c);
            let q = t.scale(bt, 0.7);
            t.sum(q)
        });
    }

    #[test]
    fn gradients_of_layer_norm_and_row_ops() {
        let (store, ids) = store_with(&[
            ("x", lcg_tensor(4, 6, 5)),
            ("g", lcg_tensor(1, 6, 6)),
            ("b", lcg_tensor(1, 6, 7)),
            ("w", lcg_tensor(6, 6, 8)),
        ]);
        check(&store, |t| {
            let x = t.param(ids[0]);
            let g = t.param(ids[1]);
            let b = t.param(ids[2]);
            let w = t.param(ids[3]);
            let n = t.layer_norm(x, g, b);
            let top = t.slice_rows(n, 1, 2);
            let picked = t.gather_rows(n, &[3, 0, 3]);
            let cat = t.concat_rows(&[top, picked]);
            let y = t.matmul(cat, w);
            let y2 = t.mul(y, y);
            t.sum(y2)
        });
    }

    #[test]
    fn gradients_of_masked_attention() {
        let (store, ids) = store_with(&[
            ("q", lcg_tensor(5, 8, 9)),
            ("k", lcg_tensor(6, 8, 10)),
            ("v", lcg_tensor(6, 8, 11)),
            ("w", lcg_tensor(5, 8, 12)),
        ]);
        let allowed = (0..30).map(|i| (i % 6) <= (i / 6) || i % 7 == 0).collect();
        let mask = AttnMask::new(5, 6, allowed);
        check(&store, |t| {
            let q = t.param(ids[0]);
            let k = t.param(ids[1]);
            let v = t.param(ids[2]);
            let w = t.param(ids[3]);
            let a = t.attention(q, k, v, 2, Some(&mask));
            let y = t.mul(a, w);
            t.sum(y)
        });
    }

    #[test]
    fn injected_gradient_is_scaled_by_upstream() {
        let (store, ids) = store_with(&[("x", lcg_tensor(2, 2, 13))]);
        let mut t = Tape::new(&store);
        let x = t.param(ids[0]);
        let l = t.inject(x, 3.0, Tensor::filled(2, 2, 0.5));
        let l2 = t.scale(l, 4.0);
        let g = t.backward(l2);
        let mut acc = Grads::zeros_like(&store);
        t.accumulate_param_grads(&g, &mut acc);
        assert_eq!(acc.get(ids[0]).data(), &[2.0; 4]);
    }

    #[test]
    fn masked_keys_do_not_change_unmasked_rows() {
        let (store, _) = store_with(&[]);
        let q = lcg_tensor(3, 4, 20);
        let k = lcg_tensor(5, 4, 21);
        let v = lcg_tensor(5, 4, 22);
        let mut t = Tape::new(&store);
        let (qa, ka, va) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let allowed = (0..15).map(|i| i % 5 < 3).collect();
        let mask = AttnMask::new(3, 5, allowed);
        let full = t.attention(qa, ka, va, 2, Some(&mask));
        let ks = t.slice_rows(ka, 0, 3);
        let vs = t.slice_rows(va, 0, 3);
        let short = t.attention(qa, ks, vs, 2, None);
        assert_eq!(t.value(full), t.value(short));
    }

    #[test]
    fn nonfinite_values_are_flagged() {
        let (store, _) = store_with(&[]);
        let mut t = Tape::new(&store);
        let a = t.constant(Tensor::scalar(1e300));
        let b = t.mul(a, a);
        assert!(t.value(b).item().is_infinite());
        assert_eq!(t.nonfinite_op(), Some("mul"));
    }
}
