//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameter
//! leaves borrow their values from a [`ParamStore`]; frozen parameters are
//! leaves without gradient, and any subgraph that only depends on frozen
//! parameters and inputs is skipped during the backward pass.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    MeanRows(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Conv3d { x: Var, w: Var, spec: Conv3dSpec },
    GlobalAvgPool(Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    NllProb { p: Var, label: usize, eps: f64 },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A computation tape over `f64` tensors.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.value(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on tensor of shape {:?}", t.shape());
        t.data()[0]
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let trainable = self.store.is_trainable(id);
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out).unwrap(), Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out).unwrap(), Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(ta.shape(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        assert_eq!(self.value(b).len(), n, "add_row width mismatch");
        let mut out = self.value(a).data().to_vec();
        let bias = self.value(b).data();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out).unwrap(), Op::AddRow(a, b), ng)
    }

    /// Multiplies every row of an `[m, n]` matrix elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, s: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        assert_eq!(self.value(s).len(), n, "mul_row width mismatch");
        let mut out = self.value(a).data().to_vec();
        let scale = self.value(s).data();
        for row in out.chunks_mut(n) {
            for (o, sv) in row.iter_mut().zip(scale) {
                *o *= sv;
            }
        }
        let ng = self.ng(a) || self.ng(s);
        self.push(Tensor::from_vec(&[m, n], out).unwrap(), Op::MulRow(a, s), ng)
    }

    /// Adds a per-channel bias to a `[C, ...]` tensor.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let tx = self.value(x);
        let c = tx.shape()[0];
        assert_eq!(self.value(b).len(), c, "add_channel channel mismatch");
        let spatial = tx.len() / c;
        let mut out = tx.data().to_vec();
        let bias = self.value(b).data();
        for (ch, chunk) in out.chunks_mut(spatial).enumerate() {
            for o in chunk {
                *o += bias[ch];
            }
        }
        let shape = tx.shape().to_vec();
        let ng = self.ng(x) || self.ng(b);
        self.push(Tensor::from_vec(&shape, out).unwrap(), Op::AddChannel(x, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let t = Tensor::from_vec(ta.shape(), data).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::from_vec(ta.shape(), data).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let t = Tensor::from_vec(ta.shape(), data).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[m, n], out).unwrap(), Op::SoftmaxRows(a), ng)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let (m, n) = self.value(x).dims2();
        let mut out = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_vec(&[m, n], out).unwrap(),
            Op::LayerNormRows { x, inv_std },
            ng,
        )
    }

    /// Mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let ng = self.ng(a);
        self.push(Tensor::row(out), Op::MeanRows(a), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(x).dims2();
        assert!(start + len <= n, "slice_cols out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for row in src.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[m, len], out).unwrap(), Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pm, pn) = self.value(*p).dims2();
                assert_eq!(pm, m, "concat_cols row mismatch");
                pn
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(
            Tensor::from_vec(&[m, total], out).unwrap(),
            Op::ConcatCols(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).dims2().1;
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            let (pm, pn) = self.value(*p).dims2();
            assert_eq!(pn, n, "concat_rows width mismatch");
            m += pm;
            out.extend_from_slice(self.value(*p).data());
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(
            Tensor::from_vec(&[m, n], out).unwrap(),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape).expect("reshape size mismatch");
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// 3D convolution of `x: [C, D, H, W]` with `w: [O, C, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, spec: Conv3dSpec) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        let geo = ConvGeometry::new(tx.shape(), tw.shape(), spec);
        let mut out = vec![0.0; geo.out_len()];
        conv3d_forward(&geo, tx.data(), tw.data(), &mut out);
        let ng = self.ng(x) || self.ng(w);
        let shape = [geo.o, geo.od, geo.oh, geo.ow];
        self.push(Tensor::from_vec(&shape, out).unwrap(), Op::Conv3d { x, w, spec }, ng)
    }

    /// Mean over all non-channel axes: `[C, ...] -> [1, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.shape()[0];
        let spatial = tx.len() / c;
        let out: Vec<f64> = tx
            .data()
            .chunks(spatial)
            .map(|ch| ch.iter().sum::<f64>() / spatial as f64)
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::row(out), Op::GlobalAvgPool(x), ng)
    }

    /// Cross-entropy `-log softmax(logits)[label]` of a single `[1, C]` row,
    /// computed with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let z = self.value(logits).data();
        assert!(label < z.len(), "label {label} out of range for {} logits", z.len());
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let loss = lse - z[label];
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        let ng = self.ng(logits);
        self.push(
            Tensor::from_vec(&[1, 1], vec![loss]).unwrap(),
            Op::CrossEntropy { logits, label, probs },
            ng,
        )
    }

    /// `-log(max(p[label], eps))` for a probability row `p`.
    pub fn nll_prob(&mut self, p: Var, label: usize, eps: f64) -> Var {
        let pv = self.value(p).data()[label];
        let loss = -pv.max(eps).ln();
        let ng = self.ng(p);
        self.push(
            Tensor::from_vec(&[1, 1], vec![loss]).unwrap(),
            Op::NllProb { p, label, eps },
            ng,
        )
    }

    /// Runs the backward pass from a scalar node and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut out = Gradients::new(self.store);
        self.backward_into(loss, &mut out);
        out
    }

    /// Like [`Graph::backward`], accumulating into an existing buffer.
    pub fn backward_into(&self, loss: Var, out: &mut Gradients) {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar node");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads, out);
        }
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
        let shape = self.value(v).shape().to_vec();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape))
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    gemm_nt(gd, bv, self.buf(grads, *a).data_mut(), m, n, k);
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    gemm_tn(av, gd, self.buf(grads, *b).data_mut(), m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().0;
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    gemm_nn(gd, bv, self.buf(grads, *a).data_mut(), m, n, k);
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    gemm_tn(gd, av, self.buf(grads, *b).data_mut(), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.ng(*v) {
                        self.buf(grads, *v).add_assign(g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if self.ng(*a) {
                    self.buf(grads, *a).add_assign(g);
                }
                if self.ng(*b) {
                    let n = self.value(*b).len();
                    let gb = self.buf(grads, *b).data_mut();
                    for row in gd.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MulRow(a, s) => {
                let n = self.value(*s).len();
                if self.ng(*a) {
                    let sv = self.value(*s).data();
                    let ga = self.buf(grads, *a).data_mut();
                    for (grow, orow) in gd.chunks(n).zip(ga.chunks_mut(n)) {
                        for j in 0..n {
                            orow[j] += grow[j] * sv[j];
                        }
                    }
                }
                if self.ng(*s) {
                    let av = self.value(*a).data();
                    let gs = self.buf(grads, *s).data_mut();
                    for (grow, arow) in gd.chunks(n).zip(av.chunks(n)) {
                        for j in 0..n {
                            gs[j] += grow[j] * arow[j];
                        }
                    }
                }
            }
            Op::AddChannel(x, b) => {
                if self.ng(*x) {
                    self.buf(grads, *x).add_assign(g);
                }
                if self.ng(*b) {
                    let c = self.value(*b).len();
                    let spatial = gd.len() / c;
                    let gb = self.buf(grads, *b).data_mut();
                    for (ch, chunk) in gd.chunks(spatial).enumerate() {
                        gb[ch] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.ng(*a) {
                    let ga = self.buf(grads, *a).data_mut();
                    for (o, v) in ga.iter_mut().zip(gd) {
                        *o += v * s;
                    }
                }
            }
            Op::Relu(a) => {
                if self.ng(*a) {
                    let y = node.value.as_ref().unwrap().data();
                    let ga = self.buf(grads, *a).data_mut();
                    for ((o, v), yv) in ga.iter_mut().zip(gd).zip(y) {
                        if *yv > 0.0 {
                            *o += v;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let x = self.value(*a).data().to_vec();
                    let ga = self.buf(grads, *a).data_mut();
                    for ((o, v), xv) in ga.iter_mut().zip(gd).zip(&x) {
                        let u = GELU_C * (xv + GELU_A * xv * xv * xv);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
                        let d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                        *o += v * d;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.ng(*a) {
                    let y = node.value.as_ref().unwrap();
                    let n = y.dims2().1;
                    let ga = self.buf(grads, *a).data_mut();
                    for ((yrow, grow), orow) in y.data().chunks(n).zip(gd.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            orow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows { x, inv_std } => {
                if self.ng(*x) {
                    let xhat = node.value.as_ref().unwrap();
                    let n = xhat.dims2().1;
                    let nf = n as f64;
                    let gx = self.buf(grads, *x).data_mut();
                    for (r, ((hrow, grow), orow)) in xhat
                        .data()
                        .chunks(n)
                        .zip(gd.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        let mean_g = grow.iter().sum::<f64>() / nf;
                        let mean_gh = grow.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for j in 0..n {
                            orow[j] += inv_std[r] * (grow[j] - mean_g - hrow[j] * mean_gh);
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                if self.ng(*a) {
                    let (m, n) = self.value(*a).dims2();
                    let ga = self.buf(grads, *a).data_mut();
                    for row in ga.chunks_mut(n) {
                        for j in 0..n {
                            row[j] += gd[j] / m as f64;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.ng(*x) {
                    let n = self.value(*x).dims2().1;
                    let len = g.dims2().1;
                    let gx = self.buf(grads, *x).data_mut();
                    for (grow, orow) in gd.chunks(len).zip(gx.chunks_mut(n)) {
                        for j in 0..len {
                            orow[start + j] += grow[j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims2();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).dims2().1;
                    if self.ng(*p) {
                        let gp = self.buf(grads, *p).data_mut();
                        for r in 0..m {
                            for j in 0..w {
                                gp[r * w + j] += gd[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.ng(*p) {
                        let gp = self.buf(grads, *p).data_mut();
                        for (o, v) in gp.iter_mut().zip(&gd[offset..offset + len]) {
                            *o += v;
                        }
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                if self.ng(*x) {
                    let gx = self.buf(grads, *x).data_mut();
                    for (o, v) in gx.iter_mut().zip(gd) {
                        *o += v;
                    }
                }
            }
            Op::Conv3d { x, w, spec } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let geo = ConvGeometry::new(tx.shape(), tw.shape(), *spec);
                if self.ng(*w) {
                    let xv = tx.data();
                    conv3d_backward_weight(&geo, xv, gd, self.buf(grads, *w).data_mut());
                }
                if self.ng(*x) {
                    let wv = self.value(*w).data();
                    conv3d_backward_input(&geo, wv, gd, self.buf(grads, *x).data_mut());
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.ng(*x) {
                    let tx = self.value(*x);
                    let c = tx.shape()[0];
                    let spatial = tx.len() / c;
                    let gx = self.buf(grads, *x).data_mut();
                    for (ch, chunk) in gx.chunks_mut(spatial).enumerate() {
                        let v = gd[ch] / spatial as f64;
                        for o in chunk {
                            *o += v;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                if self.ng(*logits) {
                    let gl = self.buf(grads, *logits).data_mut();
                    for (j, p) in probs.iter().enumerate() {
                        let onehot = if j == *label { 1.0 } else { 0.0 };
                        gl[j] += gd[0] * (p - onehot);
                    }
                }
            }
            Op::NllProb { p, label, eps } => {
                if self.ng(*p) {
                    let pv = self.value(*p).data()[*label];
                    if pv > *eps {
                        self.buf(grads, *p).data_mut()[*label] += -gd[0] / pv;
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

struct ConvGeometry {
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    od: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], spec: Conv3dSpec) -> Self {
        assert_eq!(xs.len(), 4, "conv3d input must be [C,D,H,W], got {xs:?}");
        assert_eq!(ws.len(), 5, "conv3d weight must be [O,C,k,k,k], got {ws:?}");
        assert_eq!(xs[0], ws[1], "conv3d channel mismatch");
        let k = ws[2];
        assert!(ws[3] == k && ws[4] == k, "conv3d kernels must be cubic");
        let out = |n: usize| {
            assert!(n + 2 * spec.pad >= k, "conv3d input too small");
            (n + 2 * spec.pad - k) / spec.stride + 1
        };
        Self {
            c: xs[0],
            d: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k,
            od: out(xs[1]),
            oh: out(xs[2]),
            ow: out(xs[3]),
            stride: spec.stride,
            pad: spec.pad,
        }
    }

    fn out_len(&self) -> usize {
        self.o * self.od * self.oh * self.ow
    }

    /// Range of output positions whose tap `kk` lands inside an input axis of length `n`.
    fn valid(&self, kk: usize, n: usize, out_n: usize) -> (usize, usize) {
        // input index = o*stride + kk - pad must be in [0, n)
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_excl = ((n as isize - 1 - off).div_euclid(s) + 1).clamp(0, out_n as isize);
        let lo = lo.min(hi_excl);
        (lo as usize, hi_excl as usize)
    }
}

fn conv3d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], out: &mut [f64]) {
    let k3 = g.k * g.k * g.k;
    let (s, p) = (g.stride, g.pad);
    for o in 0..g.o {
        let out_o = &mut out[o * g.od * g.oh * g.ow..(o + 1) * g.od * g.oh * g.ow];
        for c in 0..g.c {
            let x_c = &x[c * g.d * g.h * g.w..(c + 1) * g.d * g.h * g.w];
            let w_oc = &w[(o * g.c + c) * k3..(o * g.c + c + 1) * k3];
            for kd in 0..g.k {
                let (d0, d1) = g.valid(kd, g.d, g.od);
                for kh in 0..g.k {
                    let (h0, h1) = g.valid(kh, g.h, g.oh);
                    for kw in 0..g.k {
                        let (w0, w1) = g.valid(kw, g.w, g.ow);
                        let wv = w_oc[(kd * g.k + kh) * g.k + kw];
                        for od in d0..d1 {
                            let id = od * s + kd - p;
                            for oh in h0..h1 {
                                let ih = oh * s + kh - p;
                                let orow = &mut out_o[(od * g.oh + oh) * g.ow..(od * g.oh + oh + 1) * g.ow];
                                let xrow = &x_c[(id * g.h + ih) * g.w..(id * g.h + ih + 1) * g.w];
                                if s == 1 {
                                    let base = w0 + kw - p;
                                    for (ov, xv) in orow[w0..w1].iter_mut().zip(&xrow[base..base + (w1 - w0)]) {
                                        *ov += wv * xv;
                                    }
                                } else {
                                    for ow in w0..w1 {
                                        orow[ow] += wv * xrow[ow * s + kw - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_backward_input(g: &ConvGeometry, w: &[f64], gout: &[f64], gx: &mut [f64]) {
    let k3 = g.k * g.k * g.k;
    let (s, p) = (g.stride, g.pad);
    for o in 0..g.o {
        let g_o = &gout[o * g.od * g.oh * g.ow..(o + 1) * g.od * g.oh * g.ow];
        for c in 0..g.c {
            let gx_c = &mut gx[c * g.d * g.h * g.w..(c + 1) * g.d * g.h * g.w];
            let w_oc = &w[(o * g.c + c) * k3..(o * g.c + c + 1) * k3];
            for kd in 0..g.k {
                let (d0, d1) = g.valid(kd, g.d, g.od);
                for kh in 0..g.k {
                    let (h0, h1) = g.valid(kh, g.h, g.oh);
                    for kw in 0..g.k {
                        let (w0, w1) = g.valid(kw, g.w, g.ow);
                        let wv = w_oc[(kd * g.k + kh) * g.k + kw];
                        for od in d0..d1 {
                            let id = od * s + kd - p;
                            for oh in h0..h1 {
                                let ih = oh * s + kh - p;
                                let grow = &g_o[(od * g.oh + oh) * g.ow..(od * g.oh + oh + 1) * g.ow];
                                let xrow = &mut gx_c[(id * g.h + ih) * g.w..(id * g.h + ih + 1) * g.w];
                                for ow in w0..w1 {
                                    xrow[ow * s + kw - p] += wv * grow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_backward_weight(g: &ConvGeometry, x: &[f64], gout: &[f64], gw: &mut [f64]) {
    let k3 = g.k * g.k * g.k;
    let (s, p) = (g.stride, g.pad);
    for o in 0..g.o {
        let g_o = &gout[o * g.od * g.oh * g.ow..(o + 1) * g.od * g.oh * g.ow];
        for c in 0..g.c {
            let x_c = &x[c * g.d * g.h * g.w..(c + 1) * g.d * g.h * g.w];
            let gw_oc = &mut gw[(o * g.c + c) * k3..(o * g.c + c + 1) * k3];
            for kd in 0..g.k {
                let (d0, d1) = g.valid(kd, g.d, g.od);
                for kh in 0..g.k {
                    let (h0, h1) = g.valid(kh, g.h, g.oh);
                    for kw in 0..g.k {
                        let (w0, w1) = g.valid(kw, g.w, g.ow);
                        let mut acc = 0.0;
                        for od in d0..d1 {
                            let id = od * s + kd - p;
                            for oh in h0..h1 {
                                let ih = oh * s + kh - p;
                                let grow = &g_o[(od * g.oh + oh) * g.ow..(od * g.oh + oh + 1) * g.ow];
                                let xrow = &x_c[(id * g.h + ih) * g.w..(id * g.h + ih + 1) * g.w];
                                if s == 1 {
                                    let base = w0 + kw - p;
                                    acc += grow[w0..w1]
                                        .iter()
                                        .zip(&xrow[base..base + (w1 - w0)])
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                } else {
                                    for ow in w0..w1 {
                                        acc += grow[ow] * xrow[ow * s + kw - p];
                                    }
                                }
                            }
                        }
                        gw_oc[(kd * g.k + kh) * g.k + kw] += acc;
                    }
                }
            }
        }
    }
}
