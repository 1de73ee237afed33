//! Differentiable primitives recorded on a [`Graph`].
//!
//! Broadcasting is deliberately narrow: elementwise binaries accept equal
//! shapes or scalar-vs-tensor, nothing else. Anything richer (bias rows in
//! `linear`, per-row normalization) is a dedicated op with a hand-written
//! reverse rule.

use rand::Rng;

use super::graph::{BackwardOp, Gradients, Graph, NodeId};
use super::{NumericsError, Result};

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise binaries (equal shape or scalar-vs-tensor)

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

struct Binary {
    kind: BinKind,
    lhs: NodeId,
    rhs: NodeId,
}

impl BackwardOp for Binary {
    fn backward(&self, g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let lv = g.values(self.lhs);
        let rv = g.values(self.rhs);
        let side = |vals: &[f64], i: usize| if vals.len() == 1 { vals[0] } else { vals[i] };
        let reduce_to = |len: usize, full: &[f64]| -> Vec<f64> {
            if len == 1 {
                vec![full.iter().sum()]
            } else {
                full.to_vec()
            }
        };
        match self.kind {
            BinKind::Add => {
                sink.accumulate(self.lhs, &reduce_to(lv.len(), grad));
                sink.accumulate(self.rhs, &reduce_to(rv.len(), grad));
            }
            BinKind::Sub => {
                sink.accumulate(self.lhs, &reduce_to(lv.len(), grad));
                let neg: Vec<f64> = grad.iter().map(|v| -v).collect();
                sink.accumulate(self.rhs, &reduce_to(rv.len(), &neg));
            }
            BinKind::Mul => {
                if g.needs_grad(self.lhs) {
                    let dl: Vec<f64> = grad
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * side(rv, i))
                        .collect();
                    sink.accumulate(self.lhs, &reduce_to(lv.len(), &dl));
                }
                if g.needs_grad(self.rhs) {
                    let dr: Vec<f64> = grad
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * side(lv, i))
                        .collect();
                    sink.accumulate(self.rhs, &reduce_to(rv.len(), &dr));
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise unaries

#[derive(Clone, Copy)]
enum UnKind {
    Sigmoid,
    Softplus,
    Relu,
    Neg,
    /// y = c * x
    Scale(f64),
    /// y = x + c
    Offset,
}

struct Unary {
    kind: UnKind,
    input: NodeId,
}

impl BackwardOp for Unary {
    fn backward(&self, g: &Graph, out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let dg: Vec<f64> = match self.kind {
            UnKind::Sigmoid => {
                let ov = g.values(out);
                grad.iter().zip(ov).map(|(gv, &s)| gv * s * (1.0 - s)).collect()
            }
            UnKind::Softplus => {
                let xv = g.values(self.input);
                grad.iter()
                    .zip(xv)
                    .map(|(gv, &x)| gv * stable_sigmoid(x))
                    .collect()
            }
            UnKind::Relu => {
                let xv = g.values(self.input);
                grad.iter()
                    .zip(xv)
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect()
            }
            UnKind::Neg => grad.iter().map(|gv| -gv).collect(),
            UnKind::Scale(c) => grad.iter().map(|gv| gv * c).collect(),
            UnKind::Offset => grad.to_vec(),
        };
        sink.accumulate(self.input, &dg);
    }
}

// ---------------------------------------------------------------------------
// linear / matmul / transpose

struct Linear {
    x: NodeId,
    w: NodeId,
    b: NodeId,
    rows: usize,
    din: usize,
    dout: usize,
}

impl BackwardOp for Linear {
    fn backward(&self, g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let (rows, din, dout) = (self.rows, self.din, self.dout);
        let xv = g.values(self.x);
        let wv = g.values(self.w);
        if g.needs_grad(self.x) {
            // dx = dy . W^T
            let mut dx = vec![0.0; rows * din];
            for r in 0..rows {
                let gr = &grad[r * dout..(r + 1) * dout];
                let dxr = &mut dx[r * din..(r + 1) * din];
                for (i, dxi) in dxr.iter_mut().enumerate() {
                    let wrow = &wv[i * dout..(i + 1) * dout];
                    *dxi = gr.iter().zip(wrow).map(|(a, b)| a * b).sum();
                }
            }
            sink.accumulate(self.x, &dx);
        }
        if g.needs_grad(self.w) {
            // dW = x^T . dy
            let mut dw = vec![0.0; din * dout];
            for r in 0..rows {
                let xr = &xv[r * din..(r + 1) * din];
                let gr = &grad[r * dout..(r + 1) * dout];
                for (i, &xi) in xr.iter().enumerate() {
                    let dwrow = &mut dw[i * dout..(i + 1) * dout];
                    for (d, gv) in dwrow.iter_mut().zip(gr) {
                        *d += xi * gv;
                    }
                }
            }
            sink.accumulate(self.w, &dw);
        }
        if g.needs_grad(self.b) {
            let mut db = vec![0.0; dout];
            for r in 0..rows {
                for (d, gv) in db.iter_mut().zip(&grad[r * dout..(r + 1) * dout]) {
                    *d += gv;
                }
            }
            sink.accumulate(self.b, &db);
        }
    }
}

struct MatMul {
    a: NodeId,
    b: NodeId,
    m: usize,
    k: usize,
    n: usize,
}

impl BackwardOp for MatMul {
    fn backward(&self, g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let (m, k, n) = (self.m, self.k, self.n);
        let av = g.values(self.a);
        let bv = g.values(self.b);
        if g.needs_grad(self.a) {
            // dA = dC . B^T
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                let gr = &grad[i * n..(i + 1) * n];
                let dar = &mut da[i * k..(i + 1) * k];
                for (p, dap) in dar.iter_mut().enumerate() {
                    let brow = &bv[p * n..(p + 1) * n];
                    *dap = gr.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
            sink.accumulate(self.a, &da);
        }
        if g.needs_grad(self.b) {
            // dB = A^T . dC
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                let gr = &grad[i * n..(i + 1) * n];
                for (p, &ap) in arow.iter().enumerate() {
                    let dbr = &mut db[p * n..(p + 1) * n];
                    for (d, gv) in dbr.iter_mut().zip(gr) {
                        *d += ap * gv;
                    }
                }
            }
            sink.accumulate(self.b, &db);
        }
    }
}

struct Transpose {
    input: NodeId,
    rows: usize,
    cols: usize,
}

impl BackwardOp for Transpose {
    fn backward(&self, _g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        // grad has shape [cols, rows]; transpose it back
        let mut dg = vec![0.0; self.rows * self.cols];
        for r in 0..self.cols {
            for c in 0..self.rows {
                dg[c * self.cols + r] = grad[r * self.rows + c];
            }
        }
        sink.accumulate(self.input, &dg);
    }
}

// ---------------------------------------------------------------------------
// shape plumbing

struct Reshape {
    input: NodeId,
}

impl BackwardOp for Reshape {
    fn backward(&self, _g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        sink.accumulate(self.input, grad);
    }
}

struct SliceCols {
    input: NodeId,
    rows: usize,
    cols: usize,
    from: usize,
    to: usize,
}

impl BackwardOp for SliceCols {
    fn backward(&self, _g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let width = self.to - self.from;
        if let Some(buf) = sink.buf_mut(self.input, self.rows * self.cols) {
            for r in 0..self.rows {
                let src = &grad[r * width..(r + 1) * width];
                let dst = &mut buf[r * self.cols + self.from..r * self.cols + self.to];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

struct ConcatCols {
    parts: Vec<(NodeId, usize)>, // (node, width)
    rows: usize,
}

impl BackwardOp for ConcatCols {
    fn backward(&self, _g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let total: usize = self.parts.iter().map(|&(_, w)| w).sum();
        let mut offset = 0;
        for &(id, width) in &self.parts {
            let mut dg = vec![0.0; self.rows * width];
            for r in 0..self.rows {
                let src = &grad[r * total + offset..r * total + offset + width];
                dg[r * width..(r + 1) * width].copy_from_slice(src);
            }
            sink.accumulate(id, &dg);
            offset += width;
        }
    }
}

struct GatherRows {
    input: NodeId,
    rows: usize,
    cols: usize,
    indices: Vec<usize>,
}

impl BackwardOp for GatherRows {
    fn backward(&self, _g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        if let Some(buf) = sink.buf_mut(self.input, self.rows * self.cols) {
            for (k, &r) in self.indices.iter().enumerate() {
                let src = &grad[k * self.cols..(k + 1) * self.cols];
                let dst = &mut buf[r * self.cols..(r + 1) * self.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

struct StackRows {
    parts: Vec<NodeId>,
    cols: usize,
}

impl BackwardOp for StackRows {
    fn backward(&self, _g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        for (k, &id) in self.parts.iter().enumerate() {
            sink.accumulate(id, &grad[k * self.cols..(k + 1) * self.cols]);
        }
    }
}

// ---------------------------------------------------------------------------
// reductions

struct SumAll {
    input: NodeId,
    len: usize,
    scale: f64, // 1.0 for sum, 1/len for mean
}

impl BackwardOp for SumAll {
    fn backward(&self, _g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        sink.accumulate(self.input, &vec![grad[0] * self.scale; self.len]);
    }
}

struct MeanRows {
    input: NodeId,
    rows: usize,
    cols: usize,
}

impl BackwardOp for MeanRows {
    fn backward(&self, _g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let inv = 1.0 / self.rows as f64;
        let mut dg = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for (d, gv) in dg[r * self.cols..(r + 1) * self.cols].iter_mut().zip(grad) {
                *d = gv * inv;
            }
        }
        sink.accumulate(self.input, &dg);
    }
}

struct MaxAll {
    input: NodeId,
    argmax: usize,
    len: usize,
}

impl BackwardOp for MaxAll {
    fn backward(&self, _g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let mut dg = vec![0.0; self.len];
        dg[self.argmax] = grad[0];
        sink.accumulate(self.input, &dg);
    }
}

// ---------------------------------------------------------------------------
// softmax / layer norm / dropout

struct Softmax {
    input: NodeId,
    outer: usize,
    axis_len: usize,
    inner: usize,
}

impl BackwardOp for Softmax {
    fn backward(&self, g: &Graph, out: NodeId, grad: &[f64], sink: &mut Gradients) {
        // ds_i = s_i * (g_i - sum_j g_j s_j) along the reduction axis
        let sv = g.values(out);
        let mut dg = vec![0.0; sv.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let at = |a: usize| o * self.axis_len * self.inner + a * self.inner + i;
                let mut dot = 0.0;
                for a in 0..self.axis_len {
                    dot += grad[at(a)] * sv[at(a)];
                }
                for a in 0..self.axis_len {
                    let idx = at(a);
                    dg[idx] = sv[idx] * (grad[idx] - dot);
                }
            }
        }
        sink.accumulate(self.input, &dg);
    }
}

struct LayerNorm {
    input: NodeId,
    gain: NodeId,
    bias: NodeId,
    dim: usize,
    eps: f64,
}

impl BackwardOp for LayerNorm {
    fn backward(&self, g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let xv = g.values(self.input);
        let gv = g.values(self.gain);
        let d = self.dim;
        let rows = xv.len() / d;
        let mut dx = vec![0.0; xv.len()];
        let mut dgain = vec![0.0; d];
        let mut dbias = vec![0.0; d];
        for r in 0..rows {
            let x = &xv[r * d..(r + 1) * d];
            let gr = &grad[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + self.eps).sqrt();
            let xhat: Vec<f64> = x.iter().map(|&v| (v - mean) * inv_std).collect();
            for j in 0..d {
                dgain[j] += gr[j] * xhat[j];
                dbias[j] += gr[j];
            }
            let dxhat: Vec<f64> = (0..d).map(|j| gr[j] * gv[j]).collect();
            let sum_dxhat: f64 = dxhat.iter().sum();
            let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
            let df = d as f64;
            for j in 0..d {
                dx[r * d + j] =
                    inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
            }
        }
        sink.accumulate(self.input, &dx);
        sink.accumulate(self.gain, &dgain);
        sink.accumulate(self.bias, &dbias);
    }
}

struct Dropout {
    input: NodeId,
    mask: Vec<f64>,
}

impl BackwardOp for Dropout {
    fn backward(&self, _g: &Graph, _out: NodeId, grad: &[f64], sink: &mut Gradients) {
        let dg: Vec<f64> = grad.iter().zip(&self.mask).map(|(gv, m)| gv * m).collect();
        sink.accumulate(self.input, &dg);
    }
}

// ---------------------------------------------------------------------------
// graph methods

impl Graph {
    fn binary(&mut self, kind: BinKind, op_name: &'static str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.values(a), self.values(b));
        if av.len() != bv.len() && av.len() != 1 && bv.len() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let n = av.len().max(bv.len());
        let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        let out: Vec<f64> = (0..n)
            .map(|i| match kind {
                BinKind::Add => at(av, i) + at(bv, i),
                BinKind::Sub => at(av, i) - at(bv, i),
                BinKind::Mul => at(av, i) * at(bv, i),
            })
            .collect();
        let shape = if av.len() >= bv.len() {
            self.shape(a).to_vec()
        } else {
            self.shape(b).to_vec()
        };
        let needs = self.any_needs_grad(&[a, b]);
        Ok(self.push_node(shape, out, needs, Some(Box::new(Binary { kind, lhs: a, rhs: b }))))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    fn unary(&mut self, kind: UnKind, x: NodeId) -> NodeId {
        let out: Vec<f64> = self
            .values(x)
            .iter()
            .map(|&v| match kind {
                UnKind::Sigmoid => stable_sigmoid(v),
                UnKind::Softplus => stable_softplus(v),
                UnKind::Relu => v.max(0.0),
                UnKind::Neg => -v,
                UnKind::Scale(c) => c * v,
                UnKind::Offset => v, // constant folded by caller
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x);
        self.push_node(shape, out, needs, Some(Box::new(Unary { kind, input: x })))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(UnKind::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(UnKind::Softplus, x)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(UnKind::Relu, x)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(UnKind::Neg, x)
    }

    /// y = c * x for a compile-time constant factor.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(UnKind::Scale(c), x)
    }

    /// y = x + c for a constant offset.
    pub fn offset(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.values(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x);
        self.push_node(
            shape,
            out,
            needs,
            Some(Box::new(Unary { kind: UnKind::Offset, input: x })),
        )
    }

    /// y = x W + b with `x: [..., din]`, `w: [din, dout]`, `b: [dout]`.
    /// Leading axes of `x` are treated as rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let (din, dout) = (ws[0], ws[1]);
        if self.shape(b) != [dout] {
            return Err(NumericsError::ShapeMismatch {
                op: "linear bias",
                lhs: self.shape(b).to_vec(),
                rhs: vec![dout],
            });
        }
        let rows = self.values(x).len() / din;
        let mut out = vec![0.0; rows * dout];
        matmul_raw(self.values(x), self.values(w), rows, din, dout, &mut out);
        let bv = self.values(b);
        for r in 0..rows {
            for (o, &bvj) in out[r * dout..(r + 1) * dout].iter_mut().zip(bv) {
                *o += bvj;
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let needs = self.any_needs_grad(&[x, w, b]);
        Ok(self.push_node(
            shape,
            out,
            needs,
            Some(Box::new(Linear { x, w, b, rows, din, dout })),
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let asx = self.shape(a).to_vec();
        let bsx = self.shape(b).to_vec();
        if asx.len() != 2 || bsx.len() != 2 || asx[1] != bsx[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: asx,
                rhs: bsx,
            });
        }
        let (m, k, n) = (asx[0], asx[1], bsx[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(self.values(a), self.values(b), m, k, n, &mut out);
        let needs = self.any_needs_grad(&[a, b]);
        Ok(self.push_node(vec![m, n], out, needs, Some(Box::new(MatMul { a, b, m, k, n }))))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "transpose",
                lhs: xs,
                rhs: vec![],
            });
        }
        let (rows, cols) = (xs[0], xs[1]);
        let xv = self.values(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = xv[r * cols + c];
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push_node(
            vec![cols, rows],
            out,
            needs,
            Some(Box::new(Transpose { input: x, rows, cols })),
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let expected: usize = shape.iter().product();
        if expected != self.values(x).len() {
            return Err(NumericsError::ValueCount {
                shape,
                expected,
                actual: self.values(x).len(),
            });
        }
        let out = self.values(x).to_vec();
        let needs = self.needs_grad(x);
        Ok(self.push_node(shape, out, needs, Some(Box::new(Reshape { input: x }))))
    }

    /// Columns `[from, to)` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || from >= to || to > xs[1] {
            return Err(NumericsError::Config {
                op: "slice_cols",
                reason: format!("range {from}..{to} on shape {xs:?}"),
            });
        }
        let (rows, cols) = (xs[0], xs[1]);
        let width = to - from;
        let xv = self.values(x);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + from..r * cols + to]);
        }
        let needs = self.needs_grad(x);
        Ok(self.push_node(
            vec![rows, width],
            out,
            needs,
            Some(Box::new(SliceCols { input: x, rows, cols, from, to })),
        ))
    }

    /// Horizontal concatenation of 2-d tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        debug_assert!(!parts.is_empty());
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.values(p)[r * w..(r + 1) * w]);
            }
        }
        let needs = self.any_needs_grad(parts);
        Ok(self.push_node(
            vec![rows, total],
            out,
            needs,
            Some(Box::new(ConcatCols {
                parts: parts.iter().copied().zip(widths).collect(),
                rows,
            })),
        ))
    }

    /// Rows of a 2-d tensor selected by index; duplicates allowed.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || indices.iter().any(|&i| i >= xs[0]) {
            return Err(NumericsError::Config {
                op: "gather_rows",
                reason: format!("indices {indices:?} on shape {xs:?}"),
            });
        }
        let (rows, cols) = (xs[0], xs[1]);
        let xv = self.values(x);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &r in indices {
            out.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
        }
        let needs = self.needs_grad(x);
        Ok(self.push_node(
            vec![indices.len(), cols],
            out,
            needs,
            Some(Box::new(GatherRows {
                input: x,
                rows,
                cols,
                indices: indices.to_vec(),
            })),
        ))
    }

    /// Stack equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        debug_assert!(!parts.is_empty());
        let cols = self.values(parts[0]).len();
        let mut out = Vec::with_capacity(parts.len() * cols);
        for &p in parts {
            if self.values(p).len() != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            out.extend_from_slice(self.values(p));
        }
        let needs = self.any_needs_grad(parts);
        Ok(self.push_node(
            vec![parts.len(), cols],
            out,
            needs,
            Some(Box::new(StackRows { parts: parts.to_vec(), cols })),
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.values(x).iter().sum();
        let len = self.values(x).len();
        let needs = self.needs_grad(x);
        self.push_node(
            vec![],
            vec![s],
            needs,
            Some(Box::new(SumAll { input: x, len, scale: 1.0 })),
        )
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let len = self.values(x).len();
        let s: f64 = self.values(x).iter().sum::<f64>() / len as f64;
        let needs = self.needs_grad(x);
        self.push_node(
            vec![],
            vec![s],
            needs,
            Some(Box::new(SumAll { input: x, len, scale: 1.0 / len as f64 })),
        )
    }

    /// Column means of a 2-d tensor: `[rows, cols] -> [cols]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "mean_rows",
                lhs: xs,
                rhs: vec![],
            });
        }
        let (rows, cols) = (xs[0], xs[1]);
        let xv = self.values(x);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, &v) in out.iter_mut().zip(&xv[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let needs = self.needs_grad(x);
        Ok(self.push_node(
            vec![cols],
            out,
            needs,
            Some(Box::new(MeanRows { input: x, rows, cols })),
        ))
    }

    /// Maximum element, subgradient to the first argmax.
    pub fn max_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.values(x);
        let (argmax, &max) = xv
            .iter()
            .enumerate()
            .fold((0, &xv[0]), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        let len = xv.len();
        let needs = self.needs_grad(x);
        self.push_node(
            vec![],
            vec![max],
            needs,
            Some(Box::new(MaxAll { input: x, argmax, len })),
        )
    }

    /// Softmax along `axis`; rows sum to one.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(NumericsError::InvalidAxis { axis, shape: xs });
        }
        let outer: usize = xs[..axis].iter().product();
        let axis_len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let xv = self.values(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * axis_len * inner + a * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..axis_len {
                    max = max.max(xv[at(a)]);
                }
                let mut sum = 0.0;
                for a in 0..axis_len {
                    let e = (xv[at(a)] - max).exp();
                    out[at(a)] = e;
                    sum += e;
                }
                for a in 0..axis_len {
                    out[at(a)] /= sum;
                }
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push_node(
            xs,
            out,
            needs,
            Some(Box::new(Softmax { input: x, outer, axis_len, inner })),
        ))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or(NumericsError::ShapeMismatch {
            op: "layer_norm",
            lhs: xs.clone(),
            rhs: vec![],
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm params",
                lhs: self.shape(gain).to_vec(),
                rhs: vec![d],
            });
        }
        debug_assert!(eps > 0.0);
        let xv = self.values(x);
        let gv = self.values(gain).to_vec();
        let bv = self.values(bias).to_vec();
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let needs = self.any_needs_grad(&[x, gain, bias]);
        Ok(self.push_node(
            xs,
            out,
            needs,
            Some(Box::new(LayerNorm { input: x, gain, bias, dim: d, eps })),
        ))
    }

    /// Inverted dropout with an explicit random source. Rate 0 is the
    /// identity and records nothing.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> NodeId {
        debug_assert!((0.0..1.0).contains(&rate));
        if rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = self
            .values(x)
            .iter()
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let out: Vec<f64> = self.values(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x);
        self.push_node(shape, out, needs, Some(Box::new(Dropout { input: x, mask })))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    fn leaf(g: &mut Graph, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        g.leaf(Tensor::new(shape, values).unwrap().with_grad())
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![0.0]);
        let y = g.sigmoid(x);
        assert_eq!(g.values(y), &[0.5]);
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![0.0]);
        let y = g.softplus(x);
        assert!((g.values(y)[0] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softplus_strictly_positive() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![5], vec![-20.0, -1.0, 0.0, 1.0, 20.0]);
        let y = g.softplus(x);
        for &v in g.values(y) {
            assert!(v > 0.0, "softplus must stay positive, got {v}");
        }
    }

    #[test]
    fn add_rejects_incompatible_shapes() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let b = leaf(&mut g, vec![3], vec![1.0, 2.0, 3.0]);
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "got {msg}");
    }

    #[test]
    fn linear_identity_map() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = leaf(&mut g, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut g, vec![2], vec![0.0, 0.0]);
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.values(y), g.values(x));
    }

    #[test]
    fn linear_direct_arithmetic() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 2], vec![1.0, 2.0]);
        let w = leaf(&mut g, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut g, vec![2], vec![3.0, 3.0]);
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.values(y), &[4.0, 5.0]);
    }

    #[test]
    fn softmax_shift_invariance() {
        for c in [-7.5, 0.0, 42.0] {
            let mut g = Graph::new();
            let x = leaf(&mut g, vec![3], vec![c, c, c]);
            let y = g.softmax(x, 0).unwrap();
            for &v in g.values(y) {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_direct_evaluation() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![0.0, 3.0f64.ln()]);
        let y = g.softmax(x, 0).unwrap();
        let v = g.values(y);
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3, 4], (0..12).map(|i| (i as f64).sin() * 9.0).collect());
        let y = g.softmax(x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = g.values(y)[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(g.values(y)[r * 4..(r + 1) * 4].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 4], vec![5.0; 4]);
        let gain = leaf(&mut g, vec![4], vec![1.0; 4]);
        let bias = leaf(&mut g, vec![4], vec![0.0; 4]);
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for &v in g.values(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 0.0, 4.0]);
        let gain = leaf(&mut g, vec![3], vec![1.0; 3]);
        let bias = leaf(&mut g, vec![3], vec![0.0; 3]);
        let y = g.layer_norm(x, gain, bias, 1e-9).unwrap();
        for r in 0..2 {
            let row = &g.values(y)[r * 3..(r + 1) * 3];
            let mean: f64 = row.iter().sum::<f64>() / 3.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-8);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn square_gradient() {
        // f(x) = x * x at x = 3 -> gradient 6
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![3.0]);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert!((grads.get(x).unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![0.0]);
        let y = g.sigmoid(x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert!((grads.get(x).unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![1.0, -2.0, 0.5]);
        let y = g.dropout(x, 0.0, &mut rng);
        assert_eq!(x, y);
    }

    #[test]
    fn max_all_picks_first_argmax() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![4], vec![1.0, 3.0, 3.0, 2.0]);
        let y = g.max_all(x);
        assert_eq!(g.scalar(y), 3.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
