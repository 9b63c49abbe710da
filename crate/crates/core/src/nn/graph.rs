//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! [`Graph::backward`] walks the tape in reverse from a 1×1 loss node and
//! returns the gradient of every parameter that contributed to it.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::nn::params::{Gradients, ParamId, ParamStore};
use crate::nn::tensor::{gemm, Tensor};
use crate::so3::hat_unchecked;

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Contiguous row range `[start, start + len)` forming one attention sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Silu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<Vec<f64>>,
    },
    So3Exp(Var),
    RotMul(Var, Var),
    RotTranspose(Var),
    RotVec(Var, Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
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

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient outside the graph.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x + b` with `b` (1×m) broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut out = xv.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(cols, bv.cols());
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// `x ⊙ g` with `g` (1×m) broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(g));
        if gv.rows() != 1 || gv.cols() != xv.cols() {
            return Err(shape_err("mul_row", format!("{:?} * {:?}", xv.shape(), gv.shape())));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, g) in out.row_mut(r).iter_mut().zip(gv.data()) {
                *o *= g;
            }
        }
        Ok(self.push(out, Op::MulRow(x, g)))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v += c);
        self.push(out, Op::AddScalar(x))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layernorm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = *v / (1.0 + (-*v).exp()));
        self.push(out, Op::Silu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.exp());
        self.push(out, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.abs());
        self.push(out, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= *v);
        self.push(out, Op::Square(x))
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", format!("{} vs {rows} rows", v.rows())));
            }
            total += v.cols();
        }
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let c = v.cols();
            for r in 0..rows {
                out.row_mut(r)[offset..offset + c].copy_from_slice(v.row(r));
            }
            offset += c;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(shape_err(
                "slice_cols",
                format!("{start}+{len} > {}", xv.cols()),
            ));
        }
        let mut out = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", format!("{} vs {cols} cols", v.cols())));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Row `i` of the result is row `index[i]` of `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Tensor::zeros(index.len(), cols);
        for (i, &src) in index.iter().enumerate() {
            if src >= xv.rows() {
                return Err(shape_err("gather_rows", format!("row {src} of {}", xv.rows())));
            }
            out.row_mut(i).copy_from_slice(xv.row(src));
        }
        Ok(self.push(out, Op::GatherRows { x, index }))
    }

    /// Multi-head scaled dot-product self-attention, applied independently
    /// within each row segment. `q`, `k`, `v` are `rows × d` with `d`
    /// divisible by `heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        if kv.shape() != (rows, d) || vv.shape() != (rows, d) {
            return Err(shape_err(
                "attention",
                format!("q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(rows, d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            if seg.start + seg.len > rows {
                return Err(shape_err("attention", format!("segment {seg:?} beyond {rows} rows")));
            }
            let n = seg.len;
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; n * n];
                for i in 0..n {
                    let qi = &qv.row(seg.start + i)[off..off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..n {
                        let kj = &kv.row(seg.start + j)[off..off + dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        p[i * n + j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for j in 0..n {
                        let e = (p[i * n + j] - max).exp();
                        p[i * n + j] = e;
                        z += e;
                    }
                    for j in 0..n {
                        p[i * n + j] /= z;
                    }
                    let orow = &mut out.row_mut(seg.start + i)[off..off + dh];
                    for j in 0..n {
                        let w = p[i * n + j];
                        let vj = &vv.row(seg.start + j)[off..off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
        ))
    }

    /// Softmax weights recorded by an attention node, per (segment, head).
    pub fn attention_weights(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row-wise exponential map: `rows × 3` tangent vectors to `rows × 9`
    /// row-major rotation matrices.
    pub fn so3_exp(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 3 {
            return Err(shape_err("so3_exp", format!("{:?}", xv.shape())));
        }
        let mut out = Tensor::zeros(xv.rows(), 9);
        for r in 0..xv.rows() {
            let v = crate::so3::TangentVector::from_slice(xv.row(r));
            out.row_mut(r)
                .copy_from_slice(&crate::so3::exp_map(&v).to_row_major());
        }
        Ok(self.push(out, Op::So3Exp(x)))
    }

    /// Row-wise 3×3 product of row-major matrices.
    pub fn rot_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != 9 || av.shape() != bv.shape() {
            return Err(shape_err("rot_mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut out = Tensor::zeros(av.rows(), 9);
        for r in 0..av.rows() {
            let m = mat(av.row(r)) * mat(bv.row(r));
            write_mat(out.row_mut(r), &m);
        }
        Ok(self.push(out, Op::RotMul(a, b)))
    }

    pub fn rot_transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.cols() != 9 {
            return Err(shape_err("rot_transpose", format!("{:?}", av.shape())));
        }
        let mut out = Tensor::zeros(av.rows(), 9);
        for r in 0..av.rows() {
            write_mat(out.row_mut(r), &mat(av.row(r)).transpose());
        }
        Ok(self.push(out, Op::RotTranspose(a)))
    }

    /// Row-wise matrix–vector product: `rows × 9` with `rows × 3`.
    pub fn rot_vec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (av, xv) = (self.value(a), self.value(x));
        if av.cols() != 9 || xv.cols() != 3 || av.rows() != xv.rows() {
            return Err(shape_err("rot_vec", format!("{:?} vs {:?}", av.shape(), xv.shape())));
        }
        let mut out = Tensor::zeros(av.rows(), 3);
        for r in 0..av.rows() {
            let y = mat(av.row(r)) * Vector3::from_row_slice(xv.row(r));
            out.row_mut(r).copy_from_slice(y.as_slice());
        }
        Ok(self.push(out, Op::RotVec(a, x)))
    }

    /// Gradients of the 1×1 node `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match &mut out.grads[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = slot(&mut grads, *a, av.shape());
                    gemm(&g, false, bv, true, ga, 1.0);
                    let gb = slot(&mut grads, *b, bv.shape());
                    gemm(av, true, &g, false, gb, 1.0);
                }
                Op::AddBias(x, b) => {
                    let bshape = self.value(*b).shape();
                    let gb = slot(&mut grads, *b, bshape);
                    for r in 0..g.rows() {
                        for (acc, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    slot(&mut grads, *x, g.shape()).add_assign(&g);
                }
                Op::MulRow(x, gm) => {
                    let (xv, gv) = (self.value(*x), self.value(*gm));
                    let gg = slot(&mut grads, *gm, gv.shape());
                    for r in 0..g.rows() {
                        for ((acc, gr), xr) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                            *acc += gr * xr;
                        }
                    }
                    let gx = slot(&mut grads, *x, xv.shape());
                    for r in 0..g.rows() {
                        for ((acc, gr), w) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(gv.data()) {
                            *acc += gr * w;
                        }
                    }
                }
                Op::Add(a, b) => {
                    slot(&mut grads, *a, g.shape()).add_assign(&g);
                    slot(&mut grads, *b, g.shape()).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    slot(&mut grads, *a, g.shape()).add_assign(&g);
                    let gb = slot(&mut grads, *b, g.shape());
                    for (acc, v) in gb.data_mut().iter_mut().zip(g.data()) {
                        *acc -= v;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = slot(&mut grads, *a, g.shape());
                    for ((acc, gv), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *acc += gv * y;
                    }
                    let gb = slot(&mut grads, *b, g.shape());
                    for ((acc, gv), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *acc += gv * x;
                    }
                }
                Op::Scale(x, s) => {
                    let gx = slot(&mut grads, *x, g.shape());
                    for (acc, v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *acc += s * v;
                    }
                }
                Op::AddScalar(x) => {
                    slot(&mut grads, *x, g.shape()).add_assign(&g);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = node.value.as_ref().expect("layernorm output");
                    let cols = y.cols() as f64;
                    let gx = slot(&mut grads, *x, g.shape());
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let mean_g = gr.iter().sum::<f64>() / cols;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols;
                        for ((acc, gv), yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *acc += inv_std[r] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let gx = slot(&mut grads, *x, g.shape());
                    for ((acc, gv), xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        let s = 1.0 / (1.0 + (-xi).exp());
                        *acc += gv * (s + xi * s * (1.0 - s));
                    }
                }
                Op::Exp(x) => {
                    let y = node.value.as_ref().expect("exp output");
                    let gx = slot(&mut grads, *x, g.shape());
                    for ((acc, gv), yi) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *acc += gv * yi;
                    }
                }
                Op::Abs(x) => {
                    let xv = self.value(*x);
                    let gx = slot(&mut grads, *x, g.shape());
                    for ((acc, gv), xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        let s = if *xi > 0.0 {
                            1.0
                        } else if *xi < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *acc += gv * s;
                    }
                }
                Op::Square(x) => {
                    let xv = self.value(*x);
                    let gx = slot(&mut grads, *x, g.shape());
                    for ((acc, gv), xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *acc += 2.0 * gv * xi;
                    }
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape();
                    let s = g.item();
                    let gx = slot(&mut grads, *x, shape);
                    gx.data_mut().iter_mut().for_each(|acc| *acc += s);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape();
                        let gp = slot(&mut grads, p, shape);
                        for r in 0..shape.0 {
                            for (acc, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + shape.1]) {
                                *acc += v;
                            }
                        }
                        offset += shape.1;
                    }
                }
                Op::SliceCols { x, start } => {
                    let shape = self.value(*x).shape();
                    let gx = slot(&mut grads, *x, shape);
                    let len = g.cols();
                    for r in 0..g.rows() {
                        for (acc, v) in gx.row_mut(r)[*start..*start + len].iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape();
                        let gp = slot(&mut grads, p, shape);
                        let n = shape.0 * shape.1;
                        for (acc, v) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *acc += v;
                        }
                        offset += n;
                    }
                }
                Op::GatherRows { x, index } => {
                    let shape = self.value(*x).shape();
                    let gx = slot(&mut grads, *x, shape);
                    for (i, &src) in index.iter().enumerate() {
                        for (acc, v) in gx.row_mut(src).iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    segments,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (rows, d) = qv.shape();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Tensor::zeros(rows, d);
                    let mut gk = Tensor::zeros(rows, d);
                    let mut gv = Tensor::zeros(rows, d);
                    let mut pi = 0;
                    for seg in segments {
                        let n = seg.len;
                        for h in 0..*heads {
                            let off = h * dh;
                            let p = &probs[pi];
                            pi += 1;
                            for i in 0..n {
                                let gi = &g.row(seg.start + i)[off..off + dh];
                                // dP_ij = dO_i · V_j ; dS = P ⊙ (dP − Σ_j P dP)
                                let mut dp = vec![0.0; n];
                                for (j, dpj) in dp.iter_mut().enumerate() {
                                    let vj = &vv.row(seg.start + j)[off..off + dh];
                                    *dpj = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                }
                                let row_p = &p[i * n..(i + 1) * n];
                                let dot: f64 = row_p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                                for j in 0..n {
                                    let pij = row_p[j];
                                    // dV_j += P_ij dO_i
                                    let gvj = &mut gv.row_mut(seg.start + j)[off..off + dh];
                                    for (acc, x) in gvj.iter_mut().zip(gi) {
                                        *acc += pij * x;
                                    }
                                    let ds = pij * (dp[j] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let kj = &kv.row(seg.start + j)[off..off + dh];
                                    let gqi = &mut gq.row_mut(seg.start + i)[off..off + dh];
                                    for (acc, x) in gqi.iter_mut().zip(kj) {
                                        *acc += ds * x;
                                    }
                                    let qi = &qv.row(seg.start + i)[off..off + dh];
                                    let gkj = &mut gk.row_mut(seg.start + j)[off..off + dh];
                                    for (acc, x) in gkj.iter_mut().zip(qi) {
                                        *acc += ds * x;
                                    }
                                }
                            }
                        }
                    }
                    slot(&mut grads, *q, (rows, d)).add_assign(&gq);
                    slot(&mut grads, *k, (rows, d)).add_assign(&gk);
                    slot(&mut grads, *v, (rows, d)).add_assign(&gv);
                }
                Op::So3Exp(x) => {
                    let xv = self.value(*x);
                    let gx = slot(&mut grads, *x, xv.shape());
                    for r in 0..xv.rows() {
                        let gm = mat(g.row(r));
                        let d = so3_exp_vjp(xv.row(r), &gm);
                        for (acc, v) in gx.row_mut(r).iter_mut().zip(d) {
                            *acc += v;
                        }
                    }
                }
                Op::RotMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let rows = av.rows();
                    let mut ga = Tensor::zeros(rows, 9);
                    let mut gb = Tensor::zeros(rows, 9);
                    for r in 0..rows {
                        let gm = mat(g.row(r));
                        write_mat(ga.row_mut(r), &(gm * mat(bv.row(r)).transpose()));
                        write_mat(gb.row_mut(r), &(mat(av.row(r)).transpose() * gm));
                    }
                    slot(&mut grads, *a, (rows, 9)).add_assign(&ga);
                    slot(&mut grads, *b, (rows, 9)).add_assign(&gb);
                }
                Op::RotTranspose(a) => {
                    let rows = g.rows();
                    let ga = slot(&mut grads, *a, (rows, 9));
                    for r in 0..rows {
                        let gt = mat(g.row(r)).transpose();
                        for (acc, v) in ga.row_mut(r).iter_mut().zip(row_major(&gt)) {
                            *acc += v;
                        }
                    }
                }
                Op::RotVec(a, x) => {
                    let (av, xv) = (self.value(*a), self.value(*x));
                    let rows = av.rows();
                    let mut ga = Tensor::zeros(rows, 9);
                    let mut gx = Tensor::zeros(rows, 3);
                    for r in 0..rows {
                        let gy = Vector3::from_row_slice(g.row(r));
                        let xr = Vector3::from_row_slice(xv.row(r));
                        write_mat(ga.row_mut(r), &(gy * xr.transpose()));
                        let d = mat(av.row(r)).transpose() * gy;
                        gx.row_mut(r).copy_from_slice(d.as_slice());
                    }
                    slot(&mut grads, *a, (rows, 9)).add_assign(&ga);
                    slot(&mut grads, *x, (rows, 3)).add_assign(&gx);
                }
            }
        }
        Ok(out)
    }
}

fn slot(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn mat(row: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(row)
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}

fn write_mat(out: &mut [f64], m: &Matrix3<f64>) {
    out.copy_from_slice(&row_major(m));
}

/// Vector–Jacobian product of Rodrigues' formula at `v` with upstream `g`.
fn so3_exp_vjp(v: &[f64], g: &Matrix3<f64>) -> [f64; 3] {
    let v = Vector3::new(v[0], v[1], v[2]);
    let t2 = v.norm_squared();
    let t = t2.sqrt();
    // R = I + a K + b K²; c = a'(θ)/θ, d = b'(θ)/θ
    let (a, b, c, d) = if t < 0.05 {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, co) = t.sin_cos();
        (
            s / t,
            (1.0 - co) / t2,
            (t * co - s) / (t2 * t),
            (t * s - 2.0 * (1.0 - co)) / (t2 * t2),
        )
    };
    let k = hat_unchecked(&v);
    let k2 = k * k;
    let gk = g.component_mul(&k).sum();
    let gk2 = g.component_mul(&k2).sum();
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let e = hat_unchecked(&Vector3::ith(i, 1.0));
        let dr = e * a + (e * k + k * e) * b;
        *o = g.component_mul(&dr).sum() + c * v[i] * gk + d * v[i] * gk2;
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences over every parameter entry.
    pub(crate) fn check_gradients(
        store: &mut ParamStore,
        build: &dyn Fn(&mut Graph) -> Var,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = crate::nn::gradcheck::gradient_check(store, &|g| Ok(build(g)), None, &mut rng).unwrap();
        assert!(report.passes(tol), "{} (rel {})", report.worst, report.max_rel);
    }

    fn rand_store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for (name, r, c) in shapes {
            s.add(*name, Tensor::randn(*r, *c, 0.7, &mut rng)).unwrap();
        }
        s
    }

    #[test]
    fn quadratic_form_gradient() {
        // loss = ‖Wx‖²/2, dL/dW = W x xᵀ
        let mut store = rand_store(&[("w", 3, 4)], 1);
        let x = Tensor::from_vec(4, 1, vec![0.5, -1.0, 2.0, 0.3]).unwrap();
        let xc = x.clone();
        let build = move |g: &mut Graph| {
            let w = g.param(ParamId(0));
            let xi = g.input(xc.clone());
            let y = g.matmul(w, xi).unwrap();
            let sq = g.square(y);
            let s = g.sum(sq);
            g.scale(s, 0.5)
        };
        let grads = {
            let mut g = Graph::new(&store);
            let l = build(&mut g);
            g.backward(l).unwrap()
        };
        let w = store.value(ParamId(0)).clone();
        let expected = w.matmul(&x).unwrap().matmul(&x.transpose()).unwrap();
        let got = grads.get(ParamId(0)).unwrap();
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        check_gradients(&mut store, &build, 1e-6);
    }

    #[test]
    fn zero_loss_path_gives_zero_gradients() {
        let store = rand_store(&[("w", 2, 2)], 2);
        let mut g = Graph::new(&store);
        let w = g.param(ParamId(0));
        let z = g.scale(w, 0.0);
        let l = g.sum(z);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(ParamId(0)).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = rand_store(&[("w", 2, 2)], 3);
        let mut g = Graph::new(&store);
        let w = g.param(ParamId(0));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn elementwise_ops_gradients() {
        let mut store = rand_store(&[("a", 3, 4), ("b", 3, 4), ("r", 1, 4)], 4);
        let build = |g: &mut Graph| {
            let a = g.param(ParamId(0));
            let b = g.param(ParamId(1));
            let r = g.param(ParamId(2));
            let x = g.mul(a, b).unwrap();
            let x = g.sub(x, a).unwrap();
            let x = g.add_bias(x, r).unwrap();
            let x = g.mul_row(x, r).unwrap();
            let x = g.silu(x);
            let e = g.scale(b, 0.3);
            let e = g.exp(e);
            let x = g.add(x, e).unwrap();
            let x = g.add_scalar(x, -0.2);
            let x = g.abs(x);
            let x2 = g.square(a);
            let x = g.add(x, x2).unwrap();
            g.sum(x)
        };
        check_gradients(&mut store, &build, 1e-6);
    }

    #[test]
    fn layernorm_gradient_and_constant_row() {
        let mut store = rand_store(&[("a", 4, 6), ("w", 4, 6)], 5);
        let build = |g: &mut Graph| {
            let a = g.param(ParamId(0));
            let w = g.param(ParamId(1));
            let y = g.layernorm(a);
            let y = g.mul(y, w).unwrap();
            let y = g.square(y);
            g.sum(y)
        };
        check_gradients(&mut store, &build, 1e-5);
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let c = g.input(Tensor::filled(2, 5, 3.7));
        let y = g.layernorm(c);
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn structural_ops_gradients() {
        let mut store = rand_store(&[("a", 3, 2), ("b", 3, 3), ("c", 2, 5)], 6);
        let build = |g: &mut Graph| {
            let a = g.param(ParamId(0));
            let b = g.param(ParamId(1));
            let c = g.param(ParamId(2));
            let ab = g.concat_cols(&[a, b]).unwrap();
            let abc = g.concat_rows(&[ab, c]).unwrap();
            let gath = g.gather_rows(abc, vec![4, 0, 0, 2, 3]).unwrap();
            let sl = g.slice_cols(gath, 1, 3).unwrap();
            let sq = g.square(sl);
            let w = g.input(Tensor::randn(5, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(9)));
            let m = g.mul(sq, w).unwrap();
            g.sum(m)
        };
        check_gradients(&mut store, &build, 1e-6);
    }

    #[test]
    fn attention_gradients_and_convexity() {
        let mut store = rand_store(&[("q", 7, 4), ("k", 7, 4), ("v", 7, 4), ("w", 7, 4)], 7);
        let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
        let build = move |g: &mut Graph| {
            let q = g.param(ParamId(0));
            let k = g.param(ParamId(1));
            let v = g.param(ParamId(2));
            let w = g.param(ParamId(3));
            let o = g.attention(q, k, v, &segs, 2).unwrap();
            let o = g.mul(o, w).unwrap();
            g.sum(o)
        };
        check_gradients(&mut store, &build, 1e-5);
        let mut g = Graph::new(&store);
        let q = g.param(ParamId(0));
        let k = g.param(ParamId(1));
        let v = g.param(ParamId(2));
        let o = g.attention(q, k, v, &segs, 2).unwrap();
        for p in g.attention_weights(o).unwrap() {
            let n = (p.len() as f64).sqrt() as usize;
            for i in 0..n {
                let s: f64 = p[i * n..(i + 1) * n].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_attention_returns_value() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = g.input(Tensor::randn(2, 4, 1.0, &mut rng));
        let k = g.input(Tensor::randn(2, 4, 1.0, &mut rng));
        let v = g.input(Tensor::randn(2, 4, 1.0, &mut rng));
        let segs = [Segment { start: 0, len: 1 }, Segment { start: 1, len: 1 }];
        let o = g.attention(q, k, v, &segs, 2).unwrap();
        assert_eq!(g.value(o), g.value(v));
    }

    #[test]
    fn rotation_ops_gradients() {
        let mut store = rand_store(&[("v", 5, 3), ("m", 5, 9), ("x", 5, 3)], 10);
        // include a tiny and a near-zero tangent row to exercise the Taylor branch
        store.value_mut(ParamId(0)).row_mut(3).copy_from_slice(&[1e-3, -2e-3, 5e-4]);
        store.value_mut(ParamId(0)).row_mut(4).copy_from_slice(&[0.03, 0.01, -0.02]);
        let build = |g: &mut Graph| {
            let v = g.param(ParamId(0));
            let m = g.param(ParamId(1));
            let x = g.param(ParamId(2));
            let r = g.so3_exp(v).unwrap();
            let rt = g.rot_transpose(r).unwrap();
            let p = g.rot_mul(m, rt).unwrap();
            let y = g.rot_vec(p, x).unwrap();
            let y = g.abs(y);
            g.sum(y)
        };
        check_gradients(&mut store, &build, 1e-5);
    }
}
