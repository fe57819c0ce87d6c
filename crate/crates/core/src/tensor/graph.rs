use std::borrow::Cow;
use std::collections::HashMap;

use super::attention::{self, AttnCache};
use super::conv::{self, ConvCache};
use super::gru::{self, GruCache};
use super::optim::ParamId;
use super::{rows_cols, shape_err, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Vec<T>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Minimum(Var, Var),
    Clamp(Var, T, T),
    Softmax(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Reshape(Var),
    Conv2d(ConvCache<T>),
    Gru(GruCache<T>),
    Attention(AttnCache<T>),
    AffinePoints(Var, Var),
    Pool(Var, Vec<T>),
}

struct Node<'a, T: Scalar> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub(crate) params: Vec<Option<Tensor<T>>>,
    pub(crate) vars: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a parameter bound on the graph, `None` if it was never bound.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.params.get_mut(id.0).and_then(|g| g.as_mut())
    }

    /// Gradient with respect to a [`Graph::variable`] leaf.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.vars.get(&var.0)
    }

    pub(crate) fn params_iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().flatten()
    }

    pub(crate) fn params_iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.params.iter().flatten()
    }

    /// Builds a gradient map directly, one optional entry per parameter.
    pub fn from_params(params: Vec<Option<Tensor<T>>>) -> Self {
        Self {
            params,
            vars: HashMap::new(),
        }
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => {
                    for (a, b) in m.data_mut().iter_mut().zip(t.data()) {
                        *a += *b;
                    }
                }
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }
}

/// A reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already a topological order for the backward sweep.
pub struct Graph<'a, T: Scalar> {
    params: &'a [Tensor<T>],
    nodes: Vec<Node<'a, T>>,
    bound: HashMap<usize, Var>,
}

type Res = Result<Var, TensorError>;

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(params: &'a [Tensor<T>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Binds a parameter. Binding the same id twice returns the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id.0) {
            return v;
        }
        let t = &self.params[id.0];
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id.0, v);
        v
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.to_vec(),
        }
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[.., k] x b[k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k) = rows_cols(&sa);
        if sb.len() != 2 || sb[0] != k || sa.is_empty() {
            return Err(shape_err("matmul", &[&sa, &sb]));
        }
        let n = sb[1];
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::MatMul(a, b), ng))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out: Vec<T> = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Res {
        self.same_shape("minimum", a, b)?;
        Ok(self.binary(a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b)))
    }

    /// Adds a row vector `b[n]` to every row of `a[.., n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Res {
        let (_, n) = rows_cols(self.shape(a));
        if self.shape(b) != [n] {
            return Err(shape_err("add_row", &[self.shape(a), self.shape(b)]));
        }
        let bv = self.value(b).to_vec();
        let out: Vec<T> = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bv).map(|(&x, &y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddRow(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Res {
        if self.shape(a) != c.shape() {
            return Err(shape_err("mul_const", &[self.shape(a), c.shape()]));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::MulConst(a, c.data().to_vec()), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    // ---- row-wise distributions -----------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, n) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Softmax(a), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (_, n) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().fold(T::zero(), |s, &x| s + (x - max).exp()).ln() + max;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::LogSoftmax(a), ng)
    }

    // ---- indexing and layout --------------------------------------------

    /// Row lookup: `table[v, d]` indexed by `idx` gives `[idx.len(), d]`.
    /// Serves both as embedding lookup and as a general row gather.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Res {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("gather", &[&shape]));
        }
        let (v, d) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(idx.len() * d);
        let tv = self.value(table);
        for &i in idx {
            if i >= v {
                return Err(TensorError::Index {
                    op: "gather",
                    index: i,
                    bound: v,
                });
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(vec![idx.len(), d], out, Op::Gather(table, idx.to_vec()), ng))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Res {
        let rows = match parts.first() {
            Some(&p) => rows_cols(self.shape(p)).0,
            None => return Err(shape_err("concat", &[])),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                let shapes: Vec<&[usize]> = parts.iter().map(|&q| self.shape(q)).collect();
                return Err(shape_err("concat", &shapes));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, total], out, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `[start, start + width)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Res {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + width > s[1] {
            return Err(shape_err("slice_cols", &[&s, &[start, width]]));
        }
        let (rows, n) = (s[0], s[1]);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&self.value(a)[r * n + start..r * n + start + width]);
        }
        let ng = self.ng(a);
        Ok(self.push(vec![rows, width], out, Op::SliceCols(a, start), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Res {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_err("reshape", &[self.shape(a), shape]));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), ng))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).len() as f64);
        let s = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x) / n;
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Mean(a), ng)
    }

    /// Sum over the last axis.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let (_, n) = rows_cols(&s);
        let out: Vec<T> = self
            .value(a)
            .chunks(n)
            .map(|r| r.iter().fold(T::zero(), |acc, &x| acc + x))
            .collect();
        let mut shape = s[..s.len().saturating_sub(1)].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(a);
        self.push(shape, out, Op::RowSum(a), ng)
    }

    // ---- structured primitives ------------------------------------------

    /// 2-D convolution. `x[b, cin, h, w]`, `w[cout, cin, k, k]`, `bias[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Res {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(bias).to_vec(),
        );
        let geom = conv::ConvGeom::new(&sx, &sw, &sb, stride, pad)
            .ok_or_else(|| shape_err("conv2d", &[&sx, &sw, &sb]))?;
        let (out, cols) = conv::forward(&geom, self.value(x), self.value(w), self.value(bias));
        let ng = self.ng(x) || self.ng(w) || self.ng(bias);
        let shape = vec![geom.batch, geom.cout, geom.ho, geom.wo];
        Ok(self.push(
            shape,
            out,
            Op::Conv2d(ConvCache {
                x,
                w,
                bias,
                geom,
                cols,
            }),
            ng,
        ))
    }

    /// One gated-recurrent-unit step (gate order reset, update, candidate).
    /// `x[b, i]`, `h[b, hd]`, `wi[i, 3hd]`, `wh[hd, 3hd]`, `bi[3hd]`, `bh[3hd]`.
    pub fn gru_cell(&mut self, x: Var, h: Var, wi: Var, wh: Var, bi: Var, bh: Var) -> Res {
        let shapes: Vec<Vec<usize>> = [x, h, wi, wh, bi, bh]
            .iter()
            .map(|&v| self.shape(v).to_vec())
            .collect();
        let dims = gru::GruDims::new(&shapes).ok_or_else(|| TensorError::Shape {
            op: "gru_cell",
            shapes: shapes.clone(),
        })?;
        let (out, cache) = gru::forward(
            dims,
            [x, h, wi, wh, bi, bh],
            self.value(x),
            self.value(h),
            self.value(wi),
            self.value(wh),
            self.value(bi),
            self.value(bh),
        );
        let ng = [x, h, wi, wh, bi, bh].iter().any(|&v| self.ng(v));
        Ok(self.push(vec![dims.batch, dims.hidden], out, Op::Gru(cache), ng))
    }

    /// Scaled dot-product attention within groups: `q, k, v` are `[g, c, d]`;
    /// `key_mask[g * c]` marks keys that may be attended to. A query whose
    /// group has no valid key yields a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool]) -> Res {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3 || sq != sk || sq != sv || key_mask.len() != sq[0] * sq[1] {
            return Err(shape_err("attention", &[&sq, &sk, &sv, &[key_mask.len()]]));
        }
        let dims = (sq[0], sq[1], sq[2]);
        let (out, weights) =
            attention::forward(dims, self.value(q), self.value(k), self.value(v), key_mask);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            sq,
            out,
            Op::Attention(AttnCache {
                q,
                k,
                v,
                dims,
                weights,
            }),
            ng,
        ))
    }

    /// Applies per-row 3x4 affine blocks `m[b, 12]` (row-major `[R | t]`) to
    /// `n` points per row, `p[b, 3n]`.
    pub fn affine_points(&mut self, m: Var, p: Var) -> Res {
        let (sm, sp) = (self.shape(m).to_vec(), self.shape(p).to_vec());
        if sm.len() != 2 || sp.len() != 2 || sm[1] != 12 || sm[0] != sp[0] || sp[1] % 3 != 0 {
            return Err(shape_err("affine_points", &[&sm, &sp]));
        }
        let (b, np) = (sp[0], sp[1] / 3);
        let (mv, pv) = (self.value(m), self.value(p));
        let mut out = vec![T::zero(); b * np * 3];
        for r in 0..b {
            let mr = &mv[r * 12..r * 12 + 12];
            for n in 0..np {
                let pt = &pv[r * np * 3 + n * 3..r * np * 3 + n * 3 + 3];
                for i in 0..3 {
                    out[r * np * 3 + n * 3 + i] = mr[4 * i] * pt[0]
                        + mr[4 * i + 1] * pt[1]
                        + mr[4 * i + 2] * pt[2]
                        + mr[4 * i + 3];
                }
            }
        }
        let ng = self.ng(m) || self.ng(p);
        Ok(self.push(sp, out, Op::AffinePoints(m, p), ng))
    }

    /// Weighted sum over the middle axis: `x[g, c, d]`, constant `w[g, c]`
    /// gives `[g, d]`.
    pub fn pool(&mut self, x: Var, weights: &[T]) -> Res {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || weights.len() != s[0] * s[1] {
            return Err(shape_err("pool", &[&s, &[weights.len()]]));
        }
        let (g, c, d) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); g * d];
        for gi in 0..g {
            for ci in 0..c {
                let w = weights[gi * c + ci];
                if w == T::zero() {
                    continue;
                }
                let row = &xv[(gi * c + ci) * d..(gi * c + ci + 1) * d];
                for (o, &xval) in out[gi * d..(gi + 1) * d].iter_mut().zip(row) {
                    *o += w * xval;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![g, d], out, Op::Pool(x, weights.to_vec()), ng))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        self.backward_watch(loss, &[])
    }

    /// Like [`Graph::backward`], also reporting gradients at the intermediate
    /// nodes in `watch` through [`Gradients::wrt`].
    pub fn backward_watch(&self, loss: Var, watch: &[Var]) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut vars = HashMap::new();
        for &w in watch {
            let node = &self.nodes[w.0];
            let data = grads[w.0]
                .clone()
                .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
            vars.insert(
                w.0,
                Tensor {
                    shape: node.shape.clone(),
                    data,
                },
            );
        }
        let mut params: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        for (&pid, &var) in &self.bound {
            let shape = self.nodes[var.0].shape.clone();
            let data = grads[var.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.nodes[var.0].value.len()]);
            params[pid] = Some(Tensor { shape, data });
        }
        let param_nodes: std::collections::HashSet<usize> =
            self.bound.values().map(|v| v.0).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && !param_nodes.contains(&i) {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                vars.insert(
                    i,
                    Tensor {
                        shape: node.shape.clone(),
                        data,
                    },
                );
            }
        }
        Ok(Gradients { params, vars })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(self.shape(*a));
                let n = self.shape(*b)[1];
                if self.ng(*a) {
                    let bv = self.value(*b);
                    let da = acc(grads, *a, m * k);
                    // da += g[m,n] * b^T[n,k]
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        bv,
                        1,
                        n as isize,
                        T::one(),
                        da,
                        k as isize,
                        1,
                    );
                }
                if self.ng(*b) {
                    let av = self.value(*a);
                    let db = acc(grads, *b, k * n);
                    // db += a^T[k,m] * g[m,n]
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av,
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::one(),
                        db,
                        n as isize,
                        1,
                    );
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |gi, _| gi);
                self.acc_map(grads, *b, g, |gi, _| gi);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |gi, _| gi);
                self.acc_map(grads, *b, g, |gi, _| -gi);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_map(grads, *a, g, |gi, j| gi * bv[j]);
                self.acc_map(grads, *b, g, |gi, j| gi * av[j]);
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_map(grads, *a, g, |gi, j| {
                    if av[j] <= bv[j] {
                        gi
                    } else {
                        T::zero()
                    }
                });
                self.acc_map(grads, *b, g, |gi, j| {
                    if av[j] <= bv[j] {
                        T::zero()
                    } else {
                        gi
                    }
                });
            }
            Op::AddRow(a, b) => {
                self.acc_map(grads, *a, g, |gi, _| gi);
                if self.ng(*b) {
                    let n = self.shape(*b)[0];
                    let db = acc(grads, *b, n);
                    for row in g.chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => self.acc_map(grads, *a, g, |gi, _| gi * *c),
            Op::AddScalar(a) => self.acc_map(grads, *a, g, |gi, _| gi),
            Op::MulConst(a, c) => self.acc_map(grads, *a, g, |gi, j| gi * c[j]),
            Op::Relu(a) => self.acc_map(grads, *a, g, |gi, j| {
                if y[j] > T::zero() {
                    gi
                } else {
                    T::zero()
                }
            }),
            Op::Tanh(a) => self.acc_map(grads, *a, g, |gi, j| gi * (T::one() - y[j] * y[j])),
            Op::Sigmoid(a) => self.acc_map(grads, *a, g, |gi, j| gi * y[j] * (T::one() - y[j])),
            Op::Exp(a) => self.acc_map(grads, *a, g, |gi, j| gi * y[j]),
            Op::Ln(a) => {
                let av = self.value(*a);
                self.acc_map(grads, *a, g, |gi, j| gi / av[j])
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                self.acc_map(grads, *a, g, |gi, j| {
                    if av[j] > T::zero() {
                        gi
                    } else if av[j] < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                self.acc_map(grads, *a, g, |gi, j| {
                    if av[j] >= *lo && av[j] <= *hi {
                        gi
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Softmax(a) => {
                if self.ng(*a) {
                    let (_, n) = rows_cols(&node.shape);
                    let da = acc(grads, *a, y.len());
                    for ((dr, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&gg, &yy)| s + gg * yy);
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if self.ng(*a) {
                    let (_, n) = rows_cols(&node.shape);
                    let da = acc(grads, *a, y.len());
                    for ((dr, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let gsum = gr.iter().fold(T::zero(), |s, &x| s + x);
                        for j in 0..n {
                            dr[j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::Gather(table, idx) => {
                if self.ng(*table) {
                    let d = self.shape(*table)[1];
                    let len = self.value(*table).len();
                    let dt = acc(grads, *table, len);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..d {
                            dt[src * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.ng(p) {
                        let dp = acc(grads, p, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                dp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                if self.ng(*a) {
                    let s = self.shape(*a);
                    let (rows, n) = (s[0], s[1]);
                    let w = node.shape[1];
                    let da = acc(grads, *a, rows * n);
                    for r in 0..rows {
                        for j in 0..w {
                            da[r * n + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => self.acc_map(grads, *a, g, |gi, _| gi),
            Op::Sum(a) => self.acc_map(grads, *a, &[], |_, _| g[0]),
            Op::Mean(a) => {
                let n = T::from_f64(self.value(*a).len() as f64);
                self.acc_map(grads, *a, &[], |_, _| g[0] / n)
            }
            Op::RowSum(a) => {
                if self.ng(*a) {
                    let (_, n) = rows_cols(self.shape(*a));
                    let len = self.value(*a).len();
                    let da = acc(grads, *a, len);
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += g[j / n];
                    }
                }
            }
            Op::Conv2d(c) => {
                let want = (self.ng(c.x), self.ng(c.w), self.ng(c.bias));
                let (dx, dw, db) = conv::backward(&c.geom, g, self.value(c.w), &c.cols, want);
                if let Some(dx) = dx {
                    add_into(acc(grads, c.x, dx.len()), &dx);
                }
                if let Some(dw) = dw {
                    add_into(acc(grads, c.w, dw.len()), &dw);
                }
                if let Some(db) = db {
                    add_into(acc(grads, c.bias, db.len()), &db);
                }
            }
            Op::Gru(c) => {
                let [x, h, wi, wh, bi, bh] = c.inputs;
                let d = gru::backward(
                    c,
                    g,
                    self.value(x),
                    self.value(h),
                    self.value(wi),
                    self.value(wh),
                );
                for (var, grad) in [(x, d.dx), (h, d.dh), (wi, d.dwi), (wh, d.dwh), (bi, d.dbi), (bh, d.dbh)] {
                    if self.ng(var) {
                        add_into(acc(grads, var, grad.len()), &grad);
                    }
                }
            }
            Op::Attention(c) => {
                let (dq, dk, dv) = attention::backward(
                    c,
                    g,
                    self.value(c.q),
                    self.value(c.k),
                    self.value(c.v),
                );
                for (var, grad) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
                    if self.ng(var) {
                        add_into(acc(grads, var, grad.len()), &grad);
                    }
                }
            }
            Op::AffinePoints(m, p) => {
                let (mv, pv) = (self.value(*m), self.value(*p));
                let b = node.shape[0];
                let np = node.shape[1] / 3;
                if self.ng(*m) {
                    let dm = acc(grads, *m, b * 12);
                    for r in 0..b {
                        for n in 0..np {
                            let base = r * np * 3 + n * 3;
                            for i in 0..3 {
                                let go = g[base + i];
                                dm[r * 12 + 4 * i] += go * pv[base];
                                dm[r * 12 + 4 * i + 1] += go * pv[base + 1];
                                dm[r * 12 + 4 * i + 2] += go * pv[base + 2];
                                dm[r * 12 + 4 * i + 3] += go;
                            }
                        }
                    }
                }
                if self.ng(*p) {
                    let dp = acc(grads, *p, b * np * 3);
                    for r in 0..b {
                        for n in 0..np {
                            let base = r * np * 3 + n * 3;
                            for kk in 0..3 {
                                let mut s = T::zero();
                                for i in 0..3 {
                                    s += g[base + i] * mv[r * 12 + 4 * i + kk];
                                }
                                dp[base + kk] += s;
                            }
                        }
                    }
                }
            }
            Op::Pool(x, w) => {
                if self.ng(*x) {
                    let s = self.shape(*x);
                    let (gg, c, d) = (s[0], s[1], s[2]);
                    let dx = acc(grads, *x, gg * c * d);
                    for gi in 0..gg {
                        for ci in 0..c {
                            let wt = w[gi * c + ci];
                            if wt == T::zero() {
                                continue;
                            }
                            for j in 0..d {
                                dx[(gi * c + ci) * d + j] += wt * g[gi * d + j];
                            }
                        }
                    }
                }
            }
        }
    }

    /// `grads[a][j] += f(g[j], j)`; when `g` is empty, `f` receives zero.
    fn acc_map(
        &self,
        grads: &mut [Option<Vec<T>>],
        a: Var,
        g: &[T],
        f: impl Fn(T, usize) -> T,
    ) {
        if !self.ng(a) {
            return;
        }
        let len = self.value(a).len();
        let da = acc(grads, a, len);
        if g.is_empty() {
            for (j, d) in da.iter_mut().enumerate() {
                *d += f(T::zero(), j);
            }
        } else {
            for (j, d) in da.iter_mut().enumerate() {
                *d += f(g[j], j);
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}
