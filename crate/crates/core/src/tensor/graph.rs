use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::rc::Rc;
use std::sync::Arc;

use super::{strides, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::exec;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Fixed sparse linear map applied per channel: `out[c, i] = sum_k w_ik in[c, j_ik]`.
///
/// Used for every bilinear resampling with fixed coordinates (lift, splat,
/// ego-motion compensation). Its transpose is the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    n_in: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMap {
    pub fn from_rows(n_in: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, w) in row {
                assert!(c < n_in, "sparse column {c} out of range {n_in}");
                cols.push(c);
                weights.push(w);
            }
            row_ptr.push(cols.len());
        }
        Self {
            n_in,
            row_ptr,
            cols,
            weights,
        }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[s..e].iter().copied().zip(self.weights[s..e].iter().copied())
    }

    pub fn row_is_empty(&self, i: usize) -> bool {
        self.row_ptr[i] == self.row_ptr[i + 1]
    }

    /// Apply to `channels` stacked input vectors of length `n_in`.
    pub fn apply(&self, input: &[f64], channels: usize) -> Vec<f64> {
        let n_out = self.n_out();
        let mut out = vec![0.0; channels * n_out];
        for c in 0..channels {
            let src = &input[c * self.n_in..(c + 1) * self.n_in];
            let dst = &mut out[c * n_out..(c + 1) * n_out];
            for (i, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc += self.weights[k] * src[self.cols[k]];
                }
                *d = acc;
            }
        }
        out
    }

    /// Transposed application, accumulating into `out` (`channels * n_in`).
    pub fn apply_transpose_into(&self, grad: &[f64], channels: usize, out: &mut [f64]) {
        let n_out = self.n_out();
        for c in 0..channels {
            let g = &grad[c * n_out..(c + 1) * n_out];
            let dst = &mut out[c * self.n_in..(c + 1) * self.n_in];
            for (i, &gi) in g.iter().enumerate() {
                if gi == 0.0 {
                    continue;
                }
                for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                    dst[self.cols[k]] += self.weights[k] * gi;
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    AddBias(Var, Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    LnClamped(Var, f64),
    Sum(Var),
    SumAxis(Var, usize),
    Sparse(Var, Arc<SparseMap>),
    Conv2d { x: Var, w: Var, b: Var },
    BceWithLogits {
        x: Var,
        target: Rc<Vec<f64>>,
        weight: Rc<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// A graph is built for one forward pass and discarded after `backward`.
/// Parameters are read from the bound [`ParamStore`]; each parameter becomes
/// a single leaf no matter how often it is referenced.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
        }
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * gauss_cdf(x)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

// out[m,n] += a[m,k] * b[k,n]
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let body = |i: usize, row: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= 1 << 16 && n > 0 {
        exec::for_each_chunk_mut(&mut out[..m * n], n, body);
    } else {
        for (i, row) in out[..m * n].chunks_mut(n.max(1)).enumerate() {
            body(i, row);
        }
    }
}

// out[m,k] += g[m,n] * b[k,n]^T
fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            out[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[k,n] += a[m,k]^T * g[m,n]
fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// (outer, axis length, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

impl<'p> Graph<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|v| nodes[v.0].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn leaf(&self, value: Tensor, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Input leaf whose gradient is tracked (e.g. for saliency).
    pub fn input(&self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf for a bound parameter, created once per graph.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&id) {
            return v;
        }
        let store = self
            .params
            .expect("graph has no parameter store bound");
        let t = &store.get(id).tensor;
        let v = self.leaf(Tensor::new(&t.shape, t.data.clone()).expect("valid param"), true);
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes.borrow()[v.0].value;
        Tensor::new(&n.shape, n.data.clone()).expect("node value")
    }

    pub fn data(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.data.clone()
    }

    pub fn with_data<R>(&self, v: Var, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value.data)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data[0]
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            Tensor {
                shape: xv.shape.clone(),
                data: xv.data.iter().map(|&v| f(v)).collect(),
                requires_grad: false,
                grad: None,
            }
        };
        self.push(value, op, &[x])
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape != bv.shape {
                return Err(mismatch(name, &av.shape, &bv.shape));
            }
            Tensor::new(
                &av.shape,
                av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
            )?
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    /// Elementwise product with a constant of identical shape.
    pub fn mul_const(&self, x: Var, c: &Tensor) -> Result<Var> {
        let shape = self.shape(x);
        if shape != c.shape {
            return Err(mismatch("mul_const", &shape, &c.shape));
        }
        let c = Rc::new(c.data.clone());
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            Tensor::new(&shape, xv.data.iter().zip(c.iter()).map(|(a, b)| a * b).collect())?
        };
        Ok(self.push(value, Op::MulConst(x, c), &[x]))
    }

    /// `x[..., n] + bias[n]`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[bias.0].value);
            let n = *xv.shape.last().unwrap_or(&1);
            if bv.shape != [n] {
                return Err(mismatch("add_bias", &xv.shape, &bv.shape));
            }
            let mut data = xv.data.clone();
            for row in data.chunks_mut(n) {
                for (o, b) in row.iter_mut().zip(&bv.data) {
                    *o += b;
                }
            }
            Tensor::new(&xv.shape, data)?
        };
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// 2-D matrix product `[m,k] x [k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0] {
                return Err(mismatch("matmul", &av.shape, &bv.shape));
            }
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            let mut out = vec![0.0; m * n];
            gemm_acc(&av.data, &bv.data, &mut out, m, k, n);
            Tensor::new(&[m, n], out)?
        };
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]^T` when `trans_b`.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let ok = av.rank() == 3
                && bv.rank() == 3
                && av.shape[0] == bv.shape[0]
                && if trans_b {
                    av.shape[2] == bv.shape[2]
                } else {
                    av.shape[2] == bv.shape[1]
                };
            if !ok {
                return Err(mismatch("bmm", &av.shape, &bv.shape));
            }
            let (bs, m, k) = (av.shape[0], av.shape[1], av.shape[2]);
            let n = if trans_b { bv.shape[1] } else { bv.shape[2] };
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                let ab = &av.data[i * m * k..(i + 1) * m * k];
                let bb = &bv.data[i * k * n..(i + 1) * k * n];
                let ob = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    gemm_nt_acc(ab, bb, ob, m, n, k);
                } else {
                    gemm_acc(ab, bb, ob, m, k, n);
                }
            }
            Tensor::new(&[bs, m, n], out)?
        };
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let n: usize = shape.iter().product();
            if n != xv.numel() {
                return Err(mismatch("reshape", &xv.shape, shape));
            }
            Tensor::new(shape, xv.data.clone())?
        };
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let mut seen = vec![false; xv.rank()];
            if perm.len() != xv.rank() {
                return Err(mismatch("permute", &xv.shape, perm));
            }
            for &p in perm {
                if p >= xv.rank() || seen[p] {
                    return Err(mismatch("permute", &xv.shape, perm));
                }
                seen[p] = true;
            }
            let (data, shape) = permute_data(&xv.data, &xv.shape, perm);
            Tensor::new(&shape, data)?
        };
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Config("concat of zero tensors".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[xs[0].0].value.shape;
            if axis >= first.len() {
                return Err(Error::InvalidAxis {
                    axis,
                    rank: first.len(),
                });
            }
            let mut total = 0;
            for v in xs {
                let s = &nodes[v.0].value.shape;
                let same_rest = s.len() == first.len()
                    && s.iter()
                        .zip(first)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b);
                if !same_rest {
                    return Err(mismatch("concat", first, s));
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = split_axis(first, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for v in xs {
                    let t = &nodes[v.0].value;
                    let len = t.shape[axis] * inner;
                    data.extend_from_slice(&t.data[o * len..(o + 1) * len]);
                }
            }
            Tensor::new(&shape, data)?
        };
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis), xs))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if axis >= xv.rank() {
                return Err(Error::InvalidAxis {
                    axis,
                    rank: xv.rank(),
                });
            }
            if start + len > xv.shape[axis] {
                return Err(Error::OutOfRange(format!(
                    "slice {start}..{} of axis size {}",
                    start + len,
                    xv.shape[axis]
                )));
            }
            let (outer, n, inner) = split_axis(&xv.shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                data.extend_from_slice(&xv.data[base..base + len * inner]);
            }
            let mut shape = xv.shape.clone();
            shape[axis] = len;
            Tensor::new(&shape, data)?
        };
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if axis >= xv.rank() {
                return Err(Error::InvalidAxis {
                    axis,
                    rank: xv.rank(),
                });
            }
            let (outer, n, inner) = split_axis(&xv.shape, axis);
            let mut out = vec![0.0; xv.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * n * inner + k * inner + i;
                    let mx = (0..n).map(|k| xv.data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for k in 0..n {
                        let e = (xv.data[at(k)] - mx).exp();
                        out[at(k)] = e;
                        s += e;
                    }
                    for k in 0..n {
                        out[at(k)] /= s;
                    }
                }
            }
            Tensor::new(&xv.shape, out)?
        };
        Ok(self.push(value, Op::Softmax(x, axis), &[x]))
    }

    /// Layer normalisation over the last axis with affine gain and bias.
    pub fn layernorm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let n = *xv.shape.last().unwrap_or(&1);
            if gv.shape != [n] || bv.shape != [n] {
                return Err(mismatch("layernorm", &xv.shape, &gv.shape));
            }
            let rows = xv.numel() / n.max(1);
            let mut out = vec![0.0; xv.numel()];
            let mut xhat = vec![0.0; xv.numel()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &xv.data[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..n {
                    let h = (row[j] - mean) * is;
                    xhat[r * n + j] = h;
                    out[r * n + j] = h * gv.data[j] + bv.data[j];
                }
            }
            (Tensor::new(&xv.shape, out)?, xhat, inv_std)
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Exact GELU `x * Phi(x)`.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, gelu_scalar, Op::Gelu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// `ln(max(x, eps))`; zero gradient where clamped.
    pub fn ln_clamped(&self, x: Var, eps: f64) -> Var {
        self.unary(x, move |v| v.max(eps).ln(), Op::LnClamped(x, eps))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.with_data(x, |d| d.iter().sum::<f64>());
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.with_data(x, |d| d.len()).max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if axis >= xv.rank() {
                return Err(Error::InvalidAxis {
                    axis,
                    rank: xv.rank(),
                });
            }
            let (outer, n, inner) = split_axis(&xv.shape, axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &xv.data[o * n * inner + k * inner..o * n * inner + (k + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut shape = xv.shape.clone();
            shape.remove(axis);
            Tensor::new(&shape, out)?
        };
        Ok(self.push(value, Op::SumAxis(x, axis), &[x]))
    }

    /// Apply a fixed sparse map to `x[C, n_in]`, producing `[C, n_out]`.
    pub fn sparse_map(&self, x: Var, map: &Arc<SparseMap>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.rank() != 2 || xv.shape[1] != map.n_in() {
                return Err(mismatch("sparse_map", &xv.shape, &[map.n_out(), map.n_in()]));
            }
            let c = xv.shape[0];
            Tensor::new(&[c, map.n_out()], map.apply(&xv.data, c))?
        };
        Ok(self.push(value, Op::Sparse(x, Arc::clone(map)), &[x]))
    }

    /// Same-padded odd-kernel 2-D convolution: `x[Cin,N,M]`, `w[Cout,Cin,k,k]`, `b[Cout]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            if xv.rank() != 3
                || wv.rank() != 4
                || wv.shape[1] != xv.shape[0]
                || wv.shape[2] != wv.shape[3]
                || wv.shape[2] % 2 == 0
                || bv.shape != [wv.shape[0]]
            {
                return Err(mismatch("conv2d", &xv.shape, &wv.shape));
            }
            let (cin, h, wd) = (xv.shape[0], xv.shape[1], xv.shape[2]);
            let (cout, k) = (wv.shape[0], wv.shape[2]);
            let mut out = vec![0.0; cout * h * wd];
            let body = |co: usize, dst: &mut [f64]| {
                conv_forward_channel(&xv.data, &wv.data, bv.data[co], co, cin, h, wd, k, dst)
            };
            if cout * cin * h * wd * k * k >= 1 << 16 {
                exec::for_each_chunk_mut(&mut out, h * wd, body);
            } else {
                for (co, dst) in out.chunks_mut((h * wd).max(1)).enumerate() {
                    body(co, dst);
                }
            }
            Tensor::new(&[cout, h, wd], out)?
        };
        Ok(self.push(value, Op::Conv2d { x, w, b }, &[x, w, b]))
    }

    /// Weighted logistic loss summed over elements:
    /// `sum_i w_i (softplus(x_i) - t_i x_i)`.
    pub fn bce_with_logits(&self, x: Var, target: &Tensor, weight: &Tensor) -> Result<Var> {
        let shape = self.shape(x);
        if target.shape != shape || weight.shape != shape {
            return Err(mismatch("bce_with_logits", &shape, &target.shape));
        }
        let s = self.with_data(x, |d| {
            d.iter()
                .zip(&target.data)
                .zip(&weight.data)
                .map(|((&x, &t), &w)| w * (softplus_scalar(x) - t * x))
                .sum::<f64>()
        });
        Ok(self.push(
            Tensor::scalar(s),
            Op::BceWithLogits {
                x,
                target: Rc::new(target.data.clone()),
                weight: Rc::new(weight.data.clone()),
            },
            &[x],
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.numel() != 1 {
            return Err(mismatch("backward root", &nodes[root.0].value.shape, &[]));
        }
        if !nodes[root.0].value.data[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let param_vars = self
            .param_vars
            .borrow()
            .iter()
            .map(|(&p, &v)| (p, v))
            .collect();
        Ok(Gradients { grads, param_vars })
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward_channel(
    x: &[f64],
    w: &[f64],
    bias: f64,
    co: usize,
    cin: usize,
    h: usize,
    wd: usize,
    k: usize,
    dst: &mut [f64],
) {
    let r = (k / 2) as isize;
    dst.fill(bias);
    for ci in 0..cin {
        let src = &x[ci * h * wd..(ci + 1) * h * wd];
        for dy in 0..k {
            for dx in 0..k {
                let wv = w[((co * cin + ci) * k + dy) * k + dx];
                if wv == 0.0 {
                    continue;
                }
                let oy = dy as isize - r;
                let ox = dx as isize - r;
                let y0 = (-oy).max(0) as usize;
                let y1 = (h as isize - oy).min(h as isize).max(0) as usize;
                let x0 = (-ox).max(0) as usize;
                let x1 = (wd as isize - ox).min(wd as isize).max(0) as usize;
                for y in y0..y1 {
                    let sy = (y as isize + oy) as usize;
                    let drow = &mut dst[y * wd..(y + 1) * wd];
                    let srow = &src[sy * wd..(sy + 1) * wd];
                    for xx in x0..x1 {
                        drow[xx] += wv * srow[(xx as isize + ox) as usize];
                    }
                }
            }
        }
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &v in [a, b] {
                if needs(v) {
                    let dst = acc(grads, v, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                let dst = acc(grads, *a, g.len());
                dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            if needs(*b) {
                let dst = acc(grads, *b, g.len());
                dst.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let bd = &val(*b).data;
                let dst = acc(grads, *a, g.len());
                for ((d, x), y) in dst.iter_mut().zip(g).zip(bd) {
                    *d += x * y;
                }
            }
            if needs(*b) {
                let ad = &val(*a).data;
                let dst = acc(grads, *b, g.len());
                for ((d, x), y) in dst.iter_mut().zip(g).zip(ad) {
                    *d += x * y;
                }
            }
        }
        Op::Scale(x, s) => {
            let dst = acc(grads, *x, g.len());
            dst.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
        }
        Op::MulConst(x, c) => {
            let dst = acc(grads, *x, g.len());
            for ((d, v), cv) in dst.iter_mut().zip(g).zip(c.iter()) {
                *d += v * cv;
            }
        }
        Op::AddBias(x, b) => {
            if needs(*x) {
                let dst = acc(grads, *x, g.len());
                dst.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            if needs(*b) {
                let n = val(*b).numel();
                let dst = acc(grads, *b, n);
                for row in g.chunks(n) {
                    dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            if needs(*a) {
                let dst = acc(grads, *a, m * k);
                gemm_nt_acc(g, &bv.data, dst, m, k, n);
            }
            if needs(*b) {
                let dst = acc(grads, *b, k * n);
                gemm_tn_acc(&av.data, g, dst, m, k, n);
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (bs, m, k) = (av.shape[0], av.shape[1], av.shape[2]);
            let n = node.value.shape[2];
            if needs(*a) {
                let dst = acc(grads, *a, bs * m * k);
                for i in 0..bs {
                    let gb = &g[i * m * n..(i + 1) * m * n];
                    let bb = &bv.data[i * k * n..(i + 1) * k * n];
                    let db = &mut dst[i * m * k..(i + 1) * m * k];
                    if *trans_b {
                        // a_grad = g * b  (b is [n,k])
                        gemm_acc(gb, bb, db, m, n, k);
                    } else {
                        gemm_nt_acc(gb, bb, db, m, k, n);
                    }
                }
            }
            if needs(*b) {
                let dst = acc(grads, *b, bs * k * n);
                for i in 0..bs {
                    let gb = &g[i * m * n..(i + 1) * m * n];
                    let ab = &av.data[i * m * k..(i + 1) * m * k];
                    let db = &mut dst[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // b_grad[n,k] = g^T * a
                        gemm_tn_acc(gb, ab, db, m, n, k);
                    } else {
                        gemm_tn_acc(ab, gb, db, m, k, n);
                    }
                }
            }
        }
        Op::Reshape(x) => {
            let dst = acc(grads, *x, g.len());
            dst.iter_mut().zip(g).for_each(|(d, v)| *d += v);
        }
        Op::Permute(x, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (back, _) = permute_data(g, &node.value.shape, &inv);
            let dst = acc(grads, *x, g.len());
            dst.iter_mut().zip(&back).for_each(|(d, v)| *d += v);
        }
        Op::Concat(xs, axis) => {
            let (outer, _, inner) = split_axis(&node.value.shape, *axis);
            let total = node.value.shape[*axis] * inner;
            let mut offset = 0;
            for &v in xs {
                let len = val(v).shape[*axis] * inner;
                if needs(v) {
                    let n = val(v).numel();
                    let dst = acc(grads, v, n);
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + len];
                        dst[o * len..(o + 1) * len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let xs = &val(*x).shape;
            let (outer, n, inner) = split_axis(xs, *axis);
            let len = node.value.shape[*axis];
            let dst = acc(grads, *x, outer * n * inner);
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                dst[base..base + len * inner]
                    .iter_mut()
                    .zip(&g[o * len * inner..(o + 1) * len * inner])
                    .for_each(|(d, s)| *d += s);
            }
        }
        Op::Softmax(x, axis) => {
            let y = &node.value.data;
            let (outer, n, inner) = split_axis(&node.value.shape, *axis);
            let dst = acc(grads, *x, y.len());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * n * inner + k * inner + i;
                    let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..n {
                        dst[at(k)] += y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = &val(*gain).data;
            let n = gv.len();
            let rows = xhat.len() / n.max(1);
            if needs(*gain) {
                let dst = acc(grads, *gain, n);
                for r in 0..rows {
                    for j in 0..n {
                        dst[j] += g[r * n + j] * xhat[r * n + j];
                    }
                }
            }
            if needs(*bias) {
                let dst = acc(grads, *bias, n);
                for r in 0..rows {
                    for j in 0..n {
                        dst[j] += g[r * n + j];
                    }
                }
            }
            if needs(*x) {
                let dst = acc(grads, *x, xhat.len());
                let nf = n as f64;
                for r in 0..rows {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        let gh = g[r * n + j] * gv[j];
                        s1 += gh;
                        s2 += gh * xhat[r * n + j];
                    }
                    for j in 0..n {
                        let gh = g[r * n + j] * gv[j];
                        dst[r * n + j] +=
                            inv_std[r] / nf * (nf * gh - s1 - xhat[r * n + j] * s2);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xd = &val(*x).data;
            let dst = acc(grads, *x, g.len());
            for ((d, gv), &xv) in dst.iter_mut().zip(g).zip(xd) {
                *d += gv * (gauss_cdf(xv) + xv * gauss_pdf(xv));
            }
        }
        Op::Sigmoid(x) => {
            let y = &node.value.data;
            let dst = acc(grads, *x, g.len());
            for ((d, gv), yv) in dst.iter_mut().zip(g).zip(y) {
                *d += gv * yv * (1.0 - yv);
            }
        }
        Op::Abs(x) => {
            let xd = &val(*x).data;
            let dst = acc(grads, *x, g.len());
            for ((d, gv), &xv) in dst.iter_mut().zip(g).zip(xd) {
                if xv > 0.0 {
                    *d += gv;
                } else if xv < 0.0 {
                    *d -= gv;
                }
            }
        }
        Op::LnClamped(x, eps) => {
            let xd = &val(*x).data;
            let dst = acc(grads, *x, g.len());
            for ((d, gv), &xv) in dst.iter_mut().zip(g).zip(xd) {
                if xv > *eps {
                    *d += gv / xv;
                }
            }
        }
        Op::Sum(x) => {
            let n = val(*x).numel();
            let dst = acc(grads, *x, n);
            dst.iter_mut().for_each(|d| *d += g[0]);
        }
        Op::SumAxis(x, axis) => {
            let xs = &val(*x).shape;
            let (outer, n, inner) = split_axis(xs, *axis);
            let dst = acc(grads, *x, outer * n * inner);
            for o in 0..outer {
                for k in 0..n {
                    let base = o * n * inner + k * inner;
                    dst[base..base + inner]
                        .iter_mut()
                        .zip(&g[o * inner..(o + 1) * inner])
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Sparse(x, map) => {
            let c = node.value.shape[0];
            let dst = acc(grads, *x, c * map.n_in());
            map.apply_transpose_into(g, c, dst);
        }
        Op::Conv2d { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (cin, h, wd) = (xv.shape[0], xv.shape[1], xv.shape[2]);
            let (cout, k) = (wv.shape[0], wv.shape[2]);
            let r = (k / 2) as isize;
            if needs(*b) {
                let dst = acc(grads, *b, cout);
                for co in 0..cout {
                    dst[co] += g[co * h * wd..(co + 1) * h * wd].iter().sum::<f64>();
                }
            }
            let want_w = needs(*w);
            let want_x = needs(*x);
            let mut gw = if want_w { vec![0.0; wv.numel()] } else { vec![] };
            let mut gx = if want_x { vec![0.0; xv.numel()] } else { vec![] };
            for co in 0..cout {
                let gc = &g[co * h * wd..(co + 1) * h * wd];
                for ci in 0..cin {
                    let src = &xv.data[ci * h * wd..(ci + 1) * h * wd];
                    for dy in 0..k {
                        for dx in 0..k {
                            let widx = ((co * cin + ci) * k + dy) * k + dx;
                            let wval = wv.data[widx];
                            let oy = dy as isize - r;
                            let ox = dx as isize - r;
                            let y0 = (-oy).max(0) as usize;
                            let y1 = (h as isize - oy).min(h as isize).max(0) as usize;
                            let x0 = (-ox).max(0) as usize;
                            let x1 = (wd as isize - ox).min(wd as isize).max(0) as usize;
                            let mut sw = 0.0;
                            for y in y0..y1 {
                                let sy = (y as isize + oy) as usize;
                                let grow = &gc[y * wd..(y + 1) * wd];
                                let srow = &src[sy * wd..(sy + 1) * wd];
                                if want_w {
                                    for xx in x0..x1 {
                                        sw += grow[xx] * srow[(xx as isize + ox) as usize];
                                    }
                                }
                                if want_x && wval != 0.0 {
                                    let xrow = &mut gx[ci * h * wd + sy * wd..ci * h * wd + (sy + 1) * wd];
                                    for xx in x0..x1 {
                                        xrow[(xx as isize + ox) as usize] += wval * grow[xx];
                                    }
                                }
                            }
                            if want_w {
                                gw[widx] += sw;
                            }
                        }
                    }
                }
            }
            if want_w {
                let dst = acc(grads, *w, gw.len());
                dst.iter_mut().zip(&gw).for_each(|(d, s)| *d += s);
            }
            if want_x {
                let dst = acc(grads, *x, gx.len());
                dst.iter_mut().zip(&gx).for_each(|(d, s)| *d += s);
            }
        }
        Op::BceWithLogits { x, target, weight } => {
            let xd = &val(*x).data;
            let dst = acc(grads, *x, xd.len());
            for (i, d) in dst.iter_mut().enumerate() {
                *d += g[0] * weight[i] * (sigmoid_scalar(xd[i]) - target[i]);
            }
        }
    }
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.param_vars
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Parameter gradients sorted by parameter id.
    pub fn params(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<(ParamId, &[f64])> = self
            .param_vars
            .iter()
            .filter_map(|&(p, v)| self.wrt(v).map(|g| (p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}
