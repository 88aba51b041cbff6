//! Reverse-mode automatic differentiation over a recorded graph.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only for the duration of one
//! forward pass. Every primitive validates shapes, computes its output, checks
//! that all output scalars are finite, and records what its backward rule
//! needs. [`Graph::backward`] returns a [`Gradients`] value which the single
//! owner of the parameters folds into the store with
//! [`Gradients::accumulate_into`].

mod backward;
pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, pairwise_sum, Real, Tensor};

pub use backward::Gradients;
use kernels::{ConvGeom, MatRef};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Which key positions each attention row may look at.
///
/// `allowed` has shape `[batch, rows, cols]`; `rows` is either 1 (one mask
/// shared by every query row) or the query count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    batch: usize,
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(batch: usize, rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != batch * rows * cols {
            return Err(Error::dim(
                "attn_mask",
                format!("{} flags for [{batch}, {rows}, {cols}]", allowed.len()),
            ));
        }
        Ok(Self {
            batch,
            rows,
            cols,
            allowed,
        })
    }

    /// Key-padding mask shared by all query rows.
    pub fn keys(batch: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        Self::new(batch, 1, cols, allowed)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    /// Appends `extra` always-allowed key columns.
    pub fn extend_allowed(&self, extra: usize) -> Self {
        let cols = self.cols + extra;
        let mut allowed = Vec::with_capacity(self.batch * self.rows * cols);
        for row in self.allowed.chunks(self.cols) {
            allowed.extend_from_slice(row);
            allowed.extend(std::iter::repeat(true).take(extra));
        }
        Self {
            batch: self.batch,
            rows: self.rows,
            cols,
            allowed,
        }
    }

    fn row(&self, b: usize, q: usize) -> &[bool] {
        let r = if self.rows == 1 { 0 } else { q };
        let start = (b * self.rows + r) * self.cols;
        &self.allowed[start..start + self.cols]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// `(a_batch_offset, b_batch_offset)` per output batch; empty when `b`
    /// is a plain matrix and `a` can be flattened into one product.
    pairs: Vec<(usize, usize)>,
}

#[derive(Debug)]
pub(crate) enum Op<T: Real> {
    Leaf,
    MatMul { a: Var, b: Var, plan: MatmulPlan },
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Gelu { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    MeanTokens { x: Var },
    ExpandBatch { x: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Sum { x: Var },
    Mse { pred: Var, target: Var },
}

#[derive(Debug)]
enum Value<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

#[derive(Debug)]
pub(crate) struct Node<T: Real> {
    shape: Vec<usize>,
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A recorded computation.
pub struct Graph<'p, T: Real> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
    record: bool,
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// A graph with no parameter store, for working on explicit inputs.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            record: true,
        }
    }

    /// A differentiable graph over `store`.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            record: true,
        }
    }

    /// A forward-only graph: nothing requires gradients and no backward
    /// state is kept.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self {
            record: false,
            ..Self::with_params(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self
                .store
                .expect("param node without store")
                .tensor(*id)
                .data(),
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("graph values are finite and well shaped")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.record && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds a constant or differentiable input.
    pub fn input(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        let rg = self.record && requires_grad;
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dim("constant", format!("{} values for {shape:?}", data.len())));
        }
        check_finite("constant", &data)?;
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Leaf referencing a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let t = store.tensor(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: self.record && t.requires_grad(),
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Batched matrix product over `[..., m, k]` and `[..., k, n]`; leading
    /// batch axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let mut out_batch = vec![0; rank];
        for i in 0..rank {
            let da = if i + ba.len() >= rank { ba[i + ba.len() - rank] } else { 1 };
            let db = if i + bb.len() >= rank { bb[i + bb.len() - rank] } else { 1 };
            out_batch[i] = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(mismatch()),
            };
        }
        let pairs = if bb.is_empty() {
            Vec::new()
        } else {
            let strides = |dims: &[usize]| {
                let mut s = vec![0usize; rank];
                let mut acc = 1;
                for i in (0..dims.len()).rev() {
                    let oi = i + rank - dims.len();
                    s[oi] = if dims[i] == 1 { 0 } else { acc };
                    acc *= dims[i];
                }
                s
            };
            let (sta, stb) = (strides(ba), strides(bb));
            let total: usize = out_batch.iter().product();
            let mut pairs = Vec::with_capacity(total);
            let mut idx = vec![0usize; rank];
            for _ in 0..total {
                let oa: usize = idx.iter().zip(&sta).map(|(i, s)| i * s).sum();
                let ob: usize = idx.iter().zip(&stb).map(|(i, s)| i * s).sum();
                pairs.push((oa * m * k, ob * k * n));
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < out_batch[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            pairs
        };
        let batches: usize = out_batch.iter().product();
        let mut out = vec![T::zero(); batches * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            if pairs.is_empty() {
                let rows = av.len() / k;
                kernels::gemm(rows, k, n, MatRef::n(av), MatRef::n(bv), &mut out, false);
            } else {
                // Batched products are the attention token mixes; accumulate
                // them wide so permuting tokens cannot change the result.
                for (i, &(oa, ob)) in pairs.iter().enumerate() {
                    kernels::gemm_wide(
                        m,
                        k,
                        n,
                        &av[oa..oa + m * k],
                        &bv[ob..ob + k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
            }
        }
        check_finite("matmul", &out)?;
        let mut shape = out_batch;
        shape.extend([m, n]);
        let rg = self.any_grad(&[a, b]);
        let plan = MatmulPlan { m, k, n, pairs };
        Ok(self.push(shape, out, Op::MatMul { a, b, plan }, rg))
    }

    /// Reorders axes; `axes[i]` names the input axis that becomes axis `i`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let out = kernels::permute(self.value(x), &shape, axes);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(out_shape, out, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose", "rank below 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) || shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x }, rg))
    }

    fn suffix_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(op, format!("{sb:?} does not broadcast onto {sa:?}")));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_check("add", a, b)?;
        let bv = self.value(b);
        let out: Vec<T> = self
            .value(a)
            .chunks(bv.len())
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        check_finite("add", &out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, rg))
    }

    /// `a - b` for equal shapes.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "sub",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        check_finite("sub", &out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }, rg))
    }

    /// Elementwise `a * b`, `b` broadcast as in [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_check("mul", a, b)?;
        let bv = self.value(b);
        let out: Vec<T> = self
            .value(a)
            .chunks(bv.len())
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x * y))
            .collect();
        check_finite("mul", &out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let out: Vec<T> = self.value(x).iter().map(|&v| v * c).collect();
        check_finite("scale", &out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Scale { x, c }, rg))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| v * kernels::normal_cdf_pdf(v).0)
            .collect();
        check_finite("gelu", &out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Gelu { x }, rg))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis where disallowed positions are excluded
    /// (they receive probability exactly zero, as if their logit were -inf).
    /// `x` must be shaped `[batch, ..., rows, cols]`.
    pub fn softmax_masked(&mut self, x: Var, mask: &AttnMask) -> Result<Var> {
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::dim("softmax", "rank 0"))?;
        let total_rows = numel(&shape) / cols;
        let (rows_per_batch, q_rows) = match mask {
            Some(m) => {
                if shape.len() < 2 || shape[0] != m.batch || cols != m.cols {
                    return Err(Error::dim(
                        "softmax",
                        format!("mask [{}, {}, {}] vs input {shape:?}", m.batch, m.rows, m.cols),
                    ));
                }
                let q = shape[shape.len() - 2];
                if m.rows != 1 && m.rows != q {
                    return Err(Error::dim("softmax", format!("mask rows {} vs {q}", m.rows)));
                }
                (total_rows / m.batch, q)
            }
            None => (total_rows, 1),
        };
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..total_rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let dst = &mut out[r * cols..(r + 1) * cols];
            let allowed = mask.map(|m| m.row(r / rows_per_batch, r % q_rows));
            let ok = |j: usize| allowed.map_or(true, |a| a[j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::Contract(format!(
                    "softmax row {r} has every position masked"
                )));
            }
            // Exponentials and normalizer in f64, rounded once per entry.
            let e: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, &v)| if ok(j) { (v - max).as_f64().exp() } else { 0.0 })
                .collect();
            let z = pairwise_sum(&e);
            for (o, v) in dst.iter_mut().zip(e) {
                *o = T::from_f64(v / z);
            }
        }
        check_finite("softmax", &out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x }, rg))
    }

    /// Normalizes each last-axis row to zero mean and unit variance
    /// (epsilon [`LAYER_NORM_EPS`]), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm", "rank 0"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for width {d}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = kernels::mean(row);
            let centered = &mut xhat[r * d..(r + 1) * d];
            centered.iter_mut().zip(row).for_each(|(c, &v)| *c = v - mu);
            let sq: Vec<T> = centered.iter().map(|&c| c * c).collect();
            let var = kernels::mean(&sq);
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                centered[j] = centered[j] * s;
                out[r * d + j] = centered[j] * gv[j] + bv[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        let op = if rg {
            Op::LayerNorm { x, gain, bias, xhat, rstd }
        } else {
            Op::Leaf
        };
        Ok(self.push(shape, out, op, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agree = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !agree {
                return Err(Error::dim("concat", format!("part {s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Token-axis concatenation of `[B, n_j, D]` parts.
    pub fn concat_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            if self.shape(p).len() != 3 {
                return Err(Error::dim("concat_tokens", format!("part {:?} is not rank 3", self.shape(p))));
            }
        }
        self.concat(parts, 1)
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out_shape, out, Op::Slice { x, axis, start }, rg))
    }

    /// Mean over the token axis of `[B, N, D]`, pairwise-summed.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::dim("mean_tokens", format!("expected [B, N, D], got {shape:?}")));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let inv = T::one() / T::from_f64(n as f64);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let sums = kernels::sum_rows(&xv[bi * n * d..(bi + 1) * n * d], d);
            out.extend(sums.into_iter().map(|s| s * inv));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![b, d], out, Op::MeanTokens { x }, rg))
    }

    /// Repeats `x` along a new leading axis of extent `batch`.
    pub fn expand_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        if batch == 0 {
            return Err(Error::dim("expand_batch", "batch of zero"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len() * batch);
        for _ in 0..batch {
            out.extend_from_slice(xv);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(x));
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, out, Op::ExpandBatch { x }, rg))
    }

    /// 2-D convolution of `x: [B, C, H, W]` with square kernels
    /// `w: [O, C, k, k]` and optional `bias: [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bad = || Error::dim("conv2d", format!("input {xs:?}, kernel {ws:?}"));
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(bad());
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(bad());
            }
        }
        let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(bad());
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (wd + 2 * pad - k) / stride + 1,
        };
        let (cr, cc) = (geom.col_rows(), geom.col_cols());
        let rg = self.any_grad(&[x, w]) || bias.map_or(false, |b| self.any_grad(&[b]));
        let mut cols = vec![T::zero(); batch * cr * cc];
        let mut out = vec![T::zero(); batch * o * cc];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for bi in 0..batch {
                let col = &mut cols[bi * cr * cc..(bi + 1) * cr * cc];
                kernels::im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], &geom, col);
                kernels::gemm(
                    o,
                    cr,
                    cc,
                    MatRef::n(wv),
                    MatRef::n(col),
                    &mut out[bi * o * cc..(bi + 1) * o * cc],
                    false,
                );
            }
            if let Some(b) = bias {
                let bv = self.value(b);
                for (i, chunk) in out.chunks_mut(cc).enumerate() {
                    let bias_v = bv[i % o];
                    chunk.iter_mut().for_each(|v| *v += bias_v);
                }
            }
        }
        check_finite("conv2d", &out)?;
        if !rg {
            cols = Vec::new();
        }
        Ok(self.push(
            vec![batch, o, geom.out_h, geom.out_w],
            out,
            Op::Conv2d { x, w, b: bias, geom, cols },
            rg,
        ))
    }

    /// Row lookup into `table: [V, D]`; the output has shape `ids_shape + [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || numel(ids_shape) != ids.len() || ids.is_empty() {
            return Err(Error::dim("embedding", format!("table {ts:?}, ids {ids_shape:?}")));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary of {v}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let rg = self.any_grad(&[table]);
        Ok(self.push(shape, out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = pairwise_sum(self.value(x));
        check_finite("sum", &[s])?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![1], vec![s], Op::Sum { x }, rg))
    }

    /// Mean squared error over all elements, as a `[1]` tensor.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::dim(
                "mse",
                format!("prediction {:?} vs label {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let sq: Vec<T> = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(&p, &t)| (p - t) * (p - t))
            .collect();
        let l = kernels::mean(&sq);
        check_finite("mse", &[l])?;
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(vec![1], vec![l], Op::Mse { pred, target }, rg))
    }
}
