use super::kernels::{self, MatRef};
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{pairwise_sum, Real};

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, node)| self.grads[node].as_deref())
    }

    /// Adds each parameter gradient into the store's gradient buffers.
    /// Calling this for several backward passes sums their gradients.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(id).tensor.accumulate_grad(g);
            }
        }
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); av.len()];
                    if plan.pairs.is_empty() {
                        let rows = av.len() / k;
                        kernels::gemm(rows, n, k, MatRef::n(g), MatRef::t(bv), &mut ga, false);
                    } else {
                        for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                MatRef::n(&g[bi * m * n..(bi + 1) * m * n]),
                                MatRef::t(&bv[ob..ob + k * n]),
                                &mut ga[oa..oa + m * k],
                                true,
                            );
                        }
                    }
                    add_into(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); bv.len()];
                    if plan.pairs.is_empty() {
                        let rows = av.len() / k;
                        kernels::gemm(k, rows, n, MatRef::t(av), MatRef::n(g), &mut gb, false);
                    } else {
                        for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                MatRef::t(&av[oa..oa + m * k]),
                                MatRef::n(&g[bi * m * n..(bi + 1) * m * n]),
                                &mut gb[ob..ob + k * n],
                                true,
                            );
                        }
                    }
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::Permute { x, axes } => {
                let back = kernels::permute(g, &node.shape, &kernels::inverse_axes(axes));
                add_into(&mut grads[x.0], back);
            }
            Op::Reshape { x } => add_into(&mut grads[x.0], g.to_vec()),
            Op::Add { a, b } => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    let width = self.value(*b).len();
                    add_into(&mut grads[b.0], kernels::sum_rows(g, width));
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let width = bv.len();
                if self.wants(*a) {
                    let ga = g
                        .chunks(width)
                        .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x * y))
                        .collect();
                    add_into(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let prod: Vec<T> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[b.0], kernels::sum_rows(&prod, width));
                }
            }
            Op::Scale { x, c } => {
                add_into(&mut grads[x.0], g.iter().map(|&v| v * *c).collect());
            }
            Op::Gelu { x } => {
                let gx = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let (cdf, pdf) = kernels::normal_cdf_pdf(v);
                        gv * (cdf + v * pdf)
                    })
                    .collect();
                add_into(&mut grads[x.0], gx);
            }
            Op::Softmax { x } => {
                let y = self.value(Var(i));
                let cols = *node.shape.last().unwrap();
                let mut gx = vec![T::zero(); y.len()];
                let mut prod = vec![T::zero(); cols];
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    prod.iter_mut()
                        .zip(yr.iter().zip(gr))
                        .for_each(|(p, (&a, &b))| *p = a * b);
                    let dot = pairwise_sum(&prod);
                    for j in 0..cols {
                        gx[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let gv = self.value(*gain);
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    let inv_d = T::one() / T::from_f64(d as f64);
                    let mut dxh = vec![T::zero(); d];
                    let mut dxh_x = vec![T::zero(); d];
                    for r in 0..rstd.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxh[j] = gr[j] * gv[j];
                            dxh_x[j] = dxh[j] * xr[j];
                        }
                        let m1 = pairwise_sum(&dxh) * inv_d;
                        let m2 = pairwise_sum(&dxh_x) * inv_d;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
                if self.wants(*gain) {
                    let prod: Vec<T> = g.iter().zip(xhat).map(|(&a, &b)| a * b).collect();
                    add_into(&mut grads[gain.0], kernels::sum_rows(&prod, d));
                }
                if self.wants(*bias) {
                    add_into(&mut grads[bias.0], kernels::sum_rows(g, d));
                }
            }
            Op::Concat { parts, axis } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * total + offset;
                            gp.extend_from_slice(&g[base..base + len]);
                        }
                        add_into(&mut grads[p.0], gp);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = node.shape[*axis];
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::MeanTokens { x } => {
                let s = self.shape(*x);
                let (b, n, d) = (s[0], s[1], s[2]);
                let inv = T::one() / T::from_f64(n as f64);
                let mut gx = Vec::with_capacity(b * n * d);
                for bi in 0..b {
                    let row = &g[bi * d..(bi + 1) * d];
                    for _ in 0..n {
                        gx.extend(row.iter().map(|&v| v * inv));
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::ExpandBatch { x } => {
                let width = self.value(*x).len();
                add_into(&mut grads[x.0], kernels::sum_rows(g, width));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let batch = node.shape[0];
                let o = node.shape[1];
                let (cr, cc) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.height * geom.width;
                let wv = self.value(*w);
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); wv.len()];
                    for bi in 0..batch {
                        kernels::gemm(
                            o,
                            cc,
                            cr,
                            MatRef::n(&g[bi * o * cc..(bi + 1) * o * cc]),
                            MatRef::t(&cols[bi * cr * cc..(bi + 1) * cr * cc]),
                            &mut gw,
                            true,
                        );
                    }
                    add_into(&mut grads[w.0], gw);
                }
                if let Some(bv) = b.filter(|bv| self.wants(*bv)) {
                    let per_channel: Vec<T> = g.chunks(cc).map(pairwise_sum).collect();
                    add_into(&mut grads[bv.0], kernels::sum_rows(&per_channel, o));
                }
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); batch * img];
                    let mut gcol = vec![T::zero(); cr * cc];
                    for bi in 0..batch {
                        kernels::gemm(
                            cr,
                            o,
                            cc,
                            MatRef::t(wv),
                            MatRef::n(&g[bi * o * cc..(bi + 1) * o * cc]),
                            &mut gcol,
                            false,
                        );
                        kernels::col2im(&gcol, geom, &mut gx[bi * img..(bi + 1) * img]);
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Embedding { table, ids } => {
                let d = *node.shape.last().unwrap();
                let mut gt = vec![T::zero(); self.value(*table).len()];
                for (pos, &id) in ids.iter().enumerate() {
                    let src = &g[pos * d..(pos + 1) * d];
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &b)| *a += b);
                }
                add_into(&mut grads[table.0], gt);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                add_into(&mut grads[x.0], vec![g[0]; n]);
            }
            Op::Mse { pred, target } => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let c = g[0] * T::from_f64(2.0 / pv.len() as f64);
                let diff: Vec<T> = pv.iter().zip(tv).map(|(&p, &t)| (p - t) * c).collect();
                if self.wants(*target) {
                    add_into(&mut grads[target.0], diff.iter().map(|&v| -v).collect());
                }
                if self.wants(*pred) {
                    add_into(&mut grads[pred.0], diff);
                }
            }
        }
    }
}
