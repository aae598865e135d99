//! Reverse-mode automatic differentiation on an index-based tape.
//!
//! Every forward operation appends a node holding its output buffer and the
//! indices of its inputs; [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients into per-node buffers. Handles ([`Var`]) are plain
//! indices, so graphs are cheap to build and the whole structure is dropped
//! (or reused via [`Tape::clear`]) after each optimization step.
//!
//! Conventions:
//! - all buffers are row-major `f64`, shapes as `Vec<usize>`;
//! - scalars have shape `[1]`;
//! - elementwise binaries broadcast right-aligned (a size-1 axis stretches);
//! - `matmul` contracts the last two axes and broadcasts the leading ones;
//! - gradient buffers accumulate: calling `backward` twice without
//!   [`Tape::reset_grads`] adds a second contribution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shapes, numel_of, strides_of, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Matmul(usize, usize),
    Transpose { x: usize, perm: Vec<usize> },
    Reshape { x: usize },
    BroadcastTo { x: usize },
    ConcatLast { xs: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize },
    GatherRows { table: usize, indices: Vec<usize> },
    SoftmaxLast { x: usize },
    LayerNormLast { x: usize, gain: usize, bias: usize, eps: f64 },
    Relu { x: usize },
    Abs { x: usize },
    Dropout { x: usize, mask: Vec<f64> },
    Sum { x: usize },
    Mean { x: usize },
    AffineScalar { x: usize, mul: f64 },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    /// Retired output buffers, reused by later ops to spare the allocator.
    pool: Vec<Vec<f64>>,
    #[cfg(test)]
    backward_fault: f64,
}

const POOL_LIMIT: usize = 512;

/// Pops a zeroed buffer of `len` from the pool, or allocates one. Only
/// close-fitting buffers are taken so a large retiree is not pinned under a
/// small request.
fn take_buf(pool: &mut Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let fits = |b: &Vec<f64>| b.capacity() >= len && b.capacity() <= len.saturating_mul(2);
    match pool.iter().rposition(fits) {
        Some(i) => {
            let mut b = pool.swap_remove(i);
            b.clear();
            b.resize(len, 0.0);
            b
        }
        None => vec![0.0; len],
    }
}

fn give_buf(pool: &mut Vec<Vec<f64>>, buf: Vec<f64>) {
    if buf.capacity() > 0 && pool.len() < POOL_LIMIT {
        pool.push(buf);
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Retires all nodes and gradients, keeping their buffers for reuse.
    pub fn clear(&mut self) {
        for node in self.nodes.drain(..) {
            give_buf(&mut self.pool, node.data);
        }
        for g in self.grads.drain(..) {
            if let Some(b) = g {
                give_buf(&mut self.pool, b);
            }
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel_of(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── node construction ──

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        let mut data = take_buf(&mut self.pool, t.data().len());
        data.copy_from_slice(t.data());
        self.push(t.shape().to_vec(), data, requires_grad, Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let expected = numel_of(&shape);
        if expected != data.len() {
            return Err(Error::ShapeNumel {
                op: "Tape::leaf_from",
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.leaf_from(shape, data, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![1], vec![value], false, Op::Leaf)
    }

    // ── inspection ──

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node buffers always match their shape")
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ── elementwise binaries ──

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b)
    }

    fn binary(&mut self, which: &'static str, a: Var, b: Var) -> Result<Var> {
        let (an, bn) = (&self.nodes[a.0], &self.nodes[b.0]);
        let out_shape = broadcast_shapes(which, &an.shape, &bn.shape)?;
        let n = numel_of(&out_shape);
        let mut data = take_buf(&mut self.pool, n);
        if an.shape == bn.shape {
            match which {
                "add" => {
                    for i in 0..n {
                        data[i] = an.data[i] + bn.data[i];
                    }
                }
                "sub" => {
                    for i in 0..n {
                        data[i] = an.data[i] - bn.data[i];
                    }
                }
                _ => {
                    for i in 0..n {
                        data[i] = an.data[i] * bn.data[i];
                    }
                }
            }
        } else {
            let (ad, bd) = (&an.data, &bn.data);
            match which {
                "add" => zip_broadcast(&out_shape, &an.shape, &bn.shape, |o, i, j| {
                    data[o] = ad[i] + bd[j];
                }),
                "sub" => zip_broadcast(&out_shape, &an.shape, &bn.shape, |o, i, j| {
                    data[o] = ad[i] - bd[j];
                }),
                _ => zip_broadcast(&out_shape, &an.shape, &bn.shape, |o, i, j| {
                    data[o] = ad[i] * bd[j];
                }),
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let op = match which {
            "add" => Op::Add(a.0, b.0),
            "sub" => Op::Sub(a.0, b.0),
            _ => Op::Mul(a.0, b.0),
        };
        Ok(self.push(out_shape, data, needs, op))
    }

    // ── matmul ──

    /// Batched matrix product. The last two axes are contracted as
    /// `(..., m, k) x (..., k, n) -> (..., m, n)`; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (an, bn) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (ashape, bshape) = (an.shape.clone(), bn.shape.clone());
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul (both operands need at least 2 axes)",
                left: ashape,
                right: bshape,
            });
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (k2, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul (inner axes differ)",
                left: ashape,
                right: bshape,
            });
        }
        let lead = broadcast_shapes("matmul", &ashape[..ashape.len() - 2], &bshape[..bshape.len() - 2])?;
        let mut out_shape = lead.clone();
        out_shape.extend_from_slice(&[m, n]);

        let a_strides = batch_strides(&lead, &ashape, m * k);
        let b_strides = batch_strides(&lead, &bshape, k2 * n);
        let batches = numel_of(&lead);
        let mut data = take_buf(&mut self.pool, batches * m * n);
        let (ad, bd) = (&an.data, &bn.data);
        for_each_batch(&lead, &a_strides, &b_strides, |batch, aoff, boff| {
            mm_acc(
                &mut data[batch * m * n..(batch + 1) * m * n],
                &ad[aoff..aoff + m * k],
                &bd[boff..boff + k * n],
                m,
                k,
                n,
            );
        });
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out_shape, data, needs, Op::Matmul(a.0, b.0)))
    }

    // ── layout ops ──

    /// Permutes axes; `perm` must be a permutation of `0..ndim`.
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xn = &self.nodes[x.0];
        let ndim = xn.shape.len();
        let mut seen = vec![false; ndim];
        if perm.len() != ndim || perm.iter().any(|&p| p >= ndim || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract(format!(
                "transpose: {:?} is not a permutation of 0..{}",
                perm, ndim
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xn.shape[p]).collect();
        let in_strides = strides_of(&xn.shape);
        let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = take_buf(&mut self.pool, xn.data.len());
        let xd = &xn.data;
        walk_offsets(&out_shape, &mapped, |o, i| data[o] = xd[i]);
        let needs = self.needs(x);
        Ok(self.push(
            out_shape,
            data,
            needs,
            Op::Transpose {
                x: x.0,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xn = &self.nodes[x.0];
        let expected = numel_of(&shape);
        if expected != xn.data.len() {
            let got = xn.data.len();
            return Err(Error::ShapeNumel {
                op: "reshape",
                shape,
                expected,
                got,
            });
        }
        let mut data = take_buf(&mut self.pool, xn.data.len());
        data.copy_from_slice(&xn.data);
        let needs = self.needs(x);
        Ok(self.push(shape, data, needs, Op::Reshape { x: x.0 }))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xn = &self.nodes[x.0];
        let joint = broadcast_shapes("broadcast_to", &xn.shape, shape)?;
        if joint != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                left: xn.shape.clone(),
                right: shape.to_vec(),
            });
        }
        if xn.shape == shape {
            let mut data = take_buf(&mut self.pool, xn.data.len());
            data.copy_from_slice(&xn.data);
            let needs = self.needs(x);
            return Ok(self.push(shape.to_vec(), data, needs, Op::Reshape { x: x.0 }));
        }
        let strides = broadcast_strides(&xn.shape, shape);
        let mut data = take_buf(&mut self.pool, numel_of(shape));
        let xd = &xn.data;
        walk_offsets(shape, &strides, |o, i| data[o] = xd[i]);
        let needs = self.needs(x);
        Ok(self.push(shape.to_vec(), data, needs, Op::BroadcastTo { x: x.0 }))
    }

    /// Concatenates along the last axis; all other axes must match exactly.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_last: no inputs".into()));
        }
        let first = &self.nodes[xs[0].0].shape;
        let lead = &first[..first.len() - 1];
        let mut last = 0usize;
        for &v in xs {
            let s = &self.nodes[v.0].shape;
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    left: first.clone(),
                    right: s.clone(),
                });
            }
            last += s[s.len() - 1];
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(last);
        let rows = numel_of(lead);
        let mut data = take_buf(&mut self.pool, rows * last);
        let mut col = 0usize;
        for &v in xs {
            let n = &self.nodes[v.0];
            let w = n.shape[n.shape.len() - 1];
            for r in 0..rows {
                data[r * last + col..r * last + col + w].copy_from_slice(&n.data[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            out_shape,
            data,
            needs,
            Op::ConcatLast {
                xs: xs.iter().map(|v| v.0).collect(),
            },
        ))
    }

    /// Slices `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xn = &self.nodes[x.0];
        if axis >= xn.shape.len() || start + len > xn.shape[axis] {
            return Err(Error::Contract(format!(
                "narrow: axis {axis} range {start}..{} out of bounds for shape {:?}",
                start + len,
                xn.shape
            )));
        }
        let mut out_shape = xn.shape.clone();
        out_shape[axis] = len;
        let outer: usize = xn.shape[..axis].iter().product();
        let mid = xn.shape[axis];
        let inner: usize = xn.shape[axis + 1..].iter().product();
        let mut data = take_buf(&mut self.pool, outer * len * inner);
        for o in 0..outer {
            let src = (o * mid + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&xn.data[src..src + len * inner]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            out_shape,
            data,
            needs,
            Op::Narrow {
                x: x.0,
                axis,
                start,
            },
        ))
    }

    /// Looks rows of a `(rows, width)` table up by index, yielding `(indices.len(), width)`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tn = &self.nodes[table.0];
        if tn.shape.len() != 2 {
            return Err(Error::Contract(format!(
                "gather_rows: table must be 2-d, got {:?}",
                tn.shape
            )));
        }
        let (rows, width) = (tn.shape[0], tn.shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                what: "gather_rows table row",
                index: bad,
                size: rows,
            });
        }
        let mut data = take_buf(&mut self.pool, indices.len() * width);
        for (r, &i) in indices.iter().enumerate() {
            data[r * width..(r + 1) * width].copy_from_slice(&tn.data[i * width..(i + 1) * width]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![indices.len(), width],
            data,
            needs,
            Op::GatherRows {
                table: table.0,
                indices: indices.to_vec(),
            },
        ))
    }

    // ── nonlinearities and reductions ──

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xn = &self.nodes[x.0];
        let w = *xn.shape.last().expect("softmax_last: scalar input");
        let mut data = take_buf(&mut self.pool, xn.data.len());
        data.copy_from_slice(&xn.data);
        for row in data.chunks_mut(w) {
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
        let (shape, needs) = (xn.shape.clone(), self.needs(x));
        self.push(shape, data, needs, Op::SoftmaxLast { x: x.0 })
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let w = *self.nodes[x.0].shape.last().unwrap_or(&0);
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let s = &self.nodes[v.0].shape;
            if s.len() != 1 || s[0] != w {
                return Err(Error::ShapeMismatch {
                    op: if name == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    left: self.nodes[x.0].shape.clone(),
                    right: s.clone(),
                });
            }
        }
        let xn = &self.nodes[x.0];
        let (g, b) = (&self.nodes[gain.0].data, &self.nodes[bias.0].data);
        let mut data = take_buf(&mut self.pool, xn.data.len());
        for (r, row) in xn.data.chunks(w).enumerate() {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..w {
                data[r * w + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let shape = xn.shape.clone();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            shape,
            data,
            needs,
            Op::LayerNormLast {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xn = &self.nodes[x.0];
        let mut data = take_buf(&mut self.pool, xn.data.len());
        for (d, &v) in data.iter_mut().zip(&xn.data) {
            *d = v.max(0.0);
        }
        let (shape, needs) = (xn.shape.clone(), self.needs(x));
        self.push(shape, data, needs, Op::Relu { x: x.0 })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let xn = &self.nodes[x.0];
        let mut data = take_buf(&mut self.pool, xn.data.len());
        for (d, &v) in data.iter_mut().zip(&xn.data) {
            *d = v.abs();
        }
        let (shape, needs) = (xn.shape.clone(), self.needs(x));
        self.push(shape, data, needs, Op::Abs { x: x.0 })
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)` so the
    /// expectation is unchanged. Identity when `train` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout: p = {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let xn = &self.nodes[x.0];
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..xn.data.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut data = take_buf(&mut self.pool, xn.data.len());
        for (d, (&v, m)) in data.iter_mut().zip(xn.data.iter().zip(&mask)) {
            *d = v * m;
        }
        let (shape, needs) = (xn.shape.clone(), self.needs(x));
        Ok(self.push(shape, data, needs, Op::Dropout { x: x.0, mask }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xn = &self.nodes[x.0];
        let total: f64 = xn.data.iter().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![total], needs, Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xn = &self.nodes[x.0];
        let total: f64 = xn.data.iter().sum();
        let n = xn.data.len() as f64;
        let needs = self.needs(x);
        self.push(vec![1], vec![total / n], needs, Op::Mean { x: x.0 })
    }

    /// `y = x * mul + add`, applied elementwise with scalar coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let xn = &self.nodes[x.0];
        let mut data = take_buf(&mut self.pool, xn.data.len());
        for (d, &v) in data.iter_mut().zip(&xn.data) {
            *d = v * mul + add;
        }
        let (shape, needs) = (xn.shape.clone(), self.needs(x));
        self.push(shape, data, needs, Op::AffineScalar { x: x.0, mul })
    }

    // ── backward ──

    /// Accumulates `d loss / d node` into every reachable node that needs a
    /// gradient. `loss` must be scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        // The sweep runs on a scratch adjoint buffer; repeated calls then
        // accumulate cleanly into the persistent per-node gradients instead
        // of re-propagating earlier totals.
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        for i in 0..=loss.0 {
            if self.nodes[i].needs_grad {
                let len = self.nodes[i].data.len();
                adjoints[i] = Some(take_buf(&mut self.pool, len));
            }
        }
        adjoints[loss.0].as_mut().expect("just allocated")[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (lo, hi) = adjoints.split_at_mut(i);
            let g = match hi[0].as_deref() {
                Some(g) => g,
                None => continue,
            };
            let nodes = &self.nodes;
            let needs = |j: usize| nodes[j].needs_grad;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if needs(a) {
                        accumulate_broadcast(grad_buf(lo, a), &nodes[a].shape, g, &nodes[i].shape, |d, gv| *d += gv);
                    }
                    if needs(b) {
                        accumulate_broadcast(grad_buf(lo, b), &nodes[b].shape, g, &nodes[i].shape, |d, gv| *d += gv);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if needs(a) {
                        accumulate_broadcast(grad_buf(lo, a), &nodes[a].shape, g, &nodes[i].shape, |d, gv| *d += gv);
                    }
                    if needs(b) {
                        accumulate_broadcast(grad_buf(lo, b), &nodes[b].shape, g, &nodes[i].shape, |d, gv| *d -= gv);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if needs(a) {
                        let bd = &nodes[b].data;
                        let dst = grad_buf(lo, a);
                        zip_broadcast(&nodes[i].shape, &nodes[a].shape, &nodes[b].shape, |o, ia, ib| {
                            dst[ia] += g[o] * bd[ib];
                        });
                    }
                    if needs(b) {
                        let ad = &nodes[a].data;
                        let dst = grad_buf(lo, b);
                        zip_broadcast(&nodes[i].shape, &nodes[a].shape, &nodes[b].shape, |o, ia, ib| {
                            dst[ib] += g[o] * ad[ia];
                        });
                    }
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ashape = &nodes[a].shape;
                    let bshape = &nodes[b].shape;
                    let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
                    let n = bshape[bshape.len() - 1];
                    let lead = &nodes[i].shape[..nodes[i].shape.len() - 2];
                    let a_strides = batch_strides(lead, ashape, m * k);
                    let b_strides = batch_strides(lead, bshape, k * n);
                    if needs(a) {
                        let bd = &nodes[b].data;
                        let dst = grad_buf(lo, a);
                        for_each_batch(lead, &a_strides, &b_strides, |batch, aoff, boff| {
                            mm_nt_acc(
                                &mut dst[aoff..aoff + m * k],
                                &g[batch * m * n..(batch + 1) * m * n],
                                &bd[boff..boff + k * n],
                                m,
                                n,
                                k,
                            );
                        });
                        #[cfg(test)]
                        if self.backward_fault != 0.0 {
                            for v in dst.iter_mut() {
                                *v *= 1.0 + self.backward_fault;
                            }
                        }
                    }
                    if needs(b) {
                        let ad = &nodes[a].data;
                        let dst = grad_buf(lo, b);
                        for_each_batch(lead, &a_strides, &b_strides, |batch, aoff, boff| {
                            mm_tn_acc(
                                &mut dst[boff..boff + k * n],
                                &ad[aoff..aoff + m * k],
                                &g[batch * m * n..(batch + 1) * m * n],
                                m,
                                k,
                                n,
                            );
                        });
                    }
                }
                Op::Transpose { x, perm } => {
                    if needs(*x) {
                        let in_strides = strides_of(&nodes[*x].shape);
                        let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                        let dst = grad_buf(lo, *x);
                        walk_offsets(&nodes[i].shape, &mapped, |o, xo| dst[xo] += g[o]);
                    }
                }
                Op::Reshape { x } => {
                    if needs(*x) {
                        let dst = grad_buf(lo, *x);
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
                Op::BroadcastTo { x } => {
                    if needs(*x) {
                        let strides = broadcast_strides(&nodes[*x].shape, &nodes[i].shape);
                        let dst = grad_buf(lo, *x);
                        walk_offsets(&nodes[i].shape, &strides, |o, xo| dst[xo] += g[o]);
                    }
                }
                Op::ConcatLast { xs } => {
                    let last = *nodes[i].shape.last().unwrap();
                    let rows = nodes[i].data.len() / last;
                    let mut col = 0usize;
                    for &xj in xs {
                        let w = *nodes[xj].shape.last().unwrap();
                        if needs(xj) {
                            let dst = grad_buf(lo, xj);
                            for r in 0..rows {
                                for c in 0..w {
                                    dst[r * w + c] += g[r * last + col + c];
                                }
                            }
                        }
                        col += w;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    if needs(*x) {
                        let xshape = &nodes[*x].shape;
                        let len = nodes[i].shape[*axis];
                        let outer: usize = xshape[..*axis].iter().product();
                        let mid = xshape[*axis];
                        let inner: usize = xshape[*axis + 1..].iter().product();
                        let dst = grad_buf(lo, *x);
                        for o in 0..outer {
                            let xoff = (o * mid + start) * inner;
                            let goff = o * len * inner;
                            for j in 0..len * inner {
                                dst[xoff + j] += g[goff + j];
                            }
                        }
                    }
                }
                Op::GatherRows { table, indices } => {
                    if needs(*table) {
                        let width = nodes[*table].shape[1];
                        let dst = grad_buf(lo, *table);
                        for (r, &row) in indices.iter().enumerate() {
                            for c in 0..width {
                                dst[row * width + c] += g[r * width + c];
                            }
                        }
                    }
                }
                Op::SoftmaxLast { x } => {
                    if needs(*x) {
                        let w = *nodes[i].shape.last().unwrap();
                        let y = &nodes[i].data;
                        let dst = grad_buf(lo, *x);
                        for r in 0..y.len() / w {
                            let (ys, gs) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                            let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                            for j in 0..w {
                                dst[r * w + j] += ys[j] * (gs[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNormLast { x, gain, bias, eps } => {
                    let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                    let w = *nodes[x].shape.last().unwrap();
                    let xd = &nodes[x].data;
                    let gd = &nodes[gain].data;
                    let rows = xd.len() / w;
                    let mut dx = if needs(x) { take_buf(&mut self.pool, xd.len()) } else { Vec::new() };
                    let mut dgain = vec![0.0; if needs(gain) { w } else { 0 }];
                    let mut dbias = vec![0.0; if needs(bias) { w } else { 0 }];
                    for r in 0..rows {
                        let row = &xd[r * w..(r + 1) * w];
                        let gr = &g[r * w..(r + 1) * w];
                        let mean = row.iter().sum::<f64>() / w as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        if !dgain.is_empty() || !dbias.is_empty() {
                            for j in 0..w {
                                let xhat = (row[j] - mean) * inv;
                                if !dgain.is_empty() {
                                    dgain[j] += gr[j] * xhat;
                                }
                                if !dbias.is_empty() {
                                    dbias[j] += gr[j];
                                }
                            }
                        }
                        if !dx.is_empty() {
                            let mut sum_dxh = 0.0;
                            let mut sum_dxh_xhat = 0.0;
                            for j in 0..w {
                                let xhat = (row[j] - mean) * inv;
                                let dxh = gr[j] * gd[j];
                                sum_dxh += dxh;
                                sum_dxh_xhat += dxh * xhat;
                            }
                            let wn = w as f64;
                            for j in 0..w {
                                let xhat = (row[j] - mean) * inv;
                                let dxh = gr[j] * gd[j];
                                dx[r * w + j] += inv * (dxh - sum_dxh / wn - xhat * sum_dxh_xhat / wn);
                            }
                        }
                    }
                    if needs(x) {
                        let dst = grad_buf(lo, x);
                        for (d, v) in dst.iter_mut().zip(&dx) {
                            *d += v;
                        }
                    }
                    if needs(gain) {
                        let dst = grad_buf(lo, gain);
                        for (d, v) in dst.iter_mut().zip(&dgain) {
                            *d += v;
                        }
                    }
                    if needs(bias) {
                        let dst = grad_buf(lo, bias);
                        for (d, v) in dst.iter_mut().zip(&dbias) {
                            *d += v;
                        }
                    }
                    give_buf(&mut self.pool, dx);
                }
                Op::Relu { x } => {
                    if needs(*x) {
                        let xd = &nodes[*x].data;
                        let dst = grad_buf(lo, *x);
                        for j in 0..xd.len() {
                            if xd[j] > 0.0 {
                                dst[j] += g[j];
                            }
                        }
                    }
                }
                Op::Abs { x } => {
                    if needs(*x) {
                        let xd = &nodes[*x].data;
                        let dst = grad_buf(lo, *x);
                        for j in 0..xd.len() {
                            dst[j] += g[j] * if xd[j] > 0.0 { 1.0 } else if xd[j] < 0.0 { -1.0 } else { 0.0 };
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if needs(*x) {
                        let dst = grad_buf(lo, *x);
                        for j in 0..mask.len() {
                            dst[j] += g[j] * mask[j];
                        }
                    }
                }
                Op::Sum { x } => {
                    if needs(*x) {
                        let dst = grad_buf(lo, *x);
                        for d in dst.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::Mean { x } => {
                    if needs(*x) {
                        let dst = grad_buf(lo, *x);
                        let inv = 1.0 / dst.len() as f64;
                        for d in dst.iter_mut() {
                            *d += g[0] * inv;
                        }
                    }
                }
                Op::AffineScalar { x, mul, .. } => {
                    if needs(*x) {
                        let mul = *mul;
                        let dst = grad_buf(lo, *x);
                        for j in 0..dst.len() {
                            dst[j] += g[j] * mul;
                        }
                    }
                }
            }
        }

        for (i, adj) in adjoints.into_iter().enumerate() {
            if let Some(adj) = adj {
                match &mut self.grads[i] {
                    Some(acc) => {
                        for (d, a) in acc.iter_mut().zip(&adj) {
                            *d += a;
                        }
                        give_buf(&mut self.pool, adj);
                    }
                    slot => *slot = Some(adj),
                }
            }
        }
        Ok(())
    }

    /// Scales one backward rule by `1 + fault` so gradient-check tests can
    /// verify that corrupted analytics are flagged.
    #[cfg(test)]
    pub(crate) fn inject_backward_fault(&mut self, fault: f64) {
        self.backward_fault = fault;
    }
}

fn grad_buf(slots: &mut [Option<Vec<f64>>], j: usize) -> &mut [f64] {
    slots[j].as_mut().expect("needs_grad node has a buffer").as_mut_slice()
}

// ── broadcast iteration ──

fn broadcast_strides(from: &[usize], to: &[usize]) -> Vec<usize> {
    let strides = strides_of(from);
    let offset = to.len() - from.len();
    let mut out = vec![0usize; to.len()];
    for i in 0..from.len() {
        out[offset + i] = if from[i] == 1 { 0 } else { strides[i] };
    }
    out
}

/// Walks an output shape in row-major order, handing the closure the linear
/// output index and the source offset computed from `strides` (which may
/// contain zeros for broadcast or permuted axes).
fn walk_offsets(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel_of(shape);
    if n == 0 {
        return;
    }
    let ndim = shape.len();
    let mut coords = vec![0usize; ndim];
    let mut off = 0usize;
    for idx in 0..n {
        f(idx, off);
        for ax in (0..ndim).rev() {
            coords[ax] += 1;
            off += strides[ax];
            if coords[ax] < shape[ax] {
                break;
            }
            coords[ax] = 0;
            off -= strides[ax] * shape[ax];
        }
    }
}

/// Simultaneous walk of two broadcast operands over their joint output shape.
fn zip_broadcast(out_shape: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel_of(out_shape);
    if n == 0 {
        return;
    }
    let sa = broadcast_strides(a, out_shape);
    let sb = broadcast_strides(b, out_shape);
    let ndim = out_shape.len();
    let mut coords = vec![0usize; ndim];
    let (mut ao, mut bo) = (0usize, 0usize);
    for idx in 0..n {
        f(idx, ao, bo);
        for ax in (0..ndim).rev() {
            coords[ax] += 1;
            ao += sa[ax];
            bo += sb[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            coords[ax] = 0;
            ao -= sa[ax] * out_shape[ax];
            bo -= sb[ax] * out_shape[ax];
        }
    }
}

/// Reduces a gradient on the broadcast output shape back onto an input shape.
fn accumulate_broadcast(
    dst: &mut [f64],
    dst_shape: &[usize],
    g: &[f64],
    out_shape: &[usize],
    mut f: impl FnMut(&mut f64, f64),
) {
    if dst_shape == out_shape {
        for (d, &gv) in dst.iter_mut().zip(g) {
            f(d, gv);
        }
        return;
    }
    let strides = broadcast_strides(dst_shape, out_shape);
    walk_offsets(out_shape, &strides, |o, xo| f(&mut dst[xo], g[o]));
}

// ── batched matmul helpers ──

/// Per-batch element strides of an operand under leading-axis broadcast.
/// `lead` is the broadcast leading shape; broadcast axes get stride zero.
fn batch_strides(lead: &[usize], operand_shape: &[usize], matrix_len: usize) -> Vec<usize> {
    let op_lead = &operand_shape[..operand_shape.len() - 2];
    let mut strides = vec![0usize; lead.len()];
    let mut stride = matrix_len;
    let offset = lead.len() - op_lead.len();
    for i in (0..op_lead.len()).rev() {
        strides[offset + i] = if op_lead[i] == 1 { 0 } else { stride };
        stride *= op_lead[i];
    }
    strides
}

fn for_each_batch(lead: &[usize], a_strides: &[usize], b_strides: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let batches = numel_of(lead);
    let ndim = lead.len();
    let mut coords = vec![0usize; ndim];
    let (mut ao, mut bo) = (0usize, 0usize);
    for batch in 0..batches {
        f(batch, ao, bo);
        for ax in (0..ndim).rev() {
            coords[ax] += 1;
            ao += a_strides[ax];
            bo += b_strides[ax];
            if coords[ax] < lead[ax] {
                break;
            }
            coords[ax] = 0;
            ao -= a_strides[ax] * lead[ax];
            bo -= b_strides[ax] * lead[ax];
        }
    }
}

/// `c += a @ b` for row-major `a (m x k)`, `b (k x n)`.
fn mm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// `c += g @ b^T` where `g` is `(m x n)` and `b` is `(k x n)`; `c` is `(m x k)`.
fn mm_nt_acc(c: &mut [f64], g: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            c[i * k + p] += s;
        }
    }
}

/// `c += a^T @ g` where `a` is `(m x k)` and `g` is `(m x n)`; `c` is `(k x n)`.
fn mm_tn_acc(c: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * grow[j];
            }
        }
    }
}
