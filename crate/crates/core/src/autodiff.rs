//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive application in creation order, so the
//! tape is topologically sorted by construction. [`Graph::backward`] walks it
//! once in reverse and returns gradients for the differentiable leaves.
//!
//! Besides the elementary primitives the tape knows three fused operators
//! (multi-head causal attention, depthwise causal convolution and the selective
//! scan) whose backward passes are written by hand.

use crate::attention;
use crate::error::{Error, Result};
use crate::tensor::{self, gemm, Tensor, MASK_SENTINEL};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention evaluation strategy for [`Graph::attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Dense,
    Blockwise(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batched: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Silu(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    CausalMask(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Mean(Var),
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mode: AttentionMode,
        saved: Vec<f64>,
    },
    CausalConv {
        x: Var,
        filter: Var,
    },
    SelectiveScan {
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        states: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to each differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// (outer, axis extent, inner) split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a [.., m, k] @ b`, where `b` is either a shared `[k, n]` matrix or has
    /// the same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let batched = sb.len() > 2;
        if batched && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        if batched {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..],
                    false,
                    &db[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    false,
                );
            }
        } else {
            gemm(batch * m, k, n, da, false, db, false, &mut out, false);
        }
        let value = Tensor::new(out_shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, batched }, &[a, b])
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (da, db) = (self.data(a), self.data(b));
        let nb = db.len();
        let out: Vec<f64> = da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[i % nb]))
            .collect();
        let value = Tensor::new(sa.to_vec(), out)?;
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        self.push(name, value, op, &[a, b])
    }

    /// Elementwise sum; `b`'s shape must be a suffix of `a`'s (it is tiled).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.map(x, |v| v * c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, f64::tanh);
        self.push("tanh", value, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, f64::exp);
        self.push("exp", value, Op::Exp(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, tensor::gelu);
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v.max(0.0));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, tensor::sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, tensor::softplus);
        self.push("softplus", value, Op::Softplus(x), &[x])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v * tensor::sigmoid(v));
        self.push("silu", value, Op::Silu(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v * v);
        self.push("square", value, Op::Square(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        if n > 0 {
            out.chunks_mut(n).for_each(tensor::softmax_in_place);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        let inv_std: Vec<f64> = if n > 0 {
            out.chunks_mut(n).map(tensor::layer_norm_in_place).collect()
        } else {
            Vec::new()
        };
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Replaces entries above the diagonal of the trailing square matrices
    /// with [`MASK_SENTINEL`].
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::ShapeMismatch {
                op: "causal_mask",
                lhs: s.to_vec(),
                rhs: s.to_vec(),
            });
        }
        let n = s[s.len() - 1];
        let mut out = t.data().to_vec();
        for (idx, v) in out.iter_mut().enumerate() {
            let (i, j) = ((idx / n) % n, idx % n);
            if j > i {
                *v = MASK_SENTINEL;
            }
        }
        let value = Tensor::new(s.to_vec(), out)?;
        self.push("causal_mask", value, Op::CausalMask(x), &[x])
    }

    /// `x[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::invalid(format!(
                "slice {start}..{} on axis {axis} of shape {s:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = split_axis(&s, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::invalid(format!(
                "concat axis {axis} for shape {s0:?}"
            )));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let ext = self.shape(x)[axis];
                let d = self.data(x);
                out.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::invalid(format!("transpose of shape {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for (b, chunk) in out.chunks_mut(r * c).enumerate() {
            let m = &src[b * r * c..(b + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    chunk[j * r + i] = m[i * c + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        let value = Tensor::new(shape, out)?;
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    /// Mean over all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", value, Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    /// Multi-head causal self-attention on `[batch, seq, embed]` projections.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mode: AttentionMode,
    ) -> Result<Var> {
        let s = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != s.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    lhs: s.clone(),
                    rhs: self.shape(other).to_vec(),
                });
            }
        }
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "attention over shape {s:?} with {heads} heads"
            )));
        }
        if let AttentionMode::Blockwise(0) = mode {
            return Err(Error::invalid("block_size must be at least 1"));
        }
        let (batch, t, e) = (s[0], s[1], s[2]);
        let dh = e / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (dq, dk, dv) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![0.0; batch * t * e];
        let saved_per_head = match mode {
            AttentionMode::Dense => t * t,
            AttentionMode::Blockwise(_) => t,
        };
        let mut saved = vec![0.0; batch * heads * saved_per_head];
        let (mut qh, mut kh, mut vh, mut oh) = (
            vec![0.0; t * dh],
            vec![0.0; t * dh],
            vec![0.0; t * dh],
            vec![0.0; t * dh],
        );
        for b in 0..batch {
            for h in 0..heads {
                gather_head(dq, b, h, t, e, dh, &mut qh);
                gather_head(dk, b, h, t, e, dh, &mut kh);
                gather_head(dv, b, h, t, e, dh, &mut vh);
                let sv = &mut saved[(b * heads + h) * saved_per_head..][..saved_per_head];
                match mode {
                    AttentionMode::Dense => {
                        attention::dense_forward(&qh, &kh, &vh, t, dh, dh, scale, &mut oh, sv)
                    }
                    AttentionMode::Blockwise(block) => attention::blockwise_forward(
                        &qh, &kh, &vh, t, dh, dh, scale, block, &mut oh, sv, None,
                    ),
                }
                scatter_head(&oh, b, h, t, e, dh, &mut out);
            }
        }
        let value = Tensor::new(s, out)?;
        self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mode,
                saved,
            },
            &[q, k, v],
        )
    }

    /// Depthwise causal convolution: `y[b,t,c] = Σ_s filter[s,c]·x[b,t-s,c]`.
    pub fn causal_conv(&mut self, x: Var, filter: Var) -> Result<Var> {
        let (sx, sf) = (self.shape(x).to_vec(), self.shape(filter).to_vec());
        if sx.len() != 3 || sf.len() != 2 || sf[1] != sx[2] {
            return Err(Error::ShapeMismatch {
                op: "causal_conv",
                lhs: sx,
                rhs: sf,
            });
        }
        let (batch, t, c) = (sx[0], sx[1], sx[2]);
        let taps = sf[0].min(t);
        let (dx, df) = (self.data(x), self.data(filter));
        let mut out = vec![0.0; batch * t * c];
        for b in 0..batch {
            let xb = &dx[b * t * c..(b + 1) * t * c];
            let ob = &mut out[b * t * c..(b + 1) * t * c];
            for ti in 0..t {
                let orow = &mut ob[ti * c..(ti + 1) * c];
                for s in 0..taps.min(ti + 1) {
                    let frow = &df[s * c..(s + 1) * c];
                    let xrow = &xb[(ti - s) * c..(ti - s + 1) * c];
                    for ((o, f), xv) in orow.iter_mut().zip(frow).zip(xrow) {
                        *o += f * xv;
                    }
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        self.push(
            "causal_conv",
            value,
            Op::CausalConv { x, filter },
            &[x, filter],
        )
    }

    /// Input-dependent diagonal state-space scan.
    ///
    /// Shapes: `u, delta: [B,T,D]`, `a: [D,N]` (decay rates), `b, c: [B,T,N]`,
    /// `d: [D]`. Per channel `ch` and state `n`:
    /// `h_t = exp(-delta_t·a)·h_{t-1} + delta_t·b_t·u_t`,
    /// `y_t = Σ_n c_t·h_t + d·u_t`.
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
    ) -> Result<Var> {
        let su = self.shape(u).to_vec();
        let sa = self.shape(a).to_vec();
        let bad = |lhs: &[usize], rhs: &[usize]| Error::ShapeMismatch {
            op: "selective_scan",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if su.len() != 3 || self.shape(delta) != su.as_slice() {
            return Err(bad(&su, self.shape(delta)));
        }
        if sa.len() != 2 || sa[0] != su[2] {
            return Err(bad(&su, &sa));
        }
        let (batch, t, dch, n) = (su[0], su[1], su[2], sa[1]);
        for v in [b, c] {
            if self.shape(v) != [batch, t, n] {
                return Err(bad(&[batch, t, n], self.shape(v)));
            }
        }
        if self.shape(d) != [dch] {
            return Err(bad(&[dch], self.shape(d)));
        }
        let (du, ddel, da, db, dc, dd) = (
            self.data(u),
            self.data(delta),
            self.data(a),
            self.data(b),
            self.data(c),
            self.data(d),
        );
        let mut out = vec![0.0; batch * t * dch];
        let mut states = vec![0.0; batch * t * dch * n];
        let mut h = vec![0.0; dch * n];
        for bi in 0..batch {
            h.fill(0.0);
            for ti in 0..t {
                let row = (bi * t + ti) * dch;
                let brow = &db[(bi * t + ti) * n..][..n];
                let crow = &dc[(bi * t + ti) * n..][..n];
                for ch in 0..dch {
                    let (uv, dl) = (du[row + ch], ddel[row + ch]);
                    let hs = &mut h[ch * n..(ch + 1) * n];
                    let arow = &da[ch * n..(ch + 1) * n];
                    let mut y = dd[ch] * uv;
                    for s in 0..n {
                        hs[s] = (-dl * arow[s]).exp() * hs[s] + dl * brow[s] * uv;
                        y += crow[s] * hs[s];
                    }
                    out[row + ch] = y;
                }
                states[(bi * t + ti) * dch * n..][..dch * n].copy_from_slice(&h);
            }
        }
        let value = Tensor::new(su, out)?;
        self.push(
            "selective_scan",
            value,
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                d,
                states,
            },
            &[u, delta, a, b, c, d],
        )
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) if node.needs_grad => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, batched } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let (da, db) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let ga = slot(grads, *a, da.len());
                    if *batched {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                false,
                                &db[i * k * n..],
                                true,
                                &mut ga[i * m * k..],
                                true,
                            );
                        }
                    } else {
                        gemm(batch * m, n, k, g, false, db, true, ga, true);
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, db.len());
                    if *batched {
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &da[i * m * k..],
                                true,
                                &g[i * m * n..],
                                false,
                                &mut gb[i * k * n..],
                                true,
                            );
                        }
                    } else {
                        gemm(k, batch * m, n, da, true, g, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.needs(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.needs(*b) {
                    let nb = self.value(*b).len();
                    let gb = slot(grads, *b, nb);
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % nb] += sign * gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                if self.needs(*a) {
                    let ga = slot(grads, *a, da.len());
                    for (i, &gv) in g.iter().enumerate() {
                        ga[i] += gv * db[i % nb];
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, nb);
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % nb] += gv * da[i];
                    }
                }
            }
            Op::Scale(x, c) => unary(grads, *x, g, |_, gv| gv * c),
            Op::Tanh(x) => unary(grads, *x, g, |i, gv| gv * (1.0 - y[i] * y[i])),
            Op::Exp(x) => unary(grads, *x, g, |i, gv| gv * y[i]),
            Op::Square(x) => {
                let dx = self.data(*x);
                unary(grads, *x, g, |i, gv| 2.0 * dx[i] * gv)
            }
            Op::Gelu(x) => {
                let dx = self.data(*x);
                unary(grads, *x, g, |i, gv| gv * tensor::gelu_grad(dx[i]))
            }
            Op::Relu(x) => {
                let dx = self.data(*x);
                unary(grads, *x, g, |i, gv| if dx[i] > 0.0 { gv } else { 0.0 })
            }
            Op::Sigmoid(x) => unary(grads, *x, g, |i, gv| gv * y[i] * (1.0 - y[i])),
            Op::Softplus(x) => {
                let dx = self.data(*x);
                unary(grads, *x, g, |i, gv| gv * tensor::sigmoid(dx[i]))
            }
            Op::Silu(x) => {
                let dx = self.data(*x);
                unary(grads, *x, g, |i, gv| {
                    let s = tensor::sigmoid(dx[i]);
                    gv * (s + dx[i] * s * (1.0 - s))
                })
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                let gx = slot(grads, *x, y.len());
                for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let n = node.value.last_dim();
                let nf = n as f64;
                let gx = slot(grads, *x, y.len());
                for (r, ((gr, yr), out)) in g
                    .chunks(n)
                    .zip(y.chunks(n))
                    .zip(gx.chunks_mut(n))
                    .enumerate()
                {
                    let mean_g = gr.iter().sum::<f64>() / nf;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o += inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
            }
            Op::CausalMask(x) => {
                let n = node.value.last_dim();
                unary(
                    grads,
                    *x,
                    g,
                    |i, gv| {
                        if i % n > (i / n) % n {
                            0.0
                        } else {
                            gv
                        }
                    },
                )
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x);
                let (outer, extent, inner) = split_axis(sx, *axis);
                let len = node.value.shape()[*axis];
                let gx = slot(grads, *x, self.value(*x).len());
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    add_into(
                        &mut gx[base..base + len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                    );
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let ext = self.shape(x)[*axis];
                    if self.needs(x) {
                        let gx = slot(grads, x, self.value(x).len());
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            add_into(
                                &mut gx[o * ext * inner..(o + 1) * ext * inner],
                                &g[src..src + ext * inner],
                            );
                        }
                    }
                    offset += ext;
                }
            }
            Op::Reshape(x) => add_into(slot(grads, *x, g.len()), g),
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let gx = slot(grads, *x, g.len());
                for (b, chunk) in g.chunks(r * c).enumerate() {
                    let dst = &mut gx[b * r * c..(b + 1) * r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dst[j * r + i] += chunk[i * c + j];
                        }
                    }
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gv = g[0] / n as f64;
                slot(grads, *x, n).iter_mut().for_each(|v| *v += gv);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                slot(grads, *x, n).iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mode,
                saved,
            } => self.attention_backward(node, *q, *k, *v, *heads, *mode, saved, g, grads),
            Op::CausalConv { x, filter } => {
                let s = self.shape(*x);
                let (batch, t, c) = (s[0], s[1], s[2]);
                let taps = self.shape(*filter)[0].min(t);
                let (dx, df) = (self.data(*x), self.data(*filter));
                if self.needs(*x) {
                    let gx = slot(grads, *x, dx.len());
                    for b in 0..batch {
                        for ti in 0..t {
                            let grow = &g[(b * t + ti) * c..][..c];
                            for s in 0..taps.min(ti + 1) {
                                let dst = &mut gx[(b * t + ti - s) * c..][..c];
                                for ((o, gv), f) in
                                    dst.iter_mut().zip(grow).zip(&df[s * c..(s + 1) * c])
                                {
                                    *o += gv * f;
                                }
                            }
                        }
                    }
                }
                if self.needs(*filter) {
                    let gf = slot(grads, *filter, df.len());
                    for b in 0..batch {
                        for ti in 0..t {
                            let grow = &g[(b * t + ti) * c..][..c];
                            for s in 0..taps.min(ti + 1) {
                                let xrow = &dx[(b * t + ti - s) * c..][..c];
                                for ((o, gv), xv) in
                                    gf[s * c..(s + 1) * c].iter_mut().zip(grow).zip(xrow)
                                {
                                    *o += gv * xv;
                                }
                            }
                        }
                    }
                }
            }
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                d,
                states,
            } => self.scan_backward(*u, *delta, *a, *b, *c, *d, states, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mode: AttentionMode,
        saved: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let s = node.value.shape();
        let (batch, t, e) = (s[0], s[1], s[2]);
        let dh = e / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (dq, dk, dv) = (self.data(q), self.data(k), self.data(v));
        let mut gq = vec![0.0; dq.len()];
        let mut gk = vec![0.0; dk.len()];
        let mut gv = vec![0.0; dv.len()];
        let buf = || vec![0.0; t * dh];
        let (mut qh, mut kh, mut vh, mut oh, mut goh) = (buf(), buf(), buf(), buf(), buf());
        let (mut gqh, mut gkh, mut gvh) = (buf(), buf(), buf());
        let per_head = match mode {
            AttentionMode::Dense => t * t,
            AttentionMode::Blockwise(_) => t,
        };
        for b in 0..batch {
            for h in 0..heads {
                gather_head(dq, b, h, t, e, dh, &mut qh);
                gather_head(dk, b, h, t, e, dh, &mut kh);
                gather_head(dv, b, h, t, e, dh, &mut vh);
                gather_head(g, b, h, t, e, dh, &mut goh);
                gqh.fill(0.0);
                gkh.fill(0.0);
                gvh.fill(0.0);
                let sv = &saved[(b * heads + h) * per_head..][..per_head];
                match mode {
                    AttentionMode::Dense => attention::dense_backward(
                        &qh, &kh, &vh, sv, &goh, t, dh, dh, scale, &mut gqh, &mut gkh, &mut gvh,
                    ),
                    AttentionMode::Blockwise(block) => {
                        gather_head(node.value.data(), b, h, t, e, dh, &mut oh);
                        attention::blockwise_backward(
                            &qh, &kh, &vh, &oh, sv, &goh, t, dh, dh, scale, block, &mut gqh,
                            &mut gkh, &mut gvh,
                        )
                    }
                }
                scatter_head(&gqh, b, h, t, e, dh, &mut gq);
                scatter_head(&gkh, b, h, t, e, dh, &mut gk);
                scatter_head(&gvh, b, h, t, e, dh, &mut gv);
            }
        }
        for (var, gr) in [(q, gq), (k, gk), (v, gv)] {
            if self.needs(var) {
                add_into(slot(grads, var, gr.len()), &gr);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn scan_backward(
        &self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        states: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let su = self.shape(u);
        let (batch, t, dch) = (su[0], su[1], su[2]);
        let n = self.shape(a)[1];
        let (du, ddel, da, db, dc, dd) = (
            self.data(u),
            self.data(delta),
            self.data(a),
            self.data(b),
            self.data(c),
            self.data(d),
        );
        let mut gu = vec![0.0; du.len()];
        let mut gdel = vec![0.0; ddel.len()];
        let mut ga = vec![0.0; da.len()];
        let mut gb = vec![0.0; db.len()];
        let mut gc = vec![0.0; dc.len()];
        let mut gd = vec![0.0; dd.len()];
        let mut gh = vec![0.0; dch * n];
        for bi in 0..batch {
            gh.fill(0.0);
            for ti in (0..t).rev() {
                let row = (bi * t + ti) * dch;
                let srow = (bi * t + ti) * n;
                let h_t = &states[(bi * t + ti) * dch * n..][..dch * n];
                let h_prev = (ti > 0).then(|| &states[(bi * t + ti - 1) * dch * n..][..dch * n]);
                for ch in 0..dch {
                    let gy = g[row + ch];
                    let (uv, dl) = (du[row + ch], ddel[row + ch]);
                    gd[ch] += gy * uv;
                    let mut gu_acc = dd[ch] * gy;
                    let mut gdel_acc = 0.0;
                    for s in 0..n {
                        let hi = ch * n + s;
                        gc[srow + s] += gy * h_t[hi];
                        let ghv = gh[hi] + gy * dc[srow + s];
                        let abar = (-dl * da[hi]).exp();
                        let hp = h_prev.map_or(0.0, |hp| hp[hi]);
                        // through abar = exp(-delta·a)
                        let g_abar = ghv * hp * abar;
                        gdel_acc -= g_abar * da[hi];
                        ga[hi] -= g_abar * dl;
                        // through delta·b·u
                        gdel_acc += ghv * db[srow + s] * uv;
                        gb[srow + s] += ghv * dl * uv;
                        gu_acc += ghv * dl * db[srow + s];
                        gh[hi] = ghv * abar;
                    }
                    gu[row + ch] += gu_acc;
                    gdel[row + ch] += gdel_acc;
                }
            }
        }
        for (var, gr) in [(u, gu), (delta, gdel), (a, ga), (b, gb), (c, gc), (d, gd)] {
            if self.needs(var) {
                add_into(slot(grads, var, gr.len()), &gr);
            }
        }
    }
}

fn gather_head(src: &[f64], b: usize, h: usize, t: usize, e: usize, dh: usize, dst: &mut [f64]) {
    for ti in 0..t {
        let from = (b * t + ti) * e + h * dh;
        dst[ti * dh..(ti + 1) * dh].copy_from_slice(&src[from..from + dh]);
    }
}

fn scatter_head(src: &[f64], b: usize, h: usize, t: usize, e: usize, dh: usize, dst: &mut [f64]) {
    for ti in 0..t {
        let to = (b * t + ti) * e + h * dh;
        dst[to..to + dh].copy_from_slice(&src[ti * dh..(ti + 1) * dh]);
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn unary(grads: &mut [Option<Vec<f64>>], x: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
    let gx = slot(grads, x, g.len());
    for (i, (o, &gv)) in gx.iter_mut().zip(g).enumerate() {
        *o += f(i, gv);
    }
}
