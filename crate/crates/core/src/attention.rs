//! Single-head causal attention kernels.
//!
//! Two routes compute the same function `softmax(QKᵀ·scale + mask)·V`:
//! a dense one that materializes the full probability matrix, and a tiled one
//! that streams key/value blocks through an online softmax (running max and
//! normalizer) and only keeps a `block × block` score tile alive. The tiled
//! backward recomputes probabilities from the saved per-row log-sum-exp.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::invalid(
            "attention expects rank-2 [seq, dim] tensors",
        ));
    }
    if q.shape() != k.shape() {
        return Err(Error::ShapeMismatch {
            op: "attention(q, k)",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if v.shape()[0] != q.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "attention(q, v)",
            lhs: q.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    Ok((q.shape()[0], q.shape()[1], v.shape()[1]))
}

/// Dense causal attention over `[seq, dim]` inputs with scale `1/sqrt(dim)`.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (t, dk, dv) = check_qkv(q, k, v)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![0.0; t * dv];
    let mut probs = vec![0.0; t * t];
    dense_forward(
        q.data(),
        k.data(),
        v.data(),
        t,
        dk,
        dv,
        scale,
        &mut out,
        &mut probs,
    );
    Tensor::new(vec![t, dv], out)
}

/// Tiled causal attention; numerically equivalent to [`causal_attention`].
pub fn blockwise_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    block_size: usize,
) -> Result<Tensor> {
    let (t, dk, dv) = check_qkv(q, k, v)?;
    if block_size == 0 {
        return Err(Error::invalid("block_size must be at least 1"));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![0.0; t * dv];
    let mut lse = vec![0.0; t];
    blockwise_forward(
        q.data(),
        k.data(),
        v.data(),
        t,
        dk,
        dv,
        scale,
        block_size,
        &mut out,
        &mut lse,
        None,
    );
    Tensor::new(vec![t, dv], out)
}

/// Like [`blockwise_attention`] but also returns, for every query row, the
/// sequence of running maxima observed as key blocks stream past.
pub fn blockwise_attention_traced(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    block_size: usize,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let (t, dk, dv) = check_qkv(q, k, v)?;
    if block_size == 0 {
        return Err(Error::invalid("block_size must be at least 1"));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![0.0; t * dv];
    let mut lse = vec![0.0; t];
    let mut trace = vec![Vec::new(); t];
    blockwise_forward(
        q.data(),
        k.data(),
        v.data(),
        t,
        dk,
        dv,
        scale,
        block_size,
        &mut out,
        &mut lse,
        Some(&mut trace),
    );
    Ok((Tensor::new(vec![t, dv], out)?, trace))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    dk: usize,
    dv: usize,
    scale: f64,
    out: &mut [f64],
    probs: &mut [f64],
) {
    for i in 0..t {
        let qi = &q[i * dk..(i + 1) * dk];
        let row = &mut probs[i * t..(i + 1) * t];
        let mut max = f64::NEG_INFINITY;
        for j in 0..=i {
            let s = dot(qi, &k[j * dk..(j + 1) * dk]) * scale;
            row[j] = s;
            max = max.max(s);
        }
        let mut sum = 0.0;
        for p in row[..=i].iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        for p in row[..=i].iter_mut() {
            *p /= sum;
        }
        row[i + 1..].fill(0.0);
        let oi = &mut out[i * dv..(i + 1) * dv];
        oi.fill(0.0);
        for j in 0..=i {
            let p = row[j];
            for (o, x) in oi.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                *o += p * x;
            }
        }
    }
}

/// Accumulates gradients into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    t: usize,
    d_k: usize,
    d_v: usize,
    scale: f64,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let mut ds = vec![0.0; t];
    for i in 0..t {
        let p = &probs[i * t..(i + 1) * t];
        let doi = &dout[i * d_v..(i + 1) * d_v];
        let mut weighted = 0.0;
        for j in 0..=i {
            let dp = dot(doi, &v[j * d_v..(j + 1) * d_v]);
            ds[j] = dp;
            weighted += p[j] * dp;
            for (g, x) in dv[j * d_v..(j + 1) * d_v].iter_mut().zip(doi) {
                *g += p[j] * x;
            }
        }
        for j in 0..=i {
            let s = p[j] * (ds[j] - weighted) * scale;
            if s == 0.0 {
                continue;
            }
            for c in 0..d_k {
                dq[i * d_k + c] += s * k[j * d_k + c];
                dk[j * d_k + c] += s * q[i * d_k + c];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn blockwise_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    dk: usize,
    dv: usize,
    scale: f64,
    block: usize,
    out: &mut [f64],
    lse: &mut [f64],
    mut trace: Option<&mut Vec<Vec<f64>>>,
) {
    let mut tile = vec![0.0; block * block];
    let mut row_max = vec![0.0; block];
    let mut row_sum = vec![0.0; block];
    for q0 in (0..t).step_by(block) {
        let q1 = (q0 + block).min(t);
        let rows = q1 - q0;
        row_max[..rows].fill(f64::NEG_INFINITY);
        row_sum[..rows].fill(0.0);
        out[q0 * dv..q1 * dv].fill(0.0);
        // keys beyond the last query row of this tile are never visible
        for k0 in (0..q1).step_by(block) {
            let k1 = (k0 + block).min(q1);
            for r in 0..rows {
                let i = q0 + r;
                let visible_end = k1.min(i + 1);
                if visible_end <= k0 {
                    continue;
                }
                let qi = &q[i * dk..(i + 1) * dk];
                let scores = &mut tile[r * block..r * block + (visible_end - k0)];
                let mut tile_max = f64::NEG_INFINITY;
                for (c, j) in (k0..visible_end).enumerate() {
                    let s = dot(qi, &k[j * dk..(j + 1) * dk]) * scale;
                    scores[c] = s;
                    tile_max = tile_max.max(s);
                }
                let new_max = row_max[r].max(tile_max);
                debug_assert!(new_max >= row_max[r]);
                let correction = (row_max[r] - new_max).exp();
                let oi = &mut out[i * dv..(i + 1) * dv];
                for o in oi.iter_mut() {
                    *o *= correction;
                }
                let mut sum = row_sum[r] * correction;
                for (c, j) in (k0..visible_end).enumerate() {
                    let p = (scores[c] - new_max).exp();
                    sum += p;
                    for (o, x) in oi.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                        *o += p * x;
                    }
                }
                row_sum[r] = sum;
                row_max[r] = new_max;
                if let Some(tr) = trace.as_deref_mut() {
                    tr[i].push(new_max);
                }
            }
        }
        for r in 0..rows {
            let i = q0 + r;
            let inv = 1.0 / row_sum[r];
            for o in out[i * dv..(i + 1) * dv].iter_mut() {
                *o *= inv;
            }
            lse[i] = row_max[r] + row_sum[r].ln();
        }
    }
}

/// Tiled backward; probabilities are rebuilt from `lse` one tile at a time.
#[allow(clippy::too_many_arguments)]
pub(crate) fn blockwise_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &[f64],
    lse: &[f64],
    dout: &[f64],
    t: usize,
    d_k: usize,
    d_v: usize,
    scale: f64,
    block: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let delta: Vec<f64> = (0..t)
        .map(|i| dot(&dout[i * d_v..(i + 1) * d_v], &out[i * d_v..(i + 1) * d_v]))
        .collect();
    for k0 in (0..t).step_by(block) {
        let k1 = (k0 + block).min(t);
        for q0 in (k0..t).step_by(block) {
            let q1 = (q0 + block).min(t);
            for i in q0.max(k0)..q1 {
                let qi = &q[i * d_k..(i + 1) * d_k];
                let doi = &dout[i * d_v..(i + 1) * d_v];
                for j in k0..k1.min(i + 1) {
                    let s = dot(qi, &k[j * d_k..(j + 1) * d_k]) * scale;
                    let p = (s - lse[i]).exp();
                    for (g, x) in dv[j * d_v..(j + 1) * d_v].iter_mut().zip(doi) {
                        *g += p * x;
                    }
                    let dp = dot(doi, &v[j * d_v..(j + 1) * d_v]);
                    let ds = p * (dp - delta[i]) * scale;
                    for c in 0..d_k {
                        dq[i * d_k + c] += ds * k[j * d_k + c];
                        dk[j * d_k + c] += ds * q[i * d_k + c];
                    }
                }
            }
        }
    }
}
