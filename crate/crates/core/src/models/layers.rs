use std::collections::BTreeMap;

use rand::Rng as _;

use super::{normal_tensor, uniform_tensor, Bound, ModelConfig, ModelParams, PromptBatch};
use crate::autodiff::{AttentionMode, Graph, Var};
use crate::error::{Error, Result};
use crate::models::Arch;
use crate::rng::Rng;
use crate::tensor::Tensor;

struct Init<'a> {
    rng: &'a mut Rng,
    std: f64,
    out: BTreeMap<String, Tensor>,
}

impl Init<'_> {
    fn put(&mut self, name: String, t: Tensor) {
        self.out.insert(name, t);
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let t = normal_tensor(self.rng, shape, std);
        self.put(name, t);
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, std: f64) {
        self.normal(format!("{prefix}.w"), &[fan_in, fan_out], std);
        self.put(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    fn layer_norm(&mut self, prefix: &str, e: usize) {
        self.put(format!("{prefix}.g"), Tensor::full(&[e], 1.0));
        self.put(format!("{prefix}.b"), Tensor::zeros(&[e]));
    }

    fn mlp(&mut self, prefix: &str, e: usize, ratio: usize, proj_std: f64) {
        self.linear(&format!("{prefix}.fc"), e, ratio * e, self.std);
        self.linear(&format!("{prefix}.proj"), ratio * e, e, proj_std);
    }
}

pub(super) fn init_params(c: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    let e = c.embed_dim;
    let std = c.init_std;
    let mut init = Init {
        rng,
        std,
        out: BTreeMap::new(),
    };
    init.linear("embed.x", c.max_input_dim, e, std);
    init.linear("embed.y", c.max_input_dim, e, std);
    if c.arch.uses_attention() {
        init.normal("pos".into(), &[c.max_seq_len, e], std);
    }
    // Residual-branch outputs are shrunk with depth, as in GPT-2.
    let proj_std = std / (2.0 * c.n_layers as f64).sqrt();
    for l in 0..c.n_layers {
        let p = format!("layers.{l}");
        init.layer_norm(&format!("{p}.ln1"), e);
        match c.arch {
            Arch::Transformer | Arch::TransformerBlockwise => {
                for name in ["q", "k", "v"] {
                    init.linear(&format!("{p}.attn.{name}"), e, e, std);
                }
                init.linear(&format!("{p}.attn.o"), e, e, proj_std);
                init.layer_norm(&format!("{p}.ln2"), e);
                init.mlp(&format!("{p}.mlp"), e, c.mlp_ratio, proj_std);
            }
            Arch::Hyena => {
                init.linear(&format!("{p}.hyena.v"), e, e, std);
                for n in 0..c.filter_order {
                    init.linear(&format!("{p}.hyena.gate{n}"), e, e, std);
                }
                init.linear(&format!("{p}.hyena.out"), e, e, proj_std);
                init.linear(
                    &format!("{p}.hyena.filter.fc"),
                    c.filter_features,
                    c.filter_hidden,
                    1.0,
                );
                init.linear(
                    &format!("{p}.hyena.filter.out"),
                    c.filter_hidden,
                    e * c.filter_order,
                    1.0 / (c.filter_hidden as f64).sqrt(),
                );
                init.layer_norm(&format!("{p}.ln2"), e);
                init.mlp(&format!("{p}.mlp"), e, c.mlp_ratio, proj_std);
            }
            Arch::Ssm => init_ssm(&mut init, &p, c, proj_std),
        }
    }
    init.layer_norm("ln_f", e);
    init.put("head.w".into(), Tensor::zeros(&[e, 1]));
    init.put("head.b".into(), Tensor::zeros(&[1]));
    Ok(ModelParams { tensors: init.out })
}

fn init_ssm(init: &mut Init<'_>, p: &str, c: &ModelConfig, proj_std: f64) {
    let std = init.std;
    let (e, di, n, r, kw) = (
        c.embed_dim,
        c.ssm_inner(),
        c.state_dim,
        c.dt_rank(),
        c.conv_kernel,
    );
    init.linear(&format!("{p}.ssm.in_x"), e, di, std);
    init.linear(&format!("{p}.ssm.in_z"), e, di, std);
    let bound = 1.0 / (kw as f64).sqrt();
    let conv = uniform_tensor(init.rng, &[kw, di], -bound, bound);
    init.put(format!("{p}.ssm.conv.w"), conv);
    init.put(format!("{p}.ssm.conv.b"), Tensor::zeros(&[di]));
    init.normal(format!("{p}.ssm.dt_down.w"), &[di, r], std);
    let bound = 1.0 / (r as f64).sqrt();
    let up = uniform_tensor(init.rng, &[r, di], -bound, bound);
    init.put(format!("{p}.ssm.dt_up.w"), up);
    // Step sizes start log-uniform in [1e-3, 1e-1]; the bias is their
    // inverse softplus.
    let dt_bias = Tensor::from_fn(&[di], |_| {
        let u: f64 = init.rng.random_range(0.0..1.0);
        let dt = (1e-3f64.ln() + u * (1e-1f64.ln() - 1e-3f64.ln())).exp();
        dt + (-(-dt).exp_m1()).ln()
    });
    init.put(format!("{p}.ssm.dt_up.b"), dt_bias);
    init.normal(format!("{p}.ssm.b_proj"), &[di, n], std);
    init.normal(format!("{p}.ssm.c_proj"), &[di, n], std);
    let a_log = Tensor::from_fn(&[di, n], |i| ((i % n) as f64 + 1.0).ln());
    init.put(format!("{p}.ssm.a_log"), a_log);
    init.put(format!("{p}.ssm.d"), Tensor::full(&[di], 1.0));
    init.linear(&format!("{p}.ssm.out"), di, e, proj_std);
}

fn linear(g: &mut Graph, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let w = b.get(&format!("{prefix}.w"))?;
    let bias = b.get(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, bias)
}

fn layer_norm(g: &mut Graph, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let n = g.mul(n, b.get(&format!("{prefix}.g"))?)?;
    g.add(n, b.get(&format!("{prefix}.b"))?)
}

fn mlp(g: &mut Graph, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, b, x, &format!("{prefix}.fc"))?;
    let h = g.gelu(h)?;
    linear(g, b, h, &format!("{prefix}.proj"))
}

/// `[T, E]` indicator of x-token (even) or y-token (odd) rows.
fn parity_mask(t: usize, e: usize, odd: bool) -> Tensor {
    Tensor::from_fn(
        &[t, e],
        |i| {
            if ((i / e) % 2 == 1) == odd {
                1.0
            } else {
                0.0
            }
        },
    )
}

pub(super) fn embed(g: &mut Graph, b: &Bound, c: &ModelConfig, batch: &PromptBatch) -> Result<Var> {
    let (t, e) = (batch.seq_len(), c.embed_dim);
    let xin = g.constant(batch.x_in.clone())?;
    let yin = g.constant(batch.y_in.clone())?;
    let xe = linear(g, b, xin, "embed.x")?;
    let ye = linear(g, b, yin, "embed.y")?;
    let mx = g.constant(parity_mask(t, e, false))?;
    let my = g.constant(parity_mask(t, e, true))?;
    let xe = g.mul(xe, mx)?;
    let ye = g.mul(ye, my)?;
    g.add(xe, ye)
}

pub(super) fn forward(
    g: &mut Graph,
    b: &Bound,
    c: &ModelConfig,
    batch: &PromptBatch,
) -> Result<Var> {
    let (bs, t) = (batch.batch, batch.seq_len());
    let mut x = embed(g, b, c, batch)?;
    if c.arch.uses_attention() {
        let pos = g.slice(b.get("pos")?, 0, 0, t)?;
        x = g.add(x, pos)?;
    }
    for l in 0..c.n_layers {
        let p = format!("layers.{l}");
        x = match c.arch {
            Arch::Transformer => transformer_block(g, b, c, x, &p, AttentionMode::Dense)?,
            Arch::TransformerBlockwise => {
                transformer_block(g, b, c, x, &p, AttentionMode::Blockwise(c.block_size))?
            }
            Arch::Hyena => hyena_block(g, b, c, x, &p, t)?,
            Arch::Ssm => ssm_block(g, b, x, &p)?,
        };
    }
    let x = layer_norm(g, b, x, "ln_f")?;
    let y = linear(g, b, x, "head")?;
    g.reshape(y, &[bs, t])
}

fn transformer_block(
    g: &mut Graph,
    b: &Bound,
    c: &ModelConfig,
    x: Var,
    p: &str,
    mode: AttentionMode,
) -> Result<Var> {
    let a = layer_norm(g, b, x, &format!("{p}.ln1"))?;
    let q = linear(g, b, a, &format!("{p}.attn.q"))?;
    let k = linear(g, b, a, &format!("{p}.attn.k"))?;
    let v = linear(g, b, a, &format!("{p}.attn.v"))?;
    let att = g.attention(q, k, v, c.n_heads, mode)?;
    let o = linear(g, b, att, &format!("{p}.attn.o"))?;
    let x = g.add(x, o)?;
    let m = layer_norm(g, b, x, &format!("{p}.ln2"))?;
    let h = mlp(g, b, m, &format!("{p}.mlp"))?;
    g.add(x, h)
}

/// Sinusoidal features of positions `0..t`, normalized by `max_len` so the
/// same position maps to the same features at every prompt length.
fn filter_features(t: usize, n: usize, max_len: usize) -> Tensor {
    let scale = std::f64::consts::TAU / max_len as f64;
    Tensor::from_fn(&[t, n], |i| {
        let (pos, j) = ((i / n) as f64, i % n);
        if j == 0 {
            return pos / max_len as f64;
        }
        let band = j.div_ceil(2) as f64;
        if j % 2 == 1 {
            (band * scale * pos).sin()
        } else {
            (band * scale * pos).cos()
        }
    })
}

/// Fixed exponential decay per filter channel, rates spread geometrically
/// between 0.3 and 0.01 per position.
fn decay_window(t: usize, channels: usize) -> Tensor {
    let (fast, slow) = (0.3f64.ln(), 0.01f64.ln());
    Tensor::from_fn(&[t, channels], |i| {
        let (pos, ch) = ((i / channels) as f64, i % channels);
        let frac = if channels > 1 {
            ch as f64 / (channels - 1) as f64
        } else {
            0.0
        };
        let rate = (fast + frac * (slow - fast)).exp();
        (-rate * pos).exp()
    })
}

/// Gated long convolution: `z ← v`, then `z ← gate_n ⊙ (filter_n ∗ z)` for
/// each order. Filters are `[T, C]` causal taps; gates and `u` are `[B, T, C]`.
pub fn hyena_mix(g: &mut Graph, u: Var, filters: &[Var], gates: &[Var]) -> Result<Var> {
    if filters.len() != gates.len() {
        return Err(Error::invalid(format!(
            "{} filters for {} gates",
            filters.len(),
            gates.len()
        )));
    }
    let mut z = u;
    for (&f, &gate) in filters.iter().zip(gates) {
        let conv = g.causal_conv(z, f)?;
        z = g.mul(gate, conv)?;
    }
    Ok(z)
}

fn hyena_block(
    g: &mut Graph,
    b: &Bound,
    c: &ModelConfig,
    x: Var,
    p: &str,
    t: usize,
) -> Result<Var> {
    let e = c.embed_dim;
    let a = layer_norm(g, b, x, &format!("{p}.ln1"))?;
    let v = linear(g, b, a, &format!("{p}.hyena.v"))?;
    let gates = (0..c.filter_order)
        .map(|n| linear(g, b, a, &format!("{p}.hyena.gate{n}")))
        .collect::<Result<Vec<_>>>()?;
    let feats = g.constant(filter_features(t, c.filter_features, c.max_seq_len))?;
    let hidden = linear(g, b, feats, &format!("{p}.hyena.filter.fc"))?;
    let hidden = g.tanh(hidden)?;
    let taps = linear(g, b, hidden, &format!("{p}.hyena.filter.out"))?;
    let window = g.constant(decay_window(t, e * c.filter_order))?;
    let taps = g.mul(taps, window)?;
    let filters = (0..c.filter_order)
        .map(|n| g.slice(taps, 1, n * e, e))
        .collect::<Result<Vec<_>>>()?;
    let z = hyena_mix(g, v, &filters, &gates)?;
    let o = linear(g, b, z, &format!("{p}.hyena.out"))?;
    let x = g.add(x, o)?;
    let m = layer_norm(g, b, x, &format!("{p}.ln2"))?;
    let h = mlp(g, b, m, &format!("{p}.mlp"))?;
    g.add(x, h)
}

fn ssm_block(g: &mut Graph, b: &Bound, x: Var, p: &str) -> Result<Var> {
    let w = |name: &str| b.get(&format!("{p}.ssm.{name}"));
    let a = layer_norm(g, b, x, &format!("{p}.ln1"))?;
    let xi = linear(g, b, a, &format!("{p}.ssm.in_x"))?;
    let z = linear(g, b, a, &format!("{p}.ssm.in_z"))?;
    let xc = g.causal_conv(xi, w("conv.w")?)?;
    let xc = g.add(xc, w("conv.b")?)?;
    let xc = g.silu(xc)?;
    let dt = g.matmul(xc, w("dt_down.w")?)?;
    let dt = linear(g, b, dt, &format!("{p}.ssm.dt_up"))?;
    let dt = g.softplus(dt)?;
    let bm = g.matmul(xc, w("b_proj")?)?;
    let cm = g.matmul(xc, w("c_proj")?)?;
    let decay = g.exp(w("a_log")?)?;
    let y = g.selective_scan(xc, dt, decay, bm, cm, w("d")?)?;
    let gate = g.silu(z)?;
    let y = g.mul(y, gate)?;
    let o = linear(g, b, y, &format!("{p}.ssm.out"))?;
    g.add(x, o)
}
