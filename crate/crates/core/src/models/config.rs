use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Transformer,
    TransformerBlockwise,
    Hyena,
    Ssm,
}

impl Arch {
    pub const ALL: [Arch; 4] = [
        Arch::Transformer,
        Arch::TransformerBlockwise,
        Arch::Hyena,
        Arch::Ssm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Transformer => "transformer",
            Arch::TransformerBlockwise => "transformer_blockwise",
            Arch::Hyena => "hyena",
            Arch::Ssm => "ssm",
        }
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Arch::Transformer | Arch::TransformerBlockwise)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown architecture `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_layers: usize,
    /// Zero for the attention-free models.
    pub n_heads: usize,
    pub embed_dim: usize,
    pub max_seq_len: usize,
    pub max_input_dim: usize,
    /// Key/value tile size of the blockwise transformer.
    pub block_size: usize,
    /// Number of gated long convolutions per hyena mixer.
    pub filter_order: usize,
    /// Positional features feeding the implicit filter.
    pub filter_features: usize,
    pub filter_hidden: usize,
    /// State size per channel of the selective scan.
    pub state_dim: usize,
    /// Inner width multiplier of the ssm block.
    pub ssm_expand: usize,
    /// Taps of the ssm's short depthwise convolution.
    pub conv_kernel: usize,
    pub mlp_ratio: usize,
    /// Standard deviation of the Gaussian weight initialization.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

/// GPT-2's initialization scale.
pub const DEFAULT_INIT_STD: f64 = 0.02;

fn default_init_std() -> f64 {
    DEFAULT_INIT_STD
}

/// Sequence length of a `k`-shot prompt: `k` (x, y) pairs plus the query.
pub fn seq_len_for(k: usize) -> usize {
    2 * k + 1
}

impl ModelConfig {
    /// Desk-scale preset: 2 layers, width 64, 2 heads for attention models.
    pub fn desk(arch: Arch, max_k: usize, max_input_dim: usize) -> Self {
        let mut c = Self {
            arch,
            n_layers: 2,
            n_heads: if arch.uses_attention() { 2 } else { 0 },
            embed_dim: 64,
            max_seq_len: seq_len_for(max_k),
            max_input_dim,
            block_size: 8,
            filter_order: 2,
            filter_features: 8,
            filter_hidden: 32,
            state_dim: 16,
            ssm_expand: 2,
            conv_kernel: 4,
            mlp_ratio: 4,
            init_std: DEFAULT_INIT_STD,
        };
        if arch == Arch::Ssm {
            c.n_layers = 3;
        }
        c
    }

    /// The full-size GPT-2 style configuration (12 layers, 8 heads, 256 wide).
    pub fn full_scale(arch: Arch, max_k: usize, max_input_dim: usize) -> Self {
        let mut c = Self::desk(arch, max_k, max_input_dim);
        c.embed_dim = 256;
        c.n_layers = if arch == Arch::Ssm { 24 } else { 12 };
        c.n_heads = if arch.uses_attention() { 8 } else { 0 };
        c.filter_hidden = 64;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.embed_dim == 0 || self.n_layers == 0 || self.max_input_dim == 0 {
            return fail("embed_dim, n_layers and max_input_dim must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return fail(format!("init_std must be positive, got {}", self.init_std));
        }
        if self.max_seq_len < 3 {
            return fail(format!("max_seq_len {} is too short", self.max_seq_len));
        }
        if self.arch.uses_attention() {
            if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
                return fail(format!(
                    "embed_dim {} must be divisible by n_heads {}",
                    self.embed_dim, self.n_heads
                ));
            }
            if self.arch == Arch::TransformerBlockwise && self.block_size == 0 {
                return fail("block_size must be at least 1".into());
            }
        } else if self.n_heads != 0 {
            return fail(format!(
                "{} is attention-free; n_heads must be 0",
                self.arch
            ));
        }
        if self.arch == Arch::Hyena
            && (self.filter_order == 0 || self.filter_features < 2 || self.filter_hidden == 0)
        {
            return fail(
                "hyena needs filter_order >= 1, filter_features >= 2, filter_hidden >= 1".into(),
            );
        }
        if self.arch == Arch::Ssm
            && (self.state_dim == 0 || self.ssm_expand == 0 || self.conv_kernel == 0)
        {
            return fail("ssm needs positive state_dim, ssm_expand and conv_kernel".into());
        }
        Ok(())
    }

    pub fn ssm_inner(&self) -> usize {
        self.ssm_expand * self.embed_dim
    }

    pub fn dt_rank(&self) -> usize {
        self.embed_dim.div_ceil(16)
    }

    /// Number of scalar parameters, computed from the configuration alone.
    pub fn param_count(&self) -> usize {
        let e = self.embed_dim;
        let lin = |i: usize, o: usize| i * o + o;
        let mut n = 2 * lin(self.max_input_dim, e) + 2 * e + lin(e, 1);
        if self.arch.uses_attention() {
            n += self.max_seq_len * e;
        }
        let mlp = lin(e, self.mlp_ratio * e) + lin(self.mlp_ratio * e, e);
        let per_layer = match self.arch {
            Arch::Transformer | Arch::TransformerBlockwise => 4 * e + 4 * lin(e, e) + mlp,
            Arch::Hyena => {
                let order = self.filter_order;
                4 * e
                    + (order + 2) * lin(e, e)
                    + lin(self.filter_features, self.filter_hidden)
                    + lin(self.filter_hidden, e * order)
                    + mlp
            }
            Arch::Ssm => {
                let di = self.ssm_inner();
                let (ns, r) = (self.state_dim, self.dt_rank());
                2 * e
                    + 2 * lin(e, di)
                    + self.conv_kernel * di
                    + di
                    + di * r
                    + lin(r, di)
                    + 2 * di * ns
                    + di * ns
                    + di
                    + lin(di, e)
            }
        };
        n + self.n_layers * per_layer
    }
}

/// Relative tolerance for matched parameter budgets.
pub const PARITY_TOLERANCE: f64 = 0.10;

/// Desk presets for all four architectures with parameter counts within
/// [`PARITY_TOLERANCE`] of the transformer. The ssm depth and state size are
/// chosen to land closest to the transformer's budget.
pub fn matched_presets(max_k: usize, max_input_dim: usize) -> Result<[ModelConfig; 4]> {
    let t = ModelConfig::desk(Arch::Transformer, max_k, max_input_dim);
    let b = ModelConfig::desk(Arch::TransformerBlockwise, max_k, max_input_dim);
    let h = ModelConfig::desk(Arch::Hyena, max_k, max_input_dim);
    let target = t.param_count() as f64;
    let mut s = ModelConfig::desk(Arch::Ssm, max_k, max_input_dim);
    let mut best = (f64::INFINITY, s.n_layers, s.state_dim);
    for layers in [t.n_layers, t.n_layers + t.n_layers / 2, 2 * t.n_layers] {
        for ns in 4..=64 {
            s.n_layers = layers;
            s.state_dim = ns;
            let gap = (s.param_count() as f64 - target).abs();
            if gap < best.0 {
                best = (gap, layers, ns);
            }
        }
    }
    s.n_layers = best.1;
    s.state_dim = best.2;
    let presets = [t, b, h, s];
    check_parity(&presets)?;
    Ok(presets)
}

pub fn check_parity(configs: &[ModelConfig]) -> Result<()> {
    let Some(first) = configs.first() else {
        return Ok(());
    };
    let reference = first.param_count() as f64;
    for c in configs {
        c.validate()?;
        let rel = (c.param_count() as f64 - reference).abs() / reference;
        if rel > PARITY_TOLERANCE {
            return Err(Error::Config(format!(
                "{} has {} parameters, {:.1}% away from {} ({})",
                c.arch,
                c.param_count(),
                100.0 * rel,
                first.arch,
                first.param_count()
            )));
        }
    }
    Ok(())
}
