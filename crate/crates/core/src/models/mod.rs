//! Sequence models over interleaved prompt tokens.
//!
//! All four architectures share the same embedding: an x-token is the
//! zero-padded input projected by one linear map, a y-token is the label in
//! slot 0 of a zero vector projected by another. Tokens alternate
//! `x₁ y₁ … x_k y_k x_{k+1}` and every model is strictly causal.

mod checkpoint;
mod config;
mod layers;

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{
    check_parity, matched_presets, seq_len_for, Arch, ModelConfig, DEFAULT_INIT_STD,
    PARITY_TOLERANCE,
};
pub use layers::hyena_mix;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tasks::Prompt;
use crate::tensor::Tensor;

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// FNV-1a over names, shapes and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.tensors {
            eat(name.as_bytes());
            for &s in t.shape() {
                eat(&(s as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Registers every tensor as a differentiable leaf (or a constant when
    /// `trainable` is false).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = if trainable {
                g.param(t.clone())?
            } else {
                g.constant(t.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }
}

/// Parameters registered on a particular [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds parameters by name to existing graph leaves.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// A batch of equal-length prompts laid out as model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBatch {
    pub batch: usize,
    pub k: usize,
    /// `[B, T, max_input_dim]`; non-zero only at x positions.
    pub x_in: Tensor,
    /// `[B, T, max_input_dim]`; the label in slot 0 at y positions.
    pub y_in: Tensor,
    pub query_targets: Vec<f64>,
    /// `[B, k]` context labels, the targets at x positions in all-prefix mode.
    pub context_targets: Vec<f64>,
}

impl PromptBatch {
    pub fn new(prompts: &[Prompt], max_input_dim: usize) -> Result<Self> {
        let first = prompts
            .first()
            .ok_or_else(|| Error::invalid("empty prompt batch"))?;
        let k = first.k();
        let t = seq_len_for(k);
        let b = prompts.len();
        let dm = max_input_dim;
        let mut x_in = vec![0.0; b * t * dm];
        let mut y_in = vec![0.0; b * t * dm];
        let mut context_targets = Vec::with_capacity(b * k);
        for (bi, p) in prompts.iter().enumerate() {
            if p.k() != k {
                return Err(Error::invalid(format!(
                    "prompts in one batch must share k ({} vs {k})",
                    p.k()
                )));
            }
            if p.d() > dm || p.xs.iter().any(|x| x.len() != p.d()) {
                return Err(Error::invalid(format!(
                    "prompt dimension {} exceeds max_input_dim {dm}",
                    p.d()
                )));
            }
            for (i, x) in p.xs.iter().enumerate() {
                let row = (bi * t + 2 * i) * dm;
                x_in[row..row + x.len()].copy_from_slice(x);
            }
            for (i, &y) in p.ys.iter().enumerate() {
                y_in[(bi * t + 2 * i + 1) * dm] = y;
            }
            context_targets.extend_from_slice(&p.ys);
        }
        Ok(Self {
            batch: b,
            k,
            x_in: Tensor::new(vec![b, t, dm], x_in)?,
            y_in: Tensor::new(vec![b, t, dm], y_in)?,
            query_targets: prompts.iter().map(|p| p.query_target).collect(),
            context_targets,
        })
    }

    pub fn seq_len(&self) -> usize {
        seq_len_for(self.k)
    }
}

/// Architecture plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// Fresh parameters; N(0, init_std²) weights, zero biases,
    /// unit layer-norm gains and a zero read-out head.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_from_seed(seed);
        let params = layers::init_params(&config, &mut rng)?;
        debug_assert_eq!(params.count(), config.param_count());
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let expected = layers::init_params(&config, &mut rng::rng_from_seed(0))?;
        for (name, t) in &expected.tensors {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameters",
                    lhs: t.shape().to_vec(),
                    rhs: got.shape().to_vec(),
                });
            }
        }
        if params.tensors.len() != expected.tensors.len() {
            return Err(Error::invalid("unexpected extra parameters"));
        }
        Ok(Self { config, params })
    }

    /// Token embeddings `[B, T, E]` of a batch.
    pub fn embed(&self, g: &mut Graph, bound: &Bound, batch: &PromptBatch) -> Result<Var> {
        self.check_batch(batch)?;
        layers::embed(g, bound, &self.config, batch)
    }

    /// Per-position scalar outputs `[B, T]`. Position `2i` (an x-token)
    /// predicts the label of that input; the final position is the query.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, batch: &PromptBatch) -> Result<Var> {
        self.check_batch(batch)?;
        layers::forward(g, bound, &self.config, batch)
    }

    fn check_batch(&self, batch: &PromptBatch) -> Result<()> {
        if batch.seq_len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "prompt with k = {} needs {} positions; the model allows {}",
                batch.k,
                batch.seq_len(),
                self.config.max_seq_len
            )));
        }
        if batch.x_in.shape()[2] != self.config.max_input_dim {
            return Err(Error::invalid("batch was built for another max_input_dim"));
        }
        Ok(())
    }

    /// Query predictions for a batch of equal-length prompts, without
    /// recording gradients.
    pub fn predict_batch(&self, prompts: &[Prompt]) -> Result<Vec<f64>> {
        let batch = PromptBatch::new(prompts, self.config.max_input_dim)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false)?;
        let out = self.forward(&mut g, &bound, &batch)?;
        let t = batch.seq_len();
        Ok(g.value(out)
            .data()
            .chunks(t)
            .map(|row| row[t - 1])
            .collect())
    }
}

/// Token sequence `[2k+1, E]` of a single prompt.
pub fn embed_prompt(prompt: &Prompt, model: &Model) -> Result<Tensor> {
    let batch = PromptBatch::new(std::slice::from_ref(prompt), model.config.max_input_dim)?;
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false)?;
    let tokens = model.embed(&mut g, &bound, &batch)?;
    let e = model.config.embed_dim;
    g.value(tokens).clone().reshaped(&[batch.seq_len(), e])
}

/// Prediction for the held-out query of one prompt.
pub fn predict_query(model: &Model, prompt: &Prompt) -> Result<f64> {
    Ok(model.predict_batch(std::slice::from_ref(prompt))?[0])
}

pub(crate) fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng::normal(rng))
}

pub(crate) fn uniform_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}
