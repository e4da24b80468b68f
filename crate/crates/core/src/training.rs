//! Loss, schedules, the curriculum and the training loop.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dynamics::{DynamicsKind, DynamicsOptions, ForcingClock};
use crate::error::{Error, Result};
use crate::models::{matched_presets, Arch, Model, ModelConfig, PromptBatch};
use crate::optim::{adamw_update, clip_global_norm, AdamWHyper, AdamWState};
use crate::rng::{mix, EpisodeSeed};
use crate::tasks::{
    normalize_outputs_batch, sample_episode, BaseDist, FamilySpec, InputDist, Normalization,
    Prompt, TaskConfig,
};
use crate::tensor::Tensor;

/// Mean squared residual.
pub fn mse_loss(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::invalid("mse of an empty batch"));
    }
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: vec![preds.len()],
            rhs: vec![targets.len()],
        });
    }
    Ok(preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len() as f64)
}

/// Linear warm-up from 0 to `base_lr`, then a half cosine down to 0 at
/// `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Synchronized growth of input dimension and prompt length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub start_dim: usize,
    pub dim_cap: usize,
    pub dim_increment: usize,
    pub start_len: usize,
    pub len_increment: usize,
    pub len_cap: usize,
    pub step_interval: u64,
}

impl CurriculumSchedule {
    pub fn kernel() -> Self {
        Self {
            start_dim: 5,
            dim_cap: 20,
            dim_increment: 1,
            start_len: 11,
            len_increment: 2,
            len_cap: 41,
            step_interval: 2000,
        }
    }

    pub fn dynamics() -> Self {
        Self {
            start_len: 26,
            len_increment: 5,
            len_cap: 101,
            ..Self::kernel()
        }
    }

    fn stages_to(start: usize, cap: usize, inc: usize) -> u64 {
        if inc == 0 || cap <= start {
            0
        } else {
            (cap - start).div_ceil(inc) as u64
        }
    }

    /// First step at which both axes are capped.
    pub fn cap_step(&self) -> u64 {
        let stages = Self::stages_to(self.start_dim, self.dim_cap, self.dim_increment).max(
            Self::stages_to(self.start_len, self.len_cap, self.len_increment),
        );
        stages * self.step_interval
    }

    /// `(step, dim, len)` at every stage boundary up to and including the cap.
    pub fn table(&self) -> Vec<(u64, usize, usize)> {
        (0..=self.cap_step() / self.step_interval.max(1))
            .map(|i| {
                let step = i * self.step_interval;
                let (d, l) = curriculum_state(self, step);
                (step, d, l)
            })
            .collect()
    }
}

/// `(dim, prompt_len)` in force at `step`.
pub fn curriculum_state(schedule: &CurriculumSchedule, step: u64) -> (usize, usize) {
    let stage = (step / schedule.step_interval.max(1)) as usize;
    let dim = (schedule.start_dim + schedule.dim_increment * stage).min(schedule.dim_cap);
    let len = (schedule.start_len + schedule.len_increment * stage).min(schedule.len_cap);
    (dim, len)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Squared error of the final query only.
    FinalQuery,
    /// Squared error at every x position (each prefix acts as a prompt).
    AllPrefix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumPreset {
    Off,
    Kernel,
    Dynamics,
}

impl CurriculumPreset {
    pub fn schedule(self) -> Option<CurriculumSchedule> {
        match self {
            CurriculumPreset::Off => None,
            CurriculumPreset::Kernel => Some(CurriculumSchedule::kernel()),
            CurriculumPreset::Dynamics => Some(CurriculumSchedule::dynamics()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub eval_every: u64,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self {
            patience: 5,
            eval_every: 500,
        }
    }
}

/// Everything a training run depends on. Serialized as flat `key = value`
/// text; see [`TrainConfig::to_text`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskConfig,
    pub arch: Arch,
    /// Explicit model shape; `None` uses the matched desk preset.
    pub model: Option<ModelConfig>,
    pub max_input_dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub curriculum: CurriculumPreset,
    /// Dimension and prompt length when the curriculum is off, and the
    /// validation setting in every case.
    pub dim: usize,
    pub k: usize,
    /// Longest prompt the model must accept; at least the training length.
    pub max_k: usize,
    pub early_stopping: Option<EarlyStopping>,
    /// Validation interval when early stopping is off; 0 disables it.
    pub eval_every: u64,
    pub val_episodes: usize,
    pub loss: LossMode,
    /// Number of distinct training functions; 0 draws a fresh one per episode.
    pub task_pool: u64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk defaults for a family and architecture.
    pub fn preset(task: TaskConfig, arch: Arch) -> Self {
        let curriculum = match task.family {
            FamilySpec::Dynamics { .. } => CurriculumPreset::Dynamics,
            _ => CurriculumPreset::Kernel,
        };
        Self {
            task,
            arch,
            model: None,
            max_input_dim: 20,
            batch_size: 64,
            lr: if arch == Arch::Ssm { 5e-5 } else { 1e-4 },
            weight_decay: 0.0,
            total_steps: 5000,
            warmup_steps: 300,
            curriculum,
            dim: 20,
            k: curriculum.schedule().map_or(41, |s| s.len_cap),
            max_k: curriculum.schedule().map_or(41, |s| s.len_cap),
            early_stopping: Some(EarlyStopping::default()),
            eval_every: 500,
            val_episodes: 500,
            loss: LossMode::FinalQuery,
            task_pool: 0,
            grad_clip: 1.0,
            seed: 0,
        }
    }

    /// Named presets: `linear`, `kernel`, and `dynamics-<system>`.
    pub fn named(preset: &str, arch: Arch) -> Result<Self> {
        let task = match preset {
            "linear" => TaskConfig::linear(0.1),
            "kernel" => TaskConfig::kernel_default(),
            other => match other.strip_prefix("dynamics-") {
                Some(kind) => TaskConfig::dynamics(kind.parse()?, 0.1),
                None => return Err(Error::Config(format!("unknown preset `{preset}`"))),
            },
        };
        Ok(Self::preset(task, arch))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return fail(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return fail("lr and grad_clip must be positive, weight_decay non-negative".into());
        }
        if self.k == 0 || self.dim == 0 || self.dim > self.max_input_dim {
            return fail(format!(
                "need 1 <= dim <= max_input_dim and k >= 1 (dim {}, k {})",
                self.dim, self.k
            ));
        }
        if self.max_k < self.longest_prompt() {
            return fail(format!(
                "max_k {} is below the longest training prompt {}",
                self.max_k,
                self.longest_prompt()
            ));
        }
        if let Some(es) = self.early_stopping {
            if es.eval_every == 0 || es.patience == 0 {
                return fail("early stopping needs positive patience and eval_every".into());
            }
        }
        if let Some(s) = self.curriculum.schedule() {
            if s.dim_cap > self.max_input_dim {
                return fail("curriculum dimension exceeds max_input_dim".into());
            }
        }
        self.model_config()?;
        Ok(())
    }

    fn longest_prompt(&self) -> usize {
        self.curriculum
            .schedule()
            .map_or(self.k, |s| s.len_cap.max(self.k))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let c = match &self.model {
            Some(c) => c.clone(),
            None => {
                let presets = matched_presets(self.max_k, self.max_input_dim)?;
                presets
                    .into_iter()
                    .find(|c| c.arch == self.arch)
                    .expect("a preset per architecture")
            }
        };
        if c.arch != self.arch {
            return Err(Error::Config(format!(
                "model section is {} but arch is {}",
                c.arch, self.arch
            )));
        }
        c.validate()?;
        Ok(c)
    }

    /// `(dim, k)` of training batches at `step`.
    pub fn stage(&self, step: u64) -> (usize, usize) {
        match self.curriculum.schedule() {
            Some(s) => curriculum_state(&s, step),
            None => (self.dim, self.k),
        }
    }

    /// Stable 64-bit fingerprint of the textual form.
    pub fn fingerprint(&self) -> String {
        fingerprint_text(&self.to_text())
    }
}

/// Hex SHA-256 prefix (16 hex digits) of `text`.
pub fn fingerprint_text(text: &str) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn family_name(spec: &FamilySpec) -> &'static str {
    spec.family().name()
}

fn fmt_f64(v: f64) -> String {
    // `{:?}` prints the shortest representation that parses back exactly.
    format!("{v:?}")
}

impl TrainConfig {
    /// Flat `key = value` text, one key per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut kv: Vec<(&str, String)> = Vec::new();
        let t = &self.task;
        kv.push(("family", family_name(&t.family).into()));
        match &t.family {
            FamilySpec::Linear => {}
            FamilySpec::GaussianKernel {
                num_centers,
                bandwidth,
            } => {
                kv.push(("num_centers", num_centers.to_string()));
                kv.push(("bandwidth", fmt_f64(*bandwidth)));
            }
            FamilySpec::Dynamics { kind, options } => {
                kv.push(("dynamics_kind", kind.name().into()));
                kv.push(("poly_spectral_cap", fmt_f64(options.poly_spectral_cap)));
                kv.push(("poly_cubic", options.poly_cubic.to_string()));
                kv.push((
                    "duffing_clock",
                    match options.duffing_clock {
                        ForcingClock::Time => "time",
                        ForcingClock::StepIndex => "step_index",
                    }
                    .into(),
                ));
            }
        }
        kv.push(("noise_sigma", fmt_f64(t.noise_sigma)));
        kv.push(("input", t.input.base.name().into()));
        kv.push(("input_scale", fmt_f64(t.input.scale)));
        kv.push((
            "normalization",
            match t.normalization {
                None => "none",
                Some(Normalization::Pooled) => "pooled",
                Some(Normalization::PerPrompt) => "per_prompt",
            }
            .into(),
        ));
        kv.push(("arch", self.arch.name().into()));
        if let Some(m) = &self.model {
            kv.push(("n_layers", m.n_layers.to_string()));
            kv.push(("n_heads", m.n_heads.to_string()));
            kv.push(("embed_dim", m.embed_dim.to_string()));
            kv.push(("block_size", m.block_size.to_string()));
            kv.push(("filter_order", m.filter_order.to_string()));
            kv.push(("filter_features", m.filter_features.to_string()));
            kv.push(("filter_hidden", m.filter_hidden.to_string()));
            kv.push(("state_dim", m.state_dim.to_string()));
            kv.push(("ssm_expand", m.ssm_expand.to_string()));
            kv.push(("conv_kernel", m.conv_kernel.to_string()));
            kv.push(("mlp_ratio", m.mlp_ratio.to_string()));
            kv.push(("init_std", fmt_f64(m.init_std)));
        }
        kv.push(("max_input_dim", self.max_input_dim.to_string()));
        kv.push(("batch_size", self.batch_size.to_string()));
        kv.push(("lr", fmt_f64(self.lr)));
        kv.push(("weight_decay", fmt_f64(self.weight_decay)));
        kv.push(("total_steps", self.total_steps.to_string()));
        kv.push(("warmup_steps", self.warmup_steps.to_string()));
        kv.push((
            "curriculum",
            match self.curriculum {
                CurriculumPreset::Off => "off",
                CurriculumPreset::Kernel => "kernel",
                CurriculumPreset::Dynamics => "dynamics",
            }
            .into(),
        ));
        kv.push(("dim", self.dim.to_string()));
        kv.push(("k", self.k.to_string()));
        kv.push(("max_k", self.max_k.to_string()));
        match self.early_stopping {
            Some(es) => {
                kv.push(("early_stopping", "on".into()));
                kv.push(("patience", es.patience.to_string()));
                kv.push(("eval_every", es.eval_every.to_string()));
            }
            None => {
                kv.push(("early_stopping", "off".into()));
                kv.push(("eval_every", self.eval_every.to_string()));
            }
        }
        kv.push(("val_episodes", self.val_episodes.to_string()));
        kv.push((
            "loss",
            match self.loss {
                LossMode::FinalQuery => "final_query",
                LossMode::AllPrefix => "all_prefix",
            }
            .into(),
        ));
        kv.push(("task_pool", self.task_pool.to_string()));
        kv.push(("grad_clip", fmt_f64(self.grad_clip)));
        kv.push(("seed", self.seed.to_string()));
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys not given take
    /// the preset defaults for the given `family`/`arch`.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    /// Applies `key = value` overrides on top of this configuration.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_pairs(&self.to_text())?;
        for (k, v) in overrides {
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_pairs(pairs)
    }

    fn from_pairs(mut kv: BTreeMap<String, String>) -> Result<Self> {
        let mut take = |key: &str| kv.remove(key);
        let family = take("family").unwrap_or_else(|| "linear".into());
        let noise = take("noise_sigma")
            .map(|v| parse_num::<f64>("noise_sigma", &v))
            .transpose()?;
        let mut task = match family.as_str() {
            "linear" => TaskConfig::linear(noise.unwrap_or(0.1)),
            "gaussian_kernel" => {
                let mut t = TaskConfig::kernel_default();
                if let FamilySpec::GaussianKernel {
                    num_centers,
                    bandwidth,
                } = &mut t.family
                {
                    if let Some(v) = take("num_centers") {
                        *num_centers = parse_num("num_centers", &v)?;
                    }
                    if let Some(v) = take("bandwidth") {
                        *bandwidth = parse_num("bandwidth", &v)?;
                    }
                }
                t.noise_sigma = noise.unwrap_or(t.noise_sigma);
                t
            }
            "dynamics" => {
                let kind: DynamicsKind = take("dynamics_kind")
                    .ok_or_else(|| Error::Config("dynamics family needs dynamics_kind".into()))?
                    .parse()?;
                let mut options = DynamicsOptions::default();
                if let Some(v) = take("poly_spectral_cap") {
                    options.poly_spectral_cap = parse_num("poly_spectral_cap", &v)?;
                }
                if let Some(v) = take("poly_cubic") {
                    options.poly_cubic = parse_num("poly_cubic", &v)?;
                }
                if let Some(v) = take("duffing_clock") {
                    options.duffing_clock = match v.as_str() {
                        "time" => ForcingClock::Time,
                        "step_index" => ForcingClock::StepIndex,
                        _ => return Err(Error::Config(format!("duffing_clock `{v}`"))),
                    };
                }
                let mut t = TaskConfig::dynamics(kind, noise.unwrap_or(0.1));
                t.family = FamilySpec::Dynamics { kind, options };
                t
            }
            other => return Err(Error::Config(format!("unknown family `{other}`"))),
        };
        if let Some(v) = take("input") {
            let base: BaseDist = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            task.input = InputDist::from_base(base);
        }
        if let Some(v) = take("input_scale") {
            task.input = task.input.clone().scaled(parse_num("input_scale", &v)?);
        }
        if let Some(v) = take("normalization") {
            task.normalization = match v.as_str() {
                "none" => None,
                "pooled" => Some(Normalization::Pooled),
                "per_prompt" => Some(Normalization::PerPrompt),
                _ => return Err(Error::Config(format!("normalization `{v}`"))),
            };
        }
        let arch: Arch = take("arch")
            .unwrap_or_else(|| "transformer".into())
            .parse()
            .map_err(|e: Error| Error::Config(e.to_string()))?;
        let mut c = Self::preset(task, arch);
        let model_keys = [
            "n_layers",
            "n_heads",
            "embed_dim",
            "block_size",
            "filter_order",
            "filter_features",
            "filter_hidden",
            "state_dim",
            "ssm_expand",
            "conv_kernel",
            "mlp_ratio",
            "init_std",
        ];
        let model_vals: Vec<(&str, Option<String>)> =
            model_keys.iter().map(|&k| (k, take(k))).collect();
        macro_rules! field {
            ($key:literal, $dst:expr) => {
                if let Some(v) = take($key) {
                    $dst = parse_num($key, &v)?;
                }
            };
        }
        field!("max_input_dim", c.max_input_dim);
        field!("batch_size", c.batch_size);
        field!("lr", c.lr);
        field!("weight_decay", c.weight_decay);
        field!("total_steps", c.total_steps);
        field!("warmup_steps", c.warmup_steps);
        if let Some(v) = take("curriculum") {
            c.curriculum = match v.as_str() {
                "off" => CurriculumPreset::Off,
                "kernel" => CurriculumPreset::Kernel,
                "dynamics" => CurriculumPreset::Dynamics,
                _ => return Err(Error::Config(format!("curriculum `{v}`"))),
            };
        }
        let k_given = take("k");
        let max_k_given = take("max_k");
        field!("dim", c.dim);
        if let Some(v) = k_given {
            c.k = parse_num("k", &v)?;
        }
        c.max_k = match max_k_given {
            Some(v) => parse_num("max_k", &v)?,
            None => c.longest_prompt(),
        };
        let es_on = match take("early_stopping").as_deref() {
            None | Some("on") => true,
            Some("off") => false,
            Some(v) => return Err(Error::Config(format!("early_stopping `{v}`"))),
        };
        let mut es = EarlyStopping::default();
        field!("patience", es.patience);
        field!("eval_every", c.eval_every);
        es.eval_every = c.eval_every;
        c.early_stopping = es_on.then_some(es);
        field!("val_episodes", c.val_episodes);
        if let Some(v) = take("loss") {
            c.loss = match v.as_str() {
                "final_query" => LossMode::FinalQuery,
                "all_prefix" => LossMode::AllPrefix,
                _ => return Err(Error::Config(format!("loss `{v}`"))),
            };
        }
        field!("task_pool", c.task_pool);
        field!("grad_clip", c.grad_clip);
        field!("seed", c.seed);
        if let Some(unknown) = kv.keys().next() {
            return Err(Error::Config(format!("unknown key `{unknown}`")));
        }
        if model_vals.iter().any(|(_, v)| v.is_some()) {
            let mut m = matched_presets(c.max_k, c.max_input_dim)?
                .into_iter()
                .find(|m| m.arch == arch)
                .expect("a preset per architecture");
            for (key, v) in model_vals {
                let Some(v) = v else { continue };
                if key == "init_std" {
                    m.init_std = parse_num(key, &v)?;
                    continue;
                }
                let n: usize = parse_num(key, &v)?;
                match key {
                    "n_layers" => m.n_layers = n,
                    "n_heads" => m.n_heads = n,
                    "embed_dim" => m.embed_dim = n,
                    "block_size" => m.block_size = n,
                    "filter_order" => m.filter_order = n,
                    "filter_features" => m.filter_features = n,
                    "filter_hidden" => m.filter_hidden = n,
                    "state_dim" => m.state_dim = n,
                    "ssm_expand" => m.ssm_expand = n,
                    "conv_kernel" => m.conv_kernel = n,
                    _ => m.mlp_ratio = n,
                }
            }
            c.model = Some(m);
        }
        if let Some(m) = &mut c.model {
            m.max_seq_len = crate::models::seq_len_for(c.max_k);
            m.max_input_dim = c.max_input_dim;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parses `key = value` lines (`#` starts a comment); duplicate keys are an
/// error.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        if out
            .insert(k.trim().to_string(), v.trim().to_string())
            .is_some()
        {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{}`",
                i + 1,
                k.trim()
            )));
        }
    }
    Ok(out)
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub dim: usize,
    pub prompt_len: usize,
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    /// Steps whose gradient norm exceeded the clip threshold, with the norm.
    pub clipped: Vec<(u64, f64)>,
    /// Step whose parameters were returned.
    pub best_step: Option<u64>,
    pub best_val_mse: Option<f64>,
    pub stopped_early: bool,
    pub wall_clock_secs: f64,
}

impl TrainingLog {
    /// `step,loss,lr,dim,prompt_len,val_mse`; `val_mse` is empty on steps
    /// without validation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr,dim,prompt_len,val_mse\n");
        for r in &self.rows {
            let val = r.val_mse.map(fmt_f64).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step,
                fmt_f64(r.loss),
                fmt_f64(r.lr),
                r.dim,
                r.prompt_len,
                val
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Vec<LogRow>> {
        let mut lines = text.lines();
        if lines.next() != Some("step,loss,lr,dim,prompt_len,val_mse") {
            return Err(Error::invalid("unexpected training log header"));
        }
        lines
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 6 {
                    return Err(Error::invalid(format!("malformed log row `{line}`")));
                }
                Ok(LogRow {
                    step: parse_num("step", f[0])?,
                    loss: parse_num("loss", f[1])?,
                    lr: parse_num("lr", f[2])?,
                    dim: parse_num("dim", f[3])?,
                    prompt_len: parse_num("prompt_len", f[4])?,
                    val_mse: if f[5].is_empty() {
                        None
                    } else {
                        Some(parse_num("val_mse", f[5])?)
                    },
                })
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Seed ranges of one run. Training, validation and test episodes never
/// share a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub init: u64,
    pub train: u64,
    pub pool: u64,
    pub validation: u64,
    pub test: u64,
}

impl RunSeeds {
    pub fn new(seed: u64) -> Self {
        Self {
            init: mix(seed, 0x696e_6974),
            train: mix(seed, 0x7472_6169),
            pool: mix(seed, 0x706f_6f6c),
            validation: mix(seed, 0x7661_6c69),
            test: mix(seed, 0x7465_7374),
        }
    }
}

/// Episodes `indices` of a seed range at `(d, k)`, generated in parallel but
/// returned in index order.
pub fn episodes(
    task: &TaskConfig,
    d: usize,
    k: usize,
    base_seed: u64,
    indices: std::ops::Range<u64>,
    task_seed_of: impl Fn(u64) -> EpisodeSeed + Sync,
) -> Result<Vec<Prompt>> {
    let d_eff = task.effective_dim(d);
    indices
        .into_par_iter()
        .map(|i| {
            let input_seed = EpisodeSeed::new(base_seed, i);
            sample_episode(task, d_eff, k, task_seed_of(i), input_seed).map(|(_, p)| p)
        })
        .collect()
}

/// Fixed-seed validation or test prompts, normalized as one pooled batch for
/// the kernel family.
pub fn held_out_set(
    task: &TaskConfig,
    d: usize,
    k: usize,
    base_seed: u64,
    n: usize,
) -> Result<Vec<Prompt>> {
    let mut prompts = episodes(task, d, k, base_seed, 0..n as u64, |i| {
        EpisodeSeed::new(base_seed, i)
    })?;
    if let Some(mode) = task.normalization {
        normalize_outputs_batch(&mut prompts, mode)?;
    }
    Ok(prompts)
}

/// Mean squared query error of `model` over `prompts`.
pub fn model_mse(model: &Model, prompts: &[Prompt], chunk: usize) -> Result<f64> {
    let preds: Vec<f64> = prompts
        .chunks(chunk.max(1))
        .map(|c| model.predict_batch(c))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let targets: Vec<f64> = prompts.iter().map(|p| p.query_target).collect();
    mse_loss(&preds, &targets)
}

/// Scalar training loss of a forward output `[B, T]`.
pub fn batch_loss(g: &mut Graph, out: Var, batch: &PromptBatch, mode: LossMode) -> Result<Var> {
    let (b, t, k) = (batch.batch, batch.seq_len(), batch.k);
    match mode {
        LossMode::FinalQuery => {
            let q = g.slice(out, 1, t - 1, 1)?;
            let q = g.reshape(q, &[b])?;
            let target = g.constant(Tensor::from_vec(batch.query_targets.clone()))?;
            let diff = g.sub(q, target)?;
            let sq = g.square(diff)?;
            g.mean(sq)
        }
        LossMode::AllPrefix => {
            let mut target = vec![0.0; b * t];
            for bi in 0..b {
                for i in 0..k {
                    target[bi * t + 2 * i] = batch.context_targets[bi * k + i];
                }
                target[bi * t + t - 1] = batch.query_targets[bi];
            }
            let mask = Tensor::from_fn(&[t], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
            let target = g.constant(Tensor::new(vec![b, t], target)?)?;
            let mask = g.constant(mask)?;
            let diff = g.sub(out, target)?;
            let diff = g.mul(diff, mask)?;
            let sq = g.square(diff)?;
            let total = g.sum(sq)?;
            g.scale(total, 1.0 / (b * (k + 1)) as f64)
        }
    }
}

/// Parameters and log of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainingLog,
    pub config: TrainConfig,
}

/// Runs training; `on_row` sees every log row as it is produced.
pub fn train_with(cfg: &TrainConfig, mut on_row: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let seeds = RunSeeds::new(cfg.seed);
    let mut model = Model::init(cfg.model_config()?, seeds.init)?;
    let mut states: BTreeMap<String, AdamWState> = model
        .params
        .tensors
        .iter()
        .map(|(n, t)| (n.clone(), AdamWState::new(t.shape())))
        .collect();
    let val_every = cfg.early_stopping.map_or(cfg.eval_every, |e| e.eval_every);
    let validation = if val_every > 0 && cfg.val_episodes > 0 {
        Some(held_out_set(
            &cfg.task,
            cfg.dim,
            cfg.k,
            seeds.validation,
            cfg.val_episodes,
        )?)
    } else {
        None
    };
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, u64, Model)> = None;
    let mut bad_evals = 0usize;
    let batch_size = cfg.batch_size as u64;
    for step in 0..cfg.total_steps {
        let (dim, k) = cfg.stage(step);
        let first = step * batch_size;
        let pool = cfg.task_pool;
        let mut prompts = episodes(
            &cfg.task,
            dim,
            k,
            seeds.train,
            first..first + batch_size,
            |i| {
                if pool > 0 {
                    EpisodeSeed::new(seeds.pool, i % pool)
                } else {
                    EpisodeSeed::new(seeds.train, i)
                }
            },
        )?;
        if let Some(mode) = cfg.task.normalization {
            normalize_outputs_batch(&mut prompts, mode)?;
        }
        let batch = PromptBatch::new(&prompts, model.config.max_input_dim)?;
        let diverged = |loss: f64| Error::TrainingDiverged { step, loss };
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, true)?;
        let (loss_var, grads) = (|| {
            let out = model.forward(&mut g, &bound, &batch)?;
            let loss = batch_loss(&mut g, out, &batch, cfg.loss)?;
            let grads = g.backward(loss)?;
            Ok((loss, grads))
        })()
        .map_err(|e: Error| match e {
            Error::NonFinite(_) | Error::NonFiniteGradient(_) => diverged(f64::NAN),
            other => other,
        })?;
        let loss = g.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(diverged(loss));
        }
        let mut grads = grads;
        let mut named: Vec<(String, Tensor)> = bound
            .iter()
            .map(|(name, v)| {
                let t = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
                (name.to_string(), t)
            })
            .collect();
        drop(g);
        let norm = clip_global_norm(named.iter_mut().map(|(_, t)| t), cfg.grad_clip);
        if norm > cfg.grad_clip {
            log.clipped.push((step, norm));
        }
        let lr = cosine_lr(step + 1, cfg.total_steps, cfg.warmup_steps, cfg.lr);
        if lr > 0.0 {
            let hyper = AdamWHyper {
                lr,
                weight_decay: cfg.weight_decay,
                ..AdamWHyper::default()
            };
            for (name, grad) in &named {
                let param = model.params.get_mut(name)?;
                let state = states.get_mut(name).expect("state per parameter");
                adamw_update(name, param, grad, state, &hyper).map_err(|e| match e {
                    Error::NonFiniteGradient(_) => diverged(loss),
                    other => other,
                })?;
            }
        }
        let is_last = step + 1 == cfg.total_steps;
        let val_mse = match &validation {
            Some(v) if (step + 1) % val_every == 0 || is_last => Some(model_mse(&model, v, 100)?),
            _ => None,
        };
        let row = LogRow {
            step,
            loss,
            lr,
            dim,
            prompt_len: k,
            val_mse,
        };
        on_row(&row);
        log.rows.push(row);
        if let Some(val) = val_mse {
            if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
                best = Some((val, step, model.clone()));
                bad_evals = 0;
            } else {
                bad_evals += 1;
            }
            if let Some(es) = cfg.early_stopping {
                if bad_evals >= es.patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    let model = match (cfg.early_stopping, best) {
        (Some(_), Some((val, step, m))) => {
            log.best_step = Some(step);
            log.best_val_mse = Some(val);
            m
        }
        (_, best) => {
            if let Some((val, step, _)) = best {
                log.best_step = Some(step);
                log.best_val_mse = Some(val);
            }
            model
        }
    };
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model,
        log,
        config: cfg.clone(),
    })
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}
