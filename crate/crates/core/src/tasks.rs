//! Task families and prompt construction.
//!
//! A [`FunctionInstance`] is one sampled function; a [`Prompt`] is `k`
//! labelled examples of it plus a query input whose label is held out.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics::{self, DynamicsKind, DynamicsOptions, DynamicsSpec};
use crate::error::{Error, Result};
use crate::ood::{self, OodSpec};
use crate::rng::{self, stream, EpisodeSeed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Linear,
    GaussianKernel,
    Dynamics,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Linear => "linear",
            Family::GaussianKernel => "gaussian_kernel",
            Family::Dynamics => "dynamics",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TaskParams {
    Linear {
        w: Vec<f64>,
    },
    GaussianKernel {
        centers: Vec<Vec<f64>>,
        beta: Vec<f64>,
        bandwidth: f64,
    },
    Dynamics {
        spec: DynamicsSpec,
        readout: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionInstance {
    /// Input dimension (the state dimension for dynamics).
    pub d: usize,
    pub noise_sigma: f64,
    pub params: TaskParams,
}

impl FunctionInstance {
    pub fn family(&self) -> Family {
        match self.params {
            TaskParams::Linear { .. } => Family::Linear,
            TaskParams::GaussianKernel { .. } => Family::GaussianKernel,
            TaskParams::Dynamics { .. } => Family::Dynamics,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub family: Family,
    pub d: usize,
    pub seed: u64,
    pub scaling_factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    /// `k` context inputs followed by the query input.
    pub xs: Vec<Vec<f64>>,
    /// `k` context labels.
    pub ys: Vec<f64>,
    pub query_target: f64,
    pub meta: PromptMeta,
}

impl Prompt {
    pub fn k(&self) -> usize {
        self.ys.len()
    }

    pub fn d(&self) -> usize {
        self.meta.d
    }

    pub fn context(&self) -> &[Vec<f64>] {
        &self.xs[..self.ys.len()]
    }

    pub fn query(&self) -> &[f64] {
        &self.xs[self.ys.len()]
    }
}

fn unit_vector(rng: &mut Rng, d: usize) -> Vec<f64> {
    dynamics::sample_readout(d, rng)
}

/// `w ~ N(0, I_d)` normalized to unit length.
pub fn sample_linear_task(d: usize, noise_sigma: f64, rng: &mut Rng) -> Result<FunctionInstance> {
    if d == 0 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    check_noise(noise_sigma)?;
    Ok(FunctionInstance {
        d,
        noise_sigma,
        params: TaskParams::Linear {
            w: unit_vector(rng, d),
        },
    })
}

fn check_noise(noise_sigma: f64) -> Result<()> {
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::invalid(format!(
            "noise sigma must be >= 0, got {noise_sigma}"
        )));
    }
    Ok(())
}

/// Sum of `num_centers` Gaussian bumps with centers uniform in `[-1, 1]^d`
/// and weights `N(0, 1)`.
pub fn sample_gaussian_kernel_task(
    d: usize,
    num_centers: usize,
    bandwidth: f64,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<FunctionInstance> {
    if d == 0 || num_centers == 0 {
        return Err(Error::invalid(
            "dimension and number of centers must be at least 1",
        ));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::invalid(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    check_noise(noise_sigma)?;
    let centers = (0..num_centers)
        .map(|_| (0..d).map(|_| rng::uniform(rng, -1.0, 1.0)).collect())
        .collect();
    let beta = rng::normal_vec(rng, num_centers);
    Ok(FunctionInstance {
        d,
        noise_sigma,
        params: TaskParams::GaussianKernel {
            centers,
            beta,
            bandwidth,
        },
    })
}

pub fn sample_dynamics_task(
    kind: DynamicsKind,
    d: usize,
    noise_sigma: f64,
    opts: &DynamicsOptions,
    rng: &mut Rng,
) -> Result<FunctionInstance> {
    check_noise(noise_sigma)?;
    let spec = dynamics::sample_dynamics(kind, d, opts, rng)?;
    let dim = spec.state_dim();
    Ok(FunctionInstance {
        d: dim,
        noise_sigma,
        params: TaskParams::Dynamics {
            spec,
            readout: unit_vector(rng, dim),
        },
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The function value without noise.
pub fn eval_noiseless(instance: &FunctionInstance, x: &[f64]) -> Result<f64> {
    if x.len() != instance.d {
        return Err(Error::ShapeMismatch {
            op: "eval_function",
            lhs: vec![instance.d],
            rhs: vec![x.len()],
        });
    }
    Ok(match &instance.params {
        TaskParams::Linear { w } => w.iter().zip(x).map(|(a, b)| a * b).sum(),
        TaskParams::GaussianKernel {
            centers,
            beta,
            bandwidth,
        } => {
            let denom = 2.0 * bandwidth * bandwidth;
            let mut total = 0.0;
            for (c, b) in centers.iter().zip(beta) {
                total += b * (-sq_dist(x, c) / denom).exp();
            }
            total
        }
        TaskParams::Dynamics { readout, .. } => readout.iter().zip(x).map(|(a, b)| a * b).sum(),
    })
}

/// Function value plus `N(0, noise_sigma²)` noise drawn from `rng`.
pub fn eval_function(instance: &FunctionInstance, x: &[f64], rng: &mut Rng) -> Result<f64> {
    let clean = eval_noiseless(instance, x)?;
    Ok(if instance.noise_sigma > 0.0 {
        clean + instance.noise_sigma * rng::normal(rng)
    } else {
        clean
    })
}

/// Similarity features `φ_j(x) = exp(-‖x - c_j‖² / 2h²)`.
pub fn kernel_features(instance: &FunctionInstance, x: &[f64]) -> Result<Vec<f64>> {
    let TaskParams::GaussianKernel {
        centers, bandwidth, ..
    } = &instance.params
    else {
        return Err(Error::Unsupported(format!(
            "kernel features for the {} family",
            instance.family()
        )));
    };
    if x.len() != instance.d {
        return Err(Error::ShapeMismatch {
            op: "kernel_features",
            lhs: vec![instance.d],
            rhs: vec![x.len()],
        });
    }
    let denom = 2.0 * bandwidth * bandwidth;
    Ok(centers
        .iter()
        .map(|c| (-sq_dist(x, c) / denom).exp())
        .collect())
}

/// Noiseless labels of every prompt input computed as a linear read-out
/// `<β, φ(x)>` of the similarity features.
pub fn kernel_feature_readout(prompt: &Prompt, instance: &FunctionInstance) -> Result<Vec<f64>> {
    let TaskParams::GaussianKernel { beta, .. } = &instance.params else {
        return Err(Error::Unsupported(format!(
            "kernel read-out for the {} family",
            instance.family()
        )));
    };
    prompt
        .xs
        .iter()
        .map(|x| {
            let phi = kernel_features(instance, x)?;
            Ok(phi.iter().zip(beta).map(|(a, b)| a * b).sum())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseDist {
    /// `N(0, I_d)`
    Gaussian,
    /// `Unif([-1, 1]^d)`
    UniformCube,
    /// States of a dynamical-system roll-out.
    Trajectory,
}

impl BaseDist {
    pub fn name(self) -> &'static str {
        match self {
            BaseDist::Gaussian => "gaussian",
            BaseDist::UniformCube => "uniform_cube",
            BaseDist::Trajectory => "trajectory",
        }
    }
}

impl FromStr for BaseDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(BaseDist::Gaussian),
            "uniform_cube" => Ok(BaseDist::UniformCube),
            "trajectory" => Ok(BaseDist::Trajectory),
            _ => Err(Error::invalid(format!("unknown input distribution `{s}`"))),
        }
    }
}

/// How prompt inputs are produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDist {
    pub base: BaseDist,
    /// Every input is multiplied by this factor before labelling.
    pub scale: f64,
    pub ood: Option<OodSpec>,
}

impl InputDist {
    pub fn gaussian() -> Self {
        Self::from_base(BaseDist::Gaussian)
    }

    pub fn uniform_cube() -> Self {
        Self::from_base(BaseDist::UniformCube)
    }

    pub fn trajectory() -> Self {
        Self::from_base(BaseDist::Trajectory)
    }

    pub fn from_base(base: BaseDist) -> Self {
        Self {
            base,
            scale: 1.0,
            ood: None,
        }
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.scale = factor;
        self
    }

    pub fn with_ood(mut self, ood: OodSpec) -> Self {
        self.ood = Some(ood);
        self
    }
}

pub(crate) fn draw_input(base: BaseDist, d: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    match base {
        BaseDist::Gaussian => Ok(rng::normal_vec(rng, d)),
        BaseDist::UniformCube => Ok((0..d).map(|_| rng::uniform(rng, -1.0, 1.0)).collect()),
        BaseDist::Trajectory => Err(Error::Unsupported(
            "trajectory inputs require a dynamics instance".into(),
        )),
    }
}

/// Builds a `k`-shot prompt. Pure in `(instance, k, dist, seed)`.
pub fn generate_prompt(
    instance: &FunctionInstance,
    k: usize,
    dist: &InputDist,
    seed: EpisodeSeed,
) -> Result<Prompt> {
    if k == 0 {
        return Err(Error::invalid("context length must be at least 1"));
    }
    if let Some(spec) = &dist.ood {
        return ood::ood_prompt_sampler(spec, instance, k, dist, seed);
    }
    let mut input_rng = seed.rng(stream::INPUTS);
    let mut noise_rng = seed.rng(stream::NOISE);
    let xs: Vec<Vec<f64>> = match (&instance.params, dist.base) {
        (TaskParams::Dynamics { spec, .. }, BaseDist::Trajectory) => {
            let x0 = dynamics::initial_state(spec, &mut input_rng);
            let silent = vec![0.0; spec.state_dim()];
            let traj = dynamics::roll_out(spec, &x0, k, &silent, 0.0, &mut input_rng)?;
            traj.states
        }
        (TaskParams::Dynamics { .. }, base) => {
            return Err(Error::Unsupported(format!(
                "i.i.d. `{}` inputs for a dynamics instance; use trajectory inputs",
                base.name()
            )))
        }
        (_, BaseDist::Trajectory) => {
            return Err(Error::Unsupported(format!(
                "trajectory inputs for the {} family",
                instance.family()
            )))
        }
        (_, base) => (0..=k)
            .map(|_| draw_input(base, instance.d, &mut input_rng))
            .collect::<Result<_>>()?,
    };
    label_prompt(instance, xs, dist.scale, seed, &mut noise_rng)
}

/// Scales the inputs and attaches noisy labels.
pub(crate) fn label_prompt(
    instance: &FunctionInstance,
    mut xs: Vec<Vec<f64>>,
    scale: f64,
    seed: EpisodeSeed,
    noise_rng: &mut Rng,
) -> Result<Prompt> {
    if scale != 1.0 {
        xs.iter_mut().flatten().for_each(|v| *v *= scale);
    }
    let mut labels = xs
        .iter()
        .map(|x| eval_function(instance, x, noise_rng))
        .collect::<Result<Vec<_>>>()?;
    let query_target = labels.pop().expect("k + 1 inputs");
    Ok(Prompt {
        xs,
        ys: labels,
        query_target,
        meta: PromptMeta {
            family: instance.family(),
            d: instance.d,
            seed: seed.stream_seed(),
            scaling_factor: scale,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// One variance over every label of every prompt in the batch.
    Pooled,
    /// Each prompt scaled by its own label variance.
    PerPrompt,
}

fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

fn all_labels(p: &Prompt) -> impl Iterator<Item = f64> + '_ {
    p.ys.iter().copied().chain(std::iter::once(p.query_target))
}

/// Divides kernel-family labels (context and query) by the standard
/// deviation of the labels so their variance becomes one. The mean is not
/// subtracted. Returns the divisor applied to each prompt.
pub fn normalize_outputs_batch(batch: &mut [Prompt], mode: Normalization) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::invalid("cannot normalize an empty batch"));
    }
    if let Some(p) = batch
        .iter()
        .find(|p| p.meta.family != Family::GaussianKernel)
    {
        return Err(Error::Unsupported(format!(
            "output normalization for the {} family",
            p.meta.family
        )));
    }
    let divisors: Vec<f64> = match mode {
        Normalization::Pooled => {
            let labels: Vec<f64> = batch.iter().flat_map(all_labels).collect();
            let sd = population_variance(&labels).sqrt();
            vec![sd; batch.len()]
        }
        Normalization::PerPrompt => batch
            .iter()
            .map(|p| population_variance(&all_labels(p).collect::<Vec<_>>()).sqrt())
            .collect(),
    };
    if divisors.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid("labels have zero variance"));
    }
    for (p, &s) in batch.iter_mut().zip(&divisors) {
        p.ys.iter_mut().for_each(|y| *y /= s);
        p.query_target /= s;
    }
    Ok(divisors)
}

/// Family and sampling parameters for generating episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilySpec {
    Linear,
    GaussianKernel {
        num_centers: usize,
        bandwidth: f64,
    },
    Dynamics {
        kind: DynamicsKind,
        options: DynamicsOptions,
    },
}

impl FamilySpec {
    pub fn family(&self) -> Family {
        match self {
            FamilySpec::Linear => Family::Linear,
            FamilySpec::GaussianKernel { .. } => Family::GaussianKernel,
            FamilySpec::Dynamics { .. } => Family::Dynamics,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub family: FamilySpec,
    pub noise_sigma: f64,
    pub input: InputDist,
    /// Kernel-family label normalization, applied per batch.
    pub normalization: Option<Normalization>,
}

impl TaskConfig {
    pub fn linear(noise_sigma: f64) -> Self {
        Self {
            family: FamilySpec::Linear,
            noise_sigma,
            input: InputDist::gaussian(),
            normalization: None,
        }
    }

    /// 20 centers, bandwidth 1.5, noise 0.1, uniform-cube inputs.
    pub fn kernel_default() -> Self {
        Self {
            family: FamilySpec::GaussianKernel {
                num_centers: 20,
                bandwidth: 1.5,
            },
            noise_sigma: 0.1,
            input: InputDist::uniform_cube(),
            normalization: Some(Normalization::Pooled),
        }
    }

    pub fn dynamics(kind: DynamicsKind, noise_sigma: f64) -> Self {
        Self {
            family: FamilySpec::Dynamics {
                kind,
                options: DynamicsOptions::default(),
            },
            noise_sigma,
            input: InputDist::trajectory(),
            normalization: None,
        }
    }

    /// Input dimension actually seen by a model for requested dimension `d`.
    pub fn effective_dim(&self, d: usize) -> usize {
        match &self.family {
            FamilySpec::Dynamics { kind, .. } => kind.state_dim(d),
            _ => d,
        }
    }
}

/// Number of fresh draws tried when a dynamics roll-out diverges.
pub const MAX_EPISODE_ATTEMPTS: u64 = 32;

pub fn sample_instance(cfg: &TaskConfig, d: usize, rng: &mut Rng) -> Result<FunctionInstance> {
    match &cfg.family {
        FamilySpec::Linear => sample_linear_task(d, cfg.noise_sigma, rng),
        FamilySpec::GaussianKernel {
            num_centers,
            bandwidth,
        } => sample_gaussian_kernel_task(d, *num_centers, *bandwidth, cfg.noise_sigma, rng),
        FamilySpec::Dynamics { kind, options } => {
            sample_dynamics_task(*kind, d, cfg.noise_sigma, options, rng)
        }
    }
}

/// Draws an instance and a prompt from one episode seed. Divergent dynamics
/// draws are retried on child seeds, deterministically.
///
/// `task_seed` selects the function; passing the same value for many episodes
/// (a fixed task pool) reuses the instance with fresh inputs.
pub fn sample_episode(
    cfg: &TaskConfig,
    d: usize,
    k: usize,
    task_seed: EpisodeSeed,
    input_seed: EpisodeSeed,
) -> Result<(FunctionInstance, Prompt)> {
    let mut last_err = None;
    for attempt in 0..MAX_EPISODE_ATTEMPTS {
        let (ts, is) = if attempt == 0 {
            (task_seed, input_seed)
        } else {
            (task_seed.child(attempt), input_seed.child(attempt))
        };
        let instance = sample_instance(cfg, d, &mut ts.rng(stream::TASK))?;
        match generate_prompt(&instance, k, &cfg.input, is) {
            Ok(p) => return Ok((instance, p)),
            Err(e @ Error::Diverged { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(seed: u64) -> Rng {
        rng::rng_from_seed(seed)
    }

    #[test]
    fn one_dimensional_weight_is_a_sign() {
        for s in 0..20 {
            let inst = sample_linear_task(1, 0.1, &mut r(s)).unwrap();
            let TaskParams::Linear { w } = inst.params else {
                unreachable!()
            };
            assert_eq!(w[0].abs(), 1.0);
        }
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(sample_linear_task(0, 0.1, &mut r(0)).is_err());
        assert!(sample_gaussian_kernel_task(2, 3, 0.0, 0.1, &mut r(0)).is_err());
        assert!(sample_gaussian_kernel_task(2, 3, -1.0, 0.1, &mut r(0)).is_err());
    }

    #[test]
    fn linear_eval_projects() {
        let inst = FunctionInstance {
            d: 2,
            noise_sigma: 0.0,
            params: TaskParams::Linear { w: vec![1.0, 0.0] },
        };
        assert_eq!(eval_function(&inst, &[3.0, 0.0], &mut r(0)).unwrap(), 3.0);
        assert!(eval_function(&inst, &[3.0], &mut r(0)).is_err());
    }

    fn single_bump(center: Vec<f64>, beta: f64, h: f64) -> FunctionInstance {
        FunctionInstance {
            d: center.len(),
            noise_sigma: 0.0,
            params: TaskParams::GaussianKernel {
                centers: vec![center],
                beta: vec![beta],
                bandwidth: h,
            },
        }
    }

    #[test]
    fn kernel_values() {
        let inst = single_bump(vec![0.2, -0.4], 1.0, 1.0);
        assert_eq!(eval_noiseless(&inst, &[0.2, -0.4]).unwrap(), 1.0);
        // ‖x - c‖ = √2 with h = 1 gives e^{-1}
        let v = eval_noiseless(&inst, &[1.2, 0.6]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.3679).abs() < 1e-4);
        let zero = single_bump(vec![0.0, 0.0], 0.0, 1.0);
        assert_eq!(eval_noiseless(&zero, &[0.5, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn features_and_readout() {
        let inst = FunctionInstance {
            d: 2,
            noise_sigma: 0.0,
            params: TaskParams::GaussianKernel {
                centers: vec![vec![0.5, 0.5], vec![-0.5, 0.1]],
                beta: vec![1.0, 0.0],
                bandwidth: 0.7,
            },
        };
        let phi = kernel_features(&inst, &[0.5, 0.5]).unwrap();
        assert_eq!(phi[0], 1.0);
        let p =
            generate_prompt(&inst, 4, &InputDist::uniform_cube(), EpisodeSeed::new(1, 1)).unwrap();
        let labels = kernel_feature_readout(&p, &inst).unwrap();
        for (x, l) in p.xs.iter().zip(&labels) {
            assert_eq!(*l, kernel_features(&inst, x).unwrap()[0]);
        }
        let lin = sample_linear_task(2, 0.0, &mut r(0)).unwrap();
        assert!(kernel_feature_readout(&p, &lin).is_err());
    }

    #[test]
    fn zero_noise_prompt_labels_are_exact() {
        let inst = sample_linear_task(3, 0.0, &mut r(4)).unwrap();
        let p = generate_prompt(&inst, 1, &InputDist::gaussian(), EpisodeSeed::new(0, 0)).unwrap();
        assert_eq!(p.xs.len(), 2);
        assert_eq!(p.ys[0], eval_noiseless(&inst, &p.xs[0]).unwrap());
        assert_eq!(p.query_target, eval_noiseless(&inst, &p.xs[1]).unwrap());
    }

    #[test]
    fn scaled_cube_doubles_range() {
        let inst = sample_linear_task(4, 0.1, &mut r(4)).unwrap();
        let dist = InputDist::uniform_cube().scaled(2.0);
        let p = generate_prompt(&inst, 200, &dist, EpisodeSeed::new(0, 5)).unwrap();
        let max = p.xs.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 2.0 && max > 1.0);
        assert_eq!(p.meta.scaling_factor, 2.0);
    }

    #[test]
    fn prompt_generation_is_deterministic() {
        let inst = sample_linear_task(5, 0.5, &mut r(1)).unwrap();
        let s = EpisodeSeed::new(99, 12);
        let a = generate_prompt(&inst, 8, &InputDist::gaussian(), s).unwrap();
        let b = generate_prompt(&inst, 8, &InputDist::gaussian(), s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dynamics_require_trajectory_inputs() {
        let inst = sample_dynamics_task(
            DynamicsKind::Lorenz,
            3,
            0.1,
            &DynamicsOptions::default(),
            &mut r(0),
        )
        .unwrap();
        let err =
            generate_prompt(&inst, 5, &InputDist::gaussian(), EpisodeSeed::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
        let p =
            generate_prompt(&inst, 5, &InputDist::trajectory(), EpisodeSeed::new(0, 0)).unwrap();
        assert_eq!(p.xs.len(), 6);
        let lin = sample_linear_task(3, 0.1, &mut r(0)).unwrap();
        assert!(
            generate_prompt(&lin, 5, &InputDist::trajectory(), EpisodeSeed::new(0, 0)).is_err()
        );
    }

    #[test]
    fn zero_context_is_rejected() {
        let inst = sample_linear_task(2, 0.1, &mut r(0)).unwrap();
        assert!(generate_prompt(&inst, 0, &InputDist::gaussian(), EpisodeSeed::new(0, 0)).is_err());
    }

    fn kernel_prompt(ys: Vec<f64>, q: f64) -> Prompt {
        Prompt {
            xs: vec![vec![0.0]; ys.len() + 1],
            ys,
            query_target: q,
            meta: PromptMeta {
                family: Family::GaussianKernel,
                d: 1,
                seed: 0,
                scaling_factor: 1.0,
            },
        }
    }

    #[test]
    fn pooled_variance_four_halves_labels() {
        // labels {-2, 2, -2, 2}: mean 0, variance 4
        let mut batch = vec![
            kernel_prompt(vec![-2.0], 2.0),
            kernel_prompt(vec![-2.0], 2.0),
        ];
        let s = normalize_outputs_batch(&mut batch, Normalization::Pooled).unwrap();
        assert_eq!(s, vec![2.0, 2.0]);
        assert_eq!(batch[0].ys, vec![-1.0]);
        assert_eq!(batch[1].query_target, 1.0);
    }

    #[test]
    fn normalization_errors() {
        assert!(normalize_outputs_batch(&mut [], Normalization::Pooled).is_err());
        let mut flat = vec![kernel_prompt(vec![3.0, 3.0], 3.0)];
        assert!(normalize_outputs_batch(&mut flat, Normalization::Pooled).is_err());
        let inst = sample_linear_task(2, 0.1, &mut r(0)).unwrap();
        let mut lin =
            vec![
                generate_prompt(&inst, 3, &InputDist::gaussian(), EpisodeSeed::new(0, 0)).unwrap(),
            ];
        assert!(normalize_outputs_batch(&mut lin, Normalization::Pooled).is_err());
    }

    #[test]
    fn per_prompt_normalization() {
        let mut batch = vec![
            kernel_prompt(vec![-2.0], 2.0),
            kernel_prompt(vec![-5.0], 5.0),
        ];
        normalize_outputs_batch(&mut batch, Normalization::PerPrompt).unwrap();
        assert_eq!(batch[0].ys, vec![-1.0]);
        assert_eq!(batch[1].ys, vec![-1.0]);
    }

    #[test]
    fn episodes_retry_divergent_draws_deterministically() {
        let cfg = TaskConfig::dynamics(DynamicsKind::Poly, 0.1);
        let a =
            sample_episode(&cfg, 8, 40, EpisodeSeed::new(3, 1), EpisodeSeed::new(4, 1)).unwrap();
        let b =
            sample_episode(&cfg, 8, 40, EpisodeSeed::new(3, 1), EpisodeSeed::new(4, 1)).unwrap();
        assert_eq!(a, b);
    }
}
