//! Out-of-distribution prompt samplers.
//!
//! Each construction perturbs the context/query relationship in one specific
//! way, and each has an exactly checkable geometric predicate:
//!
//! * `half_subspace`: context inputs live on the first `⌈d/2⌉` coordinates,
//!   the query is full-dimensional.
//! * `noisy_lr`: context labels get extra `N(0, extra_noise²)` noise; the query
//!   target keeps the task noise.
//! * `orthogonal`: the query is projected onto the orthogonal complement of
//!   the context span and rescaled to its original norm (needs `k < d`).
//! * `random_quadrants`: context inputs are mapped into one random orthant,
//!   the query into an independently drawn one.
//! * `scaled`: every input is multiplied by `scale_factor`.
//! * `skewed`: inputs are `N(0, D)` with `D` diagonal, eigenvalues geometric
//!   from 1 down to `skew_min_eigen`.
//!
//! In-distribution draws use the same random streams, so a paired seed gives
//! the same underlying sample before the perturbation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics;
use crate::error::{Error, Result};
use crate::rng::{self, stream, EpisodeSeed, Rng};
use crate::tasks::{draw_input, label_prompt, FunctionInstance, InputDist, Prompt, TaskParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    HalfSubspace,
    NoisyLr,
    Orthogonal,
    RandomQuadrants,
    Scaled,
    Skewed,
}

impl OodKind {
    pub const ALL: [OodKind; 6] = [
        OodKind::HalfSubspace,
        OodKind::NoisyLr,
        OodKind::Orthogonal,
        OodKind::RandomQuadrants,
        OodKind::Scaled,
        OodKind::Skewed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OodKind::HalfSubspace => "half_subspace",
            OodKind::NoisyLr => "noisy_lr",
            OodKind::Orthogonal => "orthogonal",
            OodKind::RandomQuadrants => "random_quadrants",
            OodKind::Scaled => "scaled",
            OodKind::Skewed => "skewed",
        }
    }
}

impl fmt::Display for OodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OodKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown OOD kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodSpec {
    pub kind: OodKind,
    pub scale_factor: f64,
    pub extra_noise: f64,
    pub skew_min_eigen: f64,
}

impl OodSpec {
    pub fn new(kind: OodKind) -> Self {
        Self {
            kind,
            scale_factor: 2.0,
            extra_noise: 1.0,
            skew_min_eigen: 0.01,
        }
    }
}

/// Diagonal covariance used by the skewed sampler.
pub fn skewed_eigenvalues(d: usize, min_eigen: f64) -> Vec<f64> {
    if d == 1 {
        return vec![1.0];
    }
    (0..d)
        .map(|i| min_eigen.powf(i as f64 / (d - 1) as f64))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Removes from `v` its component in the span of `basis_src`, using two
/// passes of modified Gram-Schmidt for numerical orthogonality.
pub fn project_out_span(v: &[f64], basis_src: &[Vec<f64>]) -> Vec<f64> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for x in basis_src {
        let mut u = x.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&u, q);
                u.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = norm(&u);
        if n > 1e-10 * norm(x).max(1e-300) {
            basis.push(u.into_iter().map(|a| a / n).collect());
        }
    }
    let mut out = v.to_vec();
    for _ in 0..2 {
        for q in &basis {
            let c = dot(&out, q);
            out.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
        }
    }
    out
}

fn random_signs(d: usize, rng: &mut Rng) -> Vec<f64> {
    use rand::Rng as _;
    (0..d)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect()
}

/// Builds an OOD prompt of the given kind.
pub fn ood_prompt_sampler(
    spec: &OodSpec,
    instance: &FunctionInstance,
    k: usize,
    dist: &InputDist,
    seed: EpisodeSeed,
) -> Result<Prompt> {
    if k == 0 {
        return Err(Error::invalid("context length must be at least 1"));
    }
    let d = instance.d;
    let mut input_rng = seed.rng(stream::INPUTS);
    let mut noise_rng = seed.rng(stream::NOISE);
    let mut ood_rng = seed.rng(stream::OOD);

    if let TaskParams::Dynamics { spec: dyn_spec, .. } = &instance.params {
        let x0_scale: Vec<f64> = match spec.kind {
            OodKind::NoisyLr | OodKind::Scaled => vec![1.0; d],
            OodKind::Skewed => skewed_eigenvalues(d, spec.skew_min_eigen)
                .into_iter()
                .map(f64::sqrt)
                .collect(),
            other => {
                return Err(Error::Unsupported(format!(
                    "{other} prompts for the dynamics family"
                )))
            }
        };
        let mut x0 = dynamics::initial_state(dyn_spec, &mut input_rng);
        x0.iter_mut().zip(&x0_scale).for_each(|(a, s)| *a *= s);
        let silent = vec![0.0; d];
        let traj = dynamics::roll_out(dyn_spec, &x0, k, &silent, 0.0, &mut input_rng)?;
        let scale = match spec.kind {
            OodKind::Scaled => dist.scale * spec.scale_factor,
            _ => dist.scale,
        };
        let mut p = label_prompt(instance, traj.states, scale, seed, &mut noise_rng)?;
        if spec.kind == OodKind::NoisyLr {
            p.ys.iter_mut()
                .for_each(|y| *y += spec.extra_noise * rng::normal(&mut ood_rng));
        }
        return Ok(p);
    }

    let mut xs: Vec<Vec<f64>> = match spec.kind {
        OodKind::Skewed => {
            let sd: Vec<f64> = skewed_eigenvalues(d, spec.skew_min_eigen)
                .into_iter()
                .map(f64::sqrt)
                .collect();
            (0..=k)
                .map(|_| {
                    rng::normal_vec(&mut input_rng, d)
                        .into_iter()
                        .zip(&sd)
                        .map(|(z, s)| z * s)
                        .collect()
                })
                .collect()
        }
        _ => (0..=k)
            .map(|_| draw_input(dist.base, d, &mut input_rng))
            .collect::<Result<_>>()?,
    };
    let mut scale = dist.scale;
    match spec.kind {
        OodKind::HalfSubspace => {
            let keep = d.div_ceil(2);
            for x in &mut xs[..k] {
                x[keep..].fill(0.0);
            }
        }
        OodKind::Orthogonal => {
            if k >= d {
                return Err(Error::invalid(format!(
                    "orthogonal prompts need k < d (k = {k}, d = {d})"
                )));
            }
            let (ctx, query) = xs.split_at_mut(k);
            let q = &mut query[0];
            let original = norm(q);
            let mut projected = project_out_span(q, ctx);
            let mut tries = 0;
            while norm(&projected) < 1e-8 * original.max(1e-300) {
                tries += 1;
                if tries > 16 {
                    return Err(Error::invalid(
                        "could not draw a query outside the context span",
                    ));
                }
                *q = draw_input(dist.base, d, &mut ood_rng)?;
                projected = project_out_span(q, ctx);
            }
            let original = norm(q);
            let s = original / norm(&projected);
            *q = projected.into_iter().map(|v| v * s).collect();
        }
        OodKind::RandomQuadrants => {
            let ctx_signs = random_signs(d, &mut ood_rng);
            let query_signs = random_signs(d, &mut ood_rng);
            for (i, x) in xs.iter_mut().enumerate() {
                let signs = if i < k { &ctx_signs } else { &query_signs };
                x.iter_mut().zip(signs).for_each(|(v, s)| *v = v.abs() * s);
            }
        }
        OodKind::Scaled => scale *= spec.scale_factor,
        OodKind::NoisyLr | OodKind::Skewed => {}
    }
    let mut p = label_prompt(instance, xs, scale, seed, &mut noise_rng)?;
    if spec.kind == OodKind::NoisyLr {
        p.ys.iter_mut()
            .for_each(|y| *y += spec.extra_noise * rng::normal(&mut ood_rng));
    }
    Ok(p)
}
