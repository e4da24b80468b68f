//! Closed-form reference estimators evaluated directly on a prompt.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::Prompt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Zero,
    LeastSquares,
    Knn3,
    Averaging,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Zero,
        BaselineKind::LeastSquares,
        BaselineKind::Knn3,
        BaselineKind::Averaging,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Zero => "zero",
            BaselineKind::LeastSquares => "least_squares",
            BaselineKind::Knn3 => "knn3",
            BaselineKind::Averaging => "averaging",
        }
    }

    /// Column prefix used in CSV reports.
    pub fn column(self) -> &'static str {
        match self {
            BaselineKind::Zero => "zero_mse",
            BaselineKind::LeastSquares => "lsq_mse",
            BaselineKind::Knn3 => "knn3_mse",
            BaselineKind::Averaging => "avg_mse",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown baseline `{s}`")))
    }
}

fn require_context(prompt: &Prompt) -> Result<()> {
    if prompt.k() == 0 {
        return Err(Error::invalid(
            "baselines need at least one context example",
        ));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn zero_estimator(_prompt: &Prompt) -> f64 {
    0.0
}

/// Minimum-norm least-squares weights `X⁺y`.
///
/// The pseudoinverse comes from an SVD; singular values at or below
/// `max(k, d)·ε·σ_max` are treated as zero.
pub fn min_norm_weights(xs: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
    let (k, d) = (xs.len(), xs[0].len());
    let x = DMatrix::from_fn(k, d, |i, j| xs[i][j]);
    let y = DVector::from_column_slice(ys);
    let svd = x.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let sigma_max = svd.singular_values.max();
    let cutoff = k.max(d) as f64 * f64::EPSILON * sigma_max;
    let mut w = DVector::zeros(d);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            let coeff = u.column(i).dot(&y) / s;
            w += vt.row(i).transpose() * coeff;
        }
    }
    w.iter().copied().collect()
}

pub fn least_squares_estimator(prompt: &Prompt) -> Result<f64> {
    require_context(prompt)?;
    let w = min_norm_weights(prompt.context(), &prompt.ys);
    Ok(dot(&w, prompt.query()))
}

/// Context indices of the (up to) three nearest inputs to the query; ties
/// go to the lower index.
pub fn nearest_indices(prompt: &Prompt, n: usize) -> Vec<usize> {
    let q = prompt.query();
    let mut order: Vec<(f64, usize)> = prompt
        .context()
        .iter()
        .enumerate()
        .map(|(i, x)| (x.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(n).map(|(_, i)| i).collect()
}

pub fn knn3_estimator(prompt: &Prompt) -> Result<f64> {
    require_context(prompt)?;
    let idx = nearest_indices(prompt, 3);
    Ok(idx.iter().map(|&i| prompt.ys[i]).sum::<f64>() / idx.len() as f64)
}

/// `ŵ = (1/k) Σ x_i y_i`, prediction `ŵᵀ x_query`.
pub fn averaging_estimator(prompt: &Prompt) -> Result<f64> {
    require_context(prompt)?;
    Ok(averaging_weights(prompt)
        .iter()
        .zip(prompt.query())
        .map(|(a, b)| a * b)
        .sum())
}

pub fn averaging_weights(prompt: &Prompt) -> Vec<f64> {
    let k = prompt.k() as f64;
    let mut w = vec![0.0; prompt.d()];
    for (x, y) in prompt.context().iter().zip(&prompt.ys) {
        for (wi, xi) in w.iter_mut().zip(x) {
            *wi += xi * y;
        }
    }
    w.iter_mut().for_each(|v| *v /= k);
    w
}

/// Nadaraya-Watson smoothing of the context labels with a Gaussian window;
/// the "bare kernel" predictor that uses no learned read-out.
pub fn kernel_smoother_estimator(prompt: &Prompt, bandwidth: f64) -> Result<f64> {
    require_context(prompt)?;
    if !(bandwidth > 0.0) {
        return Err(Error::invalid("bandwidth must be positive"));
    }
    let q = prompt.query();
    let logits: Vec<f64> = prompt
        .context()
        .iter()
        .map(|x| {
            -x.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                / (2.0 * bandwidth * bandwidth)
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights
        .iter()
        .zip(&prompt.ys)
        .map(|(w, y)| w * y)
        .sum::<f64>()
        / total)
}

pub fn estimate(kind: BaselineKind, prompt: &Prompt) -> Result<f64> {
    match kind {
        BaselineKind::Zero => Ok(zero_estimator(prompt)),
        BaselineKind::LeastSquares => least_squares_estimator(prompt),
        BaselineKind::Knn3 => knn3_estimator(prompt),
        BaselineKind::Averaging => averaging_estimator(prompt),
    }
}
