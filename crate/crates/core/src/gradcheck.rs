//! Central finite-difference gradient checking.
//!
//! Only the forward pass of a [`Graph`] is used to build the numerical
//! estimate, so the check stays independent of the reverse sweep it audits.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Largest discrepancy found by [`check_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h`. `f` receives one differentiable leaf per input tensor and must
/// return a scalar. `max_entries` caps how many coordinates are perturbed per
/// input (evenly strided), which keeps large models tractable.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    floor: f64,
    max_entries: usize,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ins
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let n = inputs[which].len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let zero = Tensor::zeros(inputs[which].shape());
        let analytic = grads.get(*var).unwrap_or(&zero);
        for idx in (0..n).step_by(stride) {
            let orig = work[which].data()[idx];
            work[which].data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[idx];
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric, floor));
            report.checked += 1;
        }
    }
    Ok(report)
}
