//! Discrete-time nonlinear dynamical systems with linear read-out labels.
//!
//! All continuous systems use a single explicit Euler step of size `delta`,
//! exactly as written; nothing is clipped. Divergence is reported as a typed
//! error carrying the step index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tasks::{Family, Prompt, PromptMeta};

/// Any state coordinate beyond this magnitude counts as divergence.
pub const DIVERGENCE_GUARD: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsKind {
    Poly,
    Tanh,
    Logistic,
    Duffing,
    Vdp,
    Lorenz,
}

impl DynamicsKind {
    pub const ALL: [DynamicsKind; 6] = [
        DynamicsKind::Poly,
        DynamicsKind::Tanh,
        DynamicsKind::Logistic,
        DynamicsKind::Duffing,
        DynamicsKind::Vdp,
        DynamicsKind::Lorenz,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DynamicsKind::Poly => "poly",
            DynamicsKind::Tanh => "tanh",
            DynamicsKind::Logistic => "logistic",
            DynamicsKind::Duffing => "duffing",
            DynamicsKind::Vdp => "vdp",
            DynamicsKind::Lorenz => "lorenz",
        }
    }

    /// State dimension for a requested input dimension `d`; the fixed-size
    /// systems ignore `d`.
    pub fn state_dim(self, d: usize) -> usize {
        match self {
            DynamicsKind::Poly | DynamicsKind::Tanh => d,
            DynamicsKind::Logistic => 1,
            DynamicsKind::Duffing | DynamicsKind::Vdp => 2,
            DynamicsKind::Lorenz => 3,
        }
    }
}

impl fmt::Display for DynamicsKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DynamicsKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DynamicsKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown dynamics kind `{s}`")))
    }
}

/// Which time value enters the Duffing forcing term `f·cos(ω·t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcingClock {
    /// `t = n·delta`
    Time,
    /// `t = n`
    StepIndex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DynamicsSpec {
    /// `F(x) = Wx + W'[x²] (+ W''[x³]) + b`, matrices row-major `dim×dim`.
    Poly {
        dim: usize,
        w: Vec<f64>,
        w_sq: Vec<f64>,
        w_cube: Option<Vec<f64>>,
        b: Vec<f64>,
    },
    /// `F(x) = tanh(Wx + b)`.
    Tanh {
        dim: usize,
        w: Vec<f64>,
        b: Vec<f64>,
    },
    Logistic {
        r: f64,
    },
    Duffing {
        alpha: f64,
        beta: f64,
        gamma: f64,
        forcing: f64,
        omega: f64,
        delta: f64,
        clock: ForcingClock,
    },
    Vdp {
        mu: f64,
        delta: f64,
    },
    Lorenz {
        sigma: f64,
        rho: f64,
        beta: f64,
        delta: f64,
    },
}

impl DynamicsSpec {
    pub fn logistic() -> Self {
        DynamicsSpec::Logistic { r: 3.9 }
    }

    pub fn duffing() -> Self {
        DynamicsSpec::Duffing {
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
            forcing: 0.5,
            omega: 1.0,
            delta: 0.01,
            clock: ForcingClock::Time,
        }
    }

    pub fn vdp() -> Self {
        DynamicsSpec::Vdp {
            mu: 2.0,
            delta: 0.01,
        }
    }

    pub fn lorenz() -> Self {
        DynamicsSpec::Lorenz {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            delta: 0.01,
        }
    }

    pub fn kind(&self) -> DynamicsKind {
        match self {
            DynamicsSpec::Poly { .. } => DynamicsKind::Poly,
            DynamicsSpec::Tanh { .. } => DynamicsKind::Tanh,
            DynamicsSpec::Logistic { .. } => DynamicsKind::Logistic,
            DynamicsSpec::Duffing { .. } => DynamicsKind::Duffing,
            DynamicsSpec::Vdp { .. } => DynamicsKind::Vdp,
            DynamicsSpec::Lorenz { .. } => DynamicsKind::Lorenz,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            DynamicsSpec::Poly { dim, .. } | DynamicsSpec::Tanh { dim, .. } => *dim,
            other => other.kind().state_dim(0),
        }
    }
}

/// Knobs for sampling the random-matrix systems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsOptions {
    /// `W` and `W'` are rescaled to at most this spectral norm.
    pub poly_spectral_cap: f64,
    /// Adds a cubic term `W''[x³]`.
    pub poly_cubic: bool,
    pub duffing_clock: ForcingClock,
}

impl Default for DynamicsOptions {
    fn default() -> Self {
        Self {
            poly_spectral_cap: 0.9,
            poly_cubic: false,
            duffing_clock: ForcingClock::Time,
        }
    }
}

fn spectral_norm(m: &[f64], dim: usize) -> f64 {
    let mat = nalgebra::DMatrix::from_row_slice(dim, dim, m);
    mat.singular_values().max()
}

fn capped_gaussian_matrix(dim: usize, cap: f64, rng: &mut Rng) -> Vec<f64> {
    let mut w = rng::normal_vec(rng, dim * dim);
    let norm = spectral_norm(&w, dim);
    if norm > cap {
        let s = cap / norm;
        w.iter_mut().for_each(|v| *v *= s);
    }
    w
}

/// Draws a system of the given kind; `d` is the state dimension for the
/// poly and tanh maps.
pub fn sample_dynamics(
    kind: DynamicsKind,
    d: usize,
    opts: &DynamicsOptions,
    rng: &mut Rng,
) -> Result<DynamicsSpec> {
    if d == 0 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    Ok(match kind {
        DynamicsKind::Poly => {
            let cap = opts.poly_spectral_cap;
            let w = capped_gaussian_matrix(d, cap, rng);
            let w_sq = capped_gaussian_matrix(d, cap, rng);
            let w_cube = opts.poly_cubic.then(|| capped_gaussian_matrix(d, cap, rng));
            let shrink = 1.0 / (d as f64).sqrt();
            let b = rng::normal_vec(rng, d)
                .into_iter()
                .map(|v| v * shrink)
                .collect();
            DynamicsSpec::Poly {
                dim: d,
                w,
                w_sq,
                w_cube,
                b,
            }
        }
        DynamicsKind::Tanh => DynamicsSpec::Tanh {
            dim: d,
            w: rng::normal_vec(rng, d * d),
            b: rng::normal_vec(rng, d),
        },
        DynamicsKind::Logistic => DynamicsSpec::logistic(),
        DynamicsKind::Duffing => match DynamicsSpec::duffing() {
            DynamicsSpec::Duffing {
                alpha,
                beta,
                gamma,
                forcing,
                omega,
                delta,
                ..
            } => DynamicsSpec::Duffing {
                alpha,
                beta,
                gamma,
                forcing,
                omega,
                delta,
                clock: opts.duffing_clock,
            },
            _ => unreachable!(),
        },
        DynamicsKind::Vdp => DynamicsSpec::vdp(),
        DynamicsKind::Lorenz => DynamicsSpec::lorenz(),
    })
}

/// Initial state: standard normal, except the logistic map which starts in
/// `(0, 1)` (outside the unit interval it escapes to -inf).
pub fn initial_state(spec: &DynamicsSpec, rng: &mut Rng) -> Vec<f64> {
    match spec {
        DynamicsSpec::Logistic { .. } => vec![rng::uniform(rng, 0.0, 1.0)],
        other => rng::normal_vec(rng, other.state_dim()),
    }
}

fn matvec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o += m[i * d..(i + 1) * d]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
}

/// One application of the transition map. `t` is the step index of `state`.
pub fn step(spec: &DynamicsSpec, state: &[f64], t: usize) -> Result<Vec<f64>> {
    if state.len() != spec.state_dim() {
        return Err(Error::ShapeMismatch {
            op: "dynamics step",
            lhs: vec![spec.state_dim()],
            rhs: vec![state.len()],
        });
    }
    if state.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { step: t });
    }
    let next = match spec {
        DynamicsSpec::Poly {
            w, w_sq, w_cube, b, ..
        } => {
            let mut out = b.clone();
            matvec(w, state, &mut out);
            let sq: Vec<f64> = state.iter().map(|v| v * v).collect();
            matvec(w_sq, &sq, &mut out);
            if let Some(w3) = w_cube {
                let cube: Vec<f64> = state.iter().map(|v| v * v * v).collect();
                matvec(w3, &cube, &mut out);
            }
            out
        }
        DynamicsSpec::Tanh { w, b, .. } => {
            let mut out = b.clone();
            matvec(w, state, &mut out);
            out.iter_mut().for_each(|v| *v = v.tanh());
            out
        }
        DynamicsSpec::Logistic { r } => vec![r * state[0] * (1.0 - state[0])],
        DynamicsSpec::Duffing {
            alpha,
            beta,
            gamma,
            forcing,
            omega,
            delta,
            clock,
        } => {
            let (x, v) = (state[0], state[1]);
            let time = match clock {
                ForcingClock::Time => t as f64 * delta,
                ForcingClock::StepIndex => t as f64,
            };
            let accel = -alpha * x - beta * x * x * x - gamma * v + forcing * (omega * time).cos();
            vec![x + delta * v, v + delta * accel]
        }
        DynamicsSpec::Vdp { mu, delta } => {
            let (x, v) = (state[0], state[1]);
            vec![x + delta * v, v + delta * (mu * (1.0 - x * x) * v - x)]
        }
        DynamicsSpec::Lorenz {
            sigma,
            rho,
            beta,
            delta,
        } => {
            let (x, y, z) = (state[0], state[1], state[2]);
            vec![
                x + delta * sigma * (y - x),
                y + delta * (x * (rho - z) - y),
                z + delta * (x * y - beta * z),
            ]
        }
    };
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `x_0 ..= x_T`
    pub states: Vec<Vec<f64>>,
    /// `y_t = <v, x_t> + noise`
    pub labels: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Iterates the map `steps` times from `x0` and reads out noisy labels.
pub fn roll_out(
    spec: &DynamicsSpec,
    x0: &[f64],
    steps: usize,
    readout: &[f64],
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::invalid("roll-out needs at least one step"));
    }
    if readout.len() != spec.state_dim() {
        return Err(Error::ShapeMismatch {
            op: "readout",
            lhs: vec![spec.state_dim()],
            rhs: vec![readout.len()],
        });
    }
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.to_vec());
    for t in 0..steps {
        let next = step(spec, &states[t], t)?;
        if next
            .iter()
            .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_GUARD)
        {
            return Err(Error::Diverged { step: t + 1 });
        }
        states.push(next);
    }
    let labels = states
        .iter()
        .map(|x| {
            let clean: f64 = x.iter().zip(readout).map(|(a, b)| a * b).sum();
            if noise_sigma > 0.0 {
                clean + noise_sigma * rng::normal(rng)
            } else {
                clean
            }
        })
        .collect();
    Ok(Trajectory { states, labels })
}

/// Unit-norm Gaussian read-out vector.
pub fn sample_readout(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v = rng::normal_vec(rng, dim);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// A `k`-shot prompt over a trajectory: pairs `(x_t, y_t)` for `t < k`, query
/// `x_k`, target `y_k`. The initial state is drawn from `rng` first.
pub fn dynamics_prompt(
    spec: &DynamicsSpec,
    k: usize,
    readout: &[f64],
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<Prompt> {
    if k == 0 {
        return Err(Error::invalid("context length must be at least 1"));
    }
    let x0 = initial_state(spec, rng);
    let traj = roll_out(spec, &x0, k, readout, noise_sigma, rng)?;
    Ok(trajectory_prompt(traj, spec.state_dim(), 0))
}

pub(crate) fn trajectory_prompt(mut traj: Trajectory, d: usize, seed: u64) -> Prompt {
    let query_target = traj.labels.pop().expect("non-empty trajectory");
    Prompt {
        xs: traj.states,
        ys: traj.labels,
        query_target,
        meta: PromptMeta {
            family: Family::Dynamics,
            d,
            seed,
            scaling_factor: 1.0,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> Rng {
        rng::rng_from_seed(0)
    }

    #[test]
    fn logistic_single_step() {
        let next = step(&DynamicsSpec::logistic(), &[0.5], 0).unwrap();
        assert!((next[0] - 0.975).abs() < 1e-15);
    }

    #[test]
    fn lorenz_single_euler_step() {
        let next = step(&DynamicsSpec::lorenz(), &[1.0, 1.0, 1.0], 0).unwrap();
        assert_eq!(next[0], 1.0);
        assert!((next[1] - 1.26).abs() < 1e-14);
        assert!((next[2] - (1.0 + 0.01 * (1.0 - 8.0 / 3.0))).abs() < 1e-14);
        assert!((next[2] - 0.983_333_333_333_333_3).abs() < 1e-12);
    }

    #[test]
    fn tanh_with_zero_weights_collapses() {
        let spec = DynamicsSpec::Tanh {
            dim: 3,
            w: vec![0.0; 9],
            b: vec![0.0; 3],
        };
        assert_eq!(step(&spec, &[4.0, -2.0, 9.0], 0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn logistic_roll_out() {
        let tr = roll_out(
            &DynamicsSpec::logistic(),
            &[0.5],
            3,
            &[1.0],
            0.0,
            &mut quiet(),
        )
        .unwrap();
        let expect = [
            0.5,
            0.975,
            0.095_062_5,
            3.9 * 0.095_062_5 * (1.0 - 0.095_062_5),
        ];
        for (s, e) in tr.states.iter().zip(expect) {
            assert!((s[0] - e).abs() < 1e-15);
        }
        assert!((tr.states[3][0] - 0.335_499_922_265_625).abs() < 1e-12);
        // identity read-out and no noise: labels are the states
        assert_eq!(
            tr.labels,
            tr.states.iter().map(|s| s[0]).collect::<Vec<_>>()
        );
    }

    #[test]
    fn readout_e1_selects_first_coordinate() {
        let tr = roll_out(
            &DynamicsSpec::vdp(),
            &[0.3, -1.2],
            20,
            &[1.0, 0.0],
            0.0,
            &mut quiet(),
        )
        .unwrap();
        for (s, y) in tr.states.iter().zip(&tr.labels) {
            assert_eq!(s[0], *y);
        }
    }

    #[test]
    fn unforced_duffing_rests_at_origin() {
        let spec = DynamicsSpec::Duffing {
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
            forcing: 0.0,
            omega: 1.0,
            delta: 0.01,
            clock: ForcingClock::Time,
        };
        let tr = roll_out(&spec, &[0.0, 0.0], 50, &[1.0, 0.0], 0.0, &mut quiet()).unwrap();
        assert!(tr.states.iter().all(|s| s == &[0.0, 0.0]));
    }

    #[test]
    fn vdp_without_damping_is_harmonic() {
        let spec = DynamicsSpec::Vdp {
            mu: 0.0,
            delta: 0.01,
        };
        let next = step(&spec, &[1.0, 0.0], 0).unwrap();
        assert_eq!(next, vec![1.0, -0.01]);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        // logistic escapes to -inf from outside [0, 1]
        let err = roll_out(
            &DynamicsSpec::logistic(),
            &[2.0],
            50,
            &[1.0],
            0.0,
            &mut quiet(),
        )
        .unwrap_err();
        match err {
            Error::Diverged { step } => assert!(step > 0 && step < 50),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            step(&DynamicsSpec::logistic(), &[f64::NAN], 7),
            Err(Error::Diverged { step: 7 })
        ));
    }

    #[test]
    fn poly_matrices_respect_spectral_cap() {
        let mut r = rng::rng_from_seed(9);
        for d in [1, 2, 5, 20] {
            let spec = sample_dynamics(DynamicsKind::Poly, d, &DynamicsOptions::default(), &mut r)
                .unwrap();
            if let DynamicsSpec::Poly { w, w_sq, .. } = spec {
                assert!(spectral_norm(&w, d) <= 0.9 + 1e-12);
                assert!(spectral_norm(&w_sq, d) <= 0.9 + 1e-12);
            }
        }
    }

    #[test]
    fn prompt_targets_follow_readout() {
        let mut r = rng::rng_from_seed(3);
        let v = sample_readout(3, &mut r);
        let p = dynamics_prompt(&DynamicsSpec::lorenz(), 10, &v, 0.0, &mut r).unwrap();
        assert_eq!(p.xs.len(), 11);
        assert_eq!(p.ys.len(), 10);
        let expect: f64 = p.xs[10].iter().zip(&v).map(|(a, b)| a * b).sum();
        assert_eq!(p.query_target, expect);
    }

    #[test]
    fn kind_round_trips_through_name() {
        for k in DynamicsKind::ALL {
            assert_eq!(k.name().parse::<DynamicsKind>().unwrap(), k);
        }
        assert!("pendulum".parse::<DynamicsKind>().is_err());
    }
}
