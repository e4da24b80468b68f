#![allow(dead_code)]

use icl_core::autodiff::AttentionMode;
use icl_core::gradcheck::{check_gradients, GradCheck};
use icl_core::models::{Arch, Bound, Model, ModelConfig, PromptBatch};
use icl_core::rng::{normal, rng_from_seed, EpisodeSeed, Rng};
use icl_core::tasks::{generate_prompt, sample_linear_task, InputDist, Prompt};
use icl_core::training::{batch_loss, LossMode};
use icl_core::{Graph, Result, Tensor, Var};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors: gradients smaller than this are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rand_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| std * normal(rng))
}

/// Entries bounded away from zero, for kinked functions.
pub fn rand_away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn tiny_config(arch: Arch) -> ModelConfig {
    let mut c = ModelConfig::desk(arch, 4, 4);
    c.embed_dim = 16;
    c.n_layers = 2;
    c.block_size = 3;
    c.filter_hidden = 8;
    c.state_dim = 4;
    c
}

pub fn linear_prompts(d: usize, k: usize, n: usize, seed: u64, sigma: f64) -> Vec<Prompt> {
    (0..n as u64)
        .map(|i| {
            let s = EpisodeSeed::new(seed, i);
            let inst = sample_linear_task(d, sigma, &mut s.rng(1)).unwrap();
            generate_prompt(&inst, k, &InputDist::gaussian(), s).unwrap()
        })
        .collect()
}

/// The model with every parameter jittered, so the zero head and unit
/// gains do not hide any gradient path.
pub fn jittered(model: &Model, seed: u64, std: f64) -> Model {
    let mut m = model.clone();
    let mut rng = rng_from_seed(seed);
    for t in m.params.tensors.values_mut() {
        for v in t.data_mut() {
            *v += std * normal(&mut rng);
        }
    }
    m
}

/// Gradient check of the training loss with respect to every parameter of a
/// tiny two-layer model.
pub fn end_to_end_check(arch: Arch, seed: u64, mode: LossMode) -> Result<GradCheck> {
    let base = Model::init(tiny_config(arch), seed)?;
    let model = jittered(&base, seed + 1, 0.1);
    let prompts = linear_prompts(3, 4, 2, seed + 2, 0.1);
    let batch = PromptBatch::new(&prompts, model.config.max_input_dim)?;
    let names: Vec<String> = model.params.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor> = model.params.tensors.values().cloned().collect();
    check_gradients(
        |g: &mut Graph, vars: &[Var]| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            let out = model.forward(g, &bound, &batch)?;
            batch_loss(g, out, &batch, mode)
        },
        &inputs,
        FD_STEP,
        REL_FLOOR,
        4,
    )
}

/// Scalar read-out `mean(x ⊙ c)` with a fixed random `c`, so every output
/// entry gets a distinct upstream gradient.
fn readout(g: &mut Graph, x: Var, rng: &mut Rng) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let c = g.constant(rand_tensor(rng, &shape, 1.0))?;
    let y = g.mul(x, c)?;
    g.mean(y)
}

pub const PRIMITIVES: [&str; 27] = [
    "matmul",
    "matmul_batched",
    "matmul_shared",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "exp",
    "gelu",
    "relu",
    "sigmoid",
    "softplus",
    "silu",
    "square",
    "softmax",
    "layer_norm",
    "causal_mask",
    "slice",
    "concat",
    "reshape",
    "transpose",
    "sum",
    "attention_dense",
    "attention_blockwise",
    "causal_conv",
    "selective_scan",
];

/// Builds one random graph exercising `name` and checks its gradients.
pub fn primitive_check(name: &str, seed: u64) -> Result<GradCheck> {
    let mut rng = rng_from_seed(seed);
    let r = &mut rng;
    let m = r.random_range(1..5usize);
    let n = r.random_range(1..5usize);
    let p = r.random_range(1..5usize);
    let bsz = r.random_range(1..3usize);
    let t = r.random_range(1..7usize);
    let heads = r.random_range(1..3usize);
    let e = heads * r.random_range(1..4usize);
    let c_seed: u64 = r.random();
    let unary = |inputs: Vec<Tensor>, f: fn(&mut Graph, Var) -> Result<Var>| {
        check_gradients(
            move |g: &mut Graph, v: &[Var]| {
                let y = f(g, v[0])?;
                readout(g, y, &mut rng_from_seed(c_seed))
            },
            &inputs,
            FD_STEP,
            REL_FLOOR,
            64,
        )
    };
    let binary = |inputs: Vec<Tensor>, f: fn(&mut Graph, Var, Var) -> Result<Var>| {
        check_gradients(
            move |g: &mut Graph, v: &[Var]| {
                let y = f(g, v[0], v[1])?;
                readout(g, y, &mut rng_from_seed(c_seed))
            },
            &inputs,
            FD_STEP,
            REL_FLOOR,
            64,
        )
    };
    match name {
        "matmul" => binary(
            vec![rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[n, p], 1.0)],
            Graph::matmul,
        ),
        "matmul_batched" => binary(
            vec![
                rand_tensor(r, &[bsz, m, n], 1.0),
                rand_tensor(r, &[bsz, n, p], 1.0),
            ],
            Graph::matmul,
        ),
        "matmul_shared" => binary(
            vec![
                rand_tensor(r, &[bsz, m, n], 1.0),
                rand_tensor(r, &[n, p], 1.0),
            ],
            Graph::matmul,
        ),
        "add" => binary(
            vec![rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[n], 1.0)],
            Graph::add,
        ),
        "sub" => binary(
            vec![
                rand_tensor(r, &[bsz, m, n], 1.0),
                rand_tensor(r, &[m, n], 1.0),
            ],
            Graph::sub,
        ),
        "mul" => binary(
            vec![rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[m, n], 1.0)],
            Graph::mul,
        ),
        "scale" => unary(vec![rand_tensor(r, &[m, n], 1.0)], |g, x| g.scale(x, -1.7)),
        "tanh" => unary(vec![rand_tensor(r, &[m, n], 1.0)], Graph::tanh),
        "exp" => unary(vec![rand_tensor(r, &[m, n], 1.0)], Graph::exp),
        "gelu" => unary(vec![rand_tensor(r, &[m, n], 1.5)], Graph::gelu),
        "relu" => unary(vec![rand_away_from_zero(r, &[m, n])], Graph::relu),
        "sigmoid" => unary(vec![rand_tensor(r, &[m, n], 2.0)], Graph::sigmoid),
        "softplus" => unary(vec![rand_tensor(r, &[m, n], 2.0)], Graph::softplus),
        "silu" => unary(vec![rand_tensor(r, &[m, n], 2.0)], Graph::silu),
        "square" => unary(vec![rand_tensor(r, &[m, n], 1.0)], Graph::square),
        "softmax" => unary(vec![rand_tensor(r, &[m, n + 1], 1.0)], Graph::softmax),
        "layer_norm" => unary(vec![rand_tensor(r, &[m, n + 1], 1.0)], Graph::layer_norm),
        "causal_mask" => unary(vec![rand_tensor(r, &[bsz, t, t], 1.0)], |g, x| {
            let y = g.causal_mask(x)?;
            g.softmax(y)
        }),
        "slice" => unary(vec![rand_tensor(r, &[m, n + 2, p], 1.0)], |g, x| {
            let len = g.value(x).shape()[1] - 1;
            g.slice(x, 1, 1, len)
        }),
        "concat" => binary(
            vec![rand_tensor(r, &[m, n], 1.0), rand_tensor(r, &[m, p], 1.0)],
            |g, a, b| g.concat(&[a, b], 1),
        ),
        "reshape" => unary(vec![rand_tensor(r, &[m, n, p], 1.0)], |g, x| {
            let len = g.value(x).len();
            let y = g.reshape(x, &[len])?;
            g.tanh(y)
        }),
        "transpose" => unary(vec![rand_tensor(r, &[bsz, m, n], 1.0)], |g, x| {
            let y = g.transpose(x)?;
            g.softmax(y)
        }),
        "sum" => unary(vec![rand_tensor(r, &[m, n], 1.0)], |g, x| {
            let y = g.square(x)?;
            let s = g.sum(y)?;
            g.tanh(s)
        }),
        "attention_dense" | "attention_blockwise" => {
            let mode = if name == "attention_dense" {
                AttentionMode::Dense
            } else {
                AttentionMode::Blockwise(r.random_range(1..4usize))
            };
            let shape = [bsz, t, e];
            let inputs = vec![
                rand_tensor(r, &shape, 1.0),
                rand_tensor(r, &shape, 1.0),
                rand_tensor(r, &shape, 1.0),
            ];
            check_gradients(
                move |g: &mut Graph, v: &[Var]| {
                    let y = g.attention(v[0], v[1], v[2], heads, mode)?;
                    readout(g, y, &mut rng_from_seed(c_seed))
                },
                &inputs,
                FD_STEP,
                REL_FLOOR,
                64,
            )
        }
        "causal_conv" => {
            let taps = r.random_range(1..5usize);
            binary(
                vec![
                    rand_tensor(r, &[bsz, t, n], 1.0),
                    rand_tensor(r, &[taps, n], 1.0),
                ],
                Graph::causal_conv,
            )
        }
        "selective_scan" => {
            let (d, ns) = (n, p);
            let inputs = vec![
                rand_tensor(r, &[bsz, t, d], 1.0),
                Tensor::from_fn(&[bsz, t, d], |_| r.random_range(0.05..0.8)),
                Tensor::from_fn(&[d, ns], |_| r.random_range(0.2..2.0)),
                rand_tensor(r, &[bsz, t, ns], 1.0),
                rand_tensor(r, &[bsz, t, ns], 1.0),
                rand_tensor(r, &[d], 1.0),
            ];
            check_gradients(
                move |g: &mut Graph, v: &[Var]| {
                    let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])?;
                    readout(g, y, &mut rng_from_seed(c_seed))
                },
                &inputs,
                FD_STEP,
                REL_FLOOR,
                64,
            )
        }
        other => panic!("no generator for {other}"),
    }
}
