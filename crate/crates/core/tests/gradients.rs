mod common;

use common::*;
use icl_core::gradcheck::check_gradients;
use icl_core::models::Arch;
use icl_core::training::LossMode;
use icl_core::{Error, Graph, Tensor, Var};

#[test]
fn square_gradient_at_three() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0)).unwrap();
    let y = g.square(x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn mean_of_matmul_matches_outer_product() {
    let mut rng = icl_core::rng::rng_from_seed(3);
    let w = rand_tensor(&mut rng, &[3, 4], 1.0);
    let x = rand_tensor(&mut rng, &[4, 2], 1.0);
    let xc = x.clone();
    let r = check_gradients(
        move |g: &mut Graph, v: &[Var]| {
            let xv = g.constant(xc.clone())?;
            let y = g.matmul(v[0], xv)?;
            g.mean(y)
        },
        &[w],
        FD_STEP,
        REL_FLOOR,
        100,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
    // d/dW_ij of mean(Wx) = (sum_c x_jc) / (3·2)
    let mut g = Graph::new();
    let wv = g.param(Tensor::zeros(&[3, 4])).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let y = g.matmul(wv, xv).unwrap();
    let m = g.mean(y).unwrap();
    let grads = g.backward(m).unwrap();
    let gw = grads.get(wv).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let expect = (x.data()[j * 2] + x.data()[j * 2 + 1]) / 6.0;
            assert!((gw.data()[i * 4 + j] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn softmax_dot_gradient_on_random_vectors() {
    for seed in 0..10 {
        let mut rng = icl_core::rng::rng_from_seed(seed);
        let x = rand_tensor(&mut rng, &[8], 1.0);
        let c = rand_tensor(&mut rng, &[8], 1.0);
        let r = check_gradients(
            move |g: &mut Graph, v: &[Var]| {
                let s = g.softmax(v[0])?;
                let cv = g.constant(c.clone())?;
                let y = g.mul(s, cv)?;
                g.sum(y)
            },
            &[x],
            FD_STEP,
            REL_FLOOR,
            8,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn every_primitive_passes_on_random_graphs() {
    let mut worst = 0.0f64;
    let mut graphs = 0;
    for round in 0..4u64 {
        for (i, name) in PRIMITIVES.iter().enumerate() {
            let r = primitive_check(name, 1000 * round + i as u64).unwrap();
            assert!(r.max_rel_err < 1e-4, "{name} round {round}: {r:?}");
            worst = worst.max(r.max_rel_err);
            graphs += 1;
        }
    }
    assert!(graphs >= 100);
    assert!(worst < 1e-4);
}

#[test]
fn end_to_end_gradients_for_all_architectures() {
    for arch in Arch::ALL {
        for mode in [LossMode::FinalQuery, LossMode::AllPrefix] {
            let r = end_to_end_check(arch, 11, mode).unwrap();
            assert!(r.max_rel_err < 1e-3, "{arch} {mode:?}: {r:?}");
            assert!(r.checked > 50);
        }
    }
}

#[test]
fn non_scalar_output_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let y = g.tanh(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NonScalarOutput(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0)).unwrap();
    let c = g.constant(Tensor::scalar(5.0)).unwrap();
    let y = g.mul(x, c).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
    assert!(grads.get(c).is_none());
}

#[test]
fn forward_and_backward_are_bitwise_repeatable() {
    let run = || {
        let r = end_to_end_check(Arch::Ssm, 5, LossMode::FinalQuery).unwrap();
        (r.max_abs_err.to_bits(), r.max_rel_err.to_bits())
    };
    assert_eq!(run(), run());
}
