//! Shared finite-difference machinery for the gradient and acceptance
//! suites.
#![allow(dead_code)] // each test target compiles its own copy

use capsule_sed::caps::{self, CapsulePopulation, MarginLossParams};
use capsule_sed::model::{joint_loss, Mode, Model, ModelConfig};
use capsule_sed::roll::EventRoll;
use capsule_sed::tensor::{
    check_gradients, sample_indices, BnMode, Graph, Padding, RunningStat, Tensor,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-3;

pub fn random_values(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect()
}

/// Uniform away from zero, for kinked ops.
pub fn random_offset_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random::<f64>() * 0.9 + 0.1;
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

pub fn tensors_from(params: &[Vec<f64>], shapes: &[Vec<usize>]) -> Vec<Tensor> {
    params
        .iter()
        .zip(shapes)
        .map(|(p, s)| Tensor::from_vec(s.clone(), p.clone()).unwrap())
        .collect()
}

/// Check every entry of every input buffer for the given loss builder.
pub fn check_op(
    name: &str,
    shapes: &[Vec<usize>],
    params: Vec<Vec<f64>>,
    build: impl Fn(&[Tensor]) -> Tensor,
) {
    let mut params = params;
    let graph = Graph::new();
    let vars: Vec<Tensor> = tensors_from(&params, shapes)
        .iter()
        .map(|t| graph.var(t))
        .collect();
    let loss = build(&vars);
    graph.backward(&loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| v.grad_or_zero().data().to_vec()).collect();

    let samples: Vec<(usize, usize)> = shapes
        .iter()
        .enumerate()
        .flat_map(|(b, s)| (0..s.iter().product::<usize>()).map(move |i| (b, i)))
        .collect();
    let eval = |p: &[Vec<f64>]| build(&tensors_from(p, shapes)).item();
    let report = check_gradients(&mut params, eval, &analytic, &samples, H);
    assert!(
        report.passes(TOL),
        "{name}: max relative error {} at {:?}",
        report.max_relative_error,
        report.worst
    );
}

/// Fixed random projection so reductions see asymmetric upstream gradients.
pub fn projected(t: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_vec(t.shape().to_vec(), random_values(&mut rng, t.len(), 1.0)).unwrap();
    t.mul(&r).unwrap().sum_all()
}

/// Finite-difference every primitive operation once.
pub fn check_every_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ew_shapes = vec![vec![3, 4], vec![3, 4]];
    let ew = vec![random_values(&mut rng, 12, 1.0), random_offset_values(&mut rng, 12)];
    check_op("add", &ew_shapes, ew.clone(), |t| projected(&t[0].add(&t[1]).unwrap(), 10));
    check_op("sub", &ew_shapes, ew.clone(), |t| projected(&t[0].sub(&t[1]).unwrap(), 11));
    check_op("mul", &ew_shapes, ew.clone(), |t| projected(&t[0].mul(&t[1]).unwrap(), 12));
    check_op("div", &ew_shapes, ew, |t| projected(&t[0].div(&t[1]).unwrap(), 13));

    let un_shapes = vec![vec![2, 5]];
    let un = vec![random_offset_values(&mut rng, 10)];
    check_op("relu", &un_shapes, un.clone(), |t| projected(&t[0].relu(), 20));
    check_op("sigmoid", &un_shapes, un.clone(), |t| projected(&t[0].sigmoid(), 21));
    check_op("tanh", &un_shapes, un.clone(), |t| projected(&t[0].tanh(), 22));
    check_op("scalars", &un_shapes, un.clone(), |t| {
        projected(&t[0].mul_scalar(2.5).add_scalar(-0.3).sub_from_scalar(1.0), 23)
    });
    check_op("clamp", &un_shapes, un, |t| projected(&t[0].clamp(-0.9, 0.9), 24));
    let pos = vec![(0..10).map(|i| 0.2 + 0.13 * i as f64).collect::<Vec<_>>()];
    check_op("ln", &un_shapes, pos, |t| projected(&t[0].ln(), 25));

    check_op(
        "matmul",
        &[vec![3, 4], vec![4, 2]],
        vec![random_values(&mut rng, 12, 1.0), random_values(&mut rng, 8, 1.0)],
        |t| projected(&t[0].matmul(&t[1]).unwrap(), 30),
    );
    check_op(
        "matvec",
        &[vec![3, 4], vec![4]],
        vec![random_values(&mut rng, 12, 1.0), random_values(&mut rng, 4, 1.0)],
        |t| projected(&t[0].matvec(&t[1]).unwrap(), 31),
    );
    check_op("transpose", &[vec![3, 4]], vec![random_values(&mut rng, 12, 1.0)], |t| {
        projected(&t[0].transpose().unwrap(), 32)
    });
    check_op("reshape", &[vec![3, 4]], vec![random_values(&mut rng, 12, 1.0)], |t| {
        projected(&t[0].reshape(&[2, 6]).unwrap(), 33)
    });
    check_op(
        "concat",
        &[vec![2, 3], vec![1, 3]],
        vec![random_values(&mut rng, 6, 1.0), random_values(&mut rng, 3, 1.0)],
        |t| projected(&Tensor::concat(&[&t[0], &t[1]]).unwrap(), 34),
    );
    check_op(
        "stack_columns",
        &[vec![4], vec![4]],
        vec![random_values(&mut rng, 4, 1.0), random_values(&mut rng, 4, 1.0)],
        |t| projected(&Tensor::stack_columns(&[&t[0], &t[1]]).unwrap(), 35),
    );
    check_op("sum_all", &[vec![3, 3]], vec![random_values(&mut rng, 9, 1.0)], |t| {
        t[0].mul(&t[0]).unwrap().sum_all()
    });

    check_op("softmax_rows", &[vec![3, 5]], vec![random_values(&mut rng, 15, 2.0)], |t| {
        projected(&t[0].softmax_rows().unwrap(), 40)
    });
    check_op(
        "vector_norm",
        &[vec![4, 3]],
        vec![random_offset_values(&mut rng, 12)],
        |t| projected(&t[0].vector_norm(), 41),
    );
    check_op(
        "scale_rows",
        &[vec![3, 4], vec![3]],
        vec![random_values(&mut rng, 12, 1.0), random_values(&mut rng, 3, 1.0)],
        |t| projected(&t[0].scale_rows(&t[1]).unwrap(), 42),
    );
    check_op(
        "scale_cols",
        &[vec![3, 4], vec![4]],
        vec![random_values(&mut rng, 12, 1.0), random_values(&mut rng, 4, 1.0)],
        |t| projected(&t[0].scale_cols(&t[1]).unwrap(), 43),
    );

    check_op(
        "conv2d_same",
        &[vec![2, 4, 5], vec![3, 2, 3, 3], vec![3]],
        vec![
            random_values(&mut rng, 40, 1.0),
            random_values(&mut rng, 54, 1.0),
            random_values(&mut rng, 3, 1.0),
        ],
        |t| projected(&t[0].conv2d(&t[1], &t[2], Padding::Same).unwrap(), 50),
    );
    check_op(
        "add_channel_bias",
        &[vec![3, 2, 4], vec![3]],
        vec![random_values(&mut rng, 24, 1.0), random_values(&mut rng, 3, 1.0)],
        |t| projected(&t[0].add_channel_bias(&t[1]).unwrap(), 52),
    );
    let pool_in: Vec<f64> = (0..24).map(|i| (i as f64) * 0.37 % 5.0).collect();
    check_op("maxpool_freq", &[vec![2, 4, 3]], vec![pool_in], |t| {
        projected(&t[0].maxpool_freq(2).unwrap(), 53)
    });

    check_op(
        "batchnorm_train",
        &[vec![2, 6], vec![2], vec![2]],
        vec![random_values(&mut rng, 12, 1.5), vec![1.1, 0.7], vec![0.2, -0.4]],
        |t| {
            let (y, _) = t[0].batchnorm(&t[1], &t[2], BnMode::Train).unwrap();
            projected(&y, 60)
        },
    );
    let running = RunningStat {
        mean: vec![0.3, -0.2],
        var: vec![1.4, 0.9],
    };
    check_op(
        "batchnorm_eval",
        &[vec![2, 6], vec![2], vec![2]],
        vec![random_values(&mut rng, 12, 1.5), vec![1.1, 0.7], vec![0.2, -0.4]],
        move |t| {
            let (y, _) = t[0].batchnorm(&t[1], &t[2], BnMode::Eval(&running)).unwrap();
            projected(&y, 61)
        },
    );
    check_op("dropout", &[vec![4, 5]], vec![random_values(&mut rng, 20, 1.0)], |t| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        projected(&t[0].dropout(0.25, true, &mut mask_rng).unwrap(), 70)
    });

    check_op("squash", &[vec![3, 4]], vec![random_offset_values(&mut rng, 12)], |t| {
        projected(&caps::squash(&t[0]).unwrap(), 80)
    });
    check_op(
        "predict_vectors",
        &[vec![3, 5], vec![3, 2, 4, 5]],
        vec![random_values(&mut rng, 15, 1.0), random_values(&mut rng, 120, 1.0)],
        |t| {
            let u = CapsulePopulation::new(t[0].clone()).unwrap();
            projected(&caps::predict_vectors(&u, &t[1]).unwrap(), 81)
        },
    );
    check_op("route", &[vec![4, 3, 5]], vec![random_values(&mut rng, 60, 1.0)], |t| {
        projected(&caps::route(&t[0], 3).unwrap().output, 82)
    });
    check_op(
        "margin_loss",
        &[vec![6]],
        vec![(0..6).map(|i| 0.15 + 0.12 * i as f64).collect()],
        |t| {
            let targets = Tensor::vector(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
            caps::margin_loss(&t[0], &targets, &MarginLossParams::default()).unwrap()
        },
    );
}

/// Finite-difference the full shrunken model; returns the number of
/// parameters probed.
pub fn check_full_model() -> usize {
    let cfg = ModelConfig::shrunken();
    let model = Model::new(cfg.clone(), 123).unwrap();
    let mut data_rng = ChaCha8Rng::seed_from_u64(7);
    let input = Tensor::from_vec(
        vec![cfg.input_bands, cfg.window_frames],
        random_values(&mut data_rng, cfg.input_bands * cfg.window_frames, 1.0),
    )
    .unwrap();
    let mut targets = EventRoll::new(cfg.classes, cfg.window_frames);
    for k in 0..cfg.classes {
        for t in 0..cfg.window_frames {
            if data_rng.random::<f64>() < 0.35 {
                targets.set(k, t, true);
            }
        }
    }
    let mut mask = vec![true; cfg.window_frames];
    mask[cfg.window_frames - 1] = false;

    let loss_of = |values: &[Vec<f64>]| -> f64 {
        let params = model.param_set_from_values(values).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let out = model
            .forward(&params, &input, Mode::Train, &mut rng, false)
            .unwrap();
        joint_loss(
            &out.head.probabilities,
            &out.caps.lengths,
            &targets,
            &mask,
            cfg.loss_weights,
            &cfg.margin,
        )
        .unwrap()
        .item()
    };

    let mut params = model.values_snapshot();
    let graph = Graph::new();
    let attached = model.attach(&graph);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let out = model
        .forward(&attached, &input, Mode::Train, &mut rng, false)
        .unwrap();
    let loss = joint_loss(
        &out.head.probabilities,
        &out.caps.lengths,
        &targets,
        &mask,
        cfg.loss_weights,
        &cfg.margin,
    )
    .unwrap();
    graph.backward(&loss).unwrap();
    let analytic: Vec<Vec<f64>> = (0..model.store.len())
        .map(|i| attached.grad_or_zero(i).data().to_vec())
        .collect();

    let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let samples = sample_indices(&sizes, 64, 2024);
    assert!(samples.len() >= 50);
    let report = check_gradients(&mut params, loss_of, &analytic, &samples, H);
    assert!(
        report.passes(TOL),
        "full model: max relative error {} at {:?}",
        report.max_relative_error,
        report.worst
    );
    samples.len()
}
