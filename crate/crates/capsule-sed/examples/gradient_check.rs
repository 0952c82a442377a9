//! Verify the reverse sweep against central finite differences on a tiny
//! end-to-end model.
//!
//!     cargo run --release --example gradient_check

use capsule_sed::model::{joint_loss, Mode, Model, ModelConfig};
use capsule_sed::roll::EventRoll;
use capsule_sed::tensor::{check_gradients, sample_indices, Graph, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() -> capsule_sed::Result<()> {
    let cfg = ModelConfig::shrunken();
    let model = Model::new(cfg.clone(), 42)?;
    println!(
        "shrunken model: {} bands x {} frames, {} classes, {} parameters",
        cfg.input_bands,
        cfg.window_frames,
        cfg.classes,
        model.store.total_values()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = Tensor::from_vec(
        vec![cfg.input_bands, cfg.window_frames],
        (0..cfg.input_bands * cfg.window_frames)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect(),
    )?;
    let mut targets = EventRoll::new(cfg.classes, cfg.window_frames);
    for k in 0..cfg.classes {
        for t in 0..cfg.window_frames {
            if rng.random::<f64>() < 0.3 {
                targets.set(k, t, true);
            }
        }
    }
    let mask = vec![true; cfg.window_frames];

    let loss_of = |values: &[Vec<f64>]| -> f64 {
        let params = model.param_set_from_values(values).unwrap();
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(7);
        let out = model
            .forward(&params, &input, Mode::Train, &mut dropout_rng, false)
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

    // analytic gradients from one recorded graph
    let graph = Graph::new();
    let attached = model.attach(&graph);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(7);
    let out = model.forward(&attached, &input, Mode::Train, &mut dropout_rng, false)?;
    let loss = joint_loss(
        &out.head.probabilities,
        &out.caps.lengths,
        &targets,
        &mask,
        cfg.loss_weights,
        &cfg.margin,
    )?;
    println!("loss at the probe point: {:.6}", loss.item());
    graph.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = (0..model.store.len())
        .map(|i| attached.grad_or_zero(i).data().to_vec())
        .collect();

    let mut params = model.values_snapshot();
    let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let samples = sample_indices(&sizes, 80, 9);
    let report = check_gradients(&mut params, loss_of, &analytic, &samples, 1e-4);
    println!(
        "{} parameters probed, max relative error {:.2e}",
        report.checked, report.max_relative_error
    );
    if report.passes(1e-3) {
        println!("analytic gradients agree with finite differences");
    } else {
        println!("MISMATCH at {:?}", report.worst);
        std::process::exit(1);
    }
    Ok(())
}
