//! End-to-end desk-scale training run: generate a synthetic corpus in
//! memory, train the compact model with early stopping and dynamic
//! thresholds, then score the held-out test clips.
//!
//!     cargo run --release --example train_desk

use capsule_sed::corpus::{prepare_in_memory, SplitCounts};
use capsule_sed::datagen::{class_labels, generate_corpus, CorpusSpec};
use capsule_sed::features::FeatureConfig;
use capsule_sed::metrics::MetricReport;
use capsule_sed::model::{Model, ModelConfig};
use capsule_sed::roll::EventRoll;
use capsule_sed::threshold::{binarize, default_candidates};
use capsule_sed::train::{clip_probabilities, fit, TrainConfig};

fn main() -> capsule_sed::Result<()> {
    let started = std::time::Instant::now();
    let spec = CorpusSpec {
        seed: 7,
        ..CorpusSpec::default()
    };
    let splits = SplitCounts::default();
    println!(
        "generating {} clips of {:.0} s ({} classes, polyphony <= {}) ...",
        spec.n_clips,
        spec.clip_seconds,
        spec.classes.len(),
        spec.max_polyphony
    );
    let clips = generate_corpus(&spec)?;
    let labels = class_labels(&spec.classes);
    let raw: Vec<_> = clips.into_iter().map(|c| (c.audio, c.events)).collect();
    let corpus = prepare_in_memory(&raw, splits, &labels, &FeatureConfig::default())?;

    let mut model = Model::new(ModelConfig::desk(labels.len()), 7)?;
    println!(
        "desk model: {} parameters in {} tensors",
        model.store.total_values(),
        model.store.len()
    );
    let train_cfg = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 60,
        seed: 7,
        ..TrainConfig::default()
    };
    let outcome = fit(
        &mut model,
        &corpus.train,
        &corpus.val,
        &train_cfg,
        &default_candidates(),
        &labels,
        Some(&corpus.normalizer),
        |r| {
            println!(
                "epoch {:>3}  train loss {:.4}  val ER {}  val F1 {:.3}  thr {:.2}  patience {}",
                r.epoch,
                r.train_loss,
                r.val_er_frame
                    .map(|e| format!("{e:.3}"))
                    .unwrap_or_else(|| "n/a".to_string()),
                r.val_f1_frame,
                r.threshold,
                r.patience_counter
            );
        },
    )?;
    println!(
        "best epoch {} (val ER {:?}, F1 {:.3}), threshold {:.2}",
        outcome.best_epoch, outcome.best_er, outcome.best_f1, outcome.best_threshold
    );

    // score the held-out test clips with the best checkpoint
    let (best_model, extras) = outcome.checkpoint.into_model()?;
    let params = best_model.detached_params();
    let threshold = extras.threshold.expect("threshold stored");
    let mut pairs: Vec<(EventRoll, EventRoll)> = Vec::new();
    for clip in &corpus.test {
        let probs = clip_probabilities(&best_model, &params, &clip.features)?;
        pairs.push((clip.targets.clone(), binarize(&probs, threshold)?));
    }
    let pair_refs: Vec<(&EventRoll, &EventRoll)> = pairs.iter().map(|(a, b)| (a, b)).collect();
    let report = MetricReport::compute(&pair_refs)?;
    println!("test metrics at threshold {threshold:.2}:");
    for (name, value, seg) in report.rows() {
        println!("  {name:<10} {value:.4}   (segment = {seg} frames)");
    }
    println!("total wall time: {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}
