//! The experiment loop: minibatch Adam training, per-epoch validation with
//! dynamic-threshold selection, early stopping, and best-checkpoint
//! tracking. Also the repeated-runs aggregation used for reporting.

pub mod adam;

use rayon::prelude::*;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::datagen::derive_seed;
use crate::error::{Error, Result};
use crate::features::{windowize, FeatureMatrix, NormalizationStats, Sample, WindowMode};
use crate::model::checkpoint::Checkpoint;
use crate::model::{joint_loss, Mode, Model, ParamSet};
use crate::roll::EventRoll;
use crate::threshold::{select_threshold, ActivityProbabilities};

pub use adam::{Adam, AdamConfig};

/// Training-loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Hop between training windows.
    pub train_hop: usize,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            patience: 10,
            max_epochs: 200,
            seed: 0,
            train_hop: 64,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be nonnegative".to_string()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".to_string()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 || self.train_hop < 1 {
            return Err(Error::Config(
                "batch size, max epochs, and train hop must be positive".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("batch-norm momentum must be in [0, 1]".to_string()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// One prepared clip: normalized features plus aligned targets.
#[derive(Debug, Clone)]
pub struct ClipData {
    pub features: FeatureMatrix,
    pub targets: EventRoll,
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_er_frame: Option<f64>,
    pub val_f1_frame: f64,
    pub threshold: f64,
    /// Epochs since the last validation improvement.
    pub patience_counter: usize,
}

/// Result of a full training run.
pub struct FitOutcome {
    /// Model state, threshold, normalizer, and optimizer state of the best
    /// epoch.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_er: Option<f64>,
    pub best_f1: f64,
    pub best_threshold: f64,
}

/// Forward one sample and return its loss value and parameter gradients.
fn sample_gradients(
    model: &Model,
    sample: &Sample,
    dropout_seed: u64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<(usize, crate::tensor::BnObservation)>)> {
    let graph = crate::tensor::Graph::new();
    let params = model.attach(&graph);
    let input = crate::tensor::Tensor::from_vec(
        vec![sample.bands, sample.window_len],
        sample.features.clone(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let out = model.forward(&params, &input, Mode::Train, &mut rng, false)?;
    let loss = joint_loss(
        &out.head.probabilities,
        &out.caps.lengths,
        &sample.targets,
        &sample.mask,
        model.config.loss_weights,
        &model.config.margin,
    )?;
    let loss_value = loss.item();
    graph.backward(&loss)?;
    let grads = (0..model.store.len())
        .map(|i| params.grad_or_zero(i).data().to_vec())
        .collect();
    Ok((loss_value, grads, out.bn_observations))
}

/// Evaluation-mode probabilities for a whole clip, stitched from
/// non-overlapping windows with padded tails dropped.
pub fn clip_probabilities(
    model: &Model,
    params: &ParamSet,
    features: &FeatureMatrix,
) -> Result<ActivityProbabilities> {
    let classes = model.config.classes;
    let window = model.config.window_frames;
    let dummy = EventRoll::new(classes, features.frames);
    let samples = windowize(features, &dummy, window, WindowMode::Eval)?;
    let mut values = vec![0.0; classes * features.frames];
    let mut rng = ChaCha8Rng::seed_from_u64(0); // dropout inactive in eval
    for sample in &samples {
        let input = crate::tensor::Tensor::from_vec(
            vec![sample.bands, sample.window_len],
            sample.features.clone(),
        )?;
        let out = model.forward(params, &input, Mode::Eval, &mut rng, false)?;
        for k in 0..classes {
            for (t, &valid) in sample.mask.iter().enumerate() {
                if valid {
                    values[k * features.frames + sample.start_frame + t] =
                        out.head.probabilities.at(&[k, t]);
                }
            }
        }
    }
    ActivityProbabilities::new(classes, features.frames, values)
}

/// Validation pass: probabilities for every clip, then dynamic-threshold
/// selection on frame-based error rate.
fn validate_epoch(
    model: &Model,
    val: &[ClipData],
    candidates: &[f64],
) -> Result<(f64, Option<f64>, f64)> {
    // tensors are graph-capable and therefore thread-local; each worker
    // materializes its own detached view of the shared parameter buffers
    let pairs: Vec<(ActivityProbabilities, EventRoll)> = val
        .par_iter()
        .map(|clip| {
            let params = model.detached_params();
            clip_probabilities(model, &params, &clip.features).map(|p| (p, clip.targets.clone()))
        })
        .collect::<Result<_>>()?;
    let selection = select_threshold(&pairs, candidates)?;
    Ok((selection.threshold, selection.er_frame, selection.f1_frame))
}

/// Train with early stopping; returns the best checkpoint and the history.
///
/// Validation improvement means a strict decrease of frame-based error
/// rate. The best checkpoint additionally prefers higher F1 on equal error
/// rates. `on_epoch` fires after every epoch with the fresh record.
pub fn fit(
    model: &mut Model,
    train: &[ClipData],
    val: &[ClipData],
    config: &TrainConfig,
    threshold_candidates: &[f64],
    class_labels: &[String],
    normalizer: Option<&NormalizationStats>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput(
            "training and validation splits must be nonempty".to_string(),
        ));
    }

    let window = model.config.window_frames;
    let mut samples: Vec<Sample> = Vec::new();
    for clip in train {
        samples.extend(windowize(
            &clip.features,
            &clip.targets,
            window,
            WindowMode::Train {
                hop: config.train_hop,
            },
        )?);
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("no training windows produced".to_string()));
    }

    let mut optimizer = Adam::new(&model.store, config.adam());
    let mut history = Vec::new();
    let mut best: Option<(Option<f64>, f64, usize)> = None; // (er, f1, epoch)
    let mut best_checkpoint: Option<Checkpoint> = None;
    let mut since_improvement = 0usize;

    for epoch in 1..=config.max_epochs {
        // deterministic shuffle per epoch
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut sample_counter = 0u64;
        for batch in order.chunks(config.batch_size) {
            // per-sample graphs run in parallel; gradients and batch-norm
            // observations fold in batch order so results do not depend on
            // the worker count
            let jobs: Vec<(usize, u64)> = batch
                .iter()
                .enumerate()
                .map(|(i, &ix)| {
                    (
                        ix,
                        derive_seed(
                            config.seed,
                            (epoch as u64) << 40 | (sample_counter + i as u64),
                        ),
                    )
                })
                .collect();
            sample_counter += batch.len() as u64;
            let results: Vec<(f64, Vec<Vec<f64>>, Vec<(usize, crate::tensor::BnObservation)>)> =
                jobs.par_iter()
                    .map(|&(ix, seed)| sample_gradients(model, &samples[ix], seed))
                    .collect::<Result<_>>()?;

            let mut grad_sum: Vec<Vec<f64>> = model
                .store
                .iter()
                .map(|p| vec![0.0; p.values.len()])
                .collect();
            let scale = 1.0 / batch.len() as f64;
            for (loss_value, grads, observations) in &results {
                loss_sum += loss_value;
                for (acc, g) in grad_sum.iter_mut().zip(grads) {
                    for (a, &gi) in acc.iter_mut().zip(g) {
                        *a += gi * scale;
                    }
                }
                model.update_running_stats(observations, config.bn_momentum);
            }
            optimizer.step(&mut model.store, &grad_sum)?;
        }
        let train_loss = loss_sum / samples.len() as f64;

        let (threshold, val_er, val_f1) = validate_epoch(model, val, threshold_candidates)?;

        let improved_patience = match (&best, val_er) {
            (None, _) => true,
            (Some((Some(best_er), _, _)), Some(er)) => er < *best_er,
            (Some((None, _, _)), Some(_)) => true,
            _ => false,
        };
        let improved_checkpoint = improved_patience
            || matches!(
                (&best, val_er),
                (Some((Some(best_er), best_f1, _)), Some(er))
                    if er == *best_er && val_f1 > *best_f1
            );
        if improved_patience {
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        if improved_checkpoint {
            best = Some((val_er, val_f1, epoch));
            best_checkpoint = Some(Checkpoint::from_model(
                model,
                class_labels.to_vec(),
                Some(threshold),
                normalizer.cloned(),
                Some(optimizer.snapshot()),
            ));
        }

        let record = EpochRecord {
            epoch,
            train_loss,
            val_er_frame: val_er,
            val_f1_frame: val_f1,
            threshold,
            patience_counter: since_improvement,
        };
        on_epoch(&record);
        history.push(record);

        if since_improvement >= config.patience {
            break;
        }
    }

    let (best_er, best_f1, best_epoch) = best.expect("at least one epoch ran");
    let checkpoint = best_checkpoint.expect("checkpoint recorded with best epoch");
    Ok(FitOutcome {
        best_threshold: checkpoint.threshold.expect("threshold stored"),
        checkpoint,
        history,
        best_epoch,
        best_er,
        best_f1,
    })
}

/// Serialize history as comma-separated values with a header row.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_er_frame,val_f1_frame,threshold,patience\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.6},{},{:.6},{:.2},{}\n",
            r.epoch,
            r.train_loss,
            r.val_er_frame
                .map(|e| format!("{e:.6}"))
                .unwrap_or_else(|| "nan".to_string()),
            r.val_f1_frame,
            r.threshold,
            r.patience_counter
        ));
    }
    out
}

/// The four headline metrics of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub f1_frame: f64,
    pub er_frame: f64,
    pub f1_second: f64,
    pub er_second: f64,
}

/// Mean and sample standard deviation over repeated runs.
#[derive(Debug, Clone)]
pub struct RepeatSummary {
    pub runs: Vec<RunMetrics>,
    pub mean: RunMetrics,
    pub std: RunMetrics,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregate per-seed metrics; needs at least two runs.
pub fn summarize_runs(runs: &[RunMetrics]) -> Result<RepeatSummary> {
    if runs.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 runs to summarize, got {}",
            runs.len()
        )));
    }
    let collect = |f: fn(&RunMetrics) -> f64| runs.iter().map(f).collect::<Vec<f64>>();
    let (f1f_m, f1f_s) = mean_std(&collect(|r| r.f1_frame));
    let (erf_m, erf_s) = mean_std(&collect(|r| r.er_frame));
    let (f1s_m, f1s_s) = mean_std(&collect(|r| r.f1_second));
    let (ers_m, ers_s) = mean_std(&collect(|r| r.er_second));
    Ok(RepeatSummary {
        runs: runs.to_vec(),
        mean: RunMetrics {
            f1_frame: f1f_m,
            er_frame: erf_m,
            f1_second: f1s_m,
            er_second: ers_m,
        },
        std: RunMetrics {
            f1_frame: f1f_s,
            er_frame: erf_s,
            f1_second: f1s_s,
            er_second: ers_s,
        },
    })
}

impl RepeatSummary {
    /// Human-readable table: F1 as percent with one decimal, error rates
    /// with two decimals, each as `mean +- std`.
    pub fn table(&self) -> String {
        let mut out = String::from("metric          mean +- std over seeds\n");
        out.push_str(&format!(
            "F1_frame        {:.1} +- {:.1}\n",
            self.mean.f1_frame * 100.0,
            self.std.f1_frame * 100.0
        ));
        out.push_str(&format!(
            "ER_frame        {:.2} +- {:.2}\n",
            self.mean.er_frame, self.std.er_frame
        ));
        out.push_str(&format!(
            "F1_second       {:.1} +- {:.1}\n",
            self.mean.f1_second * 100.0,
            self.std.f1_second * 100.0
        ));
        out.push_str(&format!(
            "ER_second       {:.2} +- {:.2}\n",
            self.mean.er_second, self.std.er_second
        ));
        out
    }

    /// Machine-readable rows: `metric, mean, std`.
    pub fn csv(&self) -> String {
        let mut out = String::from("metric,mean,std\n");
        out.push_str(&format!(
            "F1_frame,{:.6},{:.6}\n",
            self.mean.f1_frame, self.std.f1_frame
        ));
        out.push_str(&format!(
            "ER_frame,{:.6},{:.6}\n",
            self.mean.er_frame, self.std.er_frame
        ));
        out.push_str(&format!(
            "F1_second,{:.6},{:.6}\n",
            self.mean.f1_second, self.std.f1_second
        ));
        out.push_str(&format!(
            "ER_second,{:.6},{:.6}\n",
            self.mean.er_second, self.std.er_second
        ));
        out
    }
}
