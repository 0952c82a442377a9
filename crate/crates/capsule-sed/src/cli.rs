//! Command-line operator surface: data generation, training, evaluation,
//! prediction, routing introspection, and repeated runs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::corpus::{
    prepare_from_manifest, prepare_split_with_normalizer, read_labels, write_corpus,
};
use crate::datagen::{events_from_roll, save_annotations, Split};
use crate::error::{Error, Result};
use crate::features::{apply_normalizer, cache, logmel, wav, FeatureMatrix};
use crate::metrics::MetricReport;
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, CheckpointExtras};
use crate::model::{Mode, Model};
use crate::roll::EventRoll;
use crate::threshold::binarize;
use crate::train::{clip_probabilities, fit, history_csv, summarize_runs, RunMetrics};

#[derive(Parser)]
#[command(
    name = "capsule-sed",
    about = "Capsule-routing polyphonic sound event detection",
    version
)]
pub struct Cli {
    /// Config file (key = value with [sections]); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory for checkpoints, history, and reports.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Extra overrides, e.g. --set train.max_epochs=5
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (audio, annotations, manifest).
    GenData(GenDataArgs),
    /// Train on a corpus manifest; writes checkpoint, history, threshold.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest split (all four metrics).
    Evaluate(EvaluateArgs),
    /// Predict events for one audio or feature-cache file.
    Predict(PredictArgs),
    /// Dump routing coupling coefficients for one frame.
    InspectRouting(InspectArgs),
    /// Train and evaluate across several seeds; report mean and std.
    Repeat(RepeatArgs),
    /// Extract log mel features from audio into a feature cache.
    ExtractFeatures(ExtractArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Corpus directory (defaults to <output>/corpus).
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Overwrite an existing non-empty corpus directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus manifest (overrides the config's corpus.manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Which manifest split to score.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input `.wav` audio or `.feat` feature cache.
    #[arg(long)]
    input: PathBuf,
    /// Output annotation file (defaults to <output>/predictions.txt).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input `.wav` audio or `.feat` feature cache.
    #[arg(long)]
    input: PathBuf,
    /// Frame index (at the 40 ms frame rate) to inspect.
    #[arg(long)]
    frame: usize,
}

#[derive(Args)]
struct RepeatArgs {
    /// Corpus manifest (overrides the config's corpus.manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Number of seeds to run.
    #[arg(long, default_value_t = 10)]
    runs: usize,
}

#[derive(Args)]
struct ExtractArgs {
    /// Input `.wav` audio file.
    #[arg(long)]
    input: PathBuf,
    /// Output feature cache (defaults to the input with `.feat`).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own help/version through this path
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(threads) = cli.threads {
        config.threads = Some(threads);
    }
    if let Some(output) = &cli.output {
        config.output_dir = output.clone();
    }
    for spec in &cli.overrides {
        config.apply_override(spec)?;
    }
    config.validate()?;
    Ok(config)
}

fn execute(cli: Cli) -> Result<()> {
    let mut config = build_config(&cli)?;
    if let Some(threads) = config.threads {
        // ignore failure: the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(&config, args),
        Command::Train(args) => {
            if let Some(m) = &args.manifest {
                config.manifest = Some(m.clone());
            }
            if let Some(e) = args.max_epochs {
                config.train.max_epochs = e;
            }
            if let Some(b) = args.batch_size {
                config.train.batch_size = b;
            }
            if let Some(lr) = args.learning_rate {
                config.train.learning_rate = lr;
            }
            cmd_train(&config)
        }
        Command::Evaluate(args) => cmd_evaluate(&config, args),
        Command::Predict(args) => cmd_predict(&config, args),
        Command::InspectRouting(args) => cmd_inspect_routing(&config, args),
        Command::Repeat(args) => {
            if let Some(m) = &args.manifest {
                config.manifest = Some(m.clone());
            }
            cmd_repeat(&config, args.runs)
        }
        Command::ExtractFeatures(args) => cmd_extract_features(&config, args),
    }
}

fn ensure_output_dir(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))
}

fn echo_effective_config(config: &RunConfig) -> Result<()> {
    ensure_output_dir(config)?;
    let path = config.output_dir.join("effective.conf");
    fs::write(&path, config.to_text()).map_err(|e| Error::io(&path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_gen_data(config: &RunConfig, args: &GenDataArgs) -> Result<()> {
    let dir = args
        .dir
        .clone()
        .unwrap_or_else(|| config.output_dir.join("corpus"));
    if dir.exists() {
        let non_empty = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .next()
            .is_some();
        if non_empty && !args.force {
            return Err(Error::InvalidInput(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    echo_effective_config(config)?;
    let spec = config.corpus_spec();
    let on_disk = write_corpus(&dir, &spec, config.splits)?;
    println!(
        "wrote {} clips ({} train / {} val / {} test)",
        spec.n_clips, config.splits.train, config.splits.val, config.splits.test
    );
    println!("manifest: {}", on_disk.manifest.display());
    println!("classes:  {}", on_disk.classes.display());
    Ok(())
}

fn manifest_and_labels(config: &RunConfig) -> Result<(PathBuf, Vec<String>)> {
    let manifest = config
        .manifest
        .clone()
        .unwrap_or_else(|| config.output_dir.join("corpus/corpus.manifest"));
    if !manifest.exists() {
        return Err(Error::InvalidInput(format!(
            "manifest not found: {} (run gen-data first or pass --manifest)",
            manifest.display()
        )));
    }
    let classes_file = config.classes_file.clone().unwrap_or_else(|| {
        manifest
            .parent()
            .unwrap_or_else(|| Path::new(""))
            .join("classes.txt")
    });
    let labels = read_labels(&classes_file)?;
    Ok((manifest, labels))
}

fn cmd_train(config: &RunConfig) -> Result<()> {
    echo_effective_config(config)?;
    let (manifest, labels) = manifest_and_labels(config)?;
    let mut model_config = config.model.clone();
    model_config.classes = labels.len();
    let corpus = prepare_from_manifest(&manifest, &labels, &config.features)?;
    println!(
        "corpus: {} train / {} val / {} test clips, {} classes",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        labels.len()
    );

    let mut train_config = config.train.clone();
    train_config.seed = config.seed;
    let mut model = Model::new(model_config, config.seed)?;
    println!(
        "model: {} parameters in {} tensors",
        model.store.total_values(),
        model.store.len()
    );
    let outcome = fit(
        &mut model,
        &corpus.train,
        &corpus.val,
        &train_config,
        &config.threshold.candidates,
        &labels,
        Some(&corpus.normalizer),
        |r| {
            println!(
                "epoch {:>3}  train loss {:.4}  val ER {}  val F1 {:.3}  threshold {:.2}  patience {}",
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

    let ckpt_path = config.output_dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &outcome.checkpoint)?;
    let history_path = config.output_dir.join("history.csv");
    write_text(&history_path, &history_csv(&outcome.history))?;
    println!(
        "best epoch {} (val ER {}, F1 {:.3}), threshold {:.2}",
        outcome.best_epoch,
        outcome
            .best_er
            .map(|e| format!("{e:.3}"))
            .unwrap_or_else(|| "n/a".to_string()),
        outcome.best_f1,
        outcome.best_threshold
    );
    println!("checkpoint: {}", ckpt_path.display());
    println!("history:    {}", history_path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, CheckpointExtras)> {
    load_checkpoint(path)?.into_model()
}

/// Score one split of a manifest with a trained model.
fn evaluate_split(
    model: &Model,
    extras: &CheckpointExtras,
    manifest: &Path,
    split: Split,
    features: &crate::features::FeatureConfig,
) -> Result<(MetricReport, f64)> {
    let normalizer = extras
        .normalizer
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("checkpoint lacks a feature normalizer".to_string()))?;
    let threshold = extras
        .threshold
        .ok_or_else(|| Error::InvalidInput("checkpoint lacks a decision threshold".to_string()))?;
    let clips = prepare_split_with_normalizer(
        manifest,
        split,
        &extras.class_labels,
        normalizer,
        features,
    )?;
    if clips.is_empty() {
        return Err(Error::InvalidInput(format!(
            "manifest has no {} clips",
            split.as_str()
        )));
    }
    let params = model.detached_params();
    let mut pairs: Vec<(EventRoll, EventRoll)> = Vec::new();
    for clip in &clips {
        let probs = clip_probabilities(model, &params, &clip.features)?;
        pairs.push((clip.targets.clone(), binarize(&probs, threshold)?));
    }
    let pair_refs: Vec<(&EventRoll, &EventRoll)> = pairs.iter().map(|(a, b)| (a, b)).collect();
    Ok((MetricReport::compute(&pair_refs)?, threshold))
}

fn metric_report_text(report: &MetricReport, threshold: f64) -> String {
    let mut out = format!("threshold: {threshold:.2}\n");
    for (name, value, seg) in report.rows() {
        out.push_str(&format!(
            "{name:<10} {value:.4}   ({} segment)\n",
            if seg == 1 { "frame".to_string() } else { format!("{seg}-frame") }
        ));
    }
    if report.degenerate {
        out.push_str("note: degenerate F1 (no reference and no prediction)\n");
    }
    out
}

fn metric_report_csv(report: &MetricReport) -> String {
    let mut out = String::from("metric,value,segment_frames\n");
    for (name, value, seg) in report.rows() {
        out.push_str(&format!("{name},{value:.6},{seg}\n"));
    }
    out
}

fn cmd_evaluate(config: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let split = Split::parse(&args.split)
        .ok_or_else(|| Error::InvalidInput(format!("unknown split '{}'", args.split)))?;
    let (model, extras) = load_model(&args.checkpoint)?;
    let (manifest, _) = manifest_and_labels(config)?;
    let (report, threshold) = evaluate_split(&model, &extras, &manifest, split, &config.features)?;
    print!("{}", metric_report_text(&report, threshold));
    ensure_output_dir(config)?;
    let csv_path = config.output_dir.join(format!("metrics_{}.csv", split.as_str()));
    write_text(&csv_path, &metric_report_csv(&report))?;
    println!("report: {}", csv_path.display());
    Ok(())
}

/// Load features for `.wav` audio or a `.feat` cache file.
fn load_input_features(
    path: &Path,
    config: &RunConfig,
    extras: &CheckpointExtras,
) -> Result<FeatureMatrix> {
    let raw = match path.extension().and_then(|e| e.to_str()) {
        Some("feat") => cache::read_feature_cache(path, config.features.frame_duration_s)?,
        _ => {
            let (audio, rate) = wav::read_wav(path)?;
            logmel(&audio, rate, &config.features)?
        }
    };
    let normalizer = extras
        .normalizer
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("checkpoint lacks a feature normalizer".to_string()))?;
    apply_normalizer(normalizer, &raw)
}

fn cmd_predict(config: &RunConfig, args: &PredictArgs) -> Result<()> {
    let (model, extras) = load_model(&args.checkpoint)?;
    let threshold = extras
        .threshold
        .ok_or_else(|| Error::InvalidInput("checkpoint lacks a decision threshold".to_string()))?;
    let features = load_input_features(&args.input, config, &extras)?;
    let params = model.detached_params();
    let probs = clip_probabilities(&model, &params, &features)?;
    let roll = binarize(&probs, threshold)?;
    let events = events_from_roll(&roll, features.frame_duration_s, &extras.class_labels);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| config.output_dir.join("predictions.txt"));
    ensure_output_dir(config)?;
    save_annotations(&out, &events)?;
    println!(
        "{} events detected at threshold {:.2}",
        events.len(),
        threshold
    );
    println!("annotations: {}", out.display());
    Ok(())
}

fn cmd_inspect_routing(config: &RunConfig, args: &InspectArgs) -> Result<()> {
    let (model, extras) = load_model(&args.checkpoint)?;
    let features = load_input_features(&args.input, config, &extras)?;
    if args.frame >= features.frames {
        return Err(Error::InvalidInput(format!(
            "frame {} out of range (clip has {} frames)",
            args.frame, features.frames
        )));
    }
    // locate the evaluation window containing the frame
    let window = model.config.window_frames;
    let start = (args.frame / window) * window;
    let local = args.frame - start;
    let dummy = EventRoll::new(model.config.classes, features.frames);
    let samples = crate::features::windowize(
        &features,
        &dummy,
        window,
        crate::features::WindowMode::Eval,
    )?;
    let sample = samples
        .iter()
        .find(|s| s.start_frame == start)
        .ok_or_else(|| Error::InvalidInput("no window covers that frame".to_string()))?;

    let params = model.detached_params();
    let input = crate::tensor::Tensor::from_vec(
        vec![sample.bands, sample.window_len],
        sample.features.clone(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&params, &input, Mode::Eval, &mut rng, true)?;
    let traces = out.caps.traces.as_ref().expect("traces were requested");
    let trace = &traces[local];

    ensure_output_dir(config)?;
    let trace_path = config.output_dir.join(format!("routing_frame{}.txt", args.frame));
    let mut buf = Vec::new();
    crate::caps::write_trace(&mut buf, trace).map_err(|e| Error::io(&trace_path, e))?;
    fs::write(&trace_path, &buf).map_err(|e| Error::io(&trace_path, e))?;

    // final-iteration couplings as per-class (frequency band x channel) grids
    let last = trace.last().expect("at least one routing iteration");
    let bands = model.config.pooled_bands();
    let channels = model.config.pc_channels;
    println!(
        "frame {}: couplings after {} routing iterations ({} bands x {} channels per class)",
        args.frame,
        trace.len(),
        bands,
        channels
    );
    for (k, label) in extras.class_labels.iter().enumerate() {
        let mut grid = String::new();
        for f in 0..bands {
            let row: Vec<String> = (0..channels)
                .map(|c| format!("{:.6}", last.couplings.at(&[f * channels + c, k])))
                .collect();
            grid.push_str(&row.join("\t"));
            grid.push('\n');
        }
        let grid_path = config
            .output_dir
            .join(format!("coupling_frame{}_class_{label}.tsv", args.frame));
        write_text(&grid_path, &grid)?;
        let mean_per_band: Vec<f64> = (0..bands)
            .map(|f| {
                (0..channels)
                    .map(|c| last.couplings.at(&[f * channels + c, k]))
                    .sum::<f64>()
                    / channels as f64
            })
            .collect();
        let argmax = (0..bands)
            .max_by(|&a, &b| mean_per_band[a].partial_cmp(&mean_per_band[b]).unwrap())
            .unwrap_or(0);
        println!(
            "  {label:<18} strongest band row {argmax} (band means: {})",
            mean_per_band
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    println!("trace: {}", trace_path.display());
    Ok(())
}

fn cmd_repeat(config: &RunConfig, runs: usize) -> Result<()> {
    if runs < 2 {
        return Err(Error::InvalidInput("repeat needs at least 2 runs".to_string()));
    }
    echo_effective_config(config)?;
    let (manifest, labels) = manifest_and_labels(config)?;
    let corpus = prepare_from_manifest(&manifest, &labels, &config.features)?;
    let mut metrics = Vec::with_capacity(runs);
    for i in 0..runs {
        let seed = config.seed + i as u64;
        let mut model_config = config.model.clone();
        model_config.classes = labels.len();
        let mut train_config = config.train.clone();
        train_config.seed = seed;
        let mut model = Model::new(model_config, seed)?;
        let outcome = fit(
            &mut model,
            &corpus.train,
            &corpus.val,
            &train_config,
            &config.threshold.candidates,
            &labels,
            Some(&corpus.normalizer),
            |_| {},
        )?;
        let (best_model, extras) = outcome.checkpoint.into_model()?;
        let threshold = extras.threshold.expect("threshold stored");
        let params = best_model.detached_params();
        let mut pairs: Vec<(EventRoll, EventRoll)> = Vec::new();
        for clip in &corpus.test {
            let probs = clip_probabilities(&best_model, &params, &clip.features)?;
            pairs.push((clip.targets.clone(), binarize(&probs, threshold)?));
        }
        let pair_refs: Vec<(&EventRoll, &EventRoll)> = pairs.iter().map(|(a, b)| (a, b)).collect();
        let report = MetricReport::compute(&pair_refs)?;
        println!(
            "run {} (seed {seed}): F1_frame {:.3}, ER_frame {}, threshold {:.2}",
            i + 1,
            report.f1_frame,
            report
                .er_frame
                .map(|e| format!("{e:.3}"))
                .unwrap_or_else(|| "n/a".to_string()),
            threshold
        );
        metrics.push(RunMetrics {
            f1_frame: report.f1_frame,
            er_frame: report.er_frame.unwrap_or(f64::NAN),
            f1_second: report.f1_second,
            er_second: report.er_second.unwrap_or(f64::NAN),
        });
    }
    let summary = summarize_runs(&metrics)?;
    print!("{}", summary.table());
    let csv_path = config.output_dir.join("repeat_summary.csv");
    write_text(&csv_path, &summary.csv())?;
    println!("summary: {}", csv_path.display());
    Ok(())
}

fn cmd_extract_features(config: &RunConfig, args: &ExtractArgs) -> Result<()> {
    let (audio, rate) = wav::read_wav(&args.input)?;
    let features = logmel(&audio, rate, &config.features)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.input.with_extension("feat"));
    cache::write_feature_cache(&out, &features)?;
    println!(
        "{} bands x {} frames -> {}",
        features.bands,
        features.frames,
        out.display()
    );
    Ok(())
}
