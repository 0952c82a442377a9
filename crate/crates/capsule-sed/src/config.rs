//! Run configuration: a plain-text key-value file with `[section]`
//! headers, merged with command-line overrides. The effective merged
//! configuration is echoed into the output directory for provenance.

use std::fs;
use std::path::{Path, PathBuf};

use crate::datagen::{default_classes, CorpusSpec};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::checkpoint::apply_model_key;
use crate::model::ModelConfig;
use crate::threshold::ThresholdConfig;
use crate::train::TrainConfig;

/// Everything a run needs, with desk-scale defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
    /// Manifest of an existing corpus (for train / evaluate / repeat).
    pub manifest: Option<PathBuf>,
    /// Class inventory file; defaults to `classes.txt` next to the manifest.
    pub classes_file: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub splits: crate::corpus::SplitCounts,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub threshold: ThresholdConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: None,
            output_dir: PathBuf::from("runs/latest"),
            manifest: None,
            classes_file: None,
            corpus: CorpusSpec::default(),
            splits: crate::corpus::SplitCounts::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::desk(default_classes().len()),
            train: TrainConfig::default(),
            threshold: ThresholdConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a config file and fold it over the defaults.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| parse_err("unterminated section header".to_string()))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected 'key = value', got '{line}'")))?;
            config
                .apply(&section, key.trim(), value.trim())
                .map_err(|e| parse_err(e.to_string()))?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Apply one `section.key=value` override (CLI `--set`).
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{spec}' must look like section.key=value"))
        })?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| {
            Error::Config(format!("override key '{path}' must look like section.key"))
        })?;
        self.apply(section.trim(), key.trim(), value.trim())
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad {what} value '{value}'"));
        match section {
            "run" => match key {
                "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
                "threads" => self.threads = Some(value.parse().map_err(|_| bad("threads"))?),
                "output" => self.output_dir = PathBuf::from(value),
                _ => return Err(Error::Config(format!("unknown key run.{key}"))),
            },
            "corpus" => match key {
                "manifest" => self.manifest = Some(PathBuf::from(value)),
                "classes" => self.classes_file = Some(PathBuf::from(value)),
                "clips_train" => self.splits.train = value.parse().map_err(|_| bad(key))?,
                "clips_val" => self.splits.val = value.parse().map_err(|_| bad(key))?,
                "clips_test" => self.splits.test = value.parse().map_err(|_| bad(key))?,
                "clip_seconds" => self.corpus.clip_seconds = value.parse().map_err(|_| bad(key))?,
                "max_polyphony" => {
                    self.corpus.max_polyphony = value.parse().map_err(|_| bad(key))?
                }
                "events_min" => {
                    self.corpus.events_per_clip.0 = value.parse().map_err(|_| bad(key))?
                }
                "events_max" => {
                    self.corpus.events_per_clip.1 = value.parse().map_err(|_| bad(key))?
                }
                _ => return Err(Error::Config(format!("unknown key corpus.{key}"))),
            },
            "features" => match key {
                "mel_bands" => self.features.mel_bands = value.parse().map_err(|_| bad(key))?,
                "sample_rate" => self.features.sample_rate = value.parse().map_err(|_| bad(key))?,
                "frame_duration_s" => {
                    self.features.frame_duration_s = value.parse().map_err(|_| bad(key))?
                }
                "log_floor" => self.features.log_floor = value.parse().map_err(|_| bad(key))?,
                _ => return Err(Error::Config(format!("unknown key features.{key}"))),
            },
            "model" => match key {
                "preset" => {
                    self.model = match value {
                        "desk" => ModelConfig::desk(self.model.classes),
                        "paper" => ModelConfig {
                            classes: self.model.classes,
                            ..ModelConfig::default()
                        },
                        _ => return Err(bad("preset (desk|paper)")),
                    }
                }
                _ => apply_model_key(&mut self.model, key, value)?,
            },
            "train" => match key {
                "learning_rate" => {
                    self.train.learning_rate = value.parse().map_err(|_| bad(key))?
                }
                "beta1" => self.train.beta1 = value.parse().map_err(|_| bad(key))?,
                "beta2" => self.train.beta2 = value.parse().map_err(|_| bad(key))?,
                "epsilon" => self.train.epsilon = value.parse().map_err(|_| bad(key))?,
                "batch_size" => self.train.batch_size = value.parse().map_err(|_| bad(key))?,
                "patience" => self.train.patience = value.parse().map_err(|_| bad(key))?,
                "max_epochs" => self.train.max_epochs = value.parse().map_err(|_| bad(key))?,
                "train_hop" => self.train.train_hop = value.parse().map_err(|_| bad(key))?,
                "bn_momentum" => self.train.bn_momentum = value.parse().map_err(|_| bad(key))?,
                _ => return Err(Error::Config(format!("unknown key train.{key}"))),
            },
            "threshold" => match key {
                "candidates" => {
                    let parsed: std::result::Result<Vec<f64>, _> =
                        value.split(',').map(|v| v.trim().parse::<f64>()).collect();
                    self.threshold.candidates = parsed.map_err(|_| bad(key))?;
                }
                _ => return Err(Error::Config(format!("unknown key threshold.{key}"))),
            },
            _ => return Err(Error::Config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.threshold.validate()?;
        if self.features.mel_bands != self.model.input_bands {
            return Err(Error::Config(format!(
                "model expects {} input bands but features produce {}",
                self.model.input_bands, self.features.mel_bands
            )));
        }
        Ok(())
    }

    /// Corpus spec with the clip count implied by the split counts and the
    /// run seed.
    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            n_clips: self.splits.total(),
            seed: self.seed,
            ..self.corpus.clone()
        }
    }

    /// Serialize the effective configuration in the file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("[run]\n");
        s.push_str(&format!("seed = {}\n", self.seed));
        if let Some(t) = self.threads {
            s.push_str(&format!("threads = {t}\n"));
        }
        s.push_str(&format!("output = {}\n", self.output_dir.display()));
        s.push_str("\n[corpus]\n");
        if let Some(m) = &self.manifest {
            s.push_str(&format!("manifest = {}\n", m.display()));
        }
        if let Some(c) = &self.classes_file {
            s.push_str(&format!("classes = {}\n", c.display()));
        }
        s.push_str(&format!("clips_train = {}\n", self.splits.train));
        s.push_str(&format!("clips_val = {}\n", self.splits.val));
        s.push_str(&format!("clips_test = {}\n", self.splits.test));
        s.push_str(&format!("clip_seconds = {:?}\n", self.corpus.clip_seconds));
        s.push_str(&format!("max_polyphony = {}\n", self.corpus.max_polyphony));
        s.push_str(&format!("events_min = {}\n", self.corpus.events_per_clip.0));
        s.push_str(&format!("events_max = {}\n", self.corpus.events_per_clip.1));
        s.push_str("\n[features]\n");
        s.push_str(&format!("mel_bands = {}\n", self.features.mel_bands));
        s.push_str(&format!("sample_rate = {}\n", self.features.sample_rate));
        s.push_str(&format!(
            "frame_duration_s = {:?}\n",
            self.features.frame_duration_s
        ));
        s.push_str(&format!("log_floor = {:?}\n", self.features.log_floor));
        s.push_str("\n[model]\n");
        s.push_str(&self.model.to_kv());
        s.push_str("\n[train]\n");
        s.push_str(&format!("learning_rate = {:?}\n", self.train.learning_rate));
        s.push_str(&format!("beta1 = {:?}\n", self.train.beta1));
        s.push_str(&format!("beta2 = {:?}\n", self.train.beta2));
        s.push_str(&format!("epsilon = {:?}\n", self.train.epsilon));
        s.push_str(&format!("batch_size = {}\n", self.train.batch_size));
        s.push_str(&format!("patience = {}\n", self.train.patience));
        s.push_str(&format!("max_epochs = {}\n", self.train.max_epochs));
        s.push_str(&format!("train_hop = {}\n", self.train.train_hop));
        s.push_str(&format!("bn_momentum = {:?}\n", self.train.bn_momentum));
        s.push_str("\n[threshold]\n");
        s.push_str(&format!(
            "candidates = {}\n",
            self.threshold
                .candidates
                .iter()
                .map(|c| format!("{c:?}"))
                .collect::<Vec<_>>()
                .join(",")
        ));
        s
    }
}
