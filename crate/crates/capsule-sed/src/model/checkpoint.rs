//! Binary checkpoints: `CSEDCKPT` magic, a version, the serialized model
//! configuration (with class labels and the chosen decision threshold),
//! named parameter blocks, batch-norm running statistics, the feature
//! normalizer, and optional optimizer state. Values are 64-bit
//! little-endian floats throughout, so round-trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::NormalizationStats;
use crate::tensor::RunningStat;

use super::{Model, ModelConfig, Param};

const MAGIC: &[u8; 8] = b"CSEDCKPT";
const VERSION: u32 = 1;

/// Adam state snapshot aligned with the parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

/// Everything needed to resume or serve a trained model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub class_labels: Vec<String>,
    pub threshold: Option<f64>,
    pub params: Vec<Param>,
    pub running: Vec<Option<RunningStat>>,
    pub normalizer: Option<NormalizationStats>,
    pub optimizer: Option<AdamSnapshot>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        class_labels: Vec<String>,
        threshold: Option<f64>,
        normalizer: Option<NormalizationStats>,
        optimizer: Option<AdamSnapshot>,
    ) -> Checkpoint {
        Checkpoint {
            config: model.config.clone(),
            class_labels,
            threshold,
            params: model.store.iter().cloned().collect(),
            running: model.running.clone(),
            normalizer,
            optimizer,
        }
    }

    /// Rebuild a model, validating every block against the configuration's
    /// expected layout.
    pub fn into_model(self) -> Result<(Model, CheckpointExtras)> {
        let mut model = Model::new(self.config, 0)?;
        if self.params.len() != model.store.len() {
            return Err(Error::InvalidInput(format!(
                "checkpoint has {} parameter blocks, architecture expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (i, block) in self.params.into_iter().enumerate() {
            let expected = model.store.get(i);
            if expected.name != block.name || expected.shape != block.shape {
                return Err(Error::InvalidInput(format!(
                    "checkpoint block '{}' {:?} does not match expected '{}' {:?}",
                    block.name,
                    block.shape,
                    expected.name,
                    expected.shape
                )));
            }
            model.store.set_values(i, block.values.as_ref().clone());
        }
        if self.running.len() != model.running.len() {
            return Err(Error::InvalidInput(
                "checkpoint running statistics do not match the block count".to_string(),
            ));
        }
        model.running = self.running;
        Ok((
            model,
            CheckpointExtras {
                class_labels: self.class_labels,
                threshold: self.threshold,
                normalizer: self.normalizer,
                optimizer: self.optimizer,
            },
        ))
    }
}

/// Non-parameter payload recovered from a checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointExtras {
    pub class_labels: Vec<String>,
    pub threshold: Option<f64>,
    pub normalizer: Option<NormalizationStats>,
    pub optimizer: Option<AdamSnapshot>,
}

impl ModelConfig {
    /// Canonical key=value serialization (also used in run-config echoes).
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("input_bands", self.input_bands.to_string());
        kv("window_frames", self.window_frames.to_string());
        kv("conv_channels", self.conv_channels.to_string());
        kv("conv_kernel", format!("{}x{}", self.conv_kernel.0, self.conv_kernel.1));
        kv(
            "freq_pools",
            self.freq_pools.map(|p| p.to_string()).join(","),
        );
        kv("pc_channels", self.pc_channels.to_string());
        kv("pc_dim", self.pc_dim.to_string());
        kv("pc_kernel", format!("{}x{}", self.pc_kernel.0, self.pc_kernel.1));
        kv("classes", self.classes.to_string());
        kv("event_dim", self.event_dim.to_string());
        kv("gru_hidden", self.gru_hidden.to_string());
        kv("fc_hidden", self.fc_hidden.to_string());
        kv("routing_iterations", self.routing_iterations.to_string());
        kv("loss_weight_bce", format!("{:?}", self.loss_weights.0));
        kv("loss_weight_margin", format!("{:?}", self.loss_weights.1));
        kv("dropout_rate", format!("{:?}", self.dropout_rate));
        kv("margin_m_plus", format!("{:?}", self.margin.m_plus));
        kv("margin_m_minus", format!("{:?}", self.margin.m_minus));
        kv("margin_lambda", format!("{:?}", self.margin.lambda));
        s
    }

    /// Parse the canonical serialization. Unknown keys are rejected;
    /// missing keys fall back to the default configuration.
    pub fn from_kv(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("model config line {} has no '=': {line}", i + 1))
            })?;
            apply_model_key(&mut cfg, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Apply a single `key = value` setting to a model configuration.
pub fn apply_model_key(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("bad {what} value '{value}'"));
    let parse_usize = |what: &str| value.parse::<usize>().map_err(|_| bad(what));
    let parse_f64 = |what: &str| value.parse::<f64>().map_err(|_| bad(what));
    let parse_kernel = |what: &str| -> Result<(usize, usize)> {
        let (a, b) = value.split_once('x').ok_or_else(|| bad(what))?;
        Ok((
            a.trim().parse().map_err(|_| bad(what))?,
            b.trim().parse().map_err(|_| bad(what))?,
        ))
    };
    match key {
        "input_bands" => cfg.input_bands = parse_usize(key)?,
        "window_frames" => cfg.window_frames = parse_usize(key)?,
        "conv_channels" => cfg.conv_channels = parse_usize(key)?,
        "conv_kernel" => cfg.conv_kernel = parse_kernel(key)?,
        "freq_pools" => {
            let parts: Vec<usize> = value
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(key))?;
            if parts.len() != 4 {
                return Err(bad(key));
            }
            cfg.freq_pools = [parts[0], parts[1], parts[2], parts[3]];
        }
        "pc_channels" => cfg.pc_channels = parse_usize(key)?,
        "pc_dim" => cfg.pc_dim = parse_usize(key)?,
        "pc_kernel" => cfg.pc_kernel = parse_kernel(key)?,
        "classes" => cfg.classes = parse_usize(key)?,
        "event_dim" => cfg.event_dim = parse_usize(key)?,
        "gru_hidden" => cfg.gru_hidden = parse_usize(key)?,
        "fc_hidden" => cfg.fc_hidden = parse_usize(key)?,
        "routing_iterations" => cfg.routing_iterations = parse_usize(key)?,
        "loss_weight_bce" => cfg.loss_weights.0 = parse_f64(key)?,
        "loss_weight_margin" => cfg.loss_weights.1 = parse_f64(key)?,
        "dropout_rate" => cfg.dropout_rate = parse_f64(key)?,
        "margin_m_plus" => cfg.margin.m_plus = parse_f64(key)?,
        "margin_m_minus" => cfg.margin.m_minus = parse_f64(key)?,
        "margin_lambda" => cfg.margin.lambda = parse_f64(key)?,
        _ => return Err(Error::Config(format!("unknown model config key '{key}'"))),
    }
    Ok(())
}

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                msg: format!("truncated at byte {}", self.pos),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        self.take(n * 8).map(|bytes| {
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format {
            path: self.path.to_path_buf(),
            msg: "invalid UTF-8 string".to_string(),
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = Writer { bytes: Vec::new() };
    w.bytes.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&ckpt.config.to_kv());
    w.u32(ckpt.class_labels.len() as u32);
    for label in &ckpt.class_labels {
        w.str(label);
    }
    match ckpt.threshold {
        Some(t) => {
            w.u8(1);
            w.f64(t);
        }
        None => {
            w.u8(0);
            w.f64(0.0);
        }
    }

    w.u32(ckpt.params.len() as u32);
    for p in &ckpt.params {
        w.str(&p.name);
        w.u32(p.shape.len() as u32);
        for &d in &p.shape {
            w.u64(d as u64);
        }
        w.f64s(&p.values);
    }

    w.u32(ckpt.running.len() as u32);
    for stat in &ckpt.running {
        match stat {
            Some(s) => {
                w.u8(1);
                w.u32(s.mean.len() as u32);
                w.f64s(&s.mean);
                w.f64s(&s.var);
            }
            None => w.u8(0),
        }
    }

    match &ckpt.normalizer {
        Some(n) => {
            w.u8(1);
            w.u32(n.mean.len() as u32);
            w.f64s(&n.mean);
            w.f64s(&n.std);
        }
        None => w.u8(0),
    }

    match &ckpt.optimizer {
        Some(opt) => {
            w.u8(1);
            w.u64(opt.step);
            for (m, v) in opt.first_moment.iter().zip(&opt.second_moment) {
                w.f64s(m);
                w.f64s(v);
            }
        }
        None => w.u8(0),
    }

    fs::write(path, w.bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let format_err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if r.take(8)? != MAGIC {
        return Err(format_err("missing CSEDCKPT magic".to_string()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let config = ModelConfig::from_kv(&r.str()?)?;
    let n_labels = r.u32()? as usize;
    let mut class_labels = Vec::with_capacity(n_labels);
    for _ in 0..n_labels {
        class_labels.push(r.str()?);
    }
    let threshold = if r.u8()? == 1 { Some(r.f64()?) } else { { r.f64()?; None } };

    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let values = r.f64s(numel)?;
        params.push(Param {
            name,
            shape,
            values: std::sync::Arc::new(values),
        });
    }

    let n_running = r.u32()? as usize;
    let mut running = Vec::with_capacity(n_running);
    for _ in 0..n_running {
        if r.u8()? == 1 {
            let c = r.u32()? as usize;
            running.push(Some(RunningStat {
                mean: r.f64s(c)?,
                var: r.f64s(c)?,
            }));
        } else {
            running.push(None);
        }
    }

    let normalizer = if r.u8()? == 1 {
        let c = r.u32()? as usize;
        Some(NormalizationStats {
            mean: r.f64s(c)?,
            std: r.f64s(c)?,
        })
    } else {
        None
    };

    let optimizer = if r.u8()? == 1 {
        let step = r.u64()?;
        let mut first = Vec::with_capacity(n_params);
        let mut second = Vec::with_capacity(n_params);
        for p in &params {
            first.push(r.f64s(p.values.len())?);
            second.push(r.f64s(p.values.len())?);
        }
        Some(AdamSnapshot {
            step,
            first_moment: first,
            second_moment: second,
        })
    } else {
        None
    };

    if r.pos != bytes.len() {
        return Err(format_err(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }

    Ok(Checkpoint {
        config,
        class_labels,
        threshold,
        params,
        running,
        normalizer,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Mode, Model};
    use crate::tensor::Tensor;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_kv_roundtrip() {
        for cfg in [ModelConfig::default(), ModelConfig::desk(4), ModelConfig::shrunken()] {
            let text = cfg.to_kv();
            let back = ModelConfig::from_kv(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn config_kv_rejects_unknown_keys() {
        assert!(ModelConfig::from_kv("nonsense = 12\n").is_err());
    }

    #[test]
    fn forward_outputs_bitwise_identical_after_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut cfg = ModelConfig::shrunken();
        cfg.dropout_rate = 0.0;
        let mut model = Model::new(cfg.clone(), 17).unwrap();

        // give the running stats some content
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(
            vec![cfg.input_bands, cfg.window_frames],
            (0..cfg.input_bands * cfg.window_frames)
                .map(|_| rng.random::<f64>())
                .collect(),
        )
        .unwrap();
        let params = model.detached_params();
        let out = model
            .forward(&params, &x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0), false)
            .unwrap();
        model.update_running_stats(&out.bn_observations, 0.1);

        let labels = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let ckpt = Checkpoint::from_model(&model, labels.clone(), Some(0.65), None, None);
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.class_labels, labels);
        assert_eq!(loaded.threshold, Some(0.65));
        let (restored, extras) = loaded.into_model().unwrap();
        assert_eq!(extras.threshold, Some(0.65));

        let before = model
            .forward(&model.detached_params(), &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0), false)
            .unwrap();
        let after = restored
            .forward(&restored.detached_params(), &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0), false)
            .unwrap();
        let a = before.head.probabilities.data();
        let b = after.head.probabilities.data();
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn optimizer_state_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig::shrunken();
        let model = Model::new(cfg, 3).unwrap();
        let opt = AdamSnapshot {
            step: 41,
            first_moment: model.store.iter().map(|p| vec![0.25; p.values.len()]).collect(),
            second_moment: model.store.iter().map(|p| vec![0.5; p.values.len()]).collect(),
        };
        let ckpt = Checkpoint::from_model(&model, vec!["x".into()], None, None, Some(opt.clone()));
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.optimizer, Some(opt));
        assert_eq!(loaded.threshold, None);
    }

    #[test]
    fn corrupted_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::new(ModelConfig::shrunken(), 3).unwrap();
        let ckpt = Checkpoint::from_model(&model, vec![], None, None, None);
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
