//! Audio-to-feature pipeline: normalized log mel band energies split into
//! fixed-length training samples.

pub mod cache;
pub mod mel;
pub mod wav;

use crate::error::{Error, Result};
use crate::roll::EventRoll;

use mel::MelFilterBank;

/// Feature extraction settings. 80 mel bands over 40 ms non-overlapping
/// frames at 44.1 kHz; the log floor keeps silence finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub mel_bands: usize,
    pub sample_rate: u32,
    pub frame_duration_s: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            mel_bands: 80,
            sample_rate: 44100,
            frame_duration_s: 0.040,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn frame_len(&self) -> usize {
        (self.frame_duration_s * self.sample_rate as f64).round() as usize
    }

    pub fn n_fft(&self) -> usize {
        self.frame_len().next_power_of_two()
    }

    pub fn filter_bank(&self) -> MelFilterBank {
        MelFilterBank::new(self.mel_bands, self.n_fft(), self.sample_rate as f64)
    }
}

/// Log mel band energies for one clip: `F x T` values, row-major by band.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub bands: usize,
    pub frames: usize,
    pub values: Vec<f64>,
    pub frame_duration_s: f64,
}

impl FeatureMatrix {
    pub fn new(
        bands: usize,
        frames: usize,
        values: Vec<f64>,
        frame_duration_s: f64,
    ) -> Result<FeatureMatrix> {
        if values.len() != bands * frames {
            return Err(Error::shape(
                "feature_matrix",
                format!("{} x {} vs {} values", bands, frames, values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".to_string()));
        }
        Ok(FeatureMatrix {
            bands,
            frames,
            values,
            frame_duration_s,
        })
    }

    pub fn get(&self, band: usize, frame: usize) -> f64 {
        self.values[band * self.frames + frame]
    }
}

/// Extract log mel band energies from mono PCM audio.
pub fn logmel(audio: &[f64], sample_rate: u32, config: &FeatureConfig) -> Result<FeatureMatrix> {
    if audio.is_empty() {
        return Err(Error::InvalidInput("empty audio".to_string()));
    }
    if audio.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("audio samples".to_string()));
    }
    if sample_rate != config.sample_rate {
        return Err(Error::InvalidInput(format!(
            "expected {} Hz audio, got {} Hz",
            config.sample_rate, sample_rate
        )));
    }
    let frame_len = config.frame_len();
    if audio.len() < frame_len {
        return Err(Error::InvalidInput(format!(
            "audio shorter than one {} ms frame ({} < {} samples)",
            config.frame_duration_s * 1000.0,
            audio.len(),
            frame_len
        )));
    }

    let bank = config.filter_bank();
    let spectra = mel::magnitude_frames(audio, frame_len, config.n_fft());
    let frames = spectra.len();
    let mut values = vec![0.0; config.mel_bands * frames];
    for (t, spectrum) in spectra.iter().enumerate() {
        let energies = bank.apply(spectrum);
        for (m, &e) in energies.iter().enumerate() {
            values[m * frames + t] = e.max(config.log_floor).ln();
        }
    }
    FeatureMatrix::new(config.mel_bands, frames, values, config.frame_duration_s)
}

/// Per-band standardization statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations are floored here so constant bands stay usable.
pub const STD_FLOOR: f64 = 1e-8;

/// Pool per-band mean and standard deviation over every frame of the given
/// clips (population statistics).
pub fn fit_normalizer(train: &[FeatureMatrix]) -> Result<NormalizationStats> {
    let bands = train
        .first()
        .ok_or_else(|| Error::InvalidInput("no clips to fit normalizer on".to_string()))?
        .bands;
    let total_frames: usize = train.iter().map(|f| f.frames).sum();
    if total_frames == 0 {
        return Err(Error::InvalidInput("no frames to fit normalizer on".to_string()));
    }
    let mut mean = vec![0.0; bands];
    for fm in train {
        if fm.bands != bands {
            return Err(Error::shape(
                "fit_normalizer",
                format!("{} vs {} bands", fm.bands, bands),
            ));
        }
        for b in 0..bands {
            for t in 0..fm.frames {
                mean[b] += fm.get(b, t);
            }
        }
    }
    for m in &mut mean {
        *m /= total_frames as f64;
    }
    let mut var = vec![0.0; bands];
    for fm in train {
        for b in 0..bands {
            for t in 0..fm.frames {
                let d = fm.get(b, t) - mean[b];
                var[b] += d * d;
            }
        }
    }
    let std = var
        .iter()
        .map(|v| (v / total_frames as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormalizationStats { mean, std })
}

/// Subtract the per-band mean and divide by the per-band deviation.
pub fn apply_normalizer(stats: &NormalizationStats, fm: &FeatureMatrix) -> Result<FeatureMatrix> {
    if stats.mean.len() != fm.bands {
        return Err(Error::shape(
            "apply_normalizer",
            format!("stats cover {} bands, clip has {}", stats.mean.len(), fm.bands),
        ));
    }
    let mut values = fm.values.clone();
    for b in 0..fm.bands {
        let (m, s) = (stats.mean[b], stats.std[b]);
        for t in 0..fm.frames {
            values[b * fm.frames + t] = (values[b * fm.frames + t] - m) / s;
        }
    }
    FeatureMatrix::new(fm.bands, fm.frames, values, fm.frame_duration_s)
}

/// One fixed-length training/evaluation window.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `F x T` feature values, zero-padded past the clip end.
    pub features: Vec<f64>,
    pub bands: usize,
    pub window_len: usize,
    /// Targets aligned to the window.
    pub targets: EventRoll,
    /// Frame validity: `false` marks zero-padded frames that must be
    /// excluded from losses and metrics.
    pub mask: Vec<bool>,
    /// First clip frame covered by this window.
    pub start_frame: usize,
}

/// Windowing mode: overlapping windows for training, a non-overlapping
/// tiling (with a zero-padded masked tail) for validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    Train { hop: usize },
    Eval,
}

/// Split one clip's features and targets into `window_len`-frame samples.
pub fn windowize(
    features: &FeatureMatrix,
    targets: &EventRoll,
    window_len: usize,
    mode: WindowMode,
) -> Result<Vec<Sample>> {
    let t_total = features.frames;
    if t_total < 1 {
        return Err(Error::InvalidInput("clip has no frames".to_string()));
    }
    if targets.frames() != t_total {
        return Err(Error::shape(
            "windowize",
            format!(
                "targets cover {} frames, features {}",
                targets.frames(),
                t_total
            ),
        ));
    }
    if window_len < 1 {
        return Err(Error::Config("window length must be positive".to_string()));
    }
    let starts: Vec<usize> = match mode {
        WindowMode::Train { hop } => {
            if hop < 1 || hop > window_len {
                return Err(Error::Config(format!(
                    "train hop must be in [1, {window_len}], got {hop}"
                )));
            }
            if t_total < window_len {
                // short clip: keep it as a single padded window
                vec![0]
            } else {
                (0..=t_total - window_len).step_by(hop).collect()
            }
        }
        WindowMode::Eval => (0..t_total).step_by(window_len).collect(),
    };

    let mut samples = Vec::with_capacity(starts.len());
    for start in starts {
        let mut window = vec![0.0; features.bands * window_len];
        let valid = (t_total - start).min(window_len);
        for b in 0..features.bands {
            for t in 0..valid {
                window[b * window_len + t] = features.get(b, start + t);
            }
        }
        let mask: Vec<bool> = (0..window_len).map(|t| t < valid).collect();
        samples.push(Sample {
            features: window,
            bands: features.bands,
            window_len,
            targets: targets.window(start, window_len),
            mask,
            start_frame: start,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, seconds: f64, sr: u32) -> Vec<f64> {
        let n = (seconds * sr as f64) as usize;
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() * 0.5)
            .collect()
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let cfg = FeatureConfig::default();
        let audio = vec![0.0; 44100];
        let fm = logmel(&audio, 44100, &cfg).unwrap();
        let expect = cfg.log_floor.ln();
        assert!(fm.values.iter().all(|&v| v == expect));
    }

    #[test]
    fn empty_and_nonfinite_audio_rejected() {
        let cfg = FeatureConfig::default();
        assert!(logmel(&[], 44100, &cfg).is_err());
        assert!(logmel(&[0.0, f64::NAN], 44100, &cfg).is_err());
        assert!(logmel(&[0.0; 44100], 22050, &cfg).is_err());
    }

    #[test]
    fn two_seconds_gives_fifty_frames() {
        let cfg = FeatureConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let audio: Vec<f64> = (0..88200).map(|_| rng.random::<f64>() * 0.2 - 0.1).collect();
        let fm = logmel(&audio, 44100, &cfg).unwrap();
        assert_eq!(fm.frames, 50);
        assert_eq!(fm.bands, 80);
    }

    #[test]
    fn pure_tone_peaks_in_its_mel_band() {
        let cfg = FeatureConfig::default();
        let fm = logmel(&tone(1000.0, 1.0, 44100), 44100, &cfg).unwrap();
        let expected_band = cfg.filter_bank().dominant_band(1000.0);
        for t in 0..fm.frames {
            let argmax = (0..fm.bands)
                .max_by(|&a, &b| fm.get(a, t).partial_cmp(&fm.get(b, t)).unwrap())
                .unwrap();
            assert!(
                (argmax as isize - expected_band as isize).abs() <= 1,
                "frame {t}: band {argmax}, filter oracle says {expected_band}"
            );
        }
    }

    #[test]
    fn hop_shift_moves_features_by_one_frame() {
        let cfg = FeatureConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let audio: Vec<f64> = (0..44100).map(|_| rng.random::<f64>() - 0.5).collect();
        let base = logmel(&audio, 44100, &cfg).unwrap();
        let shifted = logmel(&audio[cfg.frame_len()..], 44100, &cfg).unwrap();
        for b in 0..base.bands {
            for t in 0..shifted.frames.min(base.frames - 1) {
                assert_abs_diff_eq!(shifted.get(b, t), base.get(b, t + 1), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn normalizer_standardizes_training_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clips: Vec<FeatureMatrix> = (0..4)
            .map(|_| {
                let frames = rng.random_range(20..60);
                let values = (0..5 * frames)
                    .map(|_| rng.random::<f64>() * 6.0 - 10.0)
                    .collect();
                FeatureMatrix::new(5, frames, values, 0.04).unwrap()
            })
            .collect();
        let stats = fit_normalizer(&clips).unwrap();
        let normed: Vec<FeatureMatrix> = clips
            .iter()
            .map(|c| apply_normalizer(&stats, c).unwrap())
            .collect();
        let total: usize = normed.iter().map(|c| c.frames).sum();
        for b in 0..5 {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for c in &normed {
                for t in 0..c.frames {
                    sum += c.get(b, t);
                    sumsq += c.get(b, t) * c.get(b, t);
                }
            }
            let mean = sum / total as f64;
            let std = (sumsq / total as f64 - mean * mean).sqrt();
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-6);
            assert_abs_diff_eq!(std, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn constant_band_normalizes_to_zero() {
        let fm = FeatureMatrix::new(1, 10, vec![4.25; 10], 0.04).unwrap();
        let stats = fit_normalizer(std::slice::from_ref(&fm)).unwrap();
        assert_eq!(stats.std[0], STD_FLOOR);
        let normed = apply_normalizer(&stats, &fm).unwrap();
        assert!(normed.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standard_band_unchanged() {
        // mean 0, population std 1 already
        let vals = vec![-1.0, 1.0, -1.0, 1.0];
        let fm = FeatureMatrix::new(1, 4, vals.clone(), 0.04).unwrap();
        let stats = fit_normalizer(std::slice::from_ref(&fm)).unwrap();
        let normed = apply_normalizer(&stats, &fm).unwrap();
        for (a, b) in normed.values.iter().zip(&vals) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    fn fm_with_frames(frames: usize) -> FeatureMatrix {
        let values = (0..3 * frames).map(|i| i as f64).collect();
        FeatureMatrix::new(3, frames, values, 0.04).unwrap()
    }

    #[test]
    fn eval_windows_tile_without_overlap() {
        let fm = fm_with_frames(256);
        let roll = EventRoll::new(2, 256);
        let samples = windowize(&fm, &roll, 128, WindowMode::Eval).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].start_frame, 0);
        assert_eq!(samples[1].start_frame, 128);
        assert!(samples.iter().all(|s| s.mask.iter().all(|&m| m)));
    }

    #[test]
    fn train_windows_advance_by_hop() {
        let fm = fm_with_frames(256);
        let roll = EventRoll::new(2, 256);
        let samples = windowize(&fm, &roll, 128, WindowMode::Train { hop: 64 }).unwrap();
        let starts: Vec<usize> = samples.iter().map(|s| s.start_frame).collect();
        assert_eq!(starts, vec![0, 64, 128]);
    }

    #[test]
    fn eval_tail_is_padded_and_masked() {
        let fm = fm_with_frames(100);
        let mut roll = EventRoll::new(2, 100);
        roll.set(1, 99, true);
        let samples = windowize(&fm, &roll, 128, WindowMode::Eval).unwrap();
        assert_eq!(samples.len(), 1);
        let s = &samples[0];
        assert_eq!(s.mask.iter().filter(|&&m| !m).count(), 28);
        assert!(s.mask[99] && !s.mask[100]);
        // padded features are zero, targets carried over
        assert_eq!(s.features[0 * 128 + 100], 0.0);
        assert!(s.targets.get(1, 99));
    }

    #[test]
    fn eval_windows_partition_the_clip() {
        let fm = fm_with_frames(300);
        let roll = EventRoll::new(1, 300);
        let samples = windowize(&fm, &roll, 128, WindowMode::Eval).unwrap();
        let mut seen = vec![0usize; 300];
        for s in &samples {
            for (t, &valid) in s.mask.iter().enumerate() {
                if valid {
                    seen[s.start_frame + t] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn windowize_validates_inputs() {
        let fm = fm_with_frames(10);
        let roll = EventRoll::new(1, 9);
        assert!(windowize(&fm, &roll, 128, WindowMode::Eval).is_err());
        let roll = EventRoll::new(1, 10);
        assert!(windowize(&fm, &roll, 128, WindowMode::Train { hop: 0 }).is_err());
        assert!(windowize(&fm, &roll, 128, WindowMode::Train { hop: 129 }).is_err());
    }
}
