//! Synthetic polyphonic corpus generation with exact ground truth.
//!
//! Each class occupies a configured spectral region (band-limited noise or
//! a harmonic tone), so overlapping events remain separable in the mel
//! domain. Clips draw independently placed events, capped at a maximum
//! polyphony; annotations are exact by construction and every clip derives
//! its own seed, so generation is deterministic and order-independent.

pub mod annotations;
pub mod manifest;

use std::f64::consts::PI;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use annotations::{
    events_from_roll, load_annotations, roll_from_annotations, save_annotations, AnnotationEvent,
};
pub use manifest::{read_manifest, write_manifest, ManifestEntry, Split};

/// Spectral placement of one synthetic class.
#[derive(Debug, Clone, PartialEq)]
pub enum SpectralProfile {
    /// Sum of random-phase sinusoids spread uniformly over a band.
    BandNoise { low_hz: f64, high_hz: f64 },
    /// Harmonic stack with a random fundamental.
    HarmonicTone {
        f0_low_hz: f64,
        f0_high_hz: f64,
        harmonics: usize,
    },
}

impl SpectralProfile {
    /// Frequency band this profile occupies.
    pub fn band(&self) -> (f64, f64) {
        match *self {
            SpectralProfile::BandNoise { low_hz, high_hz } => (low_hz, high_hz),
            SpectralProfile::HarmonicTone {
                f0_low_hz,
                f0_high_hz,
                harmonics,
            } => (f0_low_hz, f0_high_hz * harmonics as f64),
        }
    }
}

/// One synthesizable event class.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClass {
    pub label: String,
    pub profile: SpectralProfile,
    pub duration_range_s: (f64, f64),
    pub amplitude_range: (f64, f64),
}

impl SyntheticClass {
    fn validate(&self, nyquist: f64) -> Result<()> {
        let (lo, hi) = self.profile.band();
        if !(0.0 <= lo && lo < hi && hi <= nyquist) {
            return Err(Error::Config(format!(
                "class '{}' band {lo}..{hi} Hz outside [0, {nyquist}]",
                self.label
            )));
        }
        let (dlo, dhi) = self.duration_range_s;
        if !(0.0 < dlo && dlo <= dhi) {
            return Err(Error::Config(format!(
                "class '{}' has bad duration range {dlo}..{dhi}",
                self.label
            )));
        }
        let (alo, ahi) = self.amplitude_range;
        if !(0.0 < alo && alo <= ahi) {
            return Err(Error::Config(format!(
                "class '{}' has bad amplitude range {alo}..{ahi}",
                self.label
            )));
        }
        Ok(())
    }
}

/// The default desk corpus inventory: four spectrally distinct classes,
/// one pinned to the low band and one covering nearly the full range.
pub fn default_classes() -> Vec<SyntheticClass> {
    vec![
        SyntheticClass {
            label: "low_thump".to_string(),
            profile: SpectralProfile::BandNoise {
                low_hz: 60.0,
                high_hz: 400.0,
            },
            duration_range_s: (0.4, 1.5),
            amplitude_range: (0.15, 0.30),
        },
        SyntheticClass {
            label: "mid_tone".to_string(),
            profile: SpectralProfile::HarmonicTone {
                f0_low_hz: 500.0,
                f0_high_hz: 900.0,
                harmonics: 3,
            },
            duration_range_s: (0.3, 1.2),
            amplitude_range: (0.12, 0.25),
        },
        SyntheticClass {
            label: "high_hiss".to_string(),
            profile: SpectralProfile::BandNoise {
                low_hz: 5000.0,
                high_hz: 12000.0,
            },
            duration_range_s: (0.3, 1.0),
            amplitude_range: (0.12, 0.25),
        },
        SyntheticClass {
            label: "broadband_burst".to_string(),
            profile: SpectralProfile::BandNoise {
                low_hz: 100.0,
                high_hz: 18000.0,
            },
            duration_range_s: (0.2, 0.8),
            amplitude_range: (0.15, 0.30),
        },
    ]
}

/// Corpus generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub classes: Vec<SyntheticClass>,
    pub n_clips: usize,
    pub clip_seconds: f64,
    pub max_polyphony: usize,
    /// Inclusive range of events drawn per clip.
    pub events_per_clip: (usize, usize),
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            classes: default_classes(),
            n_clips: 30,
            clip_seconds: 10.0,
            max_polyphony: 3,
            events_per_clip: (6, 12),
            sample_rate: 44100,
            seed: 0,
        }
    }
}

/// One generated clip: mono audio plus its exact annotations.
#[derive(Debug, Clone)]
pub struct GeneratedClip {
    pub audio: Vec<f64>,
    pub events: Vec<AnnotationEvent>,
}

/// Labels of the class inventory, in index order.
pub fn class_labels(classes: &[SyntheticClass]) -> Vec<String> {
    classes.iter().map(|c| c.label.clone()).collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seed for stream `index` under a master seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

fn quantize_ms(seconds: f64) -> f64 {
    (seconds * 1000.0).round() / 1000.0
}

/// Generate the whole corpus. Each clip derives its own RNG stream, so
/// clip order and worker count cannot change the output.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<GeneratedClip>> {
    let nyquist = spec.sample_rate as f64 / 2.0;
    if spec.classes.is_empty() {
        return Err(Error::Config("no synthetic classes configured".to_string()));
    }
    for class in &spec.classes {
        class.validate(nyquist)?;
        if class.duration_range_s.0 > spec.clip_seconds {
            return Err(Error::Config(format!(
                "impossible packing: class '{}' minimum duration {} s exceeds clip length {} s",
                class.label, class.duration_range_s.0, spec.clip_seconds
            )));
        }
    }
    if spec.max_polyphony < 1 {
        return Err(Error::Config("max polyphony must be at least 1".to_string()));
    }
    if spec.events_per_clip.0 > spec.events_per_clip.1 || spec.events_per_clip.1 == 0 {
        return Err(Error::Config(format!(
            "bad events-per-clip range {:?}",
            spec.events_per_clip
        )));
    }

    (0..spec.n_clips)
        .map(|i| generate_clip(spec, derive_seed(spec.seed, i as u64)))
        .collect()
}

/// Highest number of events simultaneously active anywhere in `(on, off)`,
/// counting all classes.
fn peak_overlap(events: &[AnnotationEvent], on: f64, off: f64) -> usize {
    let mut points: Vec<f64> = vec![on];
    for e in events {
        if e.onset_s > on && e.onset_s < off {
            points.push(e.onset_s);
        }
    }
    points
        .iter()
        .map(|&p| {
            events
                .iter()
                .filter(|e| e.onset_s <= p && p < e.offset_s)
                .count()
        })
        .max()
        .unwrap_or(0)
}

fn generate_clip(spec: &CorpusSpec, seed: u64) -> Result<GeneratedClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = spec.sample_rate as f64;
    let n_samples = (spec.clip_seconds * sr).round() as usize;
    let mut audio = vec![0.0; n_samples];
    let mut events: Vec<AnnotationEvent> = Vec::new();

    let n_events = rng.random_range(spec.events_per_clip.0..=spec.events_per_clip.1);
    for _ in 0..n_events {
        let class_ix = rng.random_range(0..spec.classes.len());
        let class = &spec.classes[class_ix];
        let (dlo, dhi) = class.duration_range_s;
        let duration = quantize_ms(rng.random_range(dlo..=dhi).min(spec.clip_seconds));
        let amp = rng.random_range(class.amplitude_range.0..=class.amplitude_range.1);

        // rejection-sample an onset that respects the polyphony cap
        let mut placed = None;
        for _ in 0..50 {
            let onset = quantize_ms(rng.random_range(0.0..=(spec.clip_seconds - duration)));
            let offset = quantize_ms(onset + duration);
            if peak_overlap(&events, onset, offset) < spec.max_polyphony {
                placed = Some((onset, offset));
                break;
            }
        }
        let Some((onset, offset)) = placed else { continue };
        synthesize_event(&mut audio, sr, onset, offset, amp, &class.profile, &mut rng);
        events.push(AnnotationEvent::new(onset, offset, class.label.clone())?);
    }

    events.sort_by(|a, b| {
        a.onset_s
            .partial_cmp(&b.onset_s)
            .unwrap()
            .then(a.offset_s.partial_cmp(&b.offset_s).unwrap())
            .then(a.label.cmp(&b.label))
    });
    Ok(GeneratedClip { audio, events })
}

fn synthesize_event(
    audio: &mut [f64],
    sr: f64,
    onset_s: f64,
    offset_s: f64,
    amplitude: f64,
    profile: &SpectralProfile,
    rng: &mut ChaCha8Rng,
) {
    let start = (onset_s * sr).round() as usize;
    let end = ((offset_s * sr).round() as usize).min(audio.len());
    if start >= end {
        return;
    }
    let len = end - start;

    // component frequencies and phases
    let components: Vec<(f64, f64, f64)> = match *profile {
        SpectralProfile::BandNoise { low_hz, high_hz } => {
            let n = 40;
            let a = amplitude * (2.0 / n as f64).sqrt();
            (0..n)
                .map(|_| {
                    (
                        rng.random_range(low_hz..=high_hz),
                        rng.random_range(0.0..2.0 * PI),
                        a,
                    )
                })
                .collect()
        }
        SpectralProfile::HarmonicTone {
            f0_low_hz,
            f0_high_hz,
            harmonics,
        } => {
            let f0 = rng.random_range(f0_low_hz..=f0_high_hz);
            let norm: f64 = (1..=harmonics).map(|k| 1.0 / (k * k) as f64).sum::<f64>().sqrt();
            (1..=harmonics)
                .map(|k| {
                    (
                        f0 * k as f64,
                        rng.random_range(0.0..2.0 * PI),
                        amplitude * (2.0f64).sqrt() / (k as f64 * norm),
                    )
                })
                .collect()
        }
    };

    let fade = ((0.010 * sr) as usize).min(len / 2).max(1);
    for i in 0..len {
        let t = i as f64 / sr;
        let mut v = 0.0;
        for &(freq, phase, a) in &components {
            v += a * (2.0 * PI * freq * t + phase).sin();
        }
        let env = if i < fade {
            i as f64 / fade as f64
        } else if i >= len - fade {
            (len - i) as f64 / fade as f64
        } else {
            1.0
        };
        audio[start + i] += v * env;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{logmel, FeatureConfig};

    fn small_spec(max_polyphony: usize, seed: u64) -> CorpusSpec {
        CorpusSpec {
            n_clips: 4,
            clip_seconds: 5.0,
            max_polyphony,
            events_per_clip: (4, 8),
            seed,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn monophonic_corpus_never_overlaps() {
        let clips = generate_corpus(&small_spec(1, 11)).unwrap();
        for clip in &clips {
            for (i, a) in clip.events.iter().enumerate() {
                for b in clip.events.iter().skip(i + 1) {
                    let overlap = a.onset_s < b.offset_s && b.onset_s < a.offset_s;
                    assert!(!overlap, "{a:?} overlaps {b:?}");
                }
            }
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = generate_corpus(&small_spec(3, 42)).unwrap();
        let b = generate_corpus(&small_spec(3, 42)).unwrap();
        for (ca, cb) in a.iter().zip(&b) {
            assert_eq!(ca.events, cb.events);
            assert!(ca.audio.iter().zip(&cb.audio).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let c = generate_corpus(&small_spec(3, 43)).unwrap();
        assert_ne!(a[0].events, c[0].events);
    }

    #[test]
    fn polyphonic_corpus_reaches_overlap() {
        // 20 clips x 10 s, 4 classes, polyphony 3: somewhere at least two
        // classes must be simultaneously active
        let spec = CorpusSpec {
            n_clips: 20,
            seed: 7,
            ..CorpusSpec::default()
        };
        let clips = generate_corpus(&spec).unwrap();
        let labels = class_labels(&spec.classes);
        let mut best = 0;
        for clip in &clips {
            let frames = (spec.clip_seconds / 0.04).round() as usize;
            let roll = roll_from_annotations(&clip.events, 0.04, frames, &labels).unwrap();
            best = best.max(roll.max_polyphony());
        }
        assert!(best >= 2, "max simultaneous classes was {best}");
        assert!(best <= 3, "polyphony cap violated: {best}");
    }

    #[test]
    fn polyphony_cap_is_respected() {
        let clips = generate_corpus(&small_spec(2, 5)).unwrap();
        for clip in &clips {
            for e in &clip.events {
                // at any instant inside this event, at most 2 events overlap
                let mid = (e.onset_s + e.offset_s) / 2.0;
                let count = clip
                    .events
                    .iter()
                    .filter(|x| x.onset_s <= mid && mid < x.offset_s)
                    .count();
                assert!(count <= 2, "overlap {count} at {mid}");
            }
        }
    }

    #[test]
    fn impossible_packing_rejected() {
        let mut spec = small_spec(2, 1);
        spec.classes[0].duration_range_s = (9.0, 10.0);
        spec.clip_seconds = 5.0;
        let err = generate_corpus(&spec).unwrap_err();
        assert!(format!("{err}").contains("impossible packing"));
    }

    #[test]
    fn events_land_in_their_spectral_band() {
        // one event per clip, no overlap: in-band log energy must beat
        // out-of-band log energy during active frames
        let spec = CorpusSpec {
            classes: default_classes(),
            n_clips: 8,
            clip_seconds: 3.0,
            max_polyphony: 1,
            events_per_clip: (1, 1),
            sample_rate: 44100,
            seed: 21,
        };
        let clips = generate_corpus(&spec).unwrap();
        let cfg = FeatureConfig::default();
        let bank = cfg.filter_bank();
        let mut checked = 0;
        for clip in &clips {
            let fm = logmel(&clip.audio, 44100, &cfg).unwrap();
            for e in &clip.events {
                let class = spec.classes.iter().find(|c| c.label == e.label).unwrap();
                let (lo, hi) = class.profile.band();
                let in_band: Vec<usize> = (0..cfg.mel_bands)
                    .filter(|&m| {
                        let peak = bank.peak_frequency(m);
                        peak >= lo && peak <= hi
                    })
                    .collect();
                let first = (e.onset_s / 0.04).ceil() as usize;
                let last = ((e.offset_s / 0.04).floor() as usize).min(fm.frames);
                for t in first..last {
                    let band_mean = |bands: &[usize]| {
                        bands.iter().map(|&b| fm.get(b, t)).sum::<f64>() / bands.len() as f64
                    };
                    let out_band: Vec<usize> = (0..cfg.mel_bands)
                        .filter(|m| !in_band.contains(m))
                        .collect();
                    if out_band.is_empty() {
                        continue;
                    }
                    assert!(
                        band_mean(&in_band) > band_mean(&out_band),
                        "clip event {} at frame {t}: in-band energy did not dominate",
                        e.label
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 20, "too few frames checked: {checked}");
    }
}
