//! Mel filter bank and the short-time magnitude spectrum feeding it.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Hz -> mel, HTK convention.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

/// mel -> Hz, HTK convention.
pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Bank of area-normalized triangular filters on the mel scale, spanning
/// `[0, sample_rate / 2]`.
#[derive(Debug, Clone)]
pub struct MelFilterBank {
    bands: usize,
    n_fft: usize,
    sample_rate: f64,
    /// Dense `[bands x (n_fft/2 + 1)]` weights.
    weights: Vec<f64>,
    /// Band edge frequencies, `bands + 2` entries.
    edges: Vec<f64>,
}

impl MelFilterBank {
    pub fn new(bands: usize, n_fft: usize, sample_rate: f64) -> MelFilterBank {
        let n_bins = n_fft / 2 + 1;
        let mel_hi = hz_to_mel(sample_rate / 2.0);
        let edges: Vec<f64> = (0..bands + 2)
            .map(|p| mel_to_hz(mel_hi * p as f64 / (bands + 1) as f64))
            .collect();
        let mut weights = vec![0.0; bands * n_bins];
        for m in 0..bands {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate / n_fft as f64;
                let w = if f >= lo && f <= mid && mid > lo {
                    (f - lo) / (mid - lo)
                } else if f > mid && f <= hi && hi > mid {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w * norm;
            }
        }
        MelFilterBank {
            bands,
            n_fft,
            sample_rate,
            weights,
            edges,
        }
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Filter weight of `band` at FFT bin `bin`.
    pub fn weight(&self, band: usize, bin: usize) -> f64 {
        self.weights[band * self.n_bins() + bin]
    }

    /// Frequency of the filter's triangular peak.
    pub fn peak_frequency(&self, band: usize) -> f64 {
        self.edges[band + 1]
    }

    /// Filter response of `band` at an arbitrary frequency (triangle shape,
    /// same area normalization as the binned weights).
    pub fn response_at(&self, band: usize, hz: f64) -> f64 {
        let (lo, mid, hi) = (self.edges[band], self.edges[band + 1], self.edges[band + 2]);
        let norm = 2.0 / (hi - lo);
        if hz >= lo && hz <= mid && mid > lo {
            (hz - lo) / (mid - lo) * norm
        } else if hz > mid && hz <= hi && hi > mid {
            (hi - hz) / (hi - mid) * norm
        } else {
            0.0
        }
    }

    /// Band with the strongest response at the given frequency.
    pub fn dominant_band(&self, hz: f64) -> usize {
        (0..self.bands)
            .max_by(|&a, &b| {
                self.response_at(a, hz)
                    .partial_cmp(&self.response_at(b, hz))
                    .unwrap()
            })
            .unwrap_or(0)
    }

    /// Apply the bank to a magnitude spectrum of `n_fft/2 + 1` bins.
    pub fn apply(&self, magnitudes: &[f64]) -> Vec<f64> {
        let n_bins = self.n_bins();
        assert_eq!(magnitudes.len(), n_bins);
        (0..self.bands)
            .map(|m| {
                let row = &self.weights[m * n_bins..(m + 1) * n_bins];
                row.iter().zip(magnitudes).map(|(w, x)| w * x).sum()
            })
            .collect()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }
}

/// Magnitude spectra of non-overlapping Hann-windowed frames.
/// Returns one `n_fft/2 + 1` row per complete frame of `frame_len` samples.
pub fn magnitude_frames(audio: &[f64], frame_len: usize, n_fft: usize) -> Vec<Vec<f64>> {
    assert!(n_fft >= frame_len);
    let n_frames = audio.len() / frame_len;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let window: Vec<f64> = (0..frame_len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / frame_len as f64).cos())
        .collect();

    let mut out = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..n_frames {
        let frame = &audio[f * frame_len..(f + 1) * frame_len];
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < frame_len {
                Complex::new(frame[i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        out.push(buf[..n_fft / 2 + 1].iter().map(|c| c.norm()).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_roundtrip() {
        for hz in [0.0, 100.0, 1000.0, 22050.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-6);
        }
    }

    #[test]
    fn filters_cover_spectrum_without_gaps() {
        let bank = MelFilterBank::new(80, 2048, 44100.0);
        // every bin between the first and last edge gets some weight
        let mut covered = 0;
        for k in 1..bank.n_bins() - 1 {
            let total: f64 = (0..80).map(|m| bank.weight(m, k)).sum();
            if total > 0.0 {
                covered += 1;
            }
        }
        assert!(covered > bank.n_bins() * 9 / 10);
    }

    #[test]
    fn dominant_band_is_monotone_in_frequency() {
        let bank = MelFilterBank::new(80, 2048, 44100.0);
        let mut last = 0;
        for hz in (100..22000).step_by(500) {
            let band = bank.dominant_band(hz as f64);
            assert!(band >= last, "band order broke at {hz} Hz");
            last = band;
        }
        assert!(last > 60, "top of range should reach high bands, got {last}");
    }

    #[test]
    fn pure_tone_concentrates_in_one_fft_bin_region() {
        let sr = 44100.0;
        let n = 1764;
        let tone: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / sr).sin())
            .collect();
        let frames = magnitude_frames(&tone, n, 2048);
        assert_eq!(frames.len(), 1);
        let spectrum = &frames[0];
        let peak_bin = (0..spectrum.len())
            .max_by(|&a, &b| spectrum[a].partial_cmp(&spectrum[b]).unwrap())
            .unwrap();
        let peak_hz = peak_bin as f64 * sr / 2048.0;
        assert!((peak_hz - 1000.0).abs() < 30.0, "peak at {peak_hz} Hz");
    }
}
