//! Log mel feature extraction on a synthetic tone mixture, plus the binary
//! feature-cache round trip and per-band normalization.
//!
//!     cargo run --release --example extract_features

use capsule_sed::features::cache::{read_feature_cache, write_feature_cache};
use capsule_sed::features::{apply_normalizer, fit_normalizer, logmel, FeatureConfig};

fn main() -> capsule_sed::Result<()> {
    let cfg = FeatureConfig::default();
    let sr = cfg.sample_rate as f64;

    // two seconds: a 1 kHz tone joined halfway by a 6 kHz tone
    let audio: Vec<f64> = (0..2 * cfg.sample_rate as usize)
        .map(|i| {
            let t = i as f64 / sr;
            let mut v = 0.3 * (2.0 * std::f64::consts::PI * 1000.0 * t).sin();
            if t >= 1.0 {
                v += 0.3 * (2.0 * std::f64::consts::PI * 6000.0 * t).sin();
            }
            v
        })
        .collect();

    let features = logmel(&audio, cfg.sample_rate, &cfg)?;
    println!(
        "{} mel bands x {} frames ({} ms each)",
        features.bands,
        features.frames,
        cfg.frame_duration_s * 1000.0
    );

    let bank = cfg.filter_bank();
    let band_1k = bank.dominant_band(1000.0);
    let band_6k = bank.dominant_band(6000.0);
    println!(
        "1 kHz lands in mel band {band_1k}, 6 kHz in band {band_6k} (per the filter bank)"
    );
    for (label, frame) in [("first half", 10usize), ("second half", 40usize)] {
        let argmax = (0..features.bands)
            .max_by(|&a, &b| features.get(a, frame).partial_cmp(&features.get(b, frame)).unwrap())
            .unwrap();
        println!("strongest band in the {label} (frame {frame}): {argmax}");
    }

    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("clip.feat");
    write_feature_cache(&path, &features)?;
    let back = read_feature_cache(&path, cfg.frame_duration_s)?;
    let identical = features
        .values
        .iter()
        .zip(&back.values)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!(
        "cache round trip through {} is bit-exact: {identical}",
        path.display()
    );

    let stats = fit_normalizer(std::slice::from_ref(&features))?;
    let normalized = apply_normalizer(&stats, &features)?;
    let mean: f64 = normalized.values.iter().sum::<f64>() / normalized.values.len() as f64;
    println!("normalized pooled mean: {mean:.2e} (zero up to rounding)");
    Ok(())
}
