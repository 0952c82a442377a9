//! Feature cache: a flat binary container for one clip's log mel features.
//!
//! Layout: 16-byte header (magic `CSED`, format version, band count, frame
//! count, all little-endian `u32` after the magic) followed by the values as
//! 64-bit little-endian floats in band-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::FeatureMatrix;

const MAGIC: &[u8; 4] = b"CSED";
const VERSION: u32 = 1;

pub fn write_feature_cache(path: &Path, features: &FeatureMatrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + features.values.len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(features.bands as u32).to_le_bytes());
    bytes.extend_from_slice(&(features.frames as u32).to_le_bytes());
    for v in &features.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path, frame_duration_s: f64) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format_err = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(format_err("missing CSED magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(&format!("unsupported version {version}")));
    }
    let bands = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + bands * frames * 8;
    if bytes.len() != expected {
        return Err(format_err(&format!(
            "payload is {} bytes, header promises {}",
            bytes.len(),
            expected
        )));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(bands, frames, values, frame_duration_s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.feat");
        let values: Vec<f64> = (0..80 * 7).map(|i| (i as f64).sin() * 12.5 - 3.0).collect();
        let fm = FeatureMatrix::new(80, 7, values.clone(), 0.04).unwrap();
        write_feature_cache(&path, &fm).unwrap();
        let back = read_feature_cache(&path, 0.04).unwrap();
        assert_eq!(back.bands, 80);
        assert_eq!(back.frames, 7);
        assert!(back.values.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_is_sixteen_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.feat");
        let fm = FeatureMatrix::new(2, 3, vec![0.0; 6], 0.04).unwrap();
        write_feature_cache(&path, &fm).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 6 * 8);
        assert_eq!(&bytes[0..4], b"CSED");
    }

    #[test]
    fn rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.feat");
        let fm = FeatureMatrix::new(2, 3, vec![0.0; 6], 0.04).unwrap();
        write_feature_cache(&path, &fm).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, bytes).unwrap();
        assert!(read_feature_cache(&path, 0.04).is_err());
    }
}
