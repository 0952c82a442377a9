//! Corpus manifest: a plain-text index of clip audio path, annotation path,
//! and split, tab-separated, with paths stored relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub audio: PathBuf,
    pub annotations: PathBuf,
    pub split: Split,
}

/// Write entries with paths relativized against the manifest directory
/// where possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut out = String::new();
    for e in entries {
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .map(|r| r.to_path_buf())
                .unwrap_or_else(|_| p.to_path_buf())
        };
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            rel(&e.audio).display(),
            rel(&e.annotations).display(),
            e.split.as_str()
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a manifest, resolving relative paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, got {}", fields.len())));
        }
        let split = Split::parse(fields[2])
            .ok_or_else(|| parse_err(format!("unknown split '{}'", fields[2])))?;
        let resolve = |s: &str| {
            let p = PathBuf::from(s);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        entries.push(ManifestEntry {
            audio: resolve(fields[0]),
            annotations: resolve(fields[1]),
            split,
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("corpus.manifest");
        let entries = vec![
            ManifestEntry {
                audio: dir.path().join("audio/clip_000.wav"),
                annotations: dir.path().join("ann/clip_000.txt"),
                split: Split::Train,
            },
            ManifestEntry {
                audio: dir.path().join("audio/clip_001.wav"),
                annotations: dir.path().join("ann/clip_001.txt"),
                split: Split::Test,
            },
        ];
        write_manifest(&manifest, &entries).unwrap();
        let text = std::fs::read_to_string(&manifest).unwrap();
        assert!(text.contains("audio/clip_000.wav\tann/clip_000.txt\ttrain"));
        let back = read_manifest(&manifest).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn bad_split_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("corpus.manifest");
        std::fs::write(&manifest, "a.wav\ta.txt\ttrain\nb.wav\tb.txt\tvalidation\n").unwrap();
        let err = read_manifest(&manifest).unwrap_err();
        assert!(format!("{err}").contains(":2:"));
    }
}
