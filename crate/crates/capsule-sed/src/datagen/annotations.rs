//! Annotation events and their wire format: one event per line,
//! tab-separated onset / offset / label, seconds with six decimals,
//! sorted by onset on save.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::roll::EventRoll;

/// One labeled sound event.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationEvent {
    pub onset_s: f64,
    pub offset_s: f64,
    pub label: String,
}

impl AnnotationEvent {
    pub fn new(onset_s: f64, offset_s: f64, label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        if !(onset_s >= 0.0 && offset_s > onset_s) {
            return Err(Error::InvalidInput(format!(
                "event '{label}' must satisfy 0 <= onset < offset, got {onset_s}..{offset_s}"
            )));
        }
        Ok(AnnotationEvent {
            onset_s,
            offset_s,
            label,
        })
    }
}

pub fn save_annotations(path: &Path, events: &[AnnotationEvent]) -> Result<()> {
    let mut sorted: Vec<&AnnotationEvent> = events.iter().collect();
    sorted.sort_by(|a, b| {
        a.onset_s
            .partial_cmp(&b.onset_s)
            .unwrap()
            .then(a.offset_s.partial_cmp(&b.offset_s).unwrap())
            .then(a.label.cmp(&b.label))
    });
    let mut out = String::new();
    for e in sorted {
        out.push_str(&format!("{:.6}\t{:.6}\t{}\n", e.onset_s, e.offset_s, e.label));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationEvent>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
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
        let mut fields = line.split('\t');
        let onset: f64 = fields
            .next()
            .ok_or_else(|| parse_err("missing onset".to_string()))?
            .parse()
            .map_err(|e| parse_err(format!("bad onset: {e}")))?;
        let offset: f64 = fields
            .next()
            .ok_or_else(|| parse_err("missing offset".to_string()))?
            .parse()
            .map_err(|e| parse_err(format!("bad offset: {e}")))?;
        let label = fields
            .next()
            .ok_or_else(|| parse_err("missing label".to_string()))?;
        if fields.next().is_some() {
            return Err(parse_err("trailing fields".to_string()));
        }
        events.push(
            AnnotationEvent::new(onset, offset, label)
                .map_err(|e| parse_err(e.to_string()))?,
        );
    }
    Ok(events)
}

/// Ground-truth roll: class `k` is active in frame `t` iff the frame span
/// `[t d, (t+1) d)` intersects some `(onset, offset)` of class `k`.
pub fn roll_from_annotations(
    events: &[AnnotationEvent],
    frame_duration_s: f64,
    total_frames: usize,
    labels: &[String],
) -> Result<EventRoll> {
    let mut roll = EventRoll::new(labels.len(), total_frames);
    for e in events {
        let class = labels
            .iter()
            .position(|l| *l == e.label)
            .ok_or_else(|| Error::InvalidInput(format!("unmapped label '{}'", e.label)))?;
        let first = (e.onset_s / frame_duration_s).floor().max(0.0) as usize;
        for t in first..total_frames {
            let frame_start = t as f64 * frame_duration_s;
            let frame_end = (t + 1) as f64 * frame_duration_s;
            if frame_start >= e.offset_s {
                break;
            }
            if frame_end > e.onset_s {
                roll.set(class, t, true);
            }
        }
    }
    Ok(roll)
}

/// Merge each class's runs of adjacent active frames into events; the
/// inverse of [`roll_from_annotations`] at frame resolution.
pub fn events_from_roll(
    roll: &EventRoll,
    frame_duration_s: f64,
    labels: &[String],
) -> Vec<AnnotationEvent> {
    let mut events = Vec::new();
    for k in 0..roll.classes() {
        let mut run_start: Option<usize> = None;
        for t in 0..=roll.frames() {
            let active = t < roll.frames() && roll.get(k, t);
            match (active, run_start) {
                (true, None) => run_start = Some(t),
                (false, Some(s)) => {
                    events.push(AnnotationEvent {
                        onset_s: s as f64 * frame_duration_s,
                        offset_s: t as f64 * frame_duration_s,
                        label: labels[k].clone(),
                    });
                    run_start = None;
                }
                _ => {}
            }
        }
    }
    events.sort_by(|a, b| a.onset_s.partial_cmp(&b.onset_s).unwrap());
    events
}
