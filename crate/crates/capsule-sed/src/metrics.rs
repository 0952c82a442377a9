//! Micro-averaged segment-based error rate and F1 score.
//!
//! A class counts as active in a segment when it is active in at least one
//! constituent frame. Intermediate statistics accumulate over every segment
//! of every clip before a single division; per segment the error decomposes
//! as substitutions `S = min(FN, FP)`, deletions `D = max(0, FN - FP)`, and
//! insertions `I = max(0, FP - FN)`.

use crate::error::{Error, Result};
use crate::roll::EventRoll;

/// Frames per one-second segment at the 40 ms frame duration.
pub const FRAMES_PER_SECOND_SEGMENT: usize = 25;

/// Accumulated intermediate statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SegmentStats {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// Active reference count over all segments.
    pub n: u64,
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
}

impl SegmentStats {
    /// Fold one clip's reference/prediction pair into the statistics.
    pub fn accumulate(
        &mut self,
        reference: &EventRoll,
        prediction: &EventRoll,
        segment_frames: usize,
    ) -> Result<()> {
        if reference.classes() != prediction.classes()
            || reference.frames() != prediction.frames()
        {
            return Err(Error::shape(
                "evaluate",
                format!(
                    "reference {}x{} vs prediction {}x{}",
                    reference.classes(),
                    reference.frames(),
                    prediction.classes(),
                    prediction.frames()
                ),
            ));
        }
        let ref_seg = segment_rollup(reference, segment_frames, None)?;
        let pred_seg = segment_rollup(prediction, segment_frames, None)?;
        for seg in 0..ref_seg.frames() {
            let mut tp = 0u64;
            let mut fp = 0u64;
            let mut fn_ = 0u64;
            for k in 0..ref_seg.classes() {
                match (ref_seg.get(k, seg), pred_seg.get(k, seg)) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    (false, false) => {}
                }
            }
            self.tp += tp;
            self.fp += fp;
            self.fn_ += fn_;
            self.n += tp + fn_;
            self.substitutions += fn_.min(fp);
            self.deletions += fn_.saturating_sub(fp);
            self.insertions += fp.saturating_sub(fn_);
        }
        Ok(())
    }

    /// Error rate: `(S + D + I) / N`. `None` when the reference is empty,
    /// which is a distinguished no-reference outcome rather than zero.
    pub fn error_rate(&self) -> Option<f64> {
        if self.n == 0 {
            return None;
        }
        Some((self.substitutions + self.deletions + self.insertions) as f64 / self.n as f64)
    }

    /// F1 score: `2 TP / (2 TP + FP + FN)`. An empty corpus (no reference
    /// and no prediction) degenerates to 1.0; callers can detect that case
    /// with [`SegmentStats::is_degenerate`].
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return 1.0;
        }
        2.0 * self.tp as f64 / denom as f64
    }

    pub fn is_degenerate(&self) -> bool {
        2 * self.tp + self.fp + self.fn_ == 0
    }
}

/// Collapse a frame-resolution roll onto segments of `segment_frames`
/// frames: active iff any constituent unmasked frame is active. The final
/// partial segment is kept; segments containing only masked frames are
/// dropped.
pub fn segment_rollup(
    roll: &EventRoll,
    segment_frames: usize,
    mask: Option<&[bool]>,
) -> Result<EventRoll> {
    if segment_frames < 1 {
        return Err(Error::Config("segment length must be positive".to_string()));
    }
    if let Some(m) = mask {
        if m.len() != roll.frames() {
            return Err(Error::shape(
                "segment_rollup",
                format!("mask covers {} frames, roll has {}", m.len(), roll.frames()),
            ));
        }
    }
    let frame_valid = |t: usize| mask.map_or(true, |m| m[t]);
    let mut segments = Vec::new();
    let mut start = 0;
    while start < roll.frames() {
        let end = (start + segment_frames).min(roll.frames());
        if (start..end).any(frame_valid) {
            segments.push((start, end));
        }
        start = end;
    }
    let mut out = EventRoll::new(roll.classes(), segments.len());
    for (seg, &(s, e)) in segments.iter().enumerate() {
        for k in 0..roll.classes() {
            let active = (s..e).any(|t| frame_valid(t) && roll.get(k, t));
            out.set(k, seg, active);
        }
    }
    Ok(out)
}

/// Evaluation outcome for one segment length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// `None` marks the no-reference outcome.
    pub error_rate: Option<f64>,
    pub f1: f64,
    pub degenerate_f1: bool,
    pub stats: SegmentStats,
}

/// Micro-averaged evaluation of (reference, prediction) pairs at the given
/// segment length.
pub fn evaluate(pairs: &[(&EventRoll, &EventRoll)], segment_frames: usize) -> Result<Evaluation> {
    let mut stats = SegmentStats::default();
    for (reference, prediction) in pairs {
        stats.accumulate(reference, prediction, segment_frames)?;
    }
    Ok(Evaluation {
        error_rate: stats.error_rate(),
        f1: stats.f1(),
        degenerate_f1: stats.is_degenerate(),
        stats,
    })
}

/// The four headline metrics at frame and one-second segment lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub er_frame: Option<f64>,
    pub f1_frame: f64,
    pub er_second: Option<f64>,
    pub f1_second: f64,
    pub degenerate: bool,
}

impl MetricReport {
    pub fn compute(pairs: &[(&EventRoll, &EventRoll)]) -> Result<MetricReport> {
        let frame = evaluate(pairs, 1)?;
        let second = evaluate(pairs, FRAMES_PER_SECOND_SEGMENT)?;
        Ok(MetricReport {
            er_frame: frame.error_rate,
            f1_frame: frame.f1,
            er_second: second.error_rate,
            f1_second: second.f1,
            degenerate: frame.degenerate_f1 || second.degenerate_f1,
        })
    }

    /// Rows of `(metric name, value, segment length in frames)` for the
    /// machine-readable report.
    pub fn rows(&self) -> Vec<(&'static str, f64, usize)> {
        vec![
            ("ER_frame", self.er_frame.unwrap_or(f64::NAN), 1),
            ("F1_frame", self.f1_frame, 1),
            (
                "ER_second",
                self.er_second.unwrap_or(f64::NAN),
                FRAMES_PER_SECOND_SEGMENT,
            ),
            ("F1_second", self.f1_second, FRAMES_PER_SECOND_SEGMENT),
        ]
    }
}
