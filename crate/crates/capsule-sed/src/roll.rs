//! Binary activity matrix shared by ground truth and binarized predictions.

use crate::error::{Error, Result};

/// `K x T` class-by-frame activity matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRoll {
    classes: usize,
    frames: usize,
    active: Vec<bool>,
}

impl EventRoll {
    pub fn new(classes: usize, frames: usize) -> EventRoll {
        EventRoll {
            classes,
            frames,
            active: vec![false; classes * frames],
        }
    }

    pub fn from_active(classes: usize, frames: usize, active: Vec<bool>) -> Result<EventRoll> {
        if active.len() != classes * frames {
            return Err(Error::shape(
                "event_roll",
                format!("{} x {} vs {} cells", classes, frames, active.len()),
            ));
        }
        Ok(EventRoll {
            classes,
            frames,
            active,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, class: usize, frame: usize) -> bool {
        self.active[class * self.frames + frame]
    }

    pub fn set(&mut self, class: usize, frame: usize, value: bool) {
        self.active[class * self.frames + frame] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.active
    }

    /// Copy of frames `[start, start + len)`, zero-padded past the end.
    pub fn window(&self, start: usize, len: usize) -> EventRoll {
        let mut out = EventRoll::new(self.classes, len);
        for k in 0..self.classes {
            for t in 0..len {
                if start + t < self.frames {
                    out.set(k, t, self.get(k, start + t));
                }
            }
        }
        out
    }

    /// Row-major `f64` view (1.0 active / 0.0 inactive) for loss targets.
    pub fn to_values(&self) -> Vec<f64> {
        self.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
    }

    /// Number of active cells.
    pub fn count_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Highest number of simultaneously active classes in any frame.
    pub fn max_polyphony(&self) -> usize {
        (0..self.frames)
            .map(|t| (0..self.classes).filter(|&k| self.get(k, t)).count())
            .max()
            .unwrap_or(0)
    }

    /// Concatenate rolls along the time axis.
    pub fn concat(parts: &[&EventRoll]) -> Result<EventRoll> {
        let classes = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("no rolls to concat".to_string()))?
            .classes;
        let frames: usize = parts.iter().map(|p| p.frames).sum();
        let mut out = EventRoll::new(classes, frames);
        let mut offset = 0;
        for p in parts {
            if p.classes != classes {
                return Err(Error::shape(
                    "event_roll_concat",
                    format!("{} vs {} classes", p.classes, classes),
                ));
            }
            for k in 0..classes {
                for t in 0..p.frames {
                    out.set(k, offset + t, p.get(k, t));
                }
            }
            offset += p.frames;
        }
        Ok(out)
    }
}
