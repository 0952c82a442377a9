//! Probability binarization and validation-driven threshold selection.
//!
//! A single scalar threshold applies to every class and frame. The optimal
//! value is searched on a grid inside `[0.5, 0.9]`, minimizing frame-based
//! error rate with ties broken by higher F1, then by the lower threshold.

use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::roll::EventRoll;

/// Candidate grid and the chosen operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdConfig {
    pub candidates: Vec<f64>,
    pub chosen: Option<f64>,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            candidates: default_candidates(),
            chosen: None,
        }
    }
}

/// `0.50, 0.55, ..., 0.90`.
pub fn default_candidates() -> Vec<f64> {
    (0..=8).map(|i| 0.5 + 0.05 * i as f64).collect()
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::Config("no threshold candidates".to_string()));
        }
        for &c in &self.candidates {
            if !(0.5..=0.9).contains(&c) {
                return Err(Error::Config(format!(
                    "threshold candidate {c} outside [0.5, 0.9]"
                )));
            }
        }
        if self.candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "threshold candidates must be strictly ascending".to_string(),
            ));
        }
        if let Some(c) = self.chosen {
            if !self.candidates.iter().any(|&x| x == c) {
                return Err(Error::Config(format!(
                    "chosen threshold {c} is not among the candidates"
                )));
            }
        }
        Ok(())
    }
}

/// Activity probabilities for one clip, `K x T` row-major in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityProbabilities {
    pub classes: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl ActivityProbabilities {
    pub fn new(classes: usize, frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != classes * frames {
            return Err(Error::shape(
                "activity_probabilities",
                format!("{} x {} vs {} values", classes, frames, values.len()),
            ));
        }
        Ok(ActivityProbabilities {
            classes,
            frames,
            values,
        })
    }

    pub fn get(&self, class: usize, frame: usize) -> f64 {
        self.values[class * self.frames + frame]
    }
}

/// Binarize with the documented `>=` boundary convention: a probability
/// exactly at the threshold counts as active.
pub fn binarize(probs: &ActivityProbabilities, threshold: f64) -> Result<EventRoll> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let mut roll = EventRoll::new(probs.classes, probs.frames);
    for k in 0..probs.classes {
        for t in 0..probs.frames {
            roll.set(k, t, probs.get(k, t) >= threshold);
        }
    }
    Ok(roll)
}

/// Outcome of the validation sweep.
#[derive(Debug, Clone)]
pub struct ThresholdSelection {
    pub threshold: f64,
    pub er_frame: Option<f64>,
    pub f1_frame: f64,
    /// `(candidate, ER_frame, F1_frame)` for every grid point.
    pub sweep: Vec<(f64, Option<f64>, f64)>,
}

/// Evaluate every candidate on the validation clips and return the
/// frame-based error-rate minimizer.
pub fn select_threshold(
    validation: &[(ActivityProbabilities, EventRoll)],
    candidates: &[f64],
) -> Result<ThresholdSelection> {
    if candidates.is_empty() {
        return Err(Error::Config("no threshold candidates".to_string()));
    }
    if validation.is_empty() {
        return Err(Error::InvalidInput("empty validation set".to_string()));
    }
    let mut sweep = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let rolls: Vec<EventRoll> = validation
            .iter()
            .map(|(p, _)| binarize(p, c))
            .collect::<Result<_>>()?;
        let pairs: Vec<(&EventRoll, &EventRoll)> = validation
            .iter()
            .zip(&rolls)
            .map(|((_, reference), prediction)| (reference, prediction))
            .collect();
        let eval = evaluate(&pairs, 1)?;
        sweep.push((c, eval.error_rate, eval.f1));
    }

    // min ER, ties by higher F1, then by lower threshold (ascending grid
    // plus strict comparisons gives the lowest threshold for free)
    let mut best = 0;
    for i in 1..sweep.len() {
        let (_, er_i, f1_i) = sweep[i];
        let (_, er_b, f1_b) = sweep[best];
        let better = match (er_i, er_b) {
            (Some(a), Some(b)) => a < b || (a == b && f1_i > f1_b),
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => f1_i > f1_b,
        };
        if better {
            best = i;
        }
    }
    Ok(ThresholdSelection {
        threshold: sweep[best].0,
        er_frame: sweep[best].1,
        f1_frame: sweep[best].2,
        sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs(classes: usize, frames: usize, values: &[f64]) -> ActivityProbabilities {
        ActivityProbabilities::new(classes, frames, values.to_vec()).unwrap()
    }

    #[test]
    fn boundary_probability_is_active() {
        let p = probs(1, 3, &[0.49, 0.50, 0.51]);
        let roll = binarize(&p, 0.5).unwrap();
        assert_eq!(roll.as_slice(), &[false, true, true]);
    }

    #[test]
    fn all_zero_probabilities_give_empty_roll() {
        let p = probs(2, 4, &[0.0; 8]);
        let roll = binarize(&p, 0.5).unwrap();
        assert_eq!(roll.count_active(), 0);
    }

    #[test]
    fn binarize_rejects_degenerate_threshold() {
        let p = probs(1, 1, &[0.5]);
        assert!(binarize(&p, 0.0).is_err());
        assert!(binarize(&p, 1.0).is_err());
    }

    #[test]
    fn single_candidate_returned_unconditionally() {
        let p = probs(1, 2, &[0.6, 0.4]);
        let mut reference = EventRoll::new(1, 2);
        reference.set(0, 0, true);
        let sel = select_threshold(&[(p, reference)], &[0.7]).unwrap();
        assert_eq!(sel.threshold, 0.7);
    }

    #[test]
    fn returns_strict_er_minimizer() {
        // below 0.7 frame 3 is a false positive; above 0.7 frames 0 and 1
        // are missed; 0.7 is the unique zero-error candidate
        let p = probs(1, 4, &[0.72, 0.71, 0.40, 0.69]);
        let mut reference = EventRoll::new(1, 4);
        reference.set(0, 0, true);
        reference.set(0, 1, true);
        let sel = select_threshold(&[(p, reference)], &default_candidates()).unwrap();
        assert_eq!(sel.threshold, 0.7);
        assert_eq!(sel.er_frame, Some(0.0));
        assert_eq!(sel.f1_frame, 1.0);
    }

    #[test]
    fn all_tied_candidates_pick_the_lowest() {
        // probabilities are far from every candidate, so all grid points
        // binarize identically
        let p = probs(1, 3, &[0.95, 0.95, 0.05]);
        let mut reference = EventRoll::new(1, 3);
        reference.set(0, 0, true);
        reference.set(0, 1, true);
        let sel = select_threshold(&[(p, reference)], &default_candidates()).unwrap();
        assert_eq!(sel.threshold, 0.5);
    }

    #[test]
    fn selection_matches_exhaustive_recomputation() {
        let p = probs(2, 5, &[0.55, 0.62, 0.71, 0.44, 0.83, 0.52, 0.57, 0.66, 0.91, 0.12]);
        let mut reference = EventRoll::new(2, 5);
        for (k, t) in [(0, 1), (0, 2), (0, 4), (1, 2), (1, 3)] {
            reference.set(k, t, true);
        }
        let validation = vec![(p, reference)];
        let sel = select_threshold(&validation, &default_candidates()).unwrap();
        let best_er = sel
            .sweep
            .iter()
            .filter_map(|&(_, er, _)| er)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(sel.er_frame, Some(best_er));
    }

    #[test]
    fn empty_validation_rejected() {
        assert!(select_threshold(&[], &default_candidates()).is_err());
        let p = probs(1, 1, &[0.5]);
        assert!(select_threshold(&[(p, EventRoll::new(1, 1))], &[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ThresholdConfig::default().validate().is_ok());
        let bad = ThresholdConfig {
            candidates: vec![0.4, 0.6],
            chosen: None,
        };
        assert!(bad.validate().is_err());
        let unsorted = ThresholdConfig {
            candidates: vec![0.6, 0.5],
            chosen: None,
        };
        assert!(unsorted.validate().is_err());
        let chosen_off_grid = ThresholdConfig {
            candidates: vec![0.5, 0.6],
            chosen: Some(0.55),
        };
        assert!(chosen_off_grid.validate().is_err());
    }

    proptest! {
        #[test]
        fn binarize_is_monotone_in_threshold(
            values in proptest::collection::vec(0.0f64..1.0, 1..40),
            lo_ix in 0usize..8,
        ) {
            let frames = values.len();
            let p = probs(1, frames, &values);
            let grid = default_candidates();
            let lo = grid[lo_ix];
            let hi = grid[lo_ix + 1];
            let roll_lo = binarize(&p, lo).unwrap();
            let roll_hi = binarize(&p, hi).unwrap();
            for t in 0..frames {
                // raising the threshold never adds an active cell
                prop_assert!(!roll_hi.get(0, t) || roll_lo.get(0, t));
            }
        }
    }
}
