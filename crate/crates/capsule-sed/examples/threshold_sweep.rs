//! Dynamic-threshold selection: sweep the candidate grid on a small
//! validation fixture and print the error rate at every point.
//!
//!     cargo run --release --example threshold_sweep

use capsule_sed::roll::EventRoll;
use capsule_sed::threshold::{default_candidates, select_threshold, ActivityProbabilities};

fn main() -> capsule_sed::Result<()> {
    // one validation clip, one class: probabilities drift upward while the
    // class is active in frames 2..=5
    let probs = ActivityProbabilities::new(
        1,
        8,
        vec![0.42, 0.58, 0.66, 0.74, 0.81, 0.73, 0.56, 0.38],
    )?;
    let mut reference = EventRoll::new(1, 8);
    for t in 2..=5 {
        reference.set(0, t, true);
    }

    let selection = select_threshold(&[(probs, reference)], &default_candidates())?;
    println!("candidate   ER_frame   F1_frame");
    for (c, er, f1) in &selection.sweep {
        let marker = if *c == selection.threshold { "  <- chosen" } else { "" };
        println!(
            "   {c:.2}       {}      {f1:.3}{marker}",
            er.map(|e| format!("{e:.3}")).unwrap_or_else(|| "n/a ".into())
        );
    }
    println!(
        "\nselected threshold {:.2} with ER {:.3} (minimum of the sweep; ties prefer higher F1, then the lower threshold)",
        selection.threshold,
        selection.er_frame.unwrap()
    );
    Ok(())
}
