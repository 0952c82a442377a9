//! Segment-based error rate and F1 on hand-checkable cases, plus the
//! difference between micro-averaging and per-clip averaging.
//!
//!     cargo run --release --example evaluate_metrics

use capsule_sed::metrics::{evaluate, segment_rollup, FRAMES_PER_SECOND_SEGMENT};
use capsule_sed::roll::EventRoll;

fn roll(rows: &[&[u8]]) -> EventRoll {
    let mut r = EventRoll::new(rows.len(), rows[0].len());
    for (k, row) in rows.iter().enumerate() {
        for (t, &v) in row.iter().enumerate() {
            r.set(k, t, v != 0);
        }
    }
    r
}

fn main() -> capsule_sed::Result<()> {
    // substitution: reference {A}, prediction {B} in the same segment
    let reference = roll(&[&[1], &[0]]);
    let prediction = roll(&[&[0], &[1]]);
    let e = evaluate(&[(&reference, &prediction)], 1)?;
    println!(
        "substitution: ER = {:.2}, F1 = {:.2}  (one error against one reference)",
        e.error_rate.unwrap(),
        e.f1
    );

    // insertion: reference {A}, prediction {A, B}
    let prediction = roll(&[&[1], &[1]]);
    let e = evaluate(&[(&reference, &prediction)], 1)?;
    println!(
        "insertion:    ER = {:.2}, F1 = {:.3}  (extra event, reference still hit)",
        e.error_rate.unwrap(),
        e.f1
    );

    // perfect match
    let e = evaluate(&[(&reference, &reference)], 1)?;
    println!(
        "perfect:      ER = {:.2}, F1 = {:.2}",
        e.error_rate.unwrap(),
        e.f1
    );

    // micro-averaging vs averaging per-clip error rates
    let tiny_ref = roll(&[&[1]]);
    let tiny_pred = roll(&[&[0]]);
    let big: Vec<u8> = vec![1; 99];
    let big_ref = roll(&[&big]);
    let micro = evaluate(&[(&tiny_ref, &tiny_pred), (&big_ref, &big_ref)], 1)?;
    let e1 = evaluate(&[(&tiny_ref, &tiny_pred)], 1)?.error_rate.unwrap();
    let e2 = evaluate(&[(&big_ref, &big_ref)], 1)?.error_rate.unwrap();
    println!(
        "micro-averaged ER over both clips: {:.3}; mean of per-clip ERs: {:.3}",
        micro.error_rate.unwrap(),
        (e1 + e2) / 2.0
    );

    // one-second segments: a one-frame event activates its whole segment
    let mut fine = EventRoll::new(1, 3 * FRAMES_PER_SECOND_SEGMENT);
    fine.set(0, 30, true);
    let coarse = segment_rollup(&fine, FRAMES_PER_SECOND_SEGMENT, None)?;
    println!(
        "one active frame -> active one-second segments: {:?}",
        (0..coarse.frames()).map(|s| coarse.get(0, s) as u8).collect::<Vec<_>>()
    );
    Ok(())
}
