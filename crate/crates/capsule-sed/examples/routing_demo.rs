//! Watch routing-by-agreement concentrate couplings: two clusters of
//! mutually aligned prediction vectors compete for two output capsules.
//!
//!     cargo run --release --example routing_demo

use capsule_sed::caps::route;
use capsule_sed::tensor::Tensor;

fn main() -> capsule_sed::Result<()> {
    // six low-level capsules: the first three agree on capsule 0, the rest
    // on capsule 1; cross-predictions are small noise
    let n_low = 6;
    let dim = 4;
    let mut data = vec![0.0; n_low * 2 * dim];
    for i in 0..n_low {
        let (strong, weak) = if i < 3 { (0, 1) } else { (1, 0) };
        data[(i * 2 + strong) * dim] = 2.0;
        data[(i * 2 + strong) * dim + 1] = 1.0;
        data[(i * 2 + weak) * dim + 2] = 0.3 * ((i % 3) as f64 - 1.0);
        data[(i * 2 + weak) * dim + 3] = -0.2;
    }
    let predictions = Tensor::from_vec(vec![n_low, 2, dim], data)?;

    let result = route(&predictions, 3)?;
    for state in &result.trace {
        println!("iteration {}:", state.iteration);
        for i in 0..n_low {
            let c0 = state.couplings.at(&[i, 0]);
            let c1 = state.couplings.at(&[i, 1]);
            let marker = if (i < 3 && c0 > 0.5) || (i >= 3 && c1 > 0.5) {
                "<- agrees with its cluster"
            } else {
                ""
            };
            println!("  capsule {i}: c(i,0) = {c0:.4}  c(i,1) = {c1:.4}  {marker}");
        }
    }

    let lengths = result.output.vector_norm();
    println!(
        "output capsule lengths: {:.4} and {:.4} (both < 1 by squashing)",
        lengths.data()[0],
        lengths.data()[1]
    );
    Ok(())
}
