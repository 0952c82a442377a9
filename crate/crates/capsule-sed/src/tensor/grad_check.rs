//! Finite-difference gradient verification.
//!
//! The checker treats the function under test as a black box over flat
//! parameter buffers: it perturbs one entry at a time with central
//! differences and compares against the analytic gradient produced by the
//! reverse sweep.

/// Relative error with a floor so near-zero pairs compare sanely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    if a.abs() < 1e-7 && b.abs() < 1e-7 {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

/// Outcome of one [`check_gradients`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }
}

/// Compare analytic gradients against central finite differences.
///
/// * `params` — flat parameter buffers; mutated transiently and restored.
/// * `eval` — pure forward pass returning the scalar loss for the buffers.
/// * `analytic` — analytic gradient per buffer, aligned with `params`.
/// * `samples` — `(buffer, index)` pairs to probe.
/// * `h` — central-difference step.
pub fn check_gradients(
    params: &mut [Vec<f64>],
    mut eval: impl FnMut(&[Vec<f64>]) -> f64,
    analytic: &[Vec<f64>],
    samples: &[(usize, usize)],
    h: f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    let mut max_err = 0.0;
    let mut worst = None;
    for &(b, i) in samples {
        let orig = params[b][i];
        params[b][i] = orig + h;
        let up = eval(params);
        params[b][i] = orig - h;
        let down = eval(params);
        params[b][i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let exact = analytic[b][i];
        let err = relative_error(numeric, exact);
        if err > max_err {
            max_err = err;
            worst = Some((b, i, numeric, exact));
        }
    }
    GradCheckReport {
        checked: samples.len(),
        max_relative_error: max_err,
        worst,
    }
}

/// Deterministically spread `count` probe points over the parameter buffers.
pub fn sample_indices(sizes: &[usize], count: usize, seed: u64) -> Vec<(usize, usize)> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Vec::new();
    }
    // splitmix64 stream; no need to pull in a full RNG here
    let mut state = seed.wrapping_add(0x9e3779b97f4a7c15);
    let mut next = move || {
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    };
    let mut picks = Vec::with_capacity(count);
    for _ in 0..count {
        let mut flat = (next() % total as u64) as usize;
        for (b, &s) in sizes.iter().enumerate() {
            if flat < s {
                picks.push((b, flat));
                break;
            }
            flat -= s;
        }
    }
    picks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn quadratic_loss_gradcheck() {
        let mut params = vec![vec![1.0, 2.0, -0.5]];
        let eval = |p: &[Vec<f64>]| p[0].iter().map(|v| v * v).sum::<f64>();
        let g = Graph::new();
        let w = g.var(&Tensor::vector(&params[0]));
        let loss = w.mul(&w).unwrap().sum_all();
        g.backward(&loss).unwrap();
        let analytic = vec![w.grad().unwrap().data().to_vec()];
        let samples: Vec<(usize, usize)> = (0..3).map(|i| (0, i)).collect();
        let report = check_gradients(&mut params, eval, &analytic, &samples, 1e-4);
        assert!(report.passes(1e-6), "report: {report:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut params = vec![vec![1.5]];
        let eval = |p: &[Vec<f64>]| p[0][0] * p[0][0];
        let analytic = vec![vec![1.0]]; // wrong on purpose: true grad is 3.0
        let report = check_gradients(&mut params, eval, &analytic, &[(0, 0)], 1e-4);
        assert!(!report.passes(1e-3));
    }

    #[test]
    fn sample_indices_cover_buffers() {
        let picks = sample_indices(&[3, 5, 2], 64, 7);
        assert_eq!(picks.len(), 64);
        assert!(picks.iter().all(|&(b, i)| match b {
            0 => i < 3,
            1 => i < 5,
            2 => i < 2,
            _ => false,
        }));
        // deterministic
        assert_eq!(picks, sample_indices(&[3, 5, 2], 64, 7));
    }
}
