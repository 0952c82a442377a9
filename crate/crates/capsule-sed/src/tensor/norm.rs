//! Batch normalization and inverted dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::Tensor;

/// Variance epsilon keeping constant channels finite.
pub const BN_EPS: f64 = 1e-5;

/// Statistics tracked across training for evaluation-time normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStat {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel statistics observed during one training-mode forward pass.
/// The trainer folds these into the running statistics in sample order, so
/// parallel per-sample forwards stay reproducible.
#[derive(Debug, Clone)]
pub struct BnObservation {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStat {
    /// Exponential update with the given momentum.
    pub fn update(&mut self, obs: &BnObservation, momentum: f64) {
        for (r, &m) in self.mean.iter_mut().zip(&obs.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, &v) in self.var.iter_mut().zip(&obs.var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }

    pub fn from_observation(obs: &BnObservation) -> Self {
        RunningStat {
            mean: obs.mean.clone(),
            var: obs.var.clone(),
        }
    }
}

/// Normalization source for [`Tensor::batchnorm`].
pub enum BnMode<'a> {
    /// Normalize by the statistics of this input, reporting them back.
    Train,
    /// Normalize by previously accumulated running statistics.
    Eval(&'a RunningStat),
}

impl Tensor {
    /// Batch normalization with axis 0 as the channel axis: statistics are
    /// taken per channel over all remaining axes. Returns the normalized
    /// tensor and, in train mode, the observed per-channel statistics.
    pub fn batchnorm(
        &self,
        scale: &Tensor,
        shift: &Tensor,
        mode: BnMode,
    ) -> Result<(Tensor, Option<BnObservation>)> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::shape("batchnorm", "scalar input".to_string()));
        }
        let c = shape[0];
        let n = self.len() / c;
        if scale.shape() != [c] || shift.shape() != [c] {
            return Err(Error::shape(
                "batchnorm",
                format!(
                    "scale {:?} / shift {:?} for {} channels",
                    scale.shape(),
                    shift.shape(),
                    c
                ),
            ));
        }

        let (mean, var, observation) = match &mode {
            BnMode::Train => {
                let x = self.data();
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let chan = &x[ci * n..(ci + 1) * n];
                    let m = chan.iter().sum::<f64>() / n as f64;
                    let v = chan.iter().map(|&a| (a - m) * (a - m)).sum::<f64>() / n as f64;
                    mean[ci] = m;
                    var[ci] = v;
                }
                let obs = BnObservation {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(obs))
            }
            BnMode::Eval(running) => {
                if running.mean.len() != c || running.var.len() != c {
                    return Err(Error::shape(
                        "batchnorm",
                        format!(
                            "running stats cover {} channels, input has {}",
                            running.mean.len(),
                            c
                        ),
                    ));
                }
                (running.mean.clone(), running.var.clone(), None)
            }
        };
        let train = observation.is_some();

        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let x = self.data();
        let mut xhat = vec![0.0; self.len()];
        let mut out = vec![0.0; self.len()];
        let gam = scale.data();
        let bet = shift.data();
        for ci in 0..c {
            for i in 0..n {
                let xh = (x[ci * n + i] - mean[ci]) * invstd[ci];
                xhat[ci * n + i] = xh;
                out[ci * n + i] = gam[ci] * xh + bet[ci];
            }
        }

        let gamma = scale.data.clone();
        let tensor = Tensor::from_op(
            &[self, scale, shift],
            shape.to_vec(),
            out,
            move |g, sinks| {
                sinks.add(0, |buf| {
                    if train {
                        // full backward through batch statistics
                        for ci in 0..c {
                            let gch = &g[ci * n..(ci + 1) * n];
                            let xh = &xhat[ci * n..(ci + 1) * n];
                            let sum_g: f64 = gch.iter().sum();
                            let sum_gx: f64 = gch.iter().zip(xh).map(|(a, b)| a * b).sum();
                            let k = gamma[ci] * invstd[ci] / n as f64;
                            let dch = &mut buf[ci * n..(ci + 1) * n];
                            for i in 0..n {
                                dch[i] += k * (n as f64 * gch[i] - sum_g - xh[i] * sum_gx);
                            }
                        }
                    } else {
                        for ci in 0..c {
                            let k = gamma[ci] * invstd[ci];
                            let gch = &g[ci * n..(ci + 1) * n];
                            let dch = &mut buf[ci * n..(ci + 1) * n];
                            for i in 0..n {
                                dch[i] += k * gch[i];
                            }
                        }
                    }
                });
                sinks.add(1, |buf| {
                    for ci in 0..c {
                        let gch = &g[ci * n..(ci + 1) * n];
                        let xh = &xhat[ci * n..(ci + 1) * n];
                        buf[ci] += gch.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                sinks.add(2, |buf| {
                    for ci in 0..c {
                        buf[ci] += g[ci * n..(ci + 1) * n].iter().sum::<f64>();
                    }
                });
            },
        )?;
        Ok((tensor, observation))
    }

    /// Inverted dropout: in train mode each value is zeroed with probability
    /// `rate` and survivors are rescaled by `1/(1-rate)`; eval mode is the
    /// identity.
    pub fn dropout(&self, rate: f64, train: bool, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let mask: Vec<f64> = (0..self.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { inv })
            .collect();
        let data = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        Tensor::from_op(&[self], self.shape().to_vec(), data, move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * mask[i];
                }
            });
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn already_normalized_input_passes_through() {
        // channel values with mean 0, variance 1; scale 1, shift 0
        let x = Tensor::from_vec(vec![1, 4], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (y, obs) = x
            .batchnorm(&Tensor::vector(&[1.0]), &Tensor::vector(&[0.0]), BnMode::Train)
            .unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
        let obs = obs.unwrap();
        assert_abs_diff_eq!(obs.mean[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(obs.var[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let x = Tensor::full(&[2, 5], 3.7);
        let (y, _) = x
            .batchnorm(
                &Tensor::vector(&[2.0, 2.0]),
                &Tensor::vector(&[0.5, -0.5]),
                BnMode::Train,
            )
            .unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(y.at(&[0, i]), 0.5, epsilon = 1e-9);
            assert_abs_diff_eq!(y.at(&[1, i]), -0.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn random_batch_is_standardized() {
        let mut r = rng(5);
        let n = 512;
        let data: Vec<f64> = (0..3 * n).map(|_| r.random::<f64>() * 4.0 + 1.0).collect();
        let x = Tensor::from_vec(vec![3, n], data).unwrap();
        let (y, _) = x
            .batchnorm(
                &Tensor::vector(&[1.0; 3]),
                &Tensor::vector(&[0.0; 3]),
                BnMode::Train,
            )
            .unwrap();
        for ci in 0..3 {
            let chan = &y.data()[ci * n..(ci + 1) * n];
            let m = chan.iter().sum::<f64>() / n as f64;
            let v = chan.iter().map(|&a| (a - m) * (a - m)).sum::<f64>() / n as f64;
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-5);
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn eval_uses_running_stats() {
        let running = RunningStat {
            mean: vec![2.0],
            var: vec![4.0],
        };
        let x = Tensor::from_vec(vec![1, 2], vec![2.0, 4.0]).unwrap();
        let (y, obs) = x
            .batchnorm(
                &Tensor::vector(&[1.0]),
                &Tensor::vector(&[0.0]),
                BnMode::Eval(&running),
            )
            .unwrap();
        assert!(obs.is_none());
        assert_abs_diff_eq!(y.data()[0], 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(y.data()[1], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let x = Tensor::vector(&[1.0, -2.0, 3.0]);
        let y = x.dropout(0.0, true, &mut rng(1)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dropout_eval_is_identity() {
        let x = Tensor::vector(&[1.0, -2.0, 3.0]);
        let y = x.dropout(0.9, false, &mut rng(1)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let x = Tensor::vector(&[1.0]);
        assert!(x.dropout(1.0, true, &mut rng(1)).is_err());
    }

    #[test]
    fn dropout_empirical_rate() {
        let n = 100_000;
        let x = Tensor::from_vec(vec![n], vec![1.0; n]).unwrap();
        let y = x.dropout(0.25, true, &mut rng(42)).unwrap();
        let dropped = y.data().iter().filter(|&&v| v == 0.0).count();
        let frac = dropped as f64 / n as f64;
        assert!((frac - 0.25).abs() < 0.01, "observed drop fraction {frac}");
        // survivors rescaled by 1/(1-rate)
        let survivor = y.data().iter().find(|&&v| v != 0.0).unwrap();
        assert_abs_diff_eq!(*survivor, 1.0 / 0.75, epsilon = 1e-12);
    }
}
