//! Capsule primitives: the squashing nonlinearity, prediction vectors,
//! iterative routing-by-agreement, capsule lengths, and the margin loss.
//!
//! Low-level capsules `u_i` predict each high-level capsule `j` through a
//! per-pair weight matrix (`u_hat[j|i] = W_ij . u_i`). Routing then
//! alternates a softmax over the high-level axis of the log priors, a
//! coupling-weighted sum, and squashing, raising each prior by the scalar
//! product between the prediction and the emerging output. All iterations
//! are unrolled, so gradients flow through the whole process.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A set of same-dimensional capsule vectors, `[count x dim]`.
#[derive(Debug, Clone)]
pub struct CapsulePopulation {
    pub count: usize,
    pub dim: usize,
    pub vectors: Tensor,
}

impl CapsulePopulation {
    pub fn new(vectors: Tensor) -> Result<Self> {
        let shape = vectors.shape();
        if shape.len() != 2 {
            return Err(Error::shape(
                "capsule_population",
                format!("expected [count x dim], got {:?}", shape),
            ));
        }
        Ok(CapsulePopulation {
            count: shape[0],
            dim: shape[1],
            vectors,
        })
    }
}

/// Snapshot of one routing iteration: the log priors that produced this
/// iteration's couplings, the couplings themselves, the shared prediction
/// vectors, and the squashed output. Values are detached copies.
#[derive(Debug, Clone)]
pub struct RoutingState {
    pub iteration: usize,
    pub log_priors: Tensor,
    pub couplings: Tensor,
    pub predictions: Tensor,
    pub output: Tensor,
}

/// Result of [`route`]: the final high-level capsules plus the
/// introspectable per-iteration trace.
#[derive(Debug, Clone)]
pub struct RouteResult {
    /// Squashed high-level capsules `[n_high x dim]` after the last iteration.
    pub output: Tensor,
    /// Pre-squash weighted sums `[n_high x dim]` of the last iteration.
    pub pre_squash: Tensor,
    pub trace: Vec<RoutingState>,
}

/// Margin-loss hyperparameters; defaults follow the original capsule
/// classification setup (`m+ = 0.9`, `m- = 0.1`, `lambda = 0.5`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginLossParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginLossParams {
    fn default() -> Self {
        MarginLossParams {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

impl MarginLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            return Err(Error::Config(format!(
                "margin params must satisfy 0 < m- < m+ < 1, got m+={}, m-={}",
                self.m_plus, self.m_minus
            )));
        }
        if self.lambda <= 0.0 {
            return Err(Error::Config(format!(
                "margin lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Squashing nonlinearity applied along the last (capsule) axis:
/// `(|s|^2 / (1 + |s|^2)) * (s / |s|)`, with the epsilon-safeguarded norm so
/// the gradient is finite at the zero vector. Output norms lie in `[0, 1)`.
pub fn squash(s: &Tensor) -> Result<Tensor> {
    let shape = s.shape().to_vec();
    let dim = *shape.last().ok_or_else(|| {
        Error::shape("squash", "empty shape".to_string())
    })?;
    let rows = s.len() / dim;
    let flat = s.reshape(&[rows, dim])?;
    let norm = flat.vector_norm();
    // |s| / (1 + |s|^2) scales s to (|s|^2/(1+|s|^2)) * unit direction
    let factor = norm.div(&norm.mul(&norm)?.add_scalar(1.0))?;
    flat.scale_rows(&factor)?.reshape(&shape)
}

/// Euclidean length of each capsule along the last axis.
pub fn capsule_lengths(v: &Tensor) -> Tensor {
    v.vector_norm()
}

/// Prediction vectors `u_hat[j|i] = W_ij . u_i` for every pair of a
/// low-level capsule `i` and a high-level capsule `j`.
///
/// `weights` is `[n_low x n_high x dim_high x dim_low]`; the result is
/// `[n_low x n_high x dim_high]`.
pub fn predict_vectors(u: &CapsulePopulation, weights: &Tensor) -> Result<Tensor> {
    let ws = weights.shape();
    if ws.len() != 4 || ws[0] != u.count || ws[3] != u.dim {
        return Err(Error::shape(
            "predict_vectors",
            format!(
                "weights {:?} incompatible with {} capsules of dim {}",
                ws, u.count, u.dim
            ),
        ));
    }
    let (n_low, n_high, dh, dl) = (ws[0], ws[1], ws[2], ws[3]);
    let w = weights.data().to_vec();
    let uv = u.vectors.data().to_vec();
    let mut out = vec![0.0; n_low * n_high * dh];
    for i in 0..n_low {
        let urow = &uv[i * dl..(i + 1) * dl];
        for j in 0..n_high {
            let wbase = (i * n_high + j) * dh * dl;
            let obase = (i * n_high + j) * dh;
            for a in 0..dh {
                let wrow = &w[wbase + a * dl..wbase + (a + 1) * dl];
                let mut acc = 0.0;
                for b in 0..dl {
                    acc += wrow[b] * urow[b];
                }
                out[obase + a] = acc;
            }
        }
    }
    Tensor::from_op(
        &[&u.vectors, weights],
        vec![n_low, n_high, dh],
        out,
        move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..n_low {
                    for j in 0..n_high {
                        let wbase = (i * n_high + j) * dh * dl;
                        let gbase = (i * n_high + j) * dh;
                        for a in 0..dh {
                            let ga = g[gbase + a];
                            let wrow = &w[wbase + a * dl..wbase + (a + 1) * dl];
                            let drow = &mut buf[i * dl..(i + 1) * dl];
                            for b in 0..dl {
                                drow[b] += ga * wrow[b];
                            }
                        }
                    }
                }
            });
            sinks.add(1, |buf| {
                for i in 0..n_low {
                    let urow = &uv[i * dl..(i + 1) * dl];
                    for j in 0..n_high {
                        let wbase = (i * n_high + j) * dh * dl;
                        let gbase = (i * n_high + j) * dh;
                        for a in 0..dh {
                            let ga = g[gbase + a];
                            let drow = &mut buf[wbase + a * dl..wbase + (a + 1) * dl];
                            for b in 0..dl {
                                drow[b] += ga * urow[b];
                            }
                        }
                    }
                }
            });
        },
    )
}

/// Coupling-weighted sum `s_j = sum_i c_ij * u_hat[j|i]`.
fn weighted_sum(couplings: &Tensor, predictions: &Tensor) -> Result<Tensor> {
    let cs = couplings.shape();
    let ps = predictions.shape();
    if cs.len() != 2 || ps.len() != 3 || cs[0] != ps[0] || cs[1] != ps[1] {
        return Err(Error::shape(
            "route_weighted_sum",
            format!("couplings {:?} vs predictions {:?}", cs, ps),
        ));
    }
    let (n_low, n_high, d) = (ps[0], ps[1], ps[2]);
    let c = couplings.data().to_vec();
    let p = predictions.data().to_vec();
    let mut out = vec![0.0; n_high * d];
    for i in 0..n_low {
        for j in 0..n_high {
            let cij = c[i * n_high + j];
            let pbase = (i * n_high + j) * d;
            let obase = j * d;
            for a in 0..d {
                out[obase + a] += cij * p[pbase + a];
            }
        }
    }
    Tensor::from_op(
        &[couplings, predictions],
        vec![n_high, d],
        out,
        move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..n_low {
                    for j in 0..n_high {
                        let pbase = (i * n_high + j) * d;
                        let mut acc = 0.0;
                        for a in 0..d {
                            acc += g[j * d + a] * p[pbase + a];
                        }
                        buf[i * n_high + j] += acc;
                    }
                }
            });
            sinks.add(1, |buf| {
                for i in 0..n_low {
                    for j in 0..n_high {
                        let cij = c[i * n_high + j];
                        let pbase = (i * n_high + j) * d;
                        for a in 0..d {
                            buf[pbase + a] += cij * g[j * d + a];
                        }
                    }
                }
            });
        },
    )
}

/// Agreement `a_ij = u_hat[j|i] . v_j`, the log-prior increment.
fn agreement(predictions: &Tensor, output: &Tensor) -> Result<Tensor> {
    let ps = predictions.shape();
    let vs = output.shape();
    if ps.len() != 3 || vs.len() != 2 || ps[1] != vs[0] || ps[2] != vs[1] {
        return Err(Error::shape(
            "route_agreement",
            format!("predictions {:?} vs output {:?}", ps, vs),
        ));
    }
    let (n_low, n_high, d) = (ps[0], ps[1], ps[2]);
    let p = predictions.data().to_vec();
    let v = output.data().to_vec();
    let mut out = vec![0.0; n_low * n_high];
    for i in 0..n_low {
        for j in 0..n_high {
            let pbase = (i * n_high + j) * d;
            let mut acc = 0.0;
            for a in 0..d {
                acc += p[pbase + a] * v[j * d + a];
            }
            out[i * n_high + j] = acc;
        }
    }
    Tensor::from_op(
        &[predictions, output],
        vec![n_low, n_high],
        out,
        move |g, sinks| {
            sinks.add(0, |buf| {
                for i in 0..n_low {
                    for j in 0..n_high {
                        let gij = g[i * n_high + j];
                        let pbase = (i * n_high + j) * d;
                        for a in 0..d {
                            buf[pbase + a] += gij * v[j * d + a];
                        }
                    }
                }
            });
            sinks.add(1, |buf| {
                for i in 0..n_low {
                    for j in 0..n_high {
                        let gij = g[i * n_high + j];
                        let pbase = (i * n_high + j) * d;
                        for a in 0..d {
                            buf[j * d + a] += gij * p[pbase + a];
                        }
                    }
                }
            });
        },
    )
}

/// Dynamic routing-by-agreement over prediction vectors
/// `[n_low x n_high x dim_high]`.
///
/// Runs exactly `iterations` rounds of couple-sum-squash, starting from
/// all-zero log priors. The final round skips the prior update (it could
/// not influence anything). Gradients flow through every unrolled round.
pub fn route(predictions: &Tensor, iterations: usize) -> Result<RouteResult> {
    if iterations < 1 {
        return Err(Error::Config(format!(
            "routing needs at least 1 iteration, got {iterations}"
        )));
    }
    let ps = predictions.shape();
    if ps.len() != 3 {
        return Err(Error::shape(
            "route",
            format!("expected [n_low x n_high x dim], got {:?}", ps),
        ));
    }
    let (n_low, n_high) = (ps[0], ps[1]);
    let pred_snapshot = predictions.detach();

    let mut log_priors = Tensor::zeros(&[n_low, n_high]);
    let mut trace = Vec::with_capacity(iterations);
    let mut result = None;
    for it in 0..iterations {
        let couplings = log_priors.softmax_rows()?;
        let pre_squash = weighted_sum(&couplings, predictions)?;
        let output = squash(&pre_squash)?;
        trace.push(RoutingState {
            iteration: it,
            log_priors: log_priors.detach(),
            couplings: couplings.detach(),
            predictions: pred_snapshot.clone(),
            output: output.detach(),
        });
        if it + 1 < iterations {
            log_priors = log_priors.add(&agreement(predictions, &output)?)?;
            result = None;
        } else {
            result = Some(RouteResult {
                output,
                pre_squash,
                trace: Vec::new(),
            });
        }
    }
    let mut result = result.expect("iterations >= 1");
    result.trace = trace;
    Ok(result)
}

/// Margin loss over capsule lengths for one frame:
/// `L_k = T_k max(0, m+ - |v_k|)^2 + lambda (1 - T_k) max(0, |v_k| - m-)^2`,
/// summed over the `K` classes. `targets` holds 0/1 per class.
pub fn margin_loss(lengths: &Tensor, targets: &Tensor, params: &MarginLossParams) -> Result<Tensor> {
    if lengths.shape() != targets.shape() {
        return Err(Error::shape(
            "margin_loss",
            format!("{:?} vs {:?}", lengths.shape(), targets.shape()),
        ));
    }
    params.validate()?;
    let present = lengths.sub_from_scalar(params.m_plus).relu();
    let present = present.mul(&present)?.mul(targets)?;
    let absent = lengths.add_scalar(-params.m_minus).relu();
    let absent = absent
        .mul(&absent)?
        .mul(&targets.sub_from_scalar(1.0))?
        .mul_scalar(params.lambda);
    Ok(present.add(&absent)?.sum_all())
}

/// Margin loss per class-frame cell for `[K x T]` lengths and targets,
/// without any reduction. The model sums over classes and averages over
/// unmasked frames.
pub fn margin_loss_cells(
    lengths: &Tensor,
    targets: &Tensor,
    params: &MarginLossParams,
) -> Result<Tensor> {
    if lengths.shape() != targets.shape() {
        return Err(Error::shape(
            "margin_loss",
            format!("{:?} vs {:?}", lengths.shape(), targets.shape()),
        ));
    }
    params.validate()?;
    let present = lengths.sub_from_scalar(params.m_plus).relu();
    let present = present.mul(&present)?.mul(targets)?;
    let absent = lengths.add_scalar(-params.m_minus).relu();
    let absent = absent
        .mul(&absent)?
        .mul(&targets.sub_from_scalar(1.0))?
        .mul_scalar(params.lambda);
    present.add(&absent)
}

/// Serialize a routing trace as tab-separated text: one line per
/// `(iteration, i, j)` with the log prior and coupling.
pub fn write_trace(mut w: impl Write, trace: &[RoutingState]) -> std::io::Result<()> {
    writeln!(w, "iteration\ti\tj\tb_ij\tc_ij")?;
    for state in trace {
        let shape = state.couplings.shape();
        let (n_low, n_high) = (shape[0], shape[1]);
        for i in 0..n_low {
            for j in 0..n_high {
                writeln!(
                    w,
                    "{}\t{}\t{}\t{:.9}\t{:.9}",
                    state.iteration,
                    i,
                    j,
                    state.log_priors.at(&[i, j]),
                    state.couplings.at(&[i, j]),
                )?;
            }
        }
    }
    Ok(())
}
