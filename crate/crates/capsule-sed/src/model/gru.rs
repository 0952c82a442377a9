//! Gated recurrent unit, one direction at a time.
//!
//! Standard formulation: sigmoid update and reset gates, tanh candidate on
//! the reset-gated hidden state, and the convex combination
//! `h_t = z (.) h_{t-1} + (1 - z) (.) n_t`. The backward direction reuses
//! the same cell on the reversed sequence.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

use super::{glorot_values, ModelConfig, ParamSet, ParamStore};

/// Parameter indices of one GRU direction.
#[derive(Debug, Clone, Copy)]
pub struct GruParamRefs {
    pub w_update: usize,
    pub u_update: usize,
    pub b_update: usize,
    pub w_reset: usize,
    pub u_reset: usize,
    pub b_reset: usize,
    pub w_cand: usize,
    pub u_cand: usize,
    pub b_cand: usize,
}

pub(super) fn init_direction(
    store: &mut ParamStore,
    prefix: &str,
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> GruParamRefs {
    let (input, hidden) = (config.gru_input(), config.gru_hidden);
    let mut gate = |gate_name: &str, in_dim: usize| {
        store.add(
            format!("{prefix}.{gate_name}"),
            vec![hidden, in_dim],
            glorot_values(rng, hidden * in_dim, in_dim, hidden),
        )
    };
    let w_update = gate("w_update", input);
    let u_update = gate("u_update", hidden);
    let w_reset = gate("w_reset", input);
    let u_reset = gate("u_reset", hidden);
    let w_cand = gate("w_cand", input);
    let u_cand = gate("u_cand", hidden);
    let b_update = store.add(format!("{prefix}.b_update"), vec![hidden], vec![0.0; hidden]);
    let b_reset = store.add(format!("{prefix}.b_reset"), vec![hidden], vec![0.0; hidden]);
    let b_cand = store.add(format!("{prefix}.b_cand"), vec![hidden], vec![0.0; hidden]);
    GruParamRefs {
        w_update,
        u_update,
        b_update,
        w_reset,
        u_reset,
        b_reset,
        w_cand,
        u_cand,
        b_cand,
    }
}

/// One GRU cell step.
fn cell(params: &ParamSet, refs: &GruParamRefs, x: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
    let z = params
        .get(refs.w_update)
        .matvec(x)?
        .add(&params.get(refs.u_update).matvec(h_prev)?)?
        .add(params.get(refs.b_update))?
        .sigmoid();
    let r = params
        .get(refs.w_reset)
        .matvec(x)?
        .add(&params.get(refs.u_reset).matvec(h_prev)?)?
        .add(params.get(refs.b_reset))?
        .sigmoid();
    let n = params
        .get(refs.w_cand)
        .matvec(x)?
        .add(&params.get(refs.u_cand).matvec(&r.mul(h_prev)?)?)?
        .add(params.get(refs.b_cand))?
        .tanh();
    z.mul(h_prev)?.add(&z.sub_from_scalar(1.0).mul(&n)?)
}

/// Run one direction over per-frame input vectors, returning the hidden
/// state per frame in original time order.
pub(super) fn run_direction(
    params: &ParamSet,
    refs: &GruParamRefs,
    frames: &[Tensor],
    reverse: bool,
) -> Result<Vec<Tensor>> {
    let hidden_dim = params.get(refs.b_update).len();
    let mut h = Tensor::zeros(&[hidden_dim]);
    let mut out: Vec<Option<Tensor>> = vec![None; frames.len()];
    let order: Vec<usize> = if reverse {
        (0..frames.len()).rev().collect()
    } else {
        (0..frames.len()).collect()
    };
    for t in order {
        h = cell(params, refs, &frames[t], &h)?;
        out[t] = Some(h.clone());
    }
    Ok(out.into_iter().map(|t| t.expect("all frames visited")).collect())
}
