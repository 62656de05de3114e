//! Bidirectional LSTM built out of primitive tape ops.
//!
//! Gate layout inside the fused projection is `[input, forget, cell, output]`,
//! each a block of `hidden` units; initialization code relies on the forget
//! block sitting at `[hidden, 2*hidden)`.

use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Parameter handles for one direction: fused weights `[4H, D+H]`, bias `[4H]`.
#[derive(Clone, Copy)]
pub struct LstmParams {
    pub weights: Var,
    pub bias: Var,
}

/// Run one direction over `inputs` (each `[input_dim]`), returning the hidden
/// state after every step, in step order.
fn lstm_direction<T: Scalar>(
    g: &mut Graph<T>,
    inputs: &[Var],
    params: LstmParams,
    hidden: usize,
) -> Result<Vec<Var>> {
    let zero = g.constant(Tensor::zeros(vec![hidden]));
    let mut h = zero;
    let mut c = zero;
    let mut states = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let xh = g.concat(&[x, h])?;
        let z = g.fully_connected(xh, params.weights, Some(params.bias))?;
        let zi = g.slice(z, 0, hidden)?;
        let zf = g.slice(z, hidden, hidden)?;
        let zg = g.slice(z, 2 * hidden, hidden)?;
        let zo = g.slice(z, 3 * hidden, hidden)?;
        let gate_i = g.sigmoid(zi);
        let gate_f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let gate_o = g.sigmoid(zo);
        let keep = g.mul(gate_f, c)?;
        let write = g.mul(gate_i, cand)?;
        c = g.add(keep, write)?;
        let c_act = g.tanh(c);
        h = g.mul(gate_o, c_act)?;
        states.push(h);
    }
    Ok(states)
}

/// Bidirectional LSTM over a frame sequence. Returns one `[2 * hidden]`
/// state per frame: forward state concatenated with backward state, both
/// aligned to the original frame order.
pub fn bilstm_forward<T: Scalar>(
    g: &mut Graph<T>,
    frames: &[Var],
    forward: LstmParams,
    backward: LstmParams,
    hidden: usize,
) -> Result<Vec<Var>> {
    if frames.is_empty() {
        return shape_err("bilstm wants at least one frame");
    }
    let fwd_states = lstm_direction(g, frames, forward, hidden)?;
    let rev_inputs: Vec<Var> = frames.iter().rev().copied().collect();
    let mut bwd_states = lstm_direction(g, &rev_inputs, backward, hidden)?;
    bwd_states.reverse();
    fwd_states
        .into_iter()
        .zip(bwd_states)
        .map(|(f, b)| g.concat(&[f, b]))
        .collect()
}
