//! Stacked LSTM forward pass on the tape.
//!
//! Each layer holds one fused gate matrix of shape `(4*hidden, input+hidden)`
//! and a bias of shape `(4*hidden)`. Gate order within the fused block is
//! input, forget, cell, output.

use crate::error::{NumError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Tape-bound parameters of one LSTM layer.
#[derive(Clone, Copy)]
pub struct LstmLayer {
    pub w: Var,
    pub b: Var,
}

/// Tape-bound parameters of a stacked LSTM.
#[derive(Clone)]
pub struct LstmVars {
    pub layers: Vec<LstmLayer>,
    pub hidden: usize,
}

/// Per-layer hidden and cell state.
#[derive(Clone)]
pub struct LstmState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, layers: usize, hidden: usize) -> Result<LstmState> {
        let mut h = Vec::with_capacity(layers);
        let mut c = Vec::with_capacity(layers);
        for _ in 0..layers {
            h.push(tape.constant(Tensor::zeros(vec![hidden]))?);
            c.push(tape.constant(Tensor::zeros(vec![hidden]))?);
        }
        Ok(LstmState { h, c })
    }

    /// Top-layer hidden state.
    pub fn top(&self) -> Var {
        *self.h.last().expect("empty LSTM state")
    }
}

/// One step of a single LSTM cell.
fn cell_step(
    tape: &mut Tape,
    layer: LstmLayer,
    hidden: usize,
    input: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let xin = tape.concat(&[input, h_prev])?;
    let z = tape.matvec(layer.w, xin)?;
    let z = tape.add(z, layer.b)?;
    let zi = tape.slice(z, 0, hidden)?;
    let zf = tape.slice(z, hidden, hidden)?;
    let zg = tape.slice(z, 2 * hidden, hidden)?;
    let zo = tape.slice(z, 3 * hidden, hidden)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let g = tape.tanh(zg)?;
    let o = tape.sigmoid(zo)?;
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// One step through the full stack. `inter_dropout` (rate, training) applies
/// between layers, never on the recurrent state.
pub fn lstm_step<R: Rng>(
    tape: &mut Tape,
    vars: &LstmVars,
    input: Var,
    state: &LstmState,
    inter_dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<LstmState> {
    if state.h.len() != vars.layers.len() {
        return Err(NumError::Shape(format!(
            "lstm_step: state has {} layers, stack has {}",
            state.h.len(),
            vars.layers.len()
        )));
    }
    let mut h = Vec::with_capacity(vars.layers.len());
    let mut c = Vec::with_capacity(vars.layers.len());
    let mut x = input;
    for (l, layer) in vars.layers.iter().enumerate() {
        if l > 0 {
            x = tape.dropout(x, inter_dropout, training, rng)?;
        }
        let (hl, cl) = cell_step(tape, *layer, vars.hidden, x, state.h[l], state.c[l])?;
        h.push(hl);
        c.push(cl);
        x = hl;
    }
    Ok(LstmState { h, c })
}

/// Run a full sequence; returns the top-layer hidden state at every step and
/// the final state of all layers.
pub fn lstm_forward<R: Rng>(
    tape: &mut Tape,
    vars: &LstmVars,
    inputs: &[Var],
    initial: Option<LstmState>,
    inter_dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Vec<Var>, LstmState)> {
    if inputs.is_empty() {
        return Err(NumError::Shape("lstm_forward: empty input sequence".into()));
    }
    let mut state = match initial {
        Some(s) => s,
        None => LstmState::zeros(tape, vars.layers.len(), vars.hidden)?,
    };
    let mut tops = Vec::with_capacity(inputs.len());
    for &x in inputs {
        state = lstm_step(tape, vars, x, &state, inter_dropout, training, rng)?;
        tops.push(state.top());
    }
    Ok((tops, state))
}

/// Parameter shapes for one stacked LSTM: `[(w_shape, b_shape); layers]`.
pub fn lstm_param_shapes(layers: usize, input: usize, hidden: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..layers)
        .map(|l| {
            let in_dim = if l == 0 { input } else { hidden };
            (vec![4 * hidden, in_dim + hidden], vec![4 * hidden])
        })
        .collect()
}
