//! LSTM cell, stacked LSTM, and affine layers recorded on a [`Tape`].
//!
//! A cell owns three parameter slots (`wx`, `wh`, `b`) whose preactivation is
//! laid out as four contiguous gate sections in the order input, forget,
//! candidate, output. Weights initialize uniformly in [-0.08, 0.08]; the
//! forget-gate bias section starts at 1.0 so early training does not wipe the
//! cell state.

use crate::diffcore::params::{ParamStore, SlotId};
use crate::diffcore::rng::Prng;
use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use crate::error::Result;

pub const INIT_SCALE: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

/// Recurrent state of one LSTM layer, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

#[derive(Debug, Clone)]
pub struct LstmCell {
    pub wx: SlotId,
    pub wh: SlotId,
    pub b: SlotId,
    pub input_size: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden: usize,
        rng: &mut Prng,
    ) -> Result<Self> {
        let rows = 4 * hidden;
        let wx = store.insert_uniform(
            &format!("{prefix}.wx"),
            vec![rows, input_size],
            INIT_SCALE,
            rng,
        )?;
        let wh = store.insert_uniform(&format!("{prefix}.wh"), vec![rows, hidden], INIT_SCALE, rng)?;
        let mut bias: Vec<f64> = (0..rows).map(|_| rng.uniform_in(-INIT_SCALE, INIT_SCALE)).collect();
        for v in &mut bias[hidden..2 * hidden] {
            *v = FORGET_BIAS;
        }
        let b = store.insert(&format!("{prefix}.b"), Tensor::vector(bias))?;
        Ok(LstmCell {
            wx,
            wh,
            b,
            input_size,
            hidden,
        })
    }

    pub fn zero_state(&self, tape: &mut Tape) -> LstmState {
        let h = tape.constant(Tensor::zeros(vec![self.hidden]));
        let c = tape.constant(Tensor::zeros(vec![self.hidden]));
        LstmState { h, c }
    }

    pub fn step(&self, tape: &mut Tape, x: NodeId, state: LstmState) -> LstmState {
        let wx = tape.param(self.wx);
        let wh = tape.param(self.wh);
        let b = tape.param(self.b);
        let from_x = tape.matvec(wx, x);
        let from_h = tape.matvec(wh, state.h);
        let lin = tape.add(from_x, from_h);
        let pre = tape.add(lin, b);

        let h = self.hidden;
        let i_pre = tape.slice(pre, 0, h);
        let f_pre = tape.slice(pre, h, h);
        let g_pre = tape.slice(pre, 2 * h, h);
        let o_pre = tape.slice(pre, 3 * h, h);
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);

        let keep = tape.mul(f, state.c);
        let write = tape.mul(i, g);
        let c_new = tape.add(keep, write);
        let c_act = tape.tanh(c_new);
        let h_new = tape.mul(o, c_act);
        LstmState { h: h_new, c: c_new }
    }
}

/// Unidirectional stack of LSTM layers; layer `l` reads the hidden state of
/// layer `l - 1`.
#[derive(Debug, Clone)]
pub struct LstmStack {
    pub cells: Vec<LstmCell>,
}

impl LstmStack {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden: usize,
        layers: usize,
        rng: &mut Prng,
    ) -> Result<Self> {
        let mut cells = Vec::with_capacity(layers);
        for l in 0..layers {
            let in_size = if l == 0 { input_size } else { hidden };
            cells.push(LstmCell::init(
                store,
                &format!("{prefix}.l{l}"),
                in_size,
                hidden,
                rng,
            )?);
        }
        Ok(LstmStack { cells })
    }

    pub fn hidden(&self) -> usize {
        self.cells.last().map_or(0, |c| c.hidden)
    }

    pub fn zero_state(&self, tape: &mut Tape) -> Vec<LstmState> {
        self.cells.iter().map(|c| c.zero_state(tape)).collect()
    }

    /// Returns the top layer's hidden node and the full new state.
    pub fn step(&self, tape: &mut Tape, x: NodeId, states: &[LstmState]) -> (NodeId, Vec<LstmState>) {
        debug_assert_eq!(states.len(), self.cells.len());
        let mut new_states = Vec::with_capacity(self.cells.len());
        let mut input = x;
        for (cell, state) in self.cells.iter().zip(states) {
            let next = cell.step(tape, input, *state);
            input = next.h;
            new_states.push(next);
        }
        (input, new_states)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: SlotId,
    pub b: SlotId,
    pub input_size: usize,
    pub output_size: usize,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        output_size: usize,
        rng: &mut Prng,
    ) -> Result<Self> {
        let w = store.insert_uniform(
            &format!("{prefix}.w"),
            vec![output_size, input_size],
            INIT_SCALE,
            rng,
        )?;
        let b = store.insert_uniform(&format!("{prefix}.b"), vec![output_size], INIT_SCALE, rng)?;
        Ok(Linear {
            w,
            b,
            input_size,
            output_size,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let wx = tape.matvec(w, x);
        tape.add(wx, b)
    }
}
