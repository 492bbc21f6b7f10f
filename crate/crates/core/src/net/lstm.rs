//! Recurrent LSTM baseline.
//!
//! A single vanilla LSTM consumes the valid window rows in chronological
//! order starting from zero hidden and cell states; the final hidden state,
//! concatenated with the static vector, feeds the dueling head. Padding is
//! unnecessary because iteration simply stops at the window's valid length.

use rand_chacha::ChaCha12Rng;

use super::{
    dueling_head, init_dueling_head, statics_leaf, ForwardParts, HistoryWindow, LstmConfig,
};
use crate::error::Result;
use crate::tensor::tape::{Tape, Val};
use crate::tensor::{xavier_uniform, ParamStore, Tensor};

const GATES: [&str; 4] = ["i", "f", "g", "o"];

pub(super) fn init_params(cfg: &LstmConfig, rng: &mut ChaCha12Rng) -> Result<ParamStore> {
    let mut p = ParamStore::new();
    for gate in GATES {
        p.insert(
            format!("lstm.wx{gate}"),
            xavier_uniform(cfg.obs_dim, cfg.hidden, rng),
        )?;
        p.insert(
            format!("lstm.wh{gate}"),
            xavier_uniform(cfg.hidden, cfg.hidden, rng),
        )?;
        p.insert(format!("lstm.b{gate}"), Tensor::zeros(vec![cfg.hidden]))?;
    }
    init_dueling_head(&mut p, cfg.hidden + cfg.static_dim, cfg.num_actions, rng)?;
    Ok(p)
}

fn gate(
    tape: &mut Tape,
    params: &ParamStore,
    name: &str,
    x: Val,
    h: Val,
) -> Result<Val> {
    let wx = tape.param(params, &format!("lstm.wx{name}"))?;
    let wh = tape.param(params, &format!("lstm.wh{name}"))?;
    let b = tape.param(params, &format!("lstm.b{name}"))?;
    let xs = tape.matmul(x, wx)?;
    let hs = tape.matmul(h, wh)?;
    let sum = tape.add(xs, hs)?;
    tape.add_bias(sum, b)
}

pub(super) fn forward(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &LstmConfig,
    window: &HistoryWindow,
    statics: &[f64],
) -> Result<ForwardParts> {
    let zeros = vec![0.0; cfg.hidden];
    let mut h = tape.leaf_from(vec![1, cfg.hidden], zeros.clone())?;
    let mut c = tape.leaf_from(vec![1, cfg.hidden], zeros)?;

    for p in 0..window.valid_len() {
        let x = tape.leaf_from(vec![1, cfg.obs_dim], window.row(p).to_vec())?;
        let i_pre = gate(tape, params, "i", x, h)?;
        let f_pre = gate(tape, params, "f", x, h)?;
        let g_pre = gate(tape, params, "g", x, h)?;
        let o_pre = gate(tape, params, "o", x, h)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let ct = tape.tanh(c);
        h = tape.mul(o, ct)?;
    }

    let st = statics_leaf(tape, statics)?;
    let features = tape.concat(&[h, st])?;
    let (q, value, advantage) = dueling_head(tape, params, features)?;
    Ok(ForwardParts {
        q,
        value,
        advantage,
        trace: None,
    })
}
