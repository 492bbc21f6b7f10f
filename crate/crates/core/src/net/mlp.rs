//! Memoryless MLP baseline.
//!
//! Sees only the current observation row and the static vector:
//! concat → linear → relu → linear → relu → dueling head. By construction
//! its output cannot depend on anything earlier in the window.

use rand_chacha::ChaCha12Rng;

use super::{dueling_head, init_dueling_head, statics_leaf, ForwardParts, HistoryWindow, MlpConfig};
use crate::error::Result;
use crate::tensor::tape::Tape;
use crate::tensor::{xavier_uniform, ParamStore, Tensor};

pub(super) fn init_params(cfg: &MlpConfig, rng: &mut ChaCha12Rng) -> Result<ParamStore> {
    let mut p = ParamStore::new();
    let input = cfg.obs_dim + cfg.static_dim;
    p.insert("fc1.w", xavier_uniform(input, cfg.hidden, rng))?;
    p.insert("fc1.b", Tensor::zeros(vec![cfg.hidden]))?;
    p.insert("fc2.w", xavier_uniform(cfg.hidden, cfg.hidden, rng))?;
    p.insert("fc2.b", Tensor::zeros(vec![cfg.hidden]))?;
    init_dueling_head(&mut p, cfg.hidden, cfg.num_actions, rng)?;
    Ok(p)
}

pub(super) fn forward(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &MlpConfig,
    window: &HistoryWindow,
    statics: &[f64],
) -> Result<ForwardParts> {
    let obs = tape.leaf_from(vec![1, cfg.obs_dim], window.current().to_vec())?;
    let st = statics_leaf(tape, statics)?;
    let input = tape.concat(&[obs, st])?;

    let w1 = tape.param(params, "fc1.w")?;
    let b1 = tape.param(params, "fc1.b")?;
    let h1_lin = tape.matmul(input, w1)?;
    let h1_pre = tape.add_bias(h1_lin, b1)?;
    let h1 = tape.relu(h1_pre);

    let w2 = tape.param(params, "fc2.w")?;
    let b2 = tape.param(params, "fc2.b")?;
    let h2_lin = tape.matmul(h1, w2)?;
    let h2_pre = tape.add_bias(h2_lin, b2)?;
    let h2 = tape.relu(h2_pre);

    let (q, value, advantage) = dueling_head(tape, params, h2)?;
    Ok(ForwardParts {
        q,
        value,
        advantage,
        trace: None,
    })
}
