//! Attention Q-network forward pass.
//!
//! The history window is embedded row-wise, given a learned positional
//! encoding indexed by distance from the present, and serves as keys and
//! values for every block. A learned start token provides the first query;
//! each block's output token is the next block's query source. The final
//! token concatenated with the static vector feeds the dueling head.

use rand_chacha::ChaCha12Rng;

use super::{
    dueling_head, init_dueling_head, statics_leaf, AttentionTrace, DaqnConfig, ForwardParts,
    HistoryWindow,
};
use crate::error::Result;
use crate::tensor::tape::Tape;
use crate::tensor::{uniform_row, xavier_uniform, ParamStore, Tensor};

const LN_EPS: f64 = 1e-5;

pub(super) fn init_params(cfg: &DaqnConfig, rng: &mut ChaCha12Rng) -> Result<ParamStore> {
    let mut p = ParamStore::new();
    let e = cfg.embed;
    let head_dim = e / cfg.heads;
    p.insert("embed.w", xavier_uniform(cfg.obs_dim, e, rng))?;
    p.insert("embed.b", Tensor::zeros(vec![e]))?;
    // One positional row per distance-from-present (0 = current step).
    let pos_rows: Vec<Vec<f64>> = (0..cfg.lookback + 1).map(|_| uniform_row(e, rng)).collect();
    p.insert("pos", Tensor::from_rows(&pos_rows)?)?;
    p.insert(
        "start",
        Tensor::new(vec![1, e], uniform_row(e, rng))?,
    )?;
    for b in 0..cfg.blocks {
        for h in 0..cfg.heads {
            p.insert(format!("block{b}.head{h}.wq"), xavier_uniform(e, head_dim, rng))?;
            p.insert(format!("block{b}.head{h}.wk"), xavier_uniform(e, head_dim, rng))?;
            p.insert(format!("block{b}.head{h}.wv"), xavier_uniform(e, head_dim, rng))?;
        }
        p.insert(format!("block{b}.attn_norm.gain"), Tensor::from_vec(vec![1.0; e]))?;
        p.insert(format!("block{b}.attn_norm.bias"), Tensor::zeros(vec![e]))?;
        p.insert(format!("block{b}.ff.w1"), xavier_uniform(e, cfg.ff, rng))?;
        p.insert(format!("block{b}.ff.b1"), Tensor::zeros(vec![cfg.ff]))?;
        p.insert(format!("block{b}.ff.w2"), xavier_uniform(cfg.ff, e, rng))?;
        p.insert(format!("block{b}.ff.b2"), Tensor::zeros(vec![e]))?;
        p.insert(format!("block{b}.ff_norm.gain"), Tensor::from_vec(vec![1.0; e]))?;
        p.insert(format!("block{b}.ff_norm.bias"), Tensor::zeros(vec![e]))?;
    }
    init_dueling_head(&mut p, e + cfg.static_dim, cfg.num_actions, rng)?;
    Ok(p)
}

pub(super) fn forward(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &DaqnConfig,
    window: &HistoryWindow,
    statics: &[f64],
) -> Result<ForwardParts> {
    let slots = cfg.lookback + 1;
    let valid = window.valid_len();
    let e = cfg.embed;
    let head_dim = e / cfg.heads;

    // Padded window matrix: valid rows first (chronological), zero rows
    // after. Padded positions are excluded from attention by the mask.
    let mut data = Vec::with_capacity(slots * cfg.obs_dim);
    for p in 0..valid {
        data.extend_from_slice(window.row(p));
    }
    data.resize(slots * cfg.obs_dim, 0.0);
    let win = tape.leaf_from(vec![slots, cfg.obs_dim], data)?;

    let ew = tape.param(params, "embed.w")?;
    let eb = tape.param(params, "embed.b")?;
    let lin = tape.matmul(win, ew)?;
    let emb = tape.add_bias(lin, eb)?;

    // Positional encoding by distance from the present: window row p is
    // (valid - 1 - p) steps old. Rows are selected with a constant
    // permutation matrix; padded rows select nothing.
    let mut perm = vec![0.0; slots * slots];
    for p in 0..valid {
        perm[p * slots + (valid - 1 - p)] = 1.0;
    }
    let perm = tape.leaf_from(vec![slots, slots], perm)?;
    let pos = tape.param(params, "pos")?;
    let pos_sel = tape.matmul(perm, pos)?;
    let history = tape.add(emb, pos_sel)?;

    // Additive attention mask: 0 on valid positions, −∞ on padding.
    let mut mask_row = vec![0.0; slots];
    for m in mask_row.iter_mut().take(slots).skip(valid) {
        *m = f64::NEG_INFINITY;
    }
    let mask = tape.leaf_from(vec![1, slots], mask_row)?;

    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut token = tape.param(params, "start")?;
    let mut trace_layers = Vec::with_capacity(cfg.blocks);

    for b in 0..cfg.blocks {
        let mut head_outputs = Vec::with_capacity(cfg.heads);
        let mut head_weights = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let wq = tape.param(params, &format!("block{b}.head{h}.wq"))?;
            let wk = tape.param(params, &format!("block{b}.head{h}.wk"))?;
            let wv = tape.param(params, &format!("block{b}.head{h}.wv"))?;
            let q = tape.matmul(token, wq)?;
            let k = tape.matmul(history, wk)?;
            let v = tape.matmul(history, wv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.scale(scores, scale);
            let masked = tape.add(scaled, mask)?;
            let weights = tape.softmax(masked, 1)?;
            head_weights.push(tape.value(weights).to_vec());
            let pooled = tape.matmul(weights, v)?;
            head_outputs.push(pooled);
        }
        trace_layers.push(head_weights);
        let attn = tape.concat(&head_outputs)?;

        let res1 = tape.add(token, attn)?;
        let g1 = tape.param(params, &format!("block{b}.attn_norm.gain"))?;
        let b1 = tape.param(params, &format!("block{b}.attn_norm.bias"))?;
        let normed1 = tape.layer_norm(res1, g1, b1, LN_EPS)?;

        let w1 = tape.param(params, &format!("block{b}.ff.w1"))?;
        let bf1 = tape.param(params, &format!("block{b}.ff.b1"))?;
        let w2 = tape.param(params, &format!("block{b}.ff.w2"))?;
        let bf2 = tape.param(params, &format!("block{b}.ff.b2"))?;
        let ff_pre = tape.matmul(normed1, w1)?;
        let ff_in = tape.add_bias(ff_pre, bf1)?;
        let ff_act = tape.relu(ff_in);
        let ff_out_pre = tape.matmul(ff_act, w2)?;
        let ff_out = tape.add_bias(ff_out_pre, bf2)?;

        let res2 = tape.add(normed1, ff_out)?;
        let g2 = tape.param(params, &format!("block{b}.ff_norm.gain"))?;
        let b2 = tape.param(params, &format!("block{b}.ff_norm.bias"))?;
        token = tape.layer_norm(res2, g2, b2, LN_EPS)?;
    }

    let st = statics_leaf(tape, statics)?;
    let features = tape.concat(&[token, st])?;
    let (q, value, advantage) = dueling_head(tape, params, features)?;
    Ok(ForwardParts {
        q,
        value,
        advantage,
        trace: Some(AttentionTrace {
            layers: trace_layers,
            valid_len: valid,
        }),
    })
}
