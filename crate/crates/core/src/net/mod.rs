//! Q-network architectures.
//!
//! Three interchangeable action-value networks operate on a
//! [`HistoryWindow`] of recent per-timestep feature rows plus a static
//! feature vector:
//!
//! * [`Architecture::Daqn`] — attention over the embedded history window: a
//!   learned start token queries the window through several multi-head
//!   attention blocks (keys/values stay the embedded history throughout),
//!   each block followed by residual + layer norm and a position-wise
//!   feed-forward. The final token, concatenated with the static vector,
//!   feeds a dueling head. Attention weights are captured per block and
//!   head as an [`AttentionTrace`].
//! * [`Architecture::DqnMlp`] — memoryless baseline on the current row only.
//! * [`Architecture::DrqnLstm`] — recurrent baseline; an LSTM consumes the
//!   valid window rows and its final hidden state feeds the dueling head.
//!
//! All three end in the same dueling recombination
//! Q = V + A − mean(A), so value level and action preferences are carried
//! by separate linear maps.

mod daqn;
mod lstm;
mod mlp;

use std::sync::Arc;

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checkpoint;
use crate::tensor::gradcheck::{self, GradCheckReport};
use crate::tensor::tape::{Tape, Val};
use crate::tensor::{ParamStore, Tensor};

/// Which Q-network architecture a checkpoint or config refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Daqn,
    DqnMlp,
    DrqnLstm,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Daqn => "daqn",
            Architecture::DqnMlp => "dqn-mlp",
            Architecture::DrqnLstm => "drqn-lstm",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "daqn" => Ok(Architecture::Daqn),
            "dqn-mlp" => Ok(Architecture::DqnMlp),
            "drqn-lstm" => Ok(Architecture::DrqnLstm),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected daqn, dqn-mlp, or drqn-lstm)"
            ))),
        }
    }
}

/// Attention Q-network hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaqnConfig {
    pub obs_dim: usize,
    pub static_dim: usize,
    pub num_actions: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_embed")]
    pub embed: usize,
    #[serde(default = "default_ff")]
    pub ff: usize,
    /// Number of past steps kept in addition to the current one, so a
    /// window holds at most `lookback + 1` rows.
    #[serde(default = "default_lookback")]
    pub lookback: usize,
}

fn default_blocks() -> usize {
    4
}
fn default_heads() -> usize {
    2
}
fn default_embed() -> usize {
    128
}
fn default_ff() -> usize {
    256
}
fn default_lookback() -> usize {
    9
}
fn default_hidden() -> usize {
    128
}

impl DaqnConfig {
    /// Reference architecture (4 blocks, 2 heads, embed 128, ff 256,
    /// lookback 9) for the given problem dimensions.
    pub fn new(obs_dim: usize, static_dim: usize, num_actions: usize) -> Self {
        DaqnConfig {
            obs_dim,
            static_dim,
            num_actions,
            blocks: default_blocks(),
            heads: default_heads(),
            embed: default_embed(),
            ff: default_ff(),
            lookback: default_lookback(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.num_actions < 2 {
            return Err(Error::Config(format!(
                "daqn config needs obs_dim ≥ 1 and ≥ 2 actions, got obs_dim={} actions={}",
                self.obs_dim, self.num_actions
            )));
        }
        if self.blocks == 0 || self.heads == 0 || self.embed == 0 || self.ff == 0 {
            return Err(Error::Config("daqn config has a zero-sized component".into()));
        }
        if self.embed % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed, self.heads
            )));
        }
        Ok(())
    }
}

/// Memoryless MLP baseline hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub obs_dim: usize,
    pub static_dim: usize,
    pub num_actions: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

impl MlpConfig {
    pub fn new(obs_dim: usize, static_dim: usize, num_actions: usize) -> Self {
        MlpConfig {
            obs_dim,
            static_dim,
            num_actions,
            hidden: default_hidden(),
        }
    }
}

/// Recurrent LSTM baseline hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub obs_dim: usize,
    pub static_dim: usize,
    pub num_actions: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_lookback")]
    pub lookback: usize,
}

impl LstmConfig {
    pub fn new(obs_dim: usize, static_dim: usize, num_actions: usize) -> Self {
        LstmConfig {
            obs_dim,
            static_dim,
            num_actions,
            hidden: default_hidden(),
            lookback: default_lookback(),
        }
    }
}

/// Architecture plus hyperparameters, as stored in checkpoints and configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch")]
pub enum NetConfig {
    #[serde(rename = "daqn")]
    Daqn(DaqnConfig),
    #[serde(rename = "dqn-mlp")]
    DqnMlp(MlpConfig),
    #[serde(rename = "drqn-lstm")]
    DrqnLstm(LstmConfig),
}

impl NetConfig {
    pub fn architecture(&self) -> Architecture {
        match self {
            NetConfig::Daqn(_) => Architecture::Daqn,
            NetConfig::DqnMlp(_) => Architecture::DqnMlp,
            NetConfig::DrqnLstm(_) => Architecture::DrqnLstm,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            NetConfig::Daqn(c) => c.obs_dim,
            NetConfig::DqnMlp(c) => c.obs_dim,
            NetConfig::DrqnLstm(c) => c.obs_dim,
        }
    }

    pub fn static_dim(&self) -> usize {
        match self {
            NetConfig::Daqn(c) => c.static_dim,
            NetConfig::DqnMlp(c) => c.static_dim,
            NetConfig::DrqnLstm(c) => c.static_dim,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            NetConfig::Daqn(c) => c.num_actions,
            NetConfig::DqnMlp(c) => c.num_actions,
            NetConfig::DrqnLstm(c) => c.num_actions,
        }
    }

    /// Historical depth: how many past rows (beyond the current one) the
    /// architecture can see. Zero for the memoryless baseline.
    pub fn lookback(&self) -> usize {
        match self {
            NetConfig::Daqn(c) => c.lookback,
            NetConfig::DqnMlp(_) => 0,
            NetConfig::DrqnLstm(c) => c.lookback,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            NetConfig::Daqn(c) => c.validate(),
            NetConfig::DqnMlp(c) => {
                if c.obs_dim == 0 || c.num_actions < 2 || c.hidden == 0 {
                    return Err(Error::Config("invalid mlp config".into()));
                }
                Ok(())
            }
            NetConfig::DrqnLstm(c) => {
                if c.obs_dim == 0 || c.num_actions < 2 || c.hidden == 0 {
                    return Err(Error::Config("invalid lstm config".into()));
                }
                Ok(())
            }
        }
    }
}

/// A chronologically ordered view of up to `lookback + 1` per-timestep
/// feature rows ending at the decision point.
///
/// Windows share their episode's row matrix, so materializing one per
/// transition costs two indices, not a copy. Row 0 is the oldest visible
/// observation; the last row is the current one.
#[derive(Debug, Clone)]
pub struct HistoryWindow {
    source: Arc<Vec<Vec<f64>>>,
    start: usize,
    len: usize,
}

impl HistoryWindow {
    /// A window over all of `rows` (mostly for tests and single forwards).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let len = rows.len();
        Self::view(Arc::new(rows), 0, len)
    }

    /// A window over `source[start .. start + len]`.
    pub fn view(source: Arc<Vec<Vec<f64>>>, start: usize, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::contract("history window must hold at least one row"));
        }
        if start + len > source.len() {
            return Err(Error::contract(format!(
                "window [{start}, {}) exceeds the {}-row episode",
                start + len,
                source.len()
            )));
        }
        let dim = source[start].len();
        if dim == 0 {
            return Err(Error::contract("history window rows must be non-empty"));
        }
        for r in &source[start..start + len] {
            if r.len() != dim {
                return Err(Error::ShapeMismatch {
                    op: "HistoryWindow::view",
                    lhs: vec![dim],
                    rhs: vec![r.len()],
                });
            }
        }
        Ok(HistoryWindow { source, start, len })
    }

    /// Number of real observations in the window (1 ..= lookback + 1).
    pub fn valid_len(&self) -> usize {
        self.len
    }

    pub fn obs_dim(&self) -> usize {
        self.source[self.start].len()
    }

    /// Row `p`, chronological: 0 is oldest, `valid_len() - 1` is current.
    pub fn row(&self, p: usize) -> &[f64] {
        &self.source[self.start + p]
    }

    /// The current (most recent) observation row.
    pub fn current(&self) -> &[f64] {
        self.row(self.len - 1)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.len).map(move |p| self.row(p))
    }
}

/// Attention weights captured during one DAQN forward pass.
///
/// `layers[block][head]` is a full-length weight vector over the padded
/// window: entries `0 .. valid_len` are the (chronological) weights over
/// real observations and sum to 1; padded entries are exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Vec<f64>>>,
    pub valid_len: usize,
}

impl AttentionTrace {
    /// Head-averaged weights for one block.
    pub fn head_mean(&self, block: usize) -> Vec<f64> {
        let heads = &self.layers[block];
        let n = heads[0].len();
        let mut out = vec![0.0; n];
        for h in heads {
            for (o, w) in out.iter_mut().zip(h) {
                *o += w;
            }
        }
        for o in &mut out {
            *o /= heads.len() as f64;
        }
        out
    }

    pub fn num_blocks(&self) -> usize {
        self.layers.len()
    }
}

/// Q output plus the dueling decomposition, for invariant checks.
pub struct ForwardParts {
    /// `[1 × num_actions]` action values.
    pub q: Val,
    /// `[1 × 1]` state value.
    pub value: Val,
    /// `[1 × num_actions]` advantages before mean subtraction.
    pub advantage: Val,
    pub trace: Option<AttentionTrace>,
}

/// An action-value network: parameters plus the architecture that
/// interprets them.
#[derive(Debug, Clone)]
pub struct QNetwork {
    config: NetConfig,
    params: ParamStore,
}

impl QNetwork {
    /// Initializes parameters (Xavier-uniform linear maps, zero biases,
    /// unit layer-norm gains) from the given stream.
    pub fn new(config: NetConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        config.validate()?;
        let params = match &config {
            NetConfig::Daqn(c) => daqn::init_params(c, rng)?,
            NetConfig::DqnMlp(c) => mlp::init_params(c, rng)?,
            NetConfig::DrqnLstm(c) => lstm::init_params(c, rng)?,
        };
        Ok(QNetwork { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture()
    }

    pub fn num_actions(&self) -> usize {
        self.config.num_actions()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_inputs(&self, window: &HistoryWindow, statics: &[f64]) -> Result<()> {
        if window.obs_dim() != self.config.obs_dim() {
            return Err(Error::ShapeMismatch {
                op: "QNetwork::forward",
                lhs: vec![window.obs_dim()],
                rhs: vec![self.config.obs_dim()],
            });
        }
        if statics.len() != self.config.static_dim() {
            return Err(Error::ShapeMismatch {
                op: "QNetwork::forward statics",
                lhs: vec![statics.len()],
                rhs: vec![self.config.static_dim()],
            });
        }
        let max_len = match &self.config {
            NetConfig::Daqn(c) => c.lookback + 1,
            NetConfig::DrqnLstm(c) => c.lookback + 1,
            NetConfig::DqnMlp(_) => usize::MAX, // only the last row is read
        };
        if window.valid_len() > max_len {
            return Err(Error::contract(format!(
                "window holds {} rows but the architecture accepts at most {max_len}",
                window.valid_len()
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns the dueling parts.
    pub fn forward_parts(
        &self,
        tape: &mut Tape,
        window: &HistoryWindow,
        statics: &[f64],
    ) -> Result<ForwardParts> {
        self.check_inputs(window, statics)?;
        match &self.config {
            NetConfig::Daqn(c) => daqn::forward(tape, &self.params, c, window, statics),
            NetConfig::DqnMlp(c) => mlp::forward(tape, &self.params, c, window, statics),
            NetConfig::DrqnLstm(c) => lstm::forward(tape, &self.params, c, window, statics),
        }
    }

    /// Records the forward pass on `tape`; returns the `[1 × A]` Q node and
    /// the attention trace for attention architectures.
    pub fn forward(
        &self,
        tape: &mut Tape,
        window: &HistoryWindow,
        statics: &[f64],
    ) -> Result<(Val, Option<AttentionTrace>)> {
        let parts = self.forward_parts(tape, window, statics)?;
        Ok((parts.q, parts.trace))
    }

    /// Convenience evaluation on a throwaway tape.
    pub fn q_values(&self, window: &HistoryWindow, statics: &[f64]) -> Result<Vec<f64>> {
        Ok(self.q_values_traced(window, statics)?.0)
    }

    /// Evaluation that also returns the attention trace (None for the
    /// baselines).
    pub fn q_values_traced(
        &self,
        window: &HistoryWindow,
        statics: &[f64],
    ) -> Result<(Vec<f64>, Option<AttentionTrace>)> {
        let mut tape = Tape::new();
        let (q, trace) = self.forward(&mut tape, window, statics)?;
        Ok((tape.value(q).to_vec(), trace))
    }

    /// Copies parameter values from `main` (target-network sync). Both nets
    /// must share the same architecture and hyperparameters.
    pub fn sync_from(&mut self, main: &QNetwork) -> Result<()> {
        if self.config != main.config {
            return Err(Error::contract(
                "cannot sync networks with different configurations",
            ));
        }
        self.params.copy_values_from(&main.params)
    }

    /// Serializes config metadata plus all parameters to a checkpoint file.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = self.meta_entries()?;
        let tensors: Vec<(&str, &Tensor)> =
            self.params.iter().map(|(n, t)| (n, t)).collect();
        checkpoint::save_container(path, &meta, &tensors)
    }

    pub fn meta_entries(&self) -> Result<Vec<(String, String)>> {
        let cfg = toml::to_string(&self.config)
            .map_err(|e| Error::Checkpoint(format!("cannot serialize net config: {e}")))?;
        Ok(vec![
            ("architecture".to_string(), self.architecture().tag().to_string()),
            ("net_config".to_string(), cfg),
        ])
    }

    /// Rebuilds a network from checkpoint metadata and tensors.
    pub fn from_entries(
        meta: &[(String, String)],
        tensors: &[(String, Tensor)],
    ) -> Result<Self> {
        let cfg_text = meta
            .iter()
            .find(|(k, _)| k == "net_config")
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint("missing net_config metadata".into()))?;
        let config: NetConfig = toml::from_str(cfg_text)
            .map_err(|e| Error::Checkpoint(format!("bad net_config metadata: {e}")))?;
        config.validate()?;

        // Reconstruct against a freshly initialized layout so missing or
        // extra tensors and shape drift are all detected.
        let mut rng = crate::rng::substream(0, "checkpoint-load");
        let mut net = QNetwork::new(config, &mut rng)?;
        let expected: Vec<String> = net.params.names().to_vec();
        for name in &expected {
            let (_, loaded) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
            let dst = net.params.get_mut(name).unwrap();
            if dst.shape() != loaded.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(loaded.data());
        }
        Ok(net)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::load_container(path)?;
        QNetwork::from_entries(&meta, &tensors)
    }
}

/// Index of the maximum entry, ties broken toward the lowest index.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Builds the dueling head on `features` and returns (q, value, advantage).
/// Parameter names: `value.w`, `value.b`, `advantage.w`, `advantage.b`.
pub(crate) fn dueling_head(
    tape: &mut Tape,
    params: &ParamStore,
    features: Val,
) -> Result<(Val, Val, Val)> {
    let vw = tape.param(params, "value.w")?;
    let vb = tape.param(params, "value.b")?;
    let aw = tape.param(params, "advantage.w")?;
    let ab = tape.param(params, "advantage.b")?;
    let v_lin = tape.matmul(features, vw)?;
    let value = tape.add_bias(v_lin, vb)?;
    let a_lin = tape.matmul(features, aw)?;
    let advantage = tape.add_bias(a_lin, ab)?;
    let mean_a = tape.mean(advantage);
    let centered = tape.sub(advantage, mean_a)?;
    let q = tape.add(centered, value)?;
    Ok((q, value, advantage))
}

/// Initializes the dueling head parameters for a feature width.
pub(crate) fn init_dueling_head(
    store: &mut ParamStore,
    feature_dim: usize,
    num_actions: usize,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    store.insert("value.w", crate::tensor::xavier_uniform(feature_dim, 1, rng))?;
    store.insert("value.b", Tensor::zeros(vec![1]))?;
    store.insert(
        "advantage.w",
        crate::tensor::xavier_uniform(feature_dim, num_actions, rng),
    )?;
    store.insert("advantage.b", Tensor::zeros(vec![num_actions]))?;
    Ok(())
}

/// Enters the static feature vector as a `[1 × s]` leaf (empty statics give
/// a zero-width row that concat handles naturally).
pub(crate) fn statics_leaf(tape: &mut Tape, statics: &[f64]) -> Result<Val> {
    tape.leaf_from(vec![1, statics.len()], statics.to_vec())
}

/// Finite-difference gradient checks through all three full architectures
/// at toy sizes, randomized by `seed`.
pub fn architecture_grad_suite(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    use rand::Rng;

    let mut items = Vec::new();
    let step = gradcheck::DEFAULT_STEP;

    let mut check = |prefix: &str, config: NetConfig, valid_len: usize| -> Result<()> {
        let mut rng = crate::rng::substream(seed, &format!("archcheck-{prefix}"));
        let net = QNetwork::new(config.clone(), &mut rng)?;
        let rows: Vec<Vec<f64>> = (0..valid_len)
            .map(|_| (0..config.obs_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let window = HistoryWindow::from_rows(rows)?;
        let statics: Vec<f64> = (0..config.static_dim())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let probe: Vec<f64> = (0..config.num_actions())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();

        let forward = |tape: &mut Tape, store: &ParamStore| -> Result<Val> {
            let parts = match &config {
                NetConfig::Daqn(c) => daqn::forward(tape, store, c, &window, &statics)?,
                NetConfig::DqnMlp(c) => mlp::forward(tape, store, c, &window, &statics)?,
                NetConfig::DrqnLstm(c) => lstm::forward(tape, store, c, &window, &statics)?,
            };
            let p = tape.leaf_from(vec![1, probe.len()], probe.clone())?;
            let weighted = tape.mul(parts.q, p)?;
            Ok(tape.sum(weighted))
        };
        let report =
            gradcheck::check_tape_function(net.params.clone(), forward, step, tolerance)?;
        for mut item in report.items {
            item.name = format!("{prefix}.{}", item.name);
            items.push(item);
        }
        Ok(())
    };

    check(
        "daqn",
        NetConfig::Daqn(DaqnConfig {
            obs_dim: 5,
            static_dim: 3,
            num_actions: 4,
            blocks: 2,
            heads: 2,
            embed: 8,
            ff: 12,
            lookback: 3,
        }),
        3, // shorter than lookback + 1, so masking is exercised too
    )?;
    check(
        "dqn-mlp",
        NetConfig::DqnMlp(MlpConfig {
            obs_dim: 5,
            static_dim: 3,
            num_actions: 4,
            hidden: 12,
        }),
        2,
    )?;
    check(
        "drqn-lstm",
        NetConfig::DrqnLstm(LstmConfig {
            obs_dim: 5,
            static_dim: 3,
            num_actions: 4,
            hidden: 10,
            lookback: 3,
        }),
        3,
    )?;

    Ok(GradCheckReport {
        items,
        tolerance,
        step,
    })
}
