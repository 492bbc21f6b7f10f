//! Offline Q-learning loop.
//!
//! Pieces: reproducible outcome-stratified train/test splitting, Double-Q
//! TD targets (action chosen by the main network, valued by the lagged
//! target copy), and a prioritized-replay training loop with importance
//! weighting, gradient clipping, Adam updates, and periodic hard target
//! synchronization. Trained networks are bundled with the normalization
//! statistics they were fit under as a [`TrainedPolicy`] checkpoint.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::normalize::Normalizer;
use crate::cohort::windows::cohort_transitions;
use crate::cohort::{CohortSchema, Episode};
use crate::error::{Error, Result};
use crate::net::{argmax_first, HistoryWindow, NetConfig, QNetwork};
use crate::replay::{ReplayBuffer, Transition};
use crate::tensor::checkpoint;
use crate::tensor::optim::Adam;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Hyperparameters of the offline training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Discount factor γ, `0 ≤ γ < 1`.
    pub gamma: f64,
    /// Number of optimizer batches.
    pub batches: usize,
    /// Transitions per batch.
    pub batch_size: usize,
    /// Hard-copy the target network every this many batches.
    pub target_sync_period: usize,
    /// Adam step size.
    pub learning_rate: f64,
    /// Global gradient-norm clip applied before each step.
    pub grad_clip_norm: f64,
    /// Priority exponent α of the replay buffer.
    pub per_alpha: f64,
    /// Importance-weight exponent β at the first batch.
    pub per_beta_start: f64,
    /// Importance-weight exponent β at the last batch (linear anneal).
    pub per_beta_end: f64,
    /// Additive floor on |TD error| priorities; must be positive.
    pub per_epsilon: f64,
    /// Fraction of episodes assigned to the training fold.
    pub split_fraction: f64,
    /// Batches per reporting interval.
    pub log_interval: usize,
    /// Seed for network initialization and replay sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            batches: 10_000,
            batch_size: 128,
            target_sync_period: 500,
            learning_rate: 1e-4,
            grad_clip_norm: 10.0,
            per_alpha: 0.6,
            per_beta_start: 0.4,
            per_beta_end: 1.0,
            per_epsilon: 0.01,
            split_fraction: 0.8,
            log_interval: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "discount must satisfy 0 <= gamma < 1, got {}",
                self.gamma
            )));
        }
        if self.batches == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "batches and batch_size must be at least 1".into(),
            ));
        }
        if self.target_sync_period == 0 {
            return Err(Error::Config("target_sync_period must be at least 1".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "grad_clip_norm must be positive and finite, got {}",
                self.grad_clip_norm
            )));
        }
        if !(0.0..=10.0).contains(&self.per_alpha) {
            return Err(Error::Config(format!(
                "per_alpha must lie in [0, 10], got {}",
                self.per_alpha
            )));
        }
        for (name, beta) in [
            ("per_beta_start", self.per_beta_start),
            ("per_beta_end", self.per_beta_end),
        ] {
            if !(0.0..=1.0).contains(&beta) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 1], got {beta}"
                )));
            }
        }
        if !(self.per_epsilon.is_finite() && self.per_epsilon > 0.0) {
            return Err(Error::Config(format!(
                "per_epsilon must be positive so priorities never vanish, got {}",
                self.per_epsilon
            )));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction must lie strictly between 0 and 1, got {}",
                self.split_fraction
            )));
        }
        Ok(())
    }

    /// Importance-weight exponent for batch `i`: linear from
    /// `per_beta_start` (first batch) to `per_beta_end` (last batch).
    pub fn beta_at(&self, batch: usize) -> f64 {
        let denom = self.batches.saturating_sub(1).max(1) as f64;
        let t = (batch as f64 / denom).min(1.0);
        self.per_beta_start + (self.per_beta_end - self.per_beta_start) * t
    }
}

// ---------------------------------------------------------------------------
// Train/test splitting
// ---------------------------------------------------------------------------

/// Episode indices of a train/test split, plus any degenerate-case warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSplit {
    /// Indices into the original episode slice, ascending.
    pub train: Vec<usize>,
    /// Indices into the original episode slice, ascending.
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
}

impl CohortSplit {
    /// Clones the selected episodes out of `episodes`.
    pub fn materialize(&self, episodes: &[Episode]) -> (Vec<Episode>, Vec<Episode>) {
        let take = |idx: &[usize]| idx.iter().map(|&i| episodes[i].clone()).collect();
        (take(&self.train), take(&self.test))
    }
}

/// Splits episodes into disjoint train/test folds at the episode level.
///
/// With `stratified` set, each outcome class is shuffled and split
/// separately so both folds carry a proportionate number of each outcome;
/// the per-stratum train count is `round(fraction · n)` clamped so neither
/// fold is empty. A cohort where every episode shares one outcome falls
/// back to a plain split with a warning. Deterministic per seed.
pub fn split_cohort(
    episodes: &[Episode],
    fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<CohortSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract(format!(
            "split fraction must lie strictly between 0 and 1, got {fraction}"
        )));
    }
    if episodes.len() < 2 {
        return Err(Error::contract(format!(
            "cannot split {} episode(s) into nonempty train and test folds",
            episodes.len()
        )));
    }

    let mut rng = crate::rng::substream(seed, "cohort-split");
    let mut warnings = Vec::new();

    let strata: Vec<Vec<usize>> = if stratified {
        let negative: Vec<usize> = (0..episodes.len())
            .filter(|&i| !episodes[i].outcome)
            .collect();
        let positive: Vec<usize> = (0..episodes.len())
            .filter(|&i| episodes[i].outcome)
            .collect();
        if negative.is_empty() || positive.is_empty() {
            warnings.push(
                "every episode has the same outcome; stratification is a no-op, \
                 using a plain split"
                    .to_string(),
            );
            vec![(0..episodes.len()).collect()]
        } else if negative.len() < 2 || positive.len() < 2 {
            return Err(Error::contract(format!(
                "stratified split needs at least 2 episodes per outcome, got {} \
                 negative and {} positive",
                negative.len(),
                positive.len()
            )));
        } else {
            vec![negative, positive]
        }
    } else {
        vec![(0..episodes.len()).collect()]
    };

    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut stratum in strata {
        shuffle(&mut stratum, &mut rng);
        let n = stratum.len();
        let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        train.extend_from_slice(&stratum[..n_train]);
        test.extend_from_slice(&stratum[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(CohortSplit {
        train,
        test,
        warnings,
    })
}

/// Fisher–Yates shuffle driven by our deterministic substream.
fn shuffle(xs: &mut [usize], rng: &mut rand_chacha::ChaCha12Rng) {
    use rand::Rng;
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// TD targets
// ---------------------------------------------------------------------------

/// Double-Q targets: `r` for terminal transitions, otherwise
/// `r + γ · Q_target(h′, argmax_a Q_main(h′, a))`. With identical networks
/// this reduces exactly to the vanilla max-target.
pub fn td_targets(
    batch: &[Transition],
    main: &QNetwork,
    target: &QNetwork,
    gamma: f64,
) -> Result<Vec<f64>> {
    if main.config() != target.config() {
        return Err(Error::contract(
            "main and target networks must share one configuration",
        ));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::contract(format!(
            "discount must satisfy 0 <= gamma < 1, got {gamma}"
        )));
    }
    batch
        .par_iter()
        .map(|tr| match &tr.next_window {
            None => Ok(tr.reward),
            Some(next) => {
                let q_main = main.q_values(next, &tr.statics)?;
                let chosen = argmax_first(&q_main);
                let q_target = target.q_values(next, &tr.statics)?;
                Ok(tr.reward + gamma * q_target[chosen])
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Aggregate statistics over one reporting interval of batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    /// First batch index covered (inclusive).
    pub start_batch: usize,
    /// Last batch index covered (inclusive).
    pub end_batch: usize,
    pub mean_loss: f64,
    /// Mean |TD error| over every sampled transition in the interval.
    pub mean_abs_td_error: f64,
    pub max_abs_td_error: f64,
}

impl IntervalStats {
    pub fn batch_count(&self) -> usize {
        self.end_batch - self.start_batch + 1
    }
}

/// Everything a training run reports besides the checkpoint itself.
///
/// `wall_clock_secs` is informational only and is excluded from serialized
/// artifacts so reruns with identical configs stay byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub architecture: String,
    pub batches: usize,
    pub batch_size: usize,
    /// Transitions loaded into the replay buffer.
    pub replay_size: usize,
    pub intervals: Vec<IntervalStats>,
    /// Batch indices at which the target network was hard-copied.
    pub sync_batches: Vec<usize>,
    /// Priority updates dropped because the slot had been overwritten.
    pub stale_priority_updates: usize,
    /// Mean loss over the final reporting interval.
    pub final_mean_loss: f64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Total batches covered by the reporting intervals; always equals
    /// `batches`.
    pub fn covered_batches(&self) -> usize {
        self.intervals.iter().map(IntervalStats::batch_count).sum()
    }

    /// Per-interval metrics as a delimited table suitable for plotting.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(
            "interval,start_batch,end_batch,mean_loss,mean_abs_td_error,max_abs_td_error\n",
        );
        for (i, s) in self.intervals.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i, s.start_batch, s.end_batch, s.mean_loss, s.mean_abs_td_error,
                s.max_abs_td_error
            ));
        }
        out
    }
}

/// Running sums for the interval currently being filled.
struct IntervalAccum {
    start_batch: usize,
    loss_sum: f64,
    loss_count: usize,
    td_sum: f64,
    td_count: usize,
    td_max: f64,
}

impl IntervalAccum {
    fn new(start_batch: usize) -> Self {
        IntervalAccum {
            start_batch,
            loss_sum: 0.0,
            loss_count: 0,
            td_sum: 0.0,
            td_count: 0,
            td_max: 0.0,
        }
    }

    fn observe_loss(&mut self, loss: f64) {
        self.loss_sum += loss;
        self.loss_count += 1;
    }

    fn observe_td(&mut self, abs_td: f64) {
        self.td_sum += abs_td;
        self.td_count += 1;
        self.td_max = self.td_max.max(abs_td);
    }

    fn finish(&self, end_batch: usize) -> IntervalStats {
        IntervalStats {
            start_batch: self.start_batch,
            end_batch,
            mean_loss: self.loss_sum / self.loss_count.max(1) as f64,
            mean_abs_td_error: self.td_sum / self.td_count.max(1) as f64,
            max_abs_td_error: self.td_max,
        }
    }
}

// ---------------------------------------------------------------------------
// Trained policy checkpoints
// ---------------------------------------------------------------------------

/// A trained Q-network together with the feature-normalization statistics
/// it expects its inputs to be prepared with. Saving and loading round-trip
/// both through a single checkpoint file.
#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub net: QNetwork,
    pub normalizer: Normalizer,
}

impl TrainedPolicy {
    /// Greedy action for a normalized observation window: argmax over Q,
    /// ties broken toward the lowest action index.
    pub fn act(&self, window: &HistoryWindow, statics: &[f64]) -> Result<usize> {
        Ok(argmax_first(&self.net.q_values(window, statics)?))
    }


    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = self.net.meta_entries()?;
        meta.push(("kind".to_string(), "policy".to_string()));
        let norm = self.normalizer.to_tensors();
        let mut tensors: Vec<(&str, &Tensor)> =
            self.net.params().iter().collect();
        for (name, tensor) in &norm {
            tensors.push((name.as_str(), tensor));
        }
        checkpoint::save_container(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::load_container(path)?;
        let net = QNetwork::from_entries(&meta, &tensors)?;
        let normalizer = Normalizer::from_tensors(&tensors)?;
        Ok(TrainedPolicy { net, normalizer })
    }
}

/// The checkpoint as a deterministic policy function.
pub fn greedy_policy(
    policy: &TrainedPolicy,
) -> impl Fn(&HistoryWindow, &[f64]) -> Result<usize> + Sync + '_ {
    move |window, statics| policy.act(window, statics)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Trains a Q-network on a cohort fold.
///
/// Fits normalization statistics on `episodes` (pass the training fold
/// only), converts every timestep into a replay transition, and runs
/// [`train_on_transitions`]. The returned policy bundles the network with
/// the fitted normalizer.
pub fn train_policy(
    episodes: &[Episode],
    schema: &CohortSchema,
    net_config: &NetConfig,
    cfg: &TrainConfig,
) -> Result<(TrainedPolicy, TrainReport)> {
    cfg.validate()?;
    schema.validate()?;
    if net_config.obs_dim() != schema.obs_dim()
        || net_config.static_dim() != schema.static_features.len()
        || net_config.num_actions() != schema.action_grid.num_actions()
    {
        return Err(Error::Config(format!(
            "network dimensions (obs {}, statics {}, actions {}) do not match \
             the cohort schema (obs {}, statics {}, actions {})",
            net_config.obs_dim(),
            net_config.static_dim(),
            net_config.num_actions(),
            schema.obs_dim(),
            schema.static_features.len(),
            schema.action_grid.num_actions()
        )));
    }
    let normalizer = Normalizer::fit(episodes)?;
    let transitions =
        cohort_transitions(episodes, schema, &normalizer, net_config.lookback())?;
    let (net, report) = train_on_transitions(transitions, net_config, cfg)?;
    Ok((TrainedPolicy { net, normalizer }, report))
}

/// Core optimization loop over pre-built transitions.
///
/// The replay buffer is filled once (capacity = dataset size). Each batch:
/// prioritized sample with β annealed linearly → Double-Q targets → squared
/// TD errors scaled by the importance weights, averaged → backward →
/// gradient-norm clip → Adam step → priorities reset to |TD error| + ε. The
/// target network is hard-copied from the main network every
/// `target_sync_period` batches, starting at batch 0. Aborts with
/// [`Error::Diverged`] if the loss exceeds 1e6 or leaves the finite range.
pub fn train_on_transitions(
    transitions: Vec<Transition>,
    net_config: &NetConfig,
    cfg: &TrainConfig,
) -> Result<(QNetwork, TrainReport)> {
    cfg.validate()?;
    if transitions.is_empty() {
        return Err(Error::contract("cannot train on an empty transition set"));
    }
    let started = Instant::now();
    let arch = net_config.architecture().tag();

    let mut init_rng = crate::rng::substream(cfg.seed, &format!("net-init-{arch}"));
    let mut main = QNetwork::new(net_config.clone(), &mut init_rng)?;
    let mut target = QNetwork::new(net_config.clone(), &mut init_rng)?;
    target.sync_from(&main)?;

    let replay_rng = crate::rng::substream(cfg.seed, &format!("replay-{arch}"));
    let mut buffer = ReplayBuffer::new(transitions.len(), cfg.per_alpha, replay_rng)?;
    let replay_size = transitions.len();
    for transition in transitions {
        buffer.push(transition);
    }

    let mut adam = Adam::new(cfg.learning_rate);
    let num_actions = main.num_actions();
    let mut intervals = Vec::new();
    let mut accum = IntervalAccum::new(0);
    let mut sync_batches = Vec::new();
    let mut stale_updates = 0usize;

    for batch_idx in 0..cfg.batches {
        if batch_idx % cfg.target_sync_period == 0 {
            target.sync_from(&main)?;
            sync_batches.push(batch_idx);
        }

        let batch = buffer.sample(cfg.batch_size, cfg.beta_at(batch_idx))?;
        let targets = td_targets(&batch.transitions, &main, &target, cfg.gamma)?;

        let mut tape = Tape::new();
        let mut weighted_sq = Vec::with_capacity(batch.transitions.len());
        let mut new_priorities = Vec::with_capacity(batch.transitions.len());
        for (j, tr) in batch.transitions.iter().enumerate() {
            let parts = main.forward_parts(&mut tape, &tr.window, &tr.statics)?;
            let mut one_hot = vec![0.0; num_actions];
            one_hot[tr.action] = 1.0;
            let selector = tape.leaf_from(vec![1, num_actions], one_hot)?;
            let picked = tape.mul(parts.q, selector)?;
            let q_a = tape.sum(picked);
            let delta = tape.add_const(q_a, -targets[j]);
            let abs_td = tape.value(delta)[0].abs();
            new_priorities.push(abs_td + cfg.per_epsilon);
            accum.observe_td(abs_td);
            let squared = tape.mul(delta, delta)?;
            weighted_sq.push(tape.scale(squared, batch.weights[j]));
        }
        let stacked = tape.concat(&weighted_sq)?;
        let loss = tape.mean(stacked);
        let loss_value = tape.value(loss)[0];
        if !loss_value.is_finite() || loss_value > 1e6 {
            return Err(Error::Diverged(format!(
                "loss {loss_value:e} at batch {batch_idx} crossed the 1e6 guard; \
                 lower the learning rate or inspect the reward scale"
            )));
        }
        accum.observe_loss(loss_value);

        main.params_mut().zero_grads();
        tape.backward(loss, main.params_mut())?;
        main.params_mut().clip_grad_norm(cfg.grad_clip_norm);
        adam.step(main.params_mut())?;
        stale_updates += buffer.update_priorities(&batch.slots, &new_priorities)?;

        let done = batch_idx + 1;
        if done % cfg.log_interval == 0 || done == cfg.batches {
            intervals.push(accum.finish(batch_idx));
            accum = IntervalAccum::new(done);
        }
    }

    let final_mean_loss = intervals.last().map_or(f64::NAN, |s| s.mean_loss);
    let report = TrainReport {
        architecture: arch.to_string(),
        batches: cfg.batches,
        batch_size: cfg.batch_size,
        replay_size,
        intervals,
        sync_batches,
        stale_priority_updates: stale_updates,
        final_mean_loss,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    debug_assert_eq!(report.covered_batches(), cfg.batches);
    Ok((main, report))
}
