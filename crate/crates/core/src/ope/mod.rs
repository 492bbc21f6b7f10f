//! Off-policy evaluation.
//!
//! The weighted doubly-robust (WDR) estimator with per-decision
//! self-normalized importance weights, plus two simpler estimators used as
//! cross-checks: weighted stepwise importance sampling (WIS, an independent
//! implementation) and the direct method. Policies enter as
//! [`StochasticPolicy`] tables — action distributions tabulated at every
//! logged decision point of the evaluation fold — so the estimators are
//! pure arithmetic over (ratios, rewards, values) and can be audited
//! against naive transcriptions of the formulas.
//!
//! For a fold of n episodes with per-episode cumulative ratios
//! ρ_t = Π_{τ≤t} π_e(a_τ|h_τ)/π_b(a_τ|h_τ) (frozen once an episode ends)
//! and self-normalized weights w_t = ρ_t / Σ_j ρ_t^(j), with w_{−1} = 1/n
//! and v̂(h) = Σ_a π_e(a|h) q̂(h,a), the WDR estimate is
//!
//! Σ_i Σ_t γ^t [ w_t^(i) r_t^(i) − w_t^(i) q̂(h_t,a_t) + w_{t−1}^(i) v̂(h_t) ].
//!
//! With q̂ ≡ 0 both correction terms vanish and WDR reduces exactly to WIS.

pub mod behavior;
pub mod evaluate;

pub use behavior::{fit_behavior_policy, BehaviorConfig, BehaviorFitReport, BehaviorModel};
pub use evaluate::{
    evaluate_fixed_policies, evaluate_policies, OpeConfig, OPEReport, PolicyEvaluation,
    SplitEstimate,
};

use rayon::prelude::*;

use crate::cohort::windows::{observation_rows, window_at};
use crate::cohort::{CohortSchema, Episode};
use crate::error::{Error, Result};
use crate::net::HistoryWindow;
use crate::train::TrainedPolicy;

/// Where a stochastic policy's probabilities came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    BehaviorCloned,
    SoftenedGreedy,
    UniformRandom,
    GroundTruth,
}

impl PolicyKind {
    pub fn tag(self) -> &'static str {
        match self {
            PolicyKind::BehaviorCloned => "behavior-cloned",
            PolicyKind::SoftenedGreedy => "softened-greedy",
            PolicyKind::UniformRandom => "uniform-random",
            PolicyKind::GroundTruth => "ground-truth",
        }
    }
}

/// Logged actions and rewards of an evaluation fold, one entry per episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub ids: Vec<String>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<Vec<f64>>,
    pub num_actions: usize,
}

impl EvalSet {
    pub fn from_episodes(episodes: &[Episode], schema: &CohortSchema) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Estimator(
                "cannot evaluate policies on an empty episode set".into(),
            ));
        }
        let num_actions = schema.action_grid.num_actions();
        let mut ids = Vec::with_capacity(episodes.len());
        let mut actions = Vec::with_capacity(episodes.len());
        let mut rewards = Vec::with_capacity(episodes.len());
        for ep in episodes {
            if ep.rows.is_empty() {
                return Err(Error::Estimator(format!(
                    "episode {:?} has no timesteps",
                    ep.id
                )));
            }
            for row in &ep.rows {
                if row.action >= num_actions {
                    return Err(Error::Estimator(format!(
                        "episode {:?} logs action {} outside the {}-action grid",
                        ep.id, row.action, num_actions
                    )));
                }
            }
            ids.push(ep.id.clone());
            actions.push(ep.rows.iter().map(|r| r.action).collect());
            rewards.push(ep.rows.iter().map(|r| r.reward).collect());
        }
        Ok(EvalSet {
            ids,
            actions,
            rewards,
            num_actions,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.actions.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Episode lengths, used to build policies with matching shapes.
    pub fn lengths(&self) -> Vec<usize> {
        self.actions.iter().map(Vec::len).collect()
    }
}

/// The softened-greedy distribution: probability `1 − ε + ε/|A|` on the
/// greedy action and `ε/|A|` elsewhere. `ε = 0` is rejected because it
/// makes importance weights degenerate; `ε = 1` is the uniform policy.
pub fn softened_probs(greedy: usize, num_actions: usize, epsilon: f64) -> Result<Vec<f64>> {
    if num_actions == 0 || greedy >= num_actions {
        return Err(Error::contract(format!(
            "greedy action {greedy} outside a {num_actions}-action space"
        )));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::contract(format!(
            "softening requires 0 < epsilon <= 1 (epsilon = 0 would zero every \
             off-greedy importance weight), got {epsilon}"
        )));
    }
    let base = epsilon / num_actions as f64;
    let mut probs = vec![base; num_actions];
    probs[greedy] += 1.0 - epsilon;
    Ok(probs)
}

/// Raises every probability to at least `floor`, then renormalizes. The
/// renormalized entries are bounded below by `floor / (1 + |A|·floor)`.
pub(crate) fn floor_and_renormalize(probs: &mut [f64], floor: f64) {
    let mut sum = 0.0;
    for p in probs.iter_mut() {
        *p = p.max(floor);
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
}

/// An action distribution tabulated at every decision point of one
/// evaluation fold: `probs_at(i, t)` is the distribution the policy assigns
/// at timestep `t` of episode `i`. Tabulation lets network-backed,
/// behavior-cloned, ground-truth, and hand-built policies share one exact
/// representation inside the estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    name: String,
    kind: PolicyKind,
    num_actions: usize,
    /// Guaranteed lower bound on every probability (0 when none is claimed).
    floor: f64,
    table: Vec<Vec<Vec<f64>>>,
}

impl StochasticPolicy {
    /// Wraps pre-tabulated probabilities, validating every distribution:
    /// row sums within 1e-9 of 1, entries ≥ max(floor, 0).
    pub fn from_tables(
        name: impl Into<String>,
        kind: PolicyKind,
        table: Vec<Vec<Vec<f64>>>,
        num_actions: usize,
        floor: f64,
    ) -> Result<Self> {
        let name = name.into();
        for (i, episode) in table.iter().enumerate() {
            for (t, probs) in episode.iter().enumerate() {
                if probs.len() != num_actions {
                    return Err(Error::contract(format!(
                        "policy {name:?} has {} probabilities at episode {i} \
                         timestep {t}, expected {num_actions}",
                        probs.len()
                    )));
                }
                let mut sum = 0.0;
                for &p in probs {
                    if !p.is_finite() || p < 0.0 || p < floor - 1e-12 {
                        return Err(Error::contract(format!(
                            "policy {name:?} has probability {p} below floor \
                             {floor} at episode {i} timestep {t}"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::contract(format!(
                        "policy {name:?} probabilities sum to {sum} at episode \
                         {i} timestep {t}"
                    )));
                }
            }
        }
        Ok(StochasticPolicy {
            name,
            kind,
            num_actions,
            floor,
            table,
        })
    }

    /// The uniform-random reference policy over `num_actions` actions.
    pub fn uniform(name: impl Into<String>, lengths: &[usize], num_actions: usize) -> Result<Self> {
        if num_actions == 0 {
            return Err(Error::contract("uniform policy over zero actions"));
        }
        let p = 1.0 / num_actions as f64;
        let table = lengths
            .iter()
            .map(|&len| vec![vec![p; num_actions]; len])
            .collect();
        StochasticPolicy::from_tables(name, PolicyKind::UniformRandom, table, num_actions, p)
    }

    /// Softens a trained greedy policy over the fold: tabulates the greedy
    /// action at each decision point (windows built with the policy's own
    /// normalizer and history depth) and spreads `epsilon` uniformly.
    pub fn softened_greedy(
        name: impl Into<String>,
        policy: &TrainedPolicy,
        episodes: &[Episode],
        schema: &CohortSchema,
        epsilon: f64,
    ) -> Result<Self> {
        let num_actions = schema.action_grid.num_actions();
        softened_probs(0, num_actions.max(1), epsilon)?; // validate epsilon early
        let table = tabulate_decisions(episodes, schema, policy, |net, window, statics| {
            let q = net.q_values(window, statics)?;
            softened_probs(crate::net::argmax_first(&q), q.len(), epsilon)
        })?;
        StochasticPolicy::from_tables(
            name,
            PolicyKind::SoftenedGreedy,
            table,
            num_actions,
            epsilon / num_actions as f64,
        )
    }

    /// Tabulates a fitted behavior-cloning model over the fold.
    pub fn behavior_cloned(
        name: impl Into<String>,
        model: &BehaviorModel,
        episodes: &[Episode],
        schema: &CohortSchema,
    ) -> Result<Self> {
        let table = model.tabulate(episodes, schema)?;
        StochasticPolicy::from_tables(
            name,
            PolicyKind::BehaviorCloned,
            table,
            schema.action_grid.num_actions(),
            model.renormalized_floor(),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn probs_at(&self, episode: usize, t: usize) -> &[f64] {
        &self.table[episode][t]
    }

    /// Checks that the tabulation covers exactly the decision points of
    /// `set`.
    pub fn check_alignment(&self, set: &EvalSet) -> Result<()> {
        if self.num_actions != set.num_actions {
            return Err(Error::Estimator(format!(
                "policy {:?} covers {} actions but the fold logs {}",
                self.name, self.num_actions, set.num_actions
            )));
        }
        if self.table.len() != set.len() {
            return Err(Error::Estimator(format!(
                "policy {:?} is tabulated over {} episodes but the fold has {}",
                self.name,
                self.table.len(),
                set.len()
            )));
        }
        for (i, episode) in self.table.iter().enumerate() {
            if episode.len() != set.actions[i].len() {
                return Err(Error::Estimator(format!(
                    "policy {:?} covers {} timesteps of episode {:?}, expected {}",
                    self.name,
                    episode.len(),
                    set.ids[i],
                    set.actions[i].len()
                )));
            }
        }
        Ok(())
    }
}

/// The q̂ plugged into WDR's control variate: identically zero, or the
/// Q-values of a trained network tabulated over the fold.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionValue {
    Zero,
    Table(Vec<Vec<Vec<f64>>>),
}

impl ActionValue {
    /// Tabulates `policy`'s own Q-network over the fold (the default
    /// control variate for a learned policy).
    pub fn from_policy_net(
        policy: &TrainedPolicy,
        episodes: &[Episode],
        schema: &CohortSchema,
    ) -> Result<Self> {
        Ok(ActionValue::Table(tabulate_decisions(
            episodes,
            schema,
            policy,
            |net, window, statics| net.q_values(window, statics),
        )?))
    }

    fn row(&self, episode: usize, t: usize) -> Option<&[f64]> {
        match self {
            ActionValue::Zero => None,
            ActionValue::Table(table) => Some(&table[episode][t]),
        }
    }

    fn check_alignment(&self, set: &EvalSet) -> Result<()> {
        let ActionValue::Table(table) = self else {
            return Ok(());
        };
        if table.len() != set.len()
            || table
                .iter()
                .zip(&set.actions)
                .any(|(ep, actions)| ep.len() != actions.len())
            || table
                .iter()
                .flatten()
                .any(|row| row.len() != set.num_actions)
        {
            return Err(Error::Estimator(
                "action-value table does not align with the evaluation fold".into(),
            ));
        }
        Ok(())
    }
}

/// Runs `f(net, window, statics)` at every decision point of every episode,
/// with observation windows built using the policy's own normalization
/// statistics and history depth. Episodes run in parallel; output order is
/// the episode order.
fn tabulate_decisions<F>(
    episodes: &[Episode],
    schema: &CohortSchema,
    policy: &TrainedPolicy,
    f: F,
) -> Result<Vec<Vec<Vec<f64>>>>
where
    F: Fn(&crate::net::QNetwork, &HistoryWindow, &[f64]) -> Result<Vec<f64>> + Sync,
{
    let num_actions = schema.action_grid.num_actions();
    let lookback = policy.net.config().lookback();
    episodes
        .par_iter()
        .map(|ep| {
            let rows = observation_rows(ep, num_actions, &policy.normalizer)?;
            let statics = policy.normalizer.normalize_statics(&ep.statics)?;
            let mut out = Vec::with_capacity(ep.rows.len());
            for t in 0..ep.rows.len() {
                let window = window_at(&rows, t, lookback)?;
                out.push(f(&policy.net, &window, &statics)?);
            }
            Ok(out)
        })
        .collect()
}

/// WDR estimate plus its importance-weight diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct WdrOutcome {
    pub estimate: f64,
    /// Effective sample size 1/Σ_i w_t(i)² of the self-normalized weights
    /// at each timestep; ranges from 1 (one episode dominates) to n.
    pub ess_per_step: Vec<f64>,
    pub min_ess: f64,
}

/// Per-step importance ratios for one policy pair, with the checks both
/// estimators need: alignment and strictly positive behavior probabilities
/// on logged actions.
fn logged_ratios(
    set: &EvalSet,
    pi_e: &StochasticPolicy,
    pi_b: &StochasticPolicy,
) -> Result<Vec<Vec<f64>>> {
    pi_e.check_alignment(set)?;
    pi_b.check_alignment(set)?;
    let mut ratios = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let mut row = Vec::with_capacity(set.actions[i].len());
        for (t, &a) in set.actions[i].iter().enumerate() {
            let pb = pi_b.probs_at(i, t)[a];
            if pb <= 0.0 {
                return Err(Error::Estimator(format!(
                    "behavior policy {:?} assigns zero probability to the \
                     logged action of episode {:?} at timestep {t}",
                    pi_b.name, set.ids[i]
                )));
            }
            row.push(pi_e.probs_at(i, t)[a] / pb);
        }
        ratios.push(row);
    }
    Ok(ratios)
}

/// Weighted doubly-robust off-policy estimate of π_e's value on the fold.
///
/// Cumulative ratios are frozen once an episode ends, so ended episodes
/// keep contributing weight mass at later steps; the step-(−1) weight used
/// by the t = 0 baseline correction is 1/n for every episode.
pub fn wdr_estimate(
    set: &EvalSet,
    pi_e: &StochasticPolicy,
    pi_b: &StochasticPolicy,
    qhat: &ActionValue,
    gamma: f64,
) -> Result<WdrOutcome> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Estimator(format!(
            "discount must lie in [0, 1], got {gamma}"
        )));
    }
    qhat.check_alignment(set)?;
    let ratios = logged_ratios(set, pi_e, pi_b)?;

    let n = set.len();
    let horizon = set.max_len();
    // rho[i] is episode i's cumulative ratio, carried (frozen) past its end.
    let mut rho = vec![1.0; n];
    // Weights of the previous step; w_{-1} = 1/n uniformly.
    let mut w_prev = vec![1.0 / n as f64; n];
    let mut estimate = 0.0;
    let mut ess_per_step = Vec::with_capacity(horizon);

    for t in 0..horizon {
        for (i, r) in rho.iter_mut().enumerate() {
            if let Some(&ratio) = ratios[i].get(t) {
                *r *= ratio;
            }
        }
        let mass: f64 = rho.iter().sum();
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::Estimator(format!(
                "importance-weight mass is {mass} at timestep {t}; every \
                 trajectory has been driven to zero weight"
            )));
        }
        let discount = gamma.powi(t as i32);
        let mut sum_w_sq = 0.0;
        for i in 0..n {
            let w = rho[i] / mass;
            sum_w_sq += w * w;
            if t < set.actions[i].len() {
                let reward_term = w * set.rewards[i][t];
                let (q_term, v_term) = match qhat.row(i, t) {
                    None => (0.0, 0.0),
                    Some(q_row) => {
                        let q_a = q_row[set.actions[i][t]];
                        let pe = pi_e.probs_at(i, t);
                        let v: f64 =
                            pe.iter().zip(q_row).map(|(p, q)| p * q).sum();
                        (w * q_a, w_prev[i] * v)
                    }
                };
                estimate += discount * (reward_term - q_term + v_term);
            }
            w_prev[i] = w;
        }
        ess_per_step.push(1.0 / sum_w_sq);
    }

    let min_ess = ess_per_step.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(WdrOutcome {
        estimate,
        ess_per_step,
        min_ess,
    })
}

/// Weighted stepwise importance sampling, implemented independently of
/// [`wdr_estimate`] as its q̂ ≡ 0 cross-check: transposed iteration order
/// and its own normalization arithmetic.
pub fn wis_estimate(
    set: &EvalSet,
    pi_e: &StochasticPolicy,
    pi_b: &StochasticPolicy,
    gamma: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Estimator(format!(
            "discount must lie in [0, 1], got {gamma}"
        )));
    }
    let ratios = logged_ratios(set, pi_e, pi_b)?;

    // Cumulative-ratio table, episode-major: cum[i][t] for the full horizon,
    // frozen at the episode's final value once it ends.
    let horizon = set.max_len();
    let cum: Vec<Vec<f64>> = ratios
        .iter()
        .map(|row| {
            let mut acc = 1.0;
            (0..horizon)
                .map(|t| {
                    if let Some(&r) = row.get(t) {
                        acc *= r;
                    }
                    acc
                })
                .collect()
        })
        .collect();

    let mut value = 0.0;
    for t in 0..horizon {
        let mass: f64 = cum.iter().map(|row| row[t]).sum();
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::Estimator(format!(
                "importance-weight mass is {mass} at timestep {t}"
            )));
        }
        let mut step_value = 0.0;
        for (i, row) in cum.iter().enumerate() {
            if let Some(&reward) = set.rewards[i].get(t) {
                step_value += row[t] / mass * reward;
            }
        }
        value += gamma.powi(t as i32) * step_value;
    }
    Ok(value)
}

/// Direct-method estimate: the average over episodes of
/// v̂(h_0) = Σ_a π_e(a|h_0) q̂(h_0, a). Zero when q̂ ≡ 0.
pub fn dm_estimate(set: &EvalSet, pi_e: &StochasticPolicy, qhat: &ActionValue) -> Result<f64> {
    pi_e.check_alignment(set)?;
    qhat.check_alignment(set)?;
    let mut total = 0.0;
    for i in 0..set.len() {
        if let Some(q_row) = qhat.row(i, 0) {
            let pe = pi_e.probs_at(i, 0);
            total += pe.iter().zip(q_row).map(|(p, q)| p * q).sum::<f64>();
        }
    }
    Ok(total / set.len() as f64)
}
