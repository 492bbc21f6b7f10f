//! Behavior-policy estimation by behavior cloning.
//!
//! The doubly-robust estimator needs π_b(a|h) — the probability the logging
//! policy assigned to each logged action. We estimate it with a classifier
//! in the same function class as the evaluated policies: an attention
//! Q-network trunk whose action scores are read as softmax logits, trained
//! by cross-entropy on (history window, statics) → logged action. Output
//! probabilities are floored and renormalized so no logged action can
//! receive zero estimated probability.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::normalize::Normalizer;
use crate::cohort::windows::cohort_transitions;
use crate::cohort::{CohortSchema, Episode};
use crate::error::{Error, Result};
use crate::net::{DaqnConfig, HistoryWindow, NetConfig, QNetwork};
use crate::tensor::optim::Adam;
use crate::tensor::tape::Tape;

use super::floor_and_renormalize;

/// Architecture and optimizer settings for behavior cloning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    /// Attention blocks in the classifier trunk.
    pub blocks: usize,
    pub heads: usize,
    pub embed: usize,
    pub ff: usize,
    /// Past rows visible in addition to the current one.
    pub lookback: usize,
    pub batches: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    /// Probabilities are raised to at least this value, then renormalized.
    pub probability_floor: f64,
    pub log_interval: usize,
    pub seed: u64,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig {
            blocks: 2,
            heads: 2,
            embed: 64,
            ff: 128,
            lookback: 9,
            batches: 2000,
            batch_size: 64,
            learning_rate: 1e-3,
            grad_clip_norm: 10.0,
            probability_floor: 1e-3,
            log_interval: 200,
            seed: 0,
        }
    }
}

impl BehaviorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batches == 0 || self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Config(
                "behavior cloning needs batches, batch_size, and log_interval >= 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0)
            || !(self.grad_clip_norm.is_finite() && self.grad_clip_norm > 0.0)
        {
            return Err(Error::Config(
                "behavior-cloning learning rate and gradient clip must be positive".into(),
            ));
        }
        if !(self.probability_floor > 0.0 && self.probability_floor < 0.5) {
            return Err(Error::Config(format!(
                "probability_floor must lie in (0, 0.5), got {}",
                self.probability_floor
            )));
        }
        Ok(())
    }

    fn net_config(&self, schema: &CohortSchema) -> NetConfig {
        NetConfig::Daqn(DaqnConfig {
            obs_dim: schema.obs_dim(),
            static_dim: schema.static_features.len(),
            num_actions: schema.action_grid.num_actions(),
            blocks: self.blocks,
            heads: self.heads,
            embed: self.embed,
            ff: self.ff,
            lookback: self.lookback,
        })
    }
}

/// Cross-entropy trace of a behavior-cloning fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BehaviorFitReport {
    /// `(last batch index of the interval, mean cross-entropy)` pairs.
    pub intervals: Vec<(usize, f64)>,
    pub final_mean_cross_entropy: f64,
}

/// A fitted behavior-cloning classifier bundled with the normalization
/// statistics its inputs require.
#[derive(Debug, Clone)]
pub struct BehaviorModel {
    pub net: QNetwork,
    pub normalizer: Normalizer,
    floor: f64,
}

impl BehaviorModel {
    /// Action probabilities for one normalized decision point: softmax over
    /// the network's action scores, floored at the configured value and
    /// renormalized.
    pub fn prob_row(&self, window: &HistoryWindow, statics: &[f64]) -> Result<Vec<f64>> {
        let logits = self.net.q_values(window, statics)?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        floor_and_renormalize(&mut probs, self.floor);
        Ok(probs)
    }

    /// Tight lower bound on every output probability after flooring and
    /// renormalizing: `floor / (1 + |A|·floor)`.
    pub fn renormalized_floor(&self) -> f64 {
        let a = self.net.num_actions() as f64;
        self.floor / (1.0 + a * self.floor)
    }

    /// Probability tables over a fold, one row per decision point, built
    /// with this model's own normalizer and history depth.
    pub fn tabulate(
        &self,
        episodes: &[Episode],
        schema: &CohortSchema,
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        let num_actions = schema.action_grid.num_actions();
        let lookback = self.net.config().lookback();
        episodes
            .par_iter()
            .map(|ep| {
                let rows =
                    crate::cohort::windows::observation_rows(ep, num_actions, &self.normalizer)?;
                let statics = self.normalizer.normalize_statics(&ep.statics)?;
                (0..ep.rows.len())
                    .map(|t| {
                        let window = crate::cohort::windows::window_at(&rows, t, lookback)?;
                        self.prob_row(&window, &statics)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Fits the behavior-cloning classifier on a training fold.
///
/// Normalization statistics are fit on the same fold. Each batch draws
/// decision points uniformly with replacement, minimizes the mean negative
/// log-probability of the logged actions with Adam under a gradient-norm
/// clip, and aborts with [`Error::Diverged`] if the loss exceeds 1e6 or
/// leaves the finite range. The learning rate decays linearly from its
/// configured value to a tenth of it across the run, which settles the
/// classifier close to the conditional action distribution instead of
/// oscillating around it.
pub fn fit_behavior_policy(
    episodes: &[Episode],
    schema: &CohortSchema,
    cfg: &BehaviorConfig,
) -> Result<(BehaviorModel, BehaviorFitReport)> {
    cfg.validate()?;
    schema.validate()?;
    if episodes.is_empty() {
        return Err(Error::contract(
            "behavior cloning needs a nonempty training fold",
        ));
    }

    let normalizer = Normalizer::fit(episodes)?;
    let decisions = cohort_transitions(episodes, schema, &normalizer, cfg.lookback)?;
    let num_actions = schema.action_grid.num_actions();

    let mut init_rng = crate::rng::substream(cfg.seed, "behavior-init");
    let mut net = QNetwork::new(cfg.net_config(schema), &mut init_rng)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut batch_rng = crate::rng::substream(cfg.seed, "behavior-batches");

    let mut intervals = Vec::new();
    let mut ce_sum = 0.0;
    let mut ce_count = 0usize;

    use rand::Rng;
    for batch_idx in 0..cfg.batches {
        let progress = batch_idx as f64 / cfg.batches.max(2).saturating_sub(1) as f64;
        adam.learning_rate = cfg.learning_rate * (1.0 - 0.9 * progress);
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let pick = batch_rng.gen_range(0..decisions.len());
            let sample = &decisions[pick];
            let parts = net.forward_parts(&mut tape, &sample.window, &sample.statics)?;
            let probs = tape.softmax(parts.q, 1)?;
            let mut one_hot = vec![0.0; num_actions];
            one_hot[sample.action] = 1.0;
            let selector = tape.leaf_from(vec![1, num_actions], one_hot)?;
            let picked = tape.mul(probs, selector)?;
            let p = tape.sum(picked);
            let log_p = tape.ln(p);
            losses.push(tape.scale(log_p, -1.0));
        }
        let stacked = tape.concat(&losses)?;
        let loss = tape.mean(stacked);
        let loss_value = tape.value(loss)[0];
        if !loss_value.is_finite() || loss_value > 1e6 {
            return Err(Error::Diverged(format!(
                "behavior-cloning cross-entropy {loss_value:e} at batch {batch_idx} \
                 crossed the 1e6 guard"
            )));
        }
        ce_sum += loss_value;
        ce_count += 1;

        net.params_mut().zero_grads();
        tape.backward(loss, net.params_mut())?;
        net.params_mut().clip_grad_norm(cfg.grad_clip_norm);
        adam.step(net.params_mut())?;

        let done = batch_idx + 1;
        if done % cfg.log_interval == 0 || done == cfg.batches {
            intervals.push((batch_idx, ce_sum / ce_count as f64));
            ce_sum = 0.0;
            ce_count = 0;
        }
    }

    let final_mean_cross_entropy = intervals.last().map_or(f64::NAN, |&(_, ce)| ce);
    Ok((
        BehaviorModel {
            net,
            normalizer,
            floor: cfg.probability_floor,
        },
        BehaviorFitReport {
            intervals,
            final_mean_cross_entropy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{
        ActionChannel, ActionGrid, CohortSchema, FeatureDef, RewardKind, TimestepRow,
    };
    use crate::ope::StochasticPolicy;
    use rand::Rng;

    fn external_schema(num_dynamics: usize, iv_bins: usize, vaso_bins: usize) -> CohortSchema {
        CohortSchema {
            reward: RewardKind::External,
            timestep_hours: 4.0,
            dynamic_features: (0..num_dynamics)
                .map(|i| FeatureDef {
                    name: format!("ch{i}"),
                    unit: String::new(),
                })
                .collect(),
            static_features: vec!["age".to_string()],
            action_grid: ActionGrid {
                iv: ActionChannel::new("iv", iv_bins, vec![50.0; iv_bins.saturating_sub(2)])
                    .unwrap(),
                vaso: ActionChannel::new(
                    "vaso",
                    vaso_bins,
                    vec![0.2; vaso_bins.saturating_sub(2)],
                )
                .unwrap(),
            },
            external_markers: vec![],
        }
    }

    fn constant_action_cohort(action: usize, episodes: usize, len: usize) -> Vec<Episode> {
        let mut rng = crate::rng::substream(99, "bc-degenerate");
        (0..episodes)
            .map(|i| Episode {
                id: format!("ep{i}"),
                statics: vec![40.0 + i as f64],
                rows: (0..len)
                    .map(|_| TimestepRow {
                        dynamics: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                        action,
                        reward: 0.0,
                        markers: vec![],
                    })
                    .collect(),
                outcome: i % 2 == 0,
            })
            .collect()
    }

    fn tiny_bc_config() -> BehaviorConfig {
        BehaviorConfig {
            blocks: 1,
            heads: 1,
            embed: 8,
            ff: 16,
            lookback: 2,
            batches: 150,
            batch_size: 16,
            learning_rate: 1e-2,
            log_interval: 50,
            seed: 4,
            ..BehaviorConfig::default()
        }
    }

    #[test]
    fn degenerate_dataset_concentrates_probability() {
        let schema = external_schema(2, 2, 2);
        schema.validate().unwrap();
        let episodes = constant_action_cohort(3, 6, 5);
        let (model, report) = fit_behavior_policy(&episodes, &schema, &tiny_bc_config()).unwrap();

        let tables = model.tabulate(&episodes, &schema).unwrap();
        for episode in &tables {
            for probs in episode {
                let sum: f64 = probs.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "probabilities sum to {sum}");
                assert!(
                    probs[3] >= 0.95,
                    "constant action should dominate, got {probs:?}"
                );
                let bound = model.renormalized_floor();
                for &p in probs {
                    assert!(p >= bound, "{p} below floor bound {bound}");
                }
            }
        }
        assert!(
            report.final_mean_cross_entropy < 0.1,
            "cross-entropy should collapse on a one-action dataset, got {}",
            report.final_mean_cross_entropy
        );
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let schema = external_schema(2, 2, 2);
        let episodes = constant_action_cohort(1, 4, 4);
        let cfg = BehaviorConfig {
            batches: 30,
            ..tiny_bc_config()
        };
        let (a, ra) = fit_behavior_policy(&episodes, &schema, &cfg).unwrap();
        let (b, rb) = fit_behavior_policy(&episodes, &schema, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(
            a.tabulate(&episodes, &schema).unwrap(),
            b.tabulate(&episodes, &schema).unwrap()
        );
    }

    #[test]
    fn config_validation() {
        assert!(BehaviorConfig::default().validate().is_ok());
        for bad in [
            BehaviorConfig { batches: 0, ..BehaviorConfig::default() },
            BehaviorConfig { batch_size: 0, ..BehaviorConfig::default() },
            BehaviorConfig { learning_rate: -1.0, ..BehaviorConfig::default() },
            BehaviorConfig { probability_floor: 0.0, ..BehaviorConfig::default() },
            BehaviorConfig { probability_floor: 0.6, ..BehaviorConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(fit_behavior_policy(&[], &external_schema(2, 2, 2), &tiny_bc_config()).is_err());
    }

    /// On synthetic cohorts the sidecar records the exact behavior
    /// probabilities, so the cloning error is directly measurable: mean
    /// total-variation distance on a held-out fold must stay under 0.15.
    #[test]
    fn total_variation_to_ground_truth_behavior_is_small() {
        let spec = crate::cohort::synthetic::SyntheticEnvSpec {
            seed: 31,
            ..Default::default()
        };
        let cohort = crate::cohort::synthetic::generate(&spec, 1600).unwrap();
        let split = crate::train::split_cohort(&cohort.episodes, 0.8, 5, true).unwrap();
        let (train_eps, test_eps) = split.materialize(&cohort.episodes);

        let cfg = BehaviorConfig {
            blocks: 1,
            heads: 2,
            embed: 32,
            ff: 64,
            lookback: 9,
            batches: 2500,
            batch_size: 64,
            learning_rate: 2e-3,
            log_interval: 250,
            seed: 12,
            ..BehaviorConfig::default()
        };
        let (model, _) = fit_behavior_policy(&train_eps, &cohort.schema, &cfg).unwrap();
        let policy =
            StochasticPolicy::behavior_cloned("behavior", &model, &test_eps, &cohort.schema)
                .unwrap();

        let mut tv_sum = 0.0;
        let mut count = 0usize;
        for (i, ep) in test_eps.iter().enumerate() {
            let truth = cohort
                .ground_truth
                .iter()
                .find(|gt| gt.id == ep.id)
                .expect("sidecar entry");
            for (t, step) in truth.steps.iter().enumerate() {
                let fitted = policy.probs_at(i, t);
                let tv: f64 = fitted
                    .iter()
                    .zip(&step.behavior_probs)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / 2.0;
                tv_sum += tv;
                count += 1;
            }
        }
        let mean_tv = tv_sum / count as f64;
        assert!(
            mean_tv < 0.15,
            "mean total-variation distance to the true behavior policy: {mean_tv}"
        );
    }
}
