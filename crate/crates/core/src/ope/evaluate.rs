//! Repeated-split policy evaluation and report aggregation.
//!
//! Each split draws a fresh train/test partition, retrains every requested
//! architecture on the training fold (or reuses supplied fixed policies),
//! fits a behavior-cloning model on the same fold, and scores the softened
//! learned policies, the behavior policy itself, and a uniform-random
//! reference on the test fold with the weighted doubly-robust estimator.
//! Estimates are aggregated as mean ± sample standard deviation across
//! splits; per-split values are retained so the aggregates can be
//! recomputed exactly.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortSchema, Episode};
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::train::{split_cohort, train_policy, TrainConfig, TrainedPolicy};

use super::behavior::{fit_behavior_policy, BehaviorConfig};
use super::{
    dm_estimate, wdr_estimate, wis_estimate, ActionValue, EvalSet, PolicyKind, StochasticPolicy,
};

/// Settings of the repeated-split evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpeConfig {
    /// Independent train/test splits to evaluate over.
    pub n_splits: usize,
    /// Softening mass spread over the action space of each learned policy.
    pub epsilon_soft: f64,
    /// Stratify splits by episode outcome.
    pub stratified: bool,
    /// Retrain per split (the default protocol). The command layer reads
    /// this to decide between retraining and loading fixed checkpoints.
    pub retrain: bool,
    pub seed: u64,
    pub behavior: BehaviorConfig,
}

impl Default for OpeConfig {
    fn default() -> Self {
        OpeConfig {
            n_splits: 50,
            epsilon_soft: 0.05,
            stratified: true,
            retrain: true,
            seed: 0,
            behavior: BehaviorConfig::default(),
        }
    }
}

impl OpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_splits == 0 {
            return Err(Error::Config("n_splits must be at least 1".into()));
        }
        if !(self.epsilon_soft > 0.0 && self.epsilon_soft <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon_soft must lie in (0, 1], got {}",
                self.epsilon_soft
            )));
        }
        self.behavior.validate()
    }
}

/// One policy's estimates on one split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitEstimate {
    pub split: usize,
    pub wdr: f64,
    /// Independent weighted importance-sampling cross-check.
    pub wis: f64,
    /// Direct-method cross-check (0 for policies without a value model).
    pub direct_method: f64,
    /// Smallest per-step effective sample size of the importance weights.
    pub min_ess: f64,
}

/// A policy's estimates across all splits plus their aggregates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyEvaluation {
    pub policy: String,
    /// Provenance tag of the evaluated policy.
    pub kind: String,
    pub mean_wdr: f64,
    /// Sample standard deviation (n−1) of the per-split WDR estimates;
    /// zero when only one split was run.
    pub std_wdr: f64,
    pub splits: Vec<SplitEstimate>,
}

impl PolicyEvaluation {
    fn from_splits(policy: String, kind: PolicyKind, splits: Vec<SplitEstimate>) -> Self {
        let (mean, std) = mean_and_sample_std(&splits.iter().map(|s| s.wdr).collect::<Vec<_>>());
        PolicyEvaluation {
            policy,
            kind: kind.tag().to_string(),
            mean_wdr: mean,
            std_wdr: std,
            splits,
        }
    }
}

fn mean_and_sample_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Full evaluation output: per-policy aggregates with per-split detail.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OPEReport {
    pub gamma: f64,
    pub epsilon_soft: f64,
    pub n_splits: usize,
    pub policies: Vec<PolicyEvaluation>,
}

impl OPEReport {
    /// Aggregate table: one row per policy, `mean ± std` of the WDR
    /// estimates across splits.
    pub fn summary_table(&self) -> String {
        let mut out = String::from("policy,kind,mean_wdr,std_wdr,n_splits\n");
        for p in &self.policies {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.policy,
                p.kind,
                p.mean_wdr,
                p.std_wdr,
                p.splits.len()
            ));
        }
        out
    }

    /// Long-format per-split table.
    pub fn per_split_csv(&self) -> String {
        let mut out = String::from("split,policy,kind,wdr,wis,direct_method,min_ess\n");
        for p in &self.policies {
            for s in &p.splits {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    s.split, p.policy, p.kind, s.wdr, s.wis, s.direct_method, s.min_ess
                ));
            }
        }
        out
    }

    /// Verifies that the stored aggregates recompute exactly from the
    /// per-split values.
    pub fn consistency_check(&self) -> Result<()> {
        for p in &self.policies {
            let wdrs: Vec<f64> = p.splits.iter().map(|s| s.wdr).collect();
            let (mean, std) = mean_and_sample_std(&wdrs);
            if mean != p.mean_wdr || std != p.std_wdr {
                return Err(Error::Estimator(format!(
                    "aggregates for policy {:?} do not recompute from the \
                     per-split values",
                    p.policy
                )));
            }
        }
        Ok(())
    }
}

/// How each split obtains the learned policies it evaluates.
enum PolicySource<'a> {
    Retrain(&'a [(String, NetConfig)]),
    Fixed(&'a [(String, TrainedPolicy)]),
}

impl PolicySource<'_> {
    fn labels(&self) -> Vec<&str> {
        match self {
            PolicySource::Retrain(archs) => archs.iter().map(|(l, _)| l.as_str()).collect(),
            PolicySource::Fixed(policies) => policies.iter().map(|(l, _)| l.as_str()).collect(),
        }
    }
}

/// Repeated-split evaluation with per-split retraining of every listed
/// architecture (the protocol behind the headline comparison table).
pub fn evaluate_policies(
    episodes: &[Episode],
    schema: &CohortSchema,
    architectures: &[(String, NetConfig)],
    train_cfg: &TrainConfig,
    ope_cfg: &OpeConfig,
) -> Result<OPEReport> {
    run_evaluation(
        episodes,
        schema,
        PolicySource::Retrain(architectures),
        train_cfg,
        ope_cfg,
    )
}

/// Repeated-split evaluation of fixed, already-trained policies. Splits
/// still vary the test fold and refit the behavior model per split, but no
/// learned policy is retrained.
pub fn evaluate_fixed_policies(
    episodes: &[Episode],
    schema: &CohortSchema,
    policies: &[(String, TrainedPolicy)],
    train_cfg: &TrainConfig,
    ope_cfg: &OpeConfig,
) -> Result<OPEReport> {
    run_evaluation(
        episodes,
        schema,
        PolicySource::Fixed(policies),
        train_cfg,
        ope_cfg,
    )
}

const BEHAVIOR_LABEL: &str = "behavior";
const RANDOM_LABEL: &str = "random";

fn run_evaluation(
    episodes: &[Episode],
    schema: &CohortSchema,
    source: PolicySource<'_>,
    train_cfg: &TrainConfig,
    ope_cfg: &OpeConfig,
) -> Result<OPEReport> {
    schema.validate()?;
    train_cfg.validate()?;
    ope_cfg.validate()?;

    let labels = source.labels();
    for (i, label) in labels.iter().enumerate() {
        if *label == BEHAVIOR_LABEL || *label == RANDOM_LABEL {
            return Err(Error::Config(format!(
                "policy label {label:?} is reserved for the reference policies"
            )));
        }
        if labels[..i].contains(label) {
            return Err(Error::Config(format!("duplicate policy label {label:?}")));
        }
    }

    // Evaluate splits in parallel; results are collected in split order so
    // aggregation is deterministic.
    let split_rows: Vec<Vec<(String, PolicyKind, SplitEstimate)>> = (0..ope_cfg.n_splits)
        .into_par_iter()
        .map(|split_idx| {
            evaluate_split(episodes, schema, &source, train_cfg, ope_cfg, split_idx)
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<(String, PolicyKind)> = Vec::new();
    for label in &labels {
        let kind = match source {
            PolicySource::Retrain(_) | PolicySource::Fixed(_) => PolicyKind::SoftenedGreedy,
        };
        order.push((label.to_string(), kind));
    }
    order.push((BEHAVIOR_LABEL.to_string(), PolicyKind::BehaviorCloned));
    order.push((RANDOM_LABEL.to_string(), PolicyKind::UniformRandom));

    let mut policies = Vec::with_capacity(order.len());
    for (label, kind) in order {
        let splits: Vec<SplitEstimate> = split_rows
            .iter()
            .flat_map(|rows| {
                rows.iter()
                    .filter(|(l, _, _)| *l == label)
                    .map(|(_, _, s)| s.clone())
            })
            .collect();
        policies.push(PolicyEvaluation::from_splits(label, kind, splits));
    }

    Ok(OPEReport {
        gamma: train_cfg.gamma,
        epsilon_soft: ope_cfg.epsilon_soft,
        n_splits: ope_cfg.n_splits,
        policies,
    })
}

fn evaluate_split(
    episodes: &[Episode],
    schema: &CohortSchema,
    source: &PolicySource<'_>,
    train_cfg: &TrainConfig,
    ope_cfg: &OpeConfig,
    split_idx: usize,
) -> Result<Vec<(String, PolicyKind, SplitEstimate)>> {
    let mut seed_rng =
        crate::rng::indexed_substream(ope_cfg.seed, "ope-split", split_idx as u64);
    let split_seed: u64 = seed_rng.gen();
    let train_seed: u64 = seed_rng.gen();
    let behavior_seed: u64 = seed_rng.gen();

    let split = split_cohort(
        episodes,
        train_cfg.split_fraction,
        split_seed,
        ope_cfg.stratified,
    )?;
    let (train_eps, test_eps) = split.materialize(episodes);
    let set = EvalSet::from_episodes(&test_eps, schema)?;
    let gamma = train_cfg.gamma;

    let behavior_cfg = BehaviorConfig {
        seed: behavior_seed,
        ..ope_cfg.behavior.clone()
    };
    let (behavior_model, _) = fit_behavior_policy(&train_eps, schema, &behavior_cfg)?;
    let pi_b =
        StochasticPolicy::behavior_cloned(BEHAVIOR_LABEL, &behavior_model, &test_eps, schema)?;

    let mut rows = Vec::new();
    let mut score_learned = |label: &str, policy: &TrainedPolicy| -> Result<()> {
        let pi_e = StochasticPolicy::softened_greedy(
            label,
            policy,
            &test_eps,
            schema,
            ope_cfg.epsilon_soft,
        )?;
        let qhat = ActionValue::from_policy_net(policy, &test_eps, schema)?;
        let wdr = wdr_estimate(&set, &pi_e, &pi_b, &qhat, gamma)?;
        let wis = wis_estimate(&set, &pi_e, &pi_b, gamma)?;
        let dm = dm_estimate(&set, &pi_e, &qhat)?;
        rows.push((
            label.to_string(),
            PolicyKind::SoftenedGreedy,
            SplitEstimate {
                split: split_idx,
                wdr: wdr.estimate,
                wis,
                direct_method: dm,
                min_ess: wdr.min_ess,
            },
        ));
        Ok(())
    };

    match source {
        PolicySource::Retrain(archs) => {
            for (label, net_cfg) in archs.iter() {
                let cfg = TrainConfig {
                    seed: train_seed,
                    ..train_cfg.clone()
                };
                let (policy, _) = train_policy(&train_eps, schema, net_cfg, &cfg)?;
                score_learned(label, &policy)?;
            }
        }
        PolicySource::Fixed(policies) => {
            for (label, policy) in policies.iter() {
                score_learned(label, policy)?;
            }
        }
    }

    // The behavior policy scored against itself (all ratios are 1).
    let wdr_b = wdr_estimate(&set, &pi_b, &pi_b, &ActionValue::Zero, gamma)?;
    let wis_b = wis_estimate(&set, &pi_b, &pi_b, gamma)?;
    rows.push((
        BEHAVIOR_LABEL.to_string(),
        PolicyKind::BehaviorCloned,
        SplitEstimate {
            split: split_idx,
            wdr: wdr_b.estimate,
            wis: wis_b,
            direct_method: 0.0,
            min_ess: wdr_b.min_ess,
        },
    ));

    // Uniform-random reference.
    let pi_u = StochasticPolicy::uniform(RANDOM_LABEL, &set.lengths(), set.num_actions)?;
    let wdr_u = wdr_estimate(&set, &pi_u, &pi_b, &ActionValue::Zero, gamma)?;
    let wis_u = wis_estimate(&set, &pi_u, &pi_b, gamma)?;
    rows.push((
        RANDOM_LABEL.to_string(),
        PolicyKind::UniformRandom,
        SplitEstimate {
            split: split_idx,
            wdr: wdr_u.estimate,
            wis: wis_u,
            direct_method: 0.0,
            min_ess: wdr_u.min_ess,
        },
    ));

    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::MlpConfig;

    fn tiny_setup() -> (crate::cohort::synthetic::SyntheticCohort, TrainConfig, OpeConfig) {
        let spec = crate::cohort::synthetic::SyntheticEnvSpec {
            seed: 17,
            ..Default::default()
        };
        let cohort = crate::cohort::synthetic::generate(&spec, 24).unwrap();
        let train_cfg = TrainConfig {
            batches: 60,
            batch_size: 16,
            target_sync_period: 20,
            learning_rate: 1e-3,
            log_interval: 30,
            ..TrainConfig::default()
        };
        let ope_cfg = OpeConfig {
            n_splits: 3,
            seed: 9,
            behavior: crate::ope::BehaviorConfig {
                blocks: 1,
                heads: 1,
                embed: 8,
                ff: 16,
                lookback: 2,
                batches: 120,
                batch_size: 16,
                learning_rate: 3e-3,
                log_interval: 60,
                ..crate::ope::BehaviorConfig::default()
            },
            ..OpeConfig::default()
        };
        (cohort, train_cfg, ope_cfg)
    }

    fn tiny_mlp(schema: &crate::cohort::CohortSchema) -> NetConfig {
        NetConfig::DqnMlp(MlpConfig {
            obs_dim: schema.obs_dim(),
            static_dim: schema.static_features.len(),
            num_actions: schema.action_grid.num_actions(),
            hidden: 16,
        })
    }

    #[test]
    fn retraining_evaluation_end_to_end() {
        let (cohort, train_cfg, ope_cfg) = tiny_setup();
        let archs = vec![("dqn-mlp".to_string(), tiny_mlp(&cohort.schema))];

        let report =
            evaluate_policies(&cohort.episodes, &cohort.schema, &archs, &train_cfg, &ope_cfg)
                .unwrap();

        let names: Vec<&str> = report.policies.iter().map(|p| p.policy.as_str()).collect();
        assert_eq!(names, vec!["dqn-mlp", "behavior", "random"]);
        for p in &report.policies {
            assert_eq!(p.splits.len(), 3);
            for (i, s) in p.splits.iter().enumerate() {
                assert_eq!(s.split, i);
                assert!(s.wdr.is_finite());
                assert!(s.min_ess >= 1.0 - 1e-9);
            }
        }
        report.consistency_check().unwrap();

        // Behavior self-evaluation has unit ratios, so its q̂≡0 WDR equals
        // its WIS and its weights stay maximally spread (ESS = fold size).
        let behavior = &report.policies[1];
        for s in &behavior.splits {
            assert!((s.wdr - s.wis).abs() < 1e-12);
        }
        // And its across-split spread is the smallest of the three.
        assert!(behavior.std_wdr <= report.policies[0].std_wdr);
        assert!(behavior.std_wdr <= report.policies[2].std_wdr);

        // Identical inputs reproduce the identical report.
        let rerun =
            evaluate_policies(&cohort.episodes, &cohort.schema, &archs, &train_cfg, &ope_cfg)
                .unwrap();
        assert_eq!(report, rerun);

        // Serialized tables: one aggregate row per policy, one long row per
        // (split, policy).
        assert_eq!(report.summary_table().lines().count(), 1 + 3);
        assert_eq!(report.per_split_csv().lines().count(), 1 + 3 * 3);
    }

    #[test]
    fn fixed_policy_evaluation_skips_retraining() {
        let (cohort, train_cfg, mut ope_cfg) = tiny_setup();
        ope_cfg.n_splits = 2;
        ope_cfg.retrain = false;

        let (policy, _) = crate::train::train_policy(
            &cohort.episodes,
            &cohort.schema,
            &tiny_mlp(&cohort.schema),
            &TrainConfig {
                batches: 40,
                ..train_cfg.clone()
            },
        )
        .unwrap();

        let fixed = vec![("frozen-mlp".to_string(), policy)];
        let report = evaluate_fixed_policies(
            &cohort.episodes,
            &cohort.schema,
            &fixed,
            &train_cfg,
            &ope_cfg,
        )
        .unwrap();
        assert_eq!(report.policies[0].policy, "frozen-mlp");
        assert_eq!(report.policies[0].splits.len(), 2);
        report.consistency_check().unwrap();

        let rerun = evaluate_fixed_policies(
            &cohort.episodes,
            &cohort.schema,
            &fixed,
            &train_cfg,
            &ope_cfg,
        )
        .unwrap();
        assert_eq!(report, rerun);
    }

    #[test]
    fn reserved_and_duplicate_labels_are_rejected() {
        let (cohort, train_cfg, ope_cfg) = tiny_setup();
        let reserved = vec![("behavior".to_string(), tiny_mlp(&cohort.schema))];
        assert!(matches!(
            evaluate_policies(
                &cohort.episodes,
                &cohort.schema,
                &reserved,
                &train_cfg,
                &ope_cfg
            ),
            Err(Error::Config(_))
        ));

        let dup = vec![
            ("m".to_string(), tiny_mlp(&cohort.schema)),
            ("m".to_string(), tiny_mlp(&cohort.schema)),
        ];
        assert!(matches!(
            evaluate_policies(&cohort.episodes, &cohort.schema, &dup, &train_cfg, &ope_cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn aggregation_matches_hand_computation() {
        let splits: Vec<SplitEstimate> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .enumerate()
            .map(|(i, &wdr)| SplitEstimate {
                split: i,
                wdr,
                wis: wdr,
                direct_method: 0.0,
                min_ess: 1.0,
            })
            .collect();
        let eval =
            PolicyEvaluation::from_splits("p".into(), PolicyKind::UniformRandom, splits);
        assert!((eval.mean_wdr - 2.5).abs() < 1e-15);
        // Sample variance of {1,2,3,4} is 5/3.
        assert!((eval.std_wdr - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);

        let single = PolicyEvaluation::from_splits(
            "q".into(),
            PolicyKind::UniformRandom,
            vec![SplitEstimate {
                split: 0,
                wdr: 7.0,
                wis: 7.0,
                direct_method: 0.0,
                min_ess: 1.0,
            }],
        );
        assert_eq!(single.std_wdr, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(OpeConfig::default().validate().is_ok());
        assert!(OpeConfig {
            n_splits: 0,
            ..OpeConfig::default()
        }
        .validate()
        .is_err());
        assert!(OpeConfig {
            epsilon_soft: 0.0,
            ..OpeConfig::default()
        }
        .validate()
        .is_err());
        let parsed: OpeConfig = toml::from_str("").unwrap();
        assert_eq!(parsed, OpeConfig::default());
        assert_eq!(parsed.n_splits, 50);
        assert_eq!(parsed.epsilon_soft, 0.05);
    }
}
