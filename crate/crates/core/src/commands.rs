//! The five run modes behind the CLI, on a shared run configuration.
//!
//! Each command validates its configuration first, echoes the effective
//! configuration to `config_echo.toml` in the output directory, then runs
//! and writes its outputs under a fixed layout:
//!
//! ```text
//! out/
//!   config_echo.toml                     every command
//!   cohort.csv, schema.toml, sidecar.csv generate
//!   checkpoints/{arch}.ckpt              train
//!   reports/train_metrics_{arch}.csv     train
//!   reports/ope_summary.csv              evaluate
//!   reports/ope_per_split.csv            evaluate
//!   reports/attention_correlations.csv   interpret
//!   reports/trace_dump.csv               interpret
//!   figures/attention_layer{L}_{marker}.svg  interpret
//!   reports/gradcheck.txt                gradcheck
//! ```
//!
//! Commands never modify their inputs, and a command re-run from the echoed
//! configuration reproduces its outputs byte for byte: every random stream
//! is derived from the single top-level `seed`, and no output embeds wall
//! time or machine identity.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::io::{load_cohort, load_schema, save_cohort, save_schema};
use crate::cohort::synthetic::{self, SyntheticEnvSpec};
use crate::cohort::{CohortSchema, Episode};
use crate::error::{Error, Result};
use crate::interpret;
use crate::net::{
    architecture_grad_suite, Architecture, DaqnConfig, LstmConfig, MlpConfig, NetConfig,
};
use crate::ope::{evaluate_fixed_policies, evaluate_policies, OpeConfig};
use crate::rng::substream;
use crate::tensor::gradcheck::{self, GradCheckReport, DEFAULT_STEP};
use crate::tensor::{ParamStore, Tensor};
use crate::train::{train_policy, TrainConfig, TrainedPolicy};

/// Derives a per-stage seed from the top-level run seed. Distinct labels
/// give statistically independent streams; the same (seed, label) pair
/// always gives the same value. Results stay below 2^63 so they round-trip
/// through configuration files, whose integers are signed.
pub fn stage_seed(seed: u64, label: &str) -> u64 {
    substream(seed, label).gen::<u64>() & (i64::MAX as u64)
}

/// Where to read an existing cohort (for train, evaluate, and interpret).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    /// Cohort episode file.
    pub path: String,
    /// Schema file describing the cohort.
    pub schema: String,
}

impl Default for CohortSection {
    fn default() -> Self {
        CohortSection {
            path: String::new(),
            schema: String::new(),
        }
    }
}

/// Synthetic-cohort generation settings (for generate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_episodes: usize,
    /// Environment definition; its `seed` is overwritten from the top-level
    /// run seed.
    pub env: SyntheticEnvSpec,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            n_episodes: 500,
            env: SyntheticEnvSpec::default(),
        }
    }
}

/// Network hyperparameters, applied to whichever architectures a command
/// instantiates. Input/output dimensions always come from the cohort schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    /// Architecture tag for `train`: `daqn`, `dqn-mlp`, or `drqn-lstm`.
    pub arch: String,
    /// Attention blocks (attention architecture only).
    pub blocks: usize,
    pub heads: usize,
    pub embed: usize,
    pub ff: usize,
    /// Past rows visible in addition to the current one (history
    /// architectures only).
    pub lookback: usize,
    /// Hidden width of the baseline architectures.
    pub hidden: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        let d = DaqnConfig::new(1, 0, 1);
        NetSection {
            arch: "daqn".into(),
            blocks: d.blocks,
            heads: d.heads,
            embed: d.embed,
            ff: d.ff,
            lookback: d.lookback,
            hidden: MlpConfig::new(1, 0, 1).hidden,
        }
    }
}

impl NetSection {
    /// Builds the full network configuration for one architecture, taking
    /// problem dimensions from the schema.
    pub fn net_config(&self, arch: Architecture, schema: &CohortSchema) -> NetConfig {
        let obs_dim = schema.obs_dim();
        let static_dim = schema.static_features.len();
        let num_actions = schema.num_actions();
        match arch {
            Architecture::Daqn => NetConfig::Daqn(DaqnConfig {
                obs_dim,
                static_dim,
                num_actions,
                blocks: self.blocks,
                heads: self.heads,
                embed: self.embed,
                ff: self.ff,
                lookback: self.lookback,
            }),
            Architecture::DqnMlp => NetConfig::DqnMlp(MlpConfig {
                obs_dim,
                static_dim,
                num_actions,
                hidden: self.hidden,
            }),
            Architecture::DrqnLstm => NetConfig::DrqnLstm(LstmConfig {
                obs_dim,
                static_dim,
                num_actions,
                hidden: self.hidden,
                lookback: self.lookback,
            }),
        }
    }
}

/// Evaluation-specific settings beyond [`OpeConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Architecture tags to evaluate (each becomes one policy row, next to
    /// the built-in behavior and random baselines).
    pub archs: Vec<String>,
    /// Fixed checkpoint paths keyed by architecture tag; required for every
    /// entry of `archs` when `ope.retrain` is false.
    pub checkpoints: BTreeMap<String, String>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            archs: vec!["daqn".into(), "dqn-mlp".into(), "drqn-lstm".into()],
            checkpoints: BTreeMap::new(),
        }
    }
}

/// Interpretation settings (for interpret).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretSection {
    /// Trained attention-policy checkpoint to explain.
    pub checkpoint: String,
    /// Episode id to draw trace figures for; empty selects the first
    /// episode of the cohort.
    pub episode: String,
    /// How many episodes (in cohort order) to include in the raw trace
    /// dump; 0 skips the dump. Correlations always use the whole cohort.
    pub dump_episodes: usize,
}

impl Default for InterpretSection {
    fn default() -> Self {
        InterpretSection {
            checkpoint: String::new(),
            episode: String::new(),
            dump_episodes: 25,
        }
    }
}

/// Gradient-audit settings (for gradcheck).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    /// Relative-error tolerance for individual tape primitives.
    pub layer_tolerance: f64,
    /// Relative-error tolerance for full architecture losses.
    pub net_tolerance: f64,
    /// Also run a fault-injection self-test: a parameter whose stored
    /// gradient is deliberately mis-scaled must be reported as FAILED and
    /// make the command exit nonzero. Verifies the failure path end to end.
    pub inject_failure: bool,
    /// Derived from the top-level seed.
    pub seed: u64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            layer_tolerance: 1e-4,
            net_tolerance: 1e-3,
            inject_failure: false,
            seed: 0,
        }
    }
}

/// One configuration for all commands. Every field has a default, so an
/// empty TOML file is valid; unknown keys are rejected.
///
/// Per-stage seeds (`synthetic.env.seed`, `train.seed`, `ope.seed`,
/// `ope.behavior.seed`, `gradcheck.seed`) are always derived from the
/// top-level `seed` via labelled substreams; values written for them in the
/// file are overwritten, and the echoed configuration records the derived
/// values. Re-running any command from its echo therefore reproduces the
/// run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// One of `generate`, `train`, `evaluate`, `interpret`, `gradcheck`.
    /// The CLI fills this from its subcommand.
    pub command: String,
    /// Top-level seed; every random stream in the run derives from it.
    pub seed: u64,
    /// Output directory; required by every command.
    pub out: String,
    /// Worker threads for the process-wide pool; 0 keeps the default. The
    /// CLI applies this before dispatch — the command functions themselves
    /// do not alter global state.
    pub threads: usize,
    pub cohort: CohortSection,
    pub synthetic: SyntheticSection,
    pub net: NetSection,
    pub train: TrainConfig,
    pub ope: OpeConfig,
    pub evaluate: EvaluateSection,
    pub interpret: InterpretSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            seed: 0,
            out: String::new(),
            threads: 0,
            cohort: CohortSection::default(),
            synthetic: SyntheticSection::default(),
            net: NetSection::default(),
            train: TrainConfig::default(),
            ope: OpeConfig::default(),
            evaluate: EvaluateSection::default(),
            interpret: InterpretSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("failed to parse run config: {e}")))
    }

    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize run config: {e}")))
    }

    /// The configuration a command actually runs with: a copy of `self`
    /// with all per-stage seeds derived from the top-level seed. Idempotent
    /// (the derivation only reads the top-level seed), so re-running from an
    /// echoed configuration derives the same values again.
    pub fn effective(&self) -> RunConfig {
        let mut c = self.clone();
        c.synthetic.env.seed = stage_seed(self.seed, "generate");
        c.train.seed = stage_seed(self.seed, "train");
        c.ope.seed = stage_seed(self.seed, "ope");
        c.ope.behavior.seed = stage_seed(self.seed, "behavior");
        c.gradcheck.seed = stage_seed(self.seed, "gradcheck");
        c
    }
}

/// What a command produced: a one-line-per-fact summary for the terminal
/// and the list of files written.
#[derive(Debug, Clone)]
pub struct CommandOutput {
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

/// Dispatches on `cfg.command`.
pub fn run(cfg: &RunConfig) -> Result<CommandOutput> {
    match cfg.command.as_str() {
        "generate" => cmd_generate(cfg),
        "train" => cmd_train(cfg),
        "evaluate" => cmd_evaluate(cfg),
        "interpret" => cmd_interpret(cfg),
        "gradcheck" => cmd_gradcheck(cfg),
        "" => Err(Error::Config(
            "command is required: one of generate, train, evaluate, interpret, gradcheck".into(),
        )),
        other => Err(Error::Config(format!(
            "unknown command {other:?}: expected generate, train, evaluate, interpret, or gradcheck"
        ))),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.out.is_empty() {
        return Err(Error::Config(
            "an output directory is required: set --out or `out` in the config file".into(),
        ));
    }
    Ok(PathBuf::from(&cfg.out))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

/// Writes the effective configuration next to the outputs it produced.
fn write_echo(out: &Path, eff: &RunConfig) -> Result<PathBuf> {
    let path = out.join("config_echo.toml");
    write_text(&path, &eff.to_toml()?)?;
    Ok(path)
}

fn require_path(value: &str, key: &str, hint: &str) -> Result<PathBuf> {
    if value.is_empty() {
        return Err(Error::Config(format!("`{key}` is required: {hint}")));
    }
    Ok(PathBuf::from(value))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("{what} not found at {}", path.display())));
    }
    Ok(())
}

/// Loads schema + episodes for the commands that consume a cohort. Returns
/// ingest warnings (skipped rows etc.) for the summary.
fn load_inputs(eff: &RunConfig) -> Result<(CohortSchema, Vec<Episode>, Vec<String>)> {
    let schema_path = PathBuf::from(&eff.cohort.schema);
    let cohort_path = PathBuf::from(&eff.cohort.path);
    let schema = load_schema(&schema_path)?;
    let loaded = load_cohort(&cohort_path, &schema)?;
    Ok((schema, loaded.episodes, loaded.warnings))
}

fn validate_cohort_inputs(eff: &RunConfig) -> Result<()> {
    let schema = require_path(
        &eff.cohort.schema,
        "cohort.schema",
        "path to the schema file of the input cohort",
    )?;
    let path = require_path(
        &eff.cohort.path,
        "cohort.path",
        "path to the input cohort file",
    )?;
    require_file(&schema, "cohort schema file")?;
    require_file(&path, "cohort file")?;
    Ok(())
}

fn file_name_slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

/// Samples a synthetic cohort and writes the cohort file, its schema, and
/// the ground-truth sidecar.
pub fn cmd_generate(cfg: &RunConfig) -> Result<CommandOutput> {
    let eff = cfg.effective();
    let out = out_dir(&eff)?;
    if eff.synthetic.n_episodes == 0 {
        return Err(Error::Config(
            "`synthetic.n_episodes` must be at least 1".into(),
        ));
    }
    eff.synthetic
        .env
        .validate()
        .map_err(|e| Error::Config(format!("invalid synthetic environment: {e}")))?;

    make_dir(&out)?;
    let echo = write_echo(&out, &eff)?;

    let cohort = synthetic::generate(&eff.synthetic.env, eff.synthetic.n_episodes)?;
    let schema_path = out.join("schema.toml");
    let cohort_path = out.join("cohort.csv");
    let sidecar_path = out.join("sidecar.csv");
    save_schema(&schema_path, &cohort.schema)?;
    save_cohort(&cohort_path, &cohort.schema, &cohort.episodes)?;
    synthetic::save_sidecar(&sidecar_path, &cohort.ground_truth)?;

    let timesteps: usize = cohort.episodes.iter().map(|e| e.len()).sum();
    Ok(CommandOutput {
        summary: format!(
            "generated {} episodes ({} timesteps, {} actions, obs dim {})",
            cohort.episodes.len(),
            timesteps,
            cohort.schema.num_actions(),
            cohort.schema.obs_dim(),
        ),
        artifacts: vec![echo, cohort_path, schema_path, sidecar_path],
    })
}

/// Trains one architecture on a cohort and writes its checkpoint and
/// training metrics.
pub fn cmd_train(cfg: &RunConfig) -> Result<CommandOutput> {
    let eff = cfg.effective();
    let out = out_dir(&eff)?;
    validate_cohort_inputs(&eff)?;
    let arch = Architecture::from_tag(&eff.net.arch)?;

    make_dir(&out)?;
    let echo = write_echo(&out, &eff)?;

    let (schema, episodes, warnings) = load_inputs(&eff)?;
    let net_cfg = eff.net.net_config(arch, &schema);
    let (policy, report) = train_policy(&episodes, &schema, &net_cfg, &eff.train)?;

    let ckpt_dir = out.join("checkpoints");
    let reports_dir = out.join("reports");
    make_dir(&ckpt_dir)?;
    make_dir(&reports_dir)?;
    let ckpt_path = ckpt_dir.join(format!("{}.ckpt", arch.tag()));
    let metrics_path = reports_dir.join(format!("train_metrics_{}.csv", arch.tag()));
    policy.save(&ckpt_path)?;
    write_text(&metrics_path, &report.metrics_csv())?;

    let mut summary = format!(
        "trained {} for {} batches on {} episodes ({} replay transitions)",
        arch.tag(),
        report.batches,
        episodes.len(),
        report.replay_size,
    );
    if let Some(last) = report.intervals.last() {
        summary.push_str(&format!("; final interval mean loss {:.6}", last.mean_loss));
    }
    if !warnings.is_empty() {
        summary.push_str(&format!("; {} ingest warning(s)", warnings.len()));
    }
    Ok(CommandOutput {
        summary,
        artifacts: vec![echo, ckpt_path, metrics_path],
    })
}

/// Runs off-policy evaluation over the configured architectures plus the
/// built-in behavior and random baselines, and writes the summary and
/// per-split reports.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<CommandOutput> {
    let eff = cfg.effective();
    let out = out_dir(&eff)?;
    validate_cohort_inputs(&eff)?;
    if eff.evaluate.archs.is_empty() {
        return Err(Error::Config(
            "`evaluate.archs` must name at least one architecture".into(),
        ));
    }
    let mut archs = Vec::new();
    for tag in &eff.evaluate.archs {
        let arch = Architecture::from_tag(tag)?;
        if archs.iter().any(|(t, _)| t == tag) {
            return Err(Error::Config(format!(
                "duplicate architecture {tag:?} in `evaluate.archs`"
            )));
        }
        archs.push((tag.clone(), arch));
    }
    // With retraining disabled every policy must come from a checkpoint;
    // resolve and verify them all before any work happens.
    let mut fixed: Vec<(String, PathBuf)> = Vec::new();
    if !eff.ope.retrain {
        for (tag, _) in &archs {
            let path = eff.evaluate.checkpoints.get(tag).ok_or_else(|| {
                Error::Config(format!(
                    "ope.retrain is false but no checkpoint is configured for \
                     architecture {tag:?}; add `{tag} = \"path/to/{tag}.ckpt\"` \
                     under [evaluate.checkpoints] or enable retraining"
                ))
            })?;
            let path = PathBuf::from(path);
            require_file(&path, &format!("checkpoint for architecture {tag:?}"))?;
            fixed.push((tag.clone(), path));
        }
    }

    make_dir(&out)?;
    let echo = write_echo(&out, &eff)?;

    let (schema, episodes, warnings) = load_inputs(&eff)?;
    let report = if eff.ope.retrain {
        let arch_cfgs: Vec<(String, NetConfig)> = archs
            .iter()
            .map(|(tag, arch)| (tag.clone(), eff.net.net_config(*arch, &schema)))
            .collect();
        evaluate_policies(&episodes, &schema, &arch_cfgs, &eff.train, &eff.ope)?
    } else {
        let mut policies = Vec::new();
        for (tag, path) in &fixed {
            let policy = TrainedPolicy::load(path)?;
            let found = policy.net.architecture().tag();
            if found != tag {
                return Err(Error::Config(format!(
                    "checkpoint {} holds architecture {found:?}, but it is \
                     configured for {tag:?}",
                    path.display()
                )));
            }
            policies.push((tag.clone(), policy));
        }
        evaluate_fixed_policies(&episodes, &schema, &policies, &eff.train, &eff.ope)?
    };
    report.consistency_check()?;

    let reports_dir = out.join("reports");
    make_dir(&reports_dir)?;
    let summary_path = reports_dir.join("ope_summary.csv");
    let per_split_path = reports_dir.join("ope_per_split.csv");
    write_text(&summary_path, &report.summary_table())?;
    write_text(&per_split_path, &report.per_split_csv())?;

    let mut summary = format!(
        "evaluated {} policies over {} splits (gamma {}, softening {})",
        report.policies.len(),
        report.n_splits,
        report.gamma,
        report.epsilon_soft,
    );
    for p in &report.policies {
        summary.push_str(&format!(
            "\n  {:<12} {:<10} wdr {:+.4} +- {:.4}",
            p.policy, p.kind, p.mean_wdr, p.std_wdr
        ));
    }
    if !warnings.is_empty() {
        summary.push_str(&format!("\n  {} ingest warning(s)", warnings.len()));
    }
    Ok(CommandOutput {
        summary,
        artifacts: vec![echo, summary_path, per_split_path],
    })
}

/// Extracts attention traces from a trained attention policy, correlates
/// them with clinical markers, and draws trace figures for one episode.
pub fn cmd_interpret(cfg: &RunConfig) -> Result<CommandOutput> {
    let eff = cfg.effective();
    let out = out_dir(&eff)?;
    validate_cohort_inputs(&eff)?;
    let ckpt = require_path(
        &eff.interpret.checkpoint,
        "interpret.checkpoint",
        "path to the trained attention-policy checkpoint to explain",
    )?;
    require_file(&ckpt, "policy checkpoint")?;

    make_dir(&out)?;
    let echo = write_echo(&out, &eff)?;

    let (schema, episodes, warnings) = load_inputs(&eff)?;
    let policy = TrainedPolicy::load(&ckpt)?;
    let traces = interpret::extract_traces(&policy, &episodes, &schema)?;
    let corr = interpret::correlate(&traces, &episodes, &schema)?;

    let reports_dir = out.join("reports");
    let figures_dir = out.join("figures");
    make_dir(&reports_dir)?;
    make_dir(&figures_dir)?;
    let corr_path = reports_dir.join("attention_correlations.csv");
    write_text(&corr_path, &corr.summary_csv())?;
    let mut artifacts = vec![echo, corr_path];

    if eff.interpret.dump_episodes > 0 {
        let end = traces
            .iter()
            .position(|r| r.episode_index >= eff.interpret.dump_episodes)
            .unwrap_or(traces.len());
        if end > 0 {
            let dump_path = reports_dir.join("trace_dump.csv");
            write_text(&dump_path, &interpret::trace_dump_csv(&traces[..end])?)?;
            artifacts.push(dump_path);
        }
    }

    // Trace figures for one episode: attention received per timestep,
    // overlaid on each marker, one figure per attention layer.
    let episode_index = if eff.interpret.episode.is_empty() {
        0
    } else {
        episodes
            .iter()
            .position(|e| e.id == eff.interpret.episode)
            .ok_or_else(|| {
                Error::Config(format!(
                    "`interpret.episode`: no episode with id {:?} in the cohort",
                    eff.interpret.episode
                ))
            })?
    };
    let episode = &episodes[episode_index];
    let lo = traces
        .iter()
        .position(|r| r.episode_index == episode_index)
        .ok_or_else(|| Error::contract("selected episode produced no traces"))?;
    let hi = traces[lo..]
        .iter()
        .position(|r| r.episode_index != episode_index)
        .map(|n| lo + n)
        .unwrap_or(traces.len());
    let episode_records = &traces[lo..hi];
    let layers = episode_records[0].num_layers();
    let marker_names = schema.marker_names();
    for layer in 0..layers {
        let attention = interpret::received_attention(episode_records, layer, episode.len())?;
        for (m, name) in marker_names.iter().enumerate() {
            let series: Vec<f64> = (0..episode.len()).map(|t| episode.marker(t, m)).collect();
            let fig_path = figures_dir.join(format!(
                "attention_layer{layer}_{}.svg",
                file_name_slug(name)
            ));
            interpret::render_trace_figure(&series, &attention, name, &fig_path)?;
            artifacts.push(fig_path);
        }
    }

    let mut summary = format!(
        "correlated attention with {} markers over {} episodes; \
         figures for episode {:?} ({} layers)",
        marker_names.len(),
        episodes.len(),
        episode.id,
        layers,
    );
    for (l, row) in corr.coefficients.iter().enumerate() {
        let best = row
            .iter()
            .enumerate()
            .filter_map(|(m, c)| c.map(|v| (m, v)))
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
        if let Some((m, v)) = best {
            summary.push_str(&format!(
                "\n  layer {l}: strongest marker {} (r {:+.3})",
                marker_names[m], v
            ));
        }
    }
    if !warnings.is_empty() {
        summary.push_str(&format!("\n  {} ingest warning(s)", warnings.len()));
    }
    Ok(CommandOutput {
        summary,
        artifacts,
    })
}

/// A parameter whose stored gradient is deliberately mis-scaled, standing in
/// for a wrong backward implementation. The checker must flag it.
fn corrupted_gradient_fixture(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    const NAME: &str = "fixture.corrupted_backward.w";
    let mut rng = substream(seed, "gradcheck-fixture");
    let values: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut store = ParamStore::new();
    store.insert(NAME, Tensor::new(vec![values.len()], values.clone())?)?;
    // Loss Σ tanh(w_i) has gradient 1 − tanh²(w_i); store 1.5× that.
    let corrupted: Vec<f64> = values
        .iter()
        .map(|v| 1.5 * (1.0 - v.tanh().powi(2)))
        .collect();
    store
        .get_mut(NAME)
        .expect("fixture parameter exists")
        .grad_mut()
        .copy_from_slice(&corrupted);
    gradcheck::check_gradients(
        &store,
        |s| {
            Ok(s.get(NAME)
                .expect("fixture parameter exists")
                .data()
                .iter()
                .map(|v| v.tanh())
                .sum())
        },
        DEFAULT_STEP,
        tolerance,
    )
}

/// Finite-difference audit of every tape primitive and every architecture;
/// writes a report listing each checked tensor and fails if any entry is
/// outside tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<CommandOutput> {
    let eff = cfg.effective();
    let out = out_dir(&eff)?;
    for (key, tol) in [
        ("gradcheck.layer_tolerance", eff.gradcheck.layer_tolerance),
        ("gradcheck.net_tolerance", eff.gradcheck.net_tolerance),
    ] {
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(Error::Config(format!("`{key}` must be positive, got {tol}")));
        }
    }

    make_dir(&out)?;
    let echo = write_echo(&out, &eff)?;

    let layer = gradcheck::layer_suite(eff.gradcheck.seed, eff.gradcheck.layer_tolerance)?;
    let nets = architecture_grad_suite(eff.gradcheck.seed, eff.gradcheck.net_tolerance)?;
    let fixture = if eff.gradcheck.inject_failure {
        Some(corrupted_gradient_fixture(
            eff.gradcheck.seed,
            eff.gradcheck.layer_tolerance,
        )?)
    } else {
        None
    };

    let mut text = format!(
        "tape primitives: tolerance {:.1e}, step {:.1e}\n{}",
        layer.tolerance,
        layer.step,
        layer.render_text()
    );
    text.push_str(&format!(
        "\nfull architectures: tolerance {:.1e}, step {:.1e}\n{}",
        nets.tolerance,
        nets.step,
        nets.render_text()
    ));
    if let Some(f) = &fixture {
        text.push_str(&format!(
            "\nfault-injection self-test (must FAIL): tolerance {:.1e}, step {:.1e}\n{}",
            f.tolerance,
            f.step,
            f.render_text()
        ));
    }
    let reports_dir = out.join("reports");
    make_dir(&reports_dir)?;
    let report_path = reports_dir.join("gradcheck.txt");
    write_text(&report_path, &text)?;

    let mut failing: Vec<String> = Vec::new();
    let mut checked = 0usize;
    for report in [Some(&layer), Some(&nets), fixture.as_ref()].into_iter().flatten() {
        checked += report.items.len();
        failing.extend(
            report
                .items
                .iter()
                .filter(|i| !i.passed)
                .map(|i| i.name.clone()),
        );
    }
    if !failing.is_empty() {
        return Err(Error::GradCheck(format!(
            "{} of {checked} tensors outside tolerance: {} (full report at {})",
            failing.len(),
            failing.join(", "),
            report_path.display(),
        )));
    }
    Ok(CommandOutput {
        summary: format!("{checked} tensors checked, all within tolerance"),
        artifacts: vec![echo, report_path],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    /// Tiny-but-real configuration: a small synthetic environment and small
    /// networks so command tests stay fast.
    fn tiny_config(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.out = out.to_string_lossy().into_owned();
        cfg.seed = 7;
        cfg.synthetic.n_episodes = 24;
        cfg.synthetic.env.severities = 3;
        cfg.synthetic.env.actions_per_channel = 2;
        cfg.synthetic.env.episode_len_min = 6;
        cfg.synthetic.env.episode_len_max = 8;
        cfg.synthetic.env.distractors = 2;
        cfg.synthetic.env.init_severity_weights = vec![0.4, 0.4, 0.2];
        cfg.net.blocks = 1;
        cfg.net.heads = 2;
        cfg.net.embed = 16;
        cfg.net.ff = 32;
        cfg.net.lookback = 3;
        cfg.net.hidden = 16;
        cfg.train.batches = 60;
        cfg.train.batch_size = 16;
        cfg.train.target_sync_period = 20;
        cfg.train.log_interval = 20;
        cfg.ope.n_splits = 2;
        cfg.ope.behavior.blocks = 1;
        cfg.ope.behavior.heads = 2;
        cfg.ope.behavior.embed = 16;
        cfg.ope.behavior.ff = 32;
        cfg.ope.behavior.lookback = 3;
        cfg.ope.behavior.batches = 40;
        cfg.ope.behavior.batch_size = 16;
        cfg.interpret.dump_episodes = 2;
        cfg
    }

    fn generate_into(dir: &Path) -> RunConfig {
        let mut cfg = tiny_config(dir);
        cfg.command = "generate".into();
        cmd_generate(&cfg).expect("generate");
        cfg.cohort.path = dir.join("cohort.csv").to_string_lossy().into_owned();
        cfg.cohort.schema = dir.join("schema.toml").to_string_lossy().into_owned();
        cfg
    }

    fn read(path: &Path) -> Vec<u8> {
        fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
    }

    #[test]
    fn default_config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().expect("serialize");
        let back = RunConfig::from_toml_str(&text).expect("parse");
        assert_eq!(back, cfg);

        // An empty file is a valid (all-default) configuration.
        assert_eq!(RunConfig::from_toml_str("").expect("empty"), cfg);

        for bad in [
            "unknown_key = 1",
            "[train]\nlearning_rat = 0.1",
            "[synthetic.env]\nseverity = 4",
        ] {
            let err = RunConfig::from_toml_str(bad).expect_err("unknown key must fail");
            assert!(matches!(err, Error::Config(_)), "got {err:?}");
        }
    }

    #[test]
    fn seed_fanout_is_deterministic_and_label_separated() {
        let a = RunConfig {
            seed: 11,
            ..RunConfig::default()
        };
        let e1 = a.effective();
        let e2 = a.effective();
        assert_eq!(e1, e2);
        // Re-deriving from an echoed config changes nothing.
        assert_eq!(e1.effective(), e1);
        let seeds = [
            e1.synthetic.env.seed,
            e1.train.seed,
            e1.ope.seed,
            e1.ope.behavior.seed,
            e1.gradcheck.seed,
        ];
        for i in 0..seeds.len() {
            for j in (i + 1)..seeds.len() {
                assert_ne!(seeds[i], seeds[j], "stage seeds {i} and {j} collide");
            }
        }
        let other = RunConfig {
            seed: 12,
            ..RunConfig::default()
        }
        .effective();
        assert_ne!(other.train.seed, e1.train.seed);
    }

    #[test]
    fn generate_writes_cohort_schema_sidecar_and_echo_rerun_is_identical() {
        let dir = tempdir().expect("tempdir");
        let out1 = dir.path().join("g1");
        let mut cfg = tiny_config(&out1);
        cfg.command = "generate".into();
        let outcome = cmd_generate(&cfg).expect("generate");
        assert!(outcome.summary.contains("24 episodes"));

        // The cohort round-trips through its own schema.
        let schema = load_schema(&out1.join("schema.toml")).expect("schema");
        let loaded = load_cohort(&out1.join("cohort.csv"), &schema).expect("cohort");
        assert_eq!(loaded.episodes.len(), 24);
        assert!(loaded.warnings.is_empty());

        // Re-running from the echoed config into a fresh directory
        // reproduces every artifact byte for byte.
        let echoed = RunConfig::from_toml_path(&out1.join("config_echo.toml")).expect("echo");
        let out2 = dir.path().join("g2");
        let rerun = RunConfig {
            out: out2.to_string_lossy().into_owned(),
            ..echoed
        };
        cmd_generate(&rerun).expect("rerun");
        for name in ["cohort.csv", "schema.toml", "sidecar.csv"] {
            assert_eq!(
                read(&out1.join(name)),
                read(&out2.join(name)),
                "{name} differs between identical runs"
            );
        }
    }

    #[test]
    fn generate_requires_out_and_positive_episode_count() {
        let dir = tempdir().expect("tempdir");
        let mut no_out = tiny_config(dir.path());
        no_out.out = String::new();
        let err = cmd_generate(&no_out).expect_err("missing out");
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
        assert!(err.to_string().contains("output directory"));

        let mut zero = tiny_config(&dir.path().join("z"));
        zero.synthetic.n_episodes = 0;
        let err = cmd_generate(&zero).expect_err("zero episodes");
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn train_writes_checkpoint_and_metrics_and_reruns_byte_identically() {
        let dir = tempdir().expect("tempdir");
        let gen = generate_into(&dir.path().join("gen"));
        let cohort_before = read(Path::new(&gen.cohort.path));

        let out1 = dir.path().join("t1");
        let mut cfg = gen.clone();
        cfg.command = "train".into();
        cfg.out = out1.to_string_lossy().into_owned();
        let outcome = cmd_train(&cfg).expect("train");
        assert!(outcome.summary.contains("trained daqn for 60 batches"));

        let metrics = String::from_utf8(read(&out1.join("reports/train_metrics_daqn.csv")))
            .expect("utf8");
        let mut lines = metrics.lines();
        assert_eq!(
            lines.next(),
            Some("interval,start_batch,end_batch,mean_loss,mean_abs_td_error,max_abs_td_error")
        );
        // 60 batches at log_interval 20 → exactly 3 reporting intervals.
        assert_eq!(lines.count(), 3);

        // Inputs are untouched and the echoed config reproduces the
        // checkpoint and metrics byte for byte.
        assert_eq!(read(Path::new(&gen.cohort.path)), cohort_before);
        let echoed = RunConfig::from_toml_path(&out1.join("config_echo.toml")).expect("echo");
        let out2 = dir.path().join("t2");
        let rerun = RunConfig {
            out: out2.to_string_lossy().into_owned(),
            ..echoed
        };
        cmd_train(&rerun).expect("rerun");
        for name in ["checkpoints/daqn.ckpt", "reports/train_metrics_daqn.csv"] {
            assert_eq!(
                read(&out1.join(name)),
                read(&out2.join(name)),
                "{name} differs between identical runs"
            );
        }
    }

    #[test]
    fn train_rejects_missing_cohort_and_unknown_arch() {
        let dir = tempdir().expect("tempdir");
        let mut cfg = tiny_config(&dir.path().join("t"));
        cfg.command = "train".into();
        let err = cmd_train(&cfg).expect_err("no cohort");
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
        assert!(err.to_string().contains("cohort"), "got: {err}");

        let mut bad_arch = generate_into(&dir.path().join("gen"));
        bad_arch.command = "train".into();
        bad_arch.out = dir.path().join("t2").to_string_lossy().into_owned();
        bad_arch.net.arch = "transformer".into();
        let err = cmd_train(&bad_arch).expect_err("bad arch");
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
        assert!(err.to_string().contains("transformer"));
        // Nothing was written for the invalid run beyond the directory.
        assert!(!dir.path().join("t2").join("checkpoints").exists());
    }

    #[test]
    fn evaluate_two_splits_gives_two_rows_per_policy() {
        let dir = tempdir().expect("tempdir");
        let gen = generate_into(&dir.path().join("gen"));
        let out = dir.path().join("eval");
        let mut cfg = gen;
        cfg.command = "evaluate".into();
        cfg.out = out.to_string_lossy().into_owned();
        cfg.evaluate.archs = vec!["daqn".into(), "dqn-mlp".into()];
        let outcome = cmd_evaluate(&cfg).expect("evaluate");
        assert!(outcome.summary.contains("2 splits"));

        let summary =
            String::from_utf8(read(&out.join("reports/ope_summary.csv"))).expect("utf8");
        assert_eq!(
            summary.lines().next(),
            Some("policy,kind,mean_wdr,std_wdr,n_splits")
        );
        // Two learned policies plus the behavior and random baselines.
        assert_eq!(summary.lines().count(), 1 + 4);

        let per_split =
            String::from_utf8(read(&out.join("reports/ope_per_split.csv"))).expect("utf8");
        assert_eq!(
            per_split.lines().next(),
            Some("split,policy,kind,wdr,wis,direct_method,min_ess")
        );
        for policy in ["daqn", "dqn-mlp", "behavior", "random"] {
            let rows = per_split
                .lines()
                .skip(1)
                .filter(|l| l.split(',').nth(1) == Some(policy))
                .count();
            assert_eq!(rows, 2, "policy {policy} should have one row per split");
        }
    }

    #[test]
    fn evaluate_without_checkpoint_fails_before_any_work() {
        let dir = tempdir().expect("tempdir");
        let gen = generate_into(&dir.path().join("gen"));
        let out = dir.path().join("eval");
        let mut cfg = gen;
        cfg.command = "evaluate".into();
        cfg.out = out.to_string_lossy().into_owned();
        cfg.ope.retrain = false;
        cfg.evaluate.archs = vec!["daqn".into(), "drqn-lstm".into()];
        cfg.evaluate
            .checkpoints
            .insert("daqn".into(), "/nonexistent/daqn.ckpt".into());
        let err = cmd_evaluate(&cfg).expect_err("missing checkpoint");
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
        let msg = err.to_string();
        assert!(
            msg.contains("drqn-lstm") || msg.contains("daqn"),
            "error should name the architecture: {msg}"
        );
        // Validation failed before the command touched the output directory.
        assert!(!out.join("reports").exists());
        assert!(!out.join("config_echo.toml").exists());
    }

    #[test]
    fn evaluate_with_fixed_checkpoints_loads_and_runs() {
        let dir = tempdir().expect("tempdir");
        let gen = generate_into(&dir.path().join("gen"));

        let train_out = dir.path().join("train");
        let mut train_cfg = gen.clone();
        train_cfg.command = "train".into();
        train_cfg.out = train_out.to_string_lossy().into_owned();
        cmd_train(&train_cfg).expect("train daqn");
        let ckpt = train_out.join("checkpoints/daqn.ckpt");

        let out = dir.path().join("eval");
        let mut cfg = gen;
        cfg.command = "evaluate".into();
        cfg.out = out.to_string_lossy().into_owned();
        cfg.ope.retrain = false;
        cfg.evaluate.archs = vec!["daqn".into()];
        cfg.evaluate
            .checkpoints
            .insert("daqn".into(), ckpt.to_string_lossy().into_owned());
        let outcome = cmd_evaluate(&cfg).expect("evaluate fixed");
        assert!(outcome.summary.contains("daqn"));
        let summary =
            String::from_utf8(read(&out.join("reports/ope_summary.csv"))).expect("utf8");
        // One fixed policy plus the two baselines.
        assert_eq!(summary.lines().count(), 1 + 3);

        // A checkpoint configured under the wrong architecture tag is
        // rejected with a config error naming both tags.
        let mut wrong = RunConfig::from_toml_path(&out.join("config_echo.toml")).expect("echo");
        wrong.out = dir.path().join("eval2").to_string_lossy().into_owned();
        wrong.evaluate.archs = vec!["dqn-mlp".into()];
        wrong
            .evaluate
            .checkpoints
            .insert("dqn-mlp".into(), ckpt.to_string_lossy().into_owned());
        let err = cmd_evaluate(&wrong).expect_err("wrong arch");
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
        assert!(err.to_string().contains("daqn"));
    }

    #[test]
    fn interpret_writes_correlations_dump_and_figures() {
        let dir = tempdir().expect("tempdir");
        let gen = generate_into(&dir.path().join("gen"));

        let train_out = dir.path().join("train");
        let mut train_cfg = gen.clone();
        train_cfg.command = "train".into();
        train_cfg.out = train_out.to_string_lossy().into_owned();
        cmd_train(&train_cfg).expect("train daqn");

        let out = dir.path().join("interp");
        let mut cfg = gen;
        cfg.command = "interpret".into();
        cfg.out = out.to_string_lossy().into_owned();
        cfg.interpret.checkpoint = train_out
            .join("checkpoints/daqn.ckpt")
            .to_string_lossy()
            .into_owned();
        let outcome = cmd_interpret(&cfg).expect("interpret");

        let corr =
            String::from_utf8(read(&out.join("reports/attention_correlations.csv"))).expect("utf8");
        assert_eq!(corr.lines().next(), Some("layer,marker,coefficient,samples"));
        // One attention block × three markers.
        assert_eq!(corr.lines().count(), 1 + 3);

        let dump = String::from_utf8(read(&out.join("reports/trace_dump.csv"))).expect("utf8");
        assert_eq!(
            dump.lines().next(),
            Some("patient,timestep,layer,head,position,weight")
        );
        let dumped: std::collections::BTreeSet<&str> = dump
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().expect("patient column"))
            .collect();
        assert_eq!(dumped.len(), 2, "dump limited to the first two episodes");

        // One figure per (layer, marker).
        let figures: Vec<_> = fs::read_dir(out.join("figures"))
            .expect("figures dir")
            .map(|e| e.expect("entry").file_name().into_string().expect("name"))
            .collect();
        assert_eq!(figures.len(), 3);
        assert!(outcome
            .artifacts
            .iter()
            .any(|p| p.extension().is_some_and(|e| e == "svg")));
    }

    #[test]
    fn interpret_rejects_baseline_checkpoints_with_contract_error() {
        let dir = tempdir().expect("tempdir");
        let gen = generate_into(&dir.path().join("gen"));

        let train_out = dir.path().join("train");
        let mut train_cfg = gen.clone();
        train_cfg.command = "train".into();
        train_cfg.out = train_out.to_string_lossy().into_owned();
        train_cfg.net.arch = "dqn-mlp".into();
        cmd_train(&train_cfg).expect("train mlp");

        let mut cfg = gen;
        cfg.command = "interpret".into();
        cfg.out = dir.path().join("interp").to_string_lossy().into_owned();
        cfg.interpret.checkpoint = train_out
            .join("checkpoints/dqn-mlp.ckpt")
            .to_string_lossy()
            .into_owned();
        let err = cmd_interpret(&cfg).expect_err("baseline checkpoint");
        assert!(matches!(err, Error::Contract(_)), "got {err:?}");
        assert!(err.to_string().contains("dqn-mlp"));
    }

    #[test]
    fn gradcheck_writes_report_listing_every_tensor() {
        let dir = tempdir().expect("tempdir");
        let out = dir.path().join("gc");
        let mut cfg = tiny_config(&out);
        cfg.command = "gradcheck".into();
        let outcome = cmd_gradcheck(&cfg).expect("gradcheck");
        assert!(outcome.summary.contains("all within tolerance"));

        let report = String::from_utf8(read(&out.join("reports/gradcheck.txt"))).expect("utf8");
        for needle in ["matmul", "softmax", "daqn.", "dqn-mlp.", "drqn-lstm."] {
            assert!(report.contains(needle), "report should mention {needle}");
        }
        assert!(!report.contains("FAILED"));
    }

    #[test]
    fn gradcheck_fault_injection_fails_naming_the_tensor() {
        let dir = tempdir().expect("tempdir");
        let out = dir.path().join("gc");
        let mut cfg = tiny_config(&out);
        cfg.command = "gradcheck".into();
        cfg.gradcheck.inject_failure = true;
        let err = cmd_gradcheck(&cfg).expect_err("fault injection");
        assert!(matches!(err, Error::GradCheck(_)), "got {err:?}");
        assert!(err.to_string().contains("fixture.corrupted_backward.w"));

        let report = String::from_utf8(read(&out.join("reports/gradcheck.txt"))).expect("utf8");
        assert!(report.contains("fixture.corrupted_backward.w"));
        assert!(report.contains("FAILED"));
    }

    #[test]
    fn run_dispatches_on_command_and_rejects_unknown() {
        let dir = tempdir().expect("tempdir");
        let mut cfg = tiny_config(&dir.path().join("d"));
        cfg.command = "generate".into();
        run(&cfg).expect("dispatch generate");

        cfg.command = String::new();
        let err = run(&cfg).expect_err("empty command");
        assert!(matches!(err, Error::Config(_)), "got {err:?}");

        cfg.command = "trane".into();
        let err = run(&cfg).expect_err("typo command");
        assert!(err.to_string().contains("trane"));
    }
}
