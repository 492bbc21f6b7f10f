//! Cohort data model: schemas, episodes, action discretization, clinical
//! rewards, file ingestion, normalization, history-window construction, and
//! a synthetic partially observable cohort generator.
//!
//! An [`Episode`] is one patient trajectory: a static feature vector plus a
//! sequence of timestep rows (dynamic features, chosen action, reward, and
//! the marker columns the reward functions read). The [`CohortSchema`]
//! fixes the column layout, the action grid, and which reward function
//! applies; stored rewards must recompute from the marker columns whenever
//! the schema declares a built-in reward (see [`Episode::expected_reward`]).

pub mod io;
pub mod normalize;
pub mod rewards;
pub mod synthetic;
pub mod windows;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which reward function governs the cohort; `External` cohorts carry
/// pre-computed rewards that are taken as-is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Sepsis,
    Hypotension,
    External,
}

impl RewardKind {
    pub fn tag(self) -> &'static str {
        match self {
            RewardKind::Sepsis => "sepsis",
            RewardKind::Hypotension => "hypotension",
            RewardKind::External => "external",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "sepsis" => Ok(RewardKind::Sepsis),
            "hypotension" => Ok(RewardKind::Hypotension),
            "external" => Ok(RewardKind::External),
            other => Err(Error::Config(format!(
                "unknown reward kind {other:?} (expected sepsis, hypotension, or external)"
            ))),
        }
    }
}

/// A named dynamic feature with its clinical unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    #[serde(default)]
    pub unit: String,
}

impl FeatureDef {
    pub fn new(name: &str, unit: &str) -> Self {
        FeatureDef {
            name: name.to_string(),
            unit: unit.to_string(),
        }
    }
}

/// One drug channel of the action grid: `bins` total dose bins where bin 0
/// means "no drug" and bins 1.. split the positive doses at `edges`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChannel {
    pub name: String,
    pub bins: usize,
    pub edges: Vec<f64>,
}

impl ActionChannel {
    pub fn new(name: &str, bins: usize, edges: Vec<f64>) -> Result<Self> {
        let ch = ActionChannel {
            name: name.to_string(),
            bins,
            edges,
        };
        ch.validate()?;
        Ok(ch)
    }

    /// Fits quantile edges from the non-zero doses of a training split.
    /// With `bins` total bins there are `bins - 1` positive-dose bins split
    /// at the `j / (bins - 1)` empirical quantiles (inverse-CDF convention:
    /// the quantile at level p is the value at rank ceil(p·n)).
    pub fn fit(name: &str, bins: usize, doses: &[f64]) -> Result<Self> {
        if bins < 1 {
            return Err(Error::contract("action channel needs at least one bin"));
        }
        let mut nonzero: Vec<f64> = Vec::new();
        for &d in doses {
            if !d.is_finite() || d < 0.0 {
                return Err(Error::contract(format!(
                    "dose must be finite and non-negative, got {d}"
                )));
            }
            if d > 0.0 {
                nonzero.push(d);
            }
        }
        let positive_bins = bins - 1;
        if positive_bins <= 1 {
            return ActionChannel::new(name, bins, Vec::new());
        }
        if nonzero.is_empty() {
            return Err(Error::contract(format!(
                "cannot fit {positive_bins} positive-dose bins for channel {name:?}: \
                 no non-zero doses in the training split"
            )));
        }
        nonzero.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = nonzero.len();
        let mut edges = Vec::with_capacity(positive_bins - 1);
        for j in 1..positive_bins {
            let p = j as f64 / positive_bins as f64;
            let rank = (p * n as f64).ceil().max(1.0) as usize;
            edges.push(nonzero[rank - 1]);
        }
        ActionChannel::new(name, bins, edges)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 1 {
            return Err(Error::contract("action channel needs at least one bin"));
        }
        let expected = self.bins.saturating_sub(2);
        if self.edges.len() != expected {
            return Err(Error::contract(format!(
                "channel {:?} with {} bins needs {} edges, got {}",
                self.name,
                self.bins,
                expected,
                self.edges.len()
            )));
        }
        for w in self.edges.windows(2) {
            if !(w[0] <= w[1]) {
                return Err(Error::contract(format!(
                    "channel {:?} edges must be sorted: {:?}",
                    self.name, self.edges
                )));
            }
        }
        for &e in &self.edges {
            if !e.is_finite() || e <= 0.0 {
                return Err(Error::contract(format!(
                    "channel {:?} edges must be finite and positive: {:?}",
                    self.name, self.edges
                )));
            }
        }
        Ok(())
    }

    /// Maps a dose to its bin: exactly zero means bin 0; positive doses go
    /// to bin 1 + (number of edges strictly below the dose), clamping doses
    /// above the top edge into the top bin.
    pub fn discretize(&self, dose: f64) -> Result<usize> {
        if !dose.is_finite() || dose < 0.0 {
            return Err(Error::contract(format!(
                "dose must be finite and non-negative, got {dose}"
            )));
        }
        if dose == 0.0 {
            return Ok(0);
        }
        if self.bins == 1 {
            return Err(Error::contract(format!(
                "channel {:?} has a single no-drug bin but got positive dose {dose}",
                self.name
            )));
        }
        Ok(1 + self.edges.iter().filter(|&&e| dose > e).count())
    }
}

/// Two-channel joint action space; the flat index is
/// `iv_bin * vaso_bins + vaso_bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    pub iv: ActionChannel,
    pub vaso: ActionChannel,
}

impl ActionGrid {
    pub fn new(iv: ActionChannel, vaso: ActionChannel) -> Result<Self> {
        iv.validate()?;
        vaso.validate()?;
        Ok(ActionGrid { iv, vaso })
    }

    pub fn num_actions(&self) -> usize {
        self.iv.bins * self.vaso.bins
    }

    pub fn index(&self, iv_bin: usize, vaso_bin: usize) -> Result<usize> {
        if iv_bin >= self.iv.bins || vaso_bin >= self.vaso.bins {
            return Err(Error::contract(format!(
                "bin ({iv_bin}, {vaso_bin}) outside {}x{} grid",
                self.iv.bins, self.vaso.bins
            )));
        }
        Ok(iv_bin * self.vaso.bins + vaso_bin)
    }

    pub fn decode(&self, action: usize) -> Result<(usize, usize)> {
        if action >= self.num_actions() {
            return Err(Error::contract(format!(
                "action {action} outside 0..{}",
                self.num_actions()
            )));
        }
        Ok((action / self.vaso.bins, action % self.vaso.bins))
    }

    /// Discretizes a raw (iv dose, vasopressor dose) pair to a flat action.
    pub fn discretize_action(&self, iv_dose: f64, vaso_dose: f64) -> Result<usize> {
        let iv_bin = self.iv.discretize(iv_dose)?;
        let vaso_bin = self.vaso.discretize(vaso_dose)?;
        self.index(iv_bin, vaso_bin)
    }
}

/// Column layout and reward contract for a cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSchema {
    pub reward: RewardKind,
    pub timestep_hours: f64,
    pub dynamic_features: Vec<FeatureDef>,
    pub static_features: Vec<String>,
    pub action_grid: ActionGrid,
    /// Marker columns for `External` cohorts; the clinical kinds have
    /// fixed marker sets and ignore this field.
    #[serde(default)]
    pub external_markers: Vec<String>,
}

pub const STANDARD_STATICS: [&str; 5] =
    ["gender", "mech_vent", "readmission", "age", "weight"];

impl CohortSchema {
    pub fn new(
        reward: RewardKind,
        timestep_hours: f64,
        dynamic_features: Vec<FeatureDef>,
        static_features: Vec<String>,
        action_grid: ActionGrid,
        external_markers: Vec<String>,
    ) -> Result<Self> {
        let s = CohortSchema {
            reward,
            timestep_hours,
            dynamic_features,
            static_features,
            action_grid,
            external_markers,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dynamic_features.is_empty() {
            return Err(Error::contract("schema needs at least one dynamic feature"));
        }
        if !(self.timestep_hours.is_finite() && self.timestep_hours > 0.0) {
            return Err(Error::contract("timestep_hours must be positive"));
        }
        self.action_grid.iv.validate()?;
        self.action_grid.vaso.validate()?;
        match self.reward {
            RewardKind::Sepsis => {
                if self.action_grid.iv.bins != 5 || self.action_grid.vaso.bins != 5 {
                    return Err(Error::contract(format!(
                        "sepsis schema requires a 5x5 action grid, got {}x{}",
                        self.action_grid.iv.bins, self.action_grid.vaso.bins
                    )));
                }
            }
            RewardKind::Hypotension => {
                if self.action_grid.iv.bins != 4 || self.action_grid.vaso.bins != 4 {
                    return Err(Error::contract(format!(
                        "hypotension schema requires a 4x4 action grid, got {}x{}",
                        self.action_grid.iv.bins, self.action_grid.vaso.bins
                    )));
                }
            }
            RewardKind::External => {}
        }
        let mut seen = std::collections::HashSet::new();
        for name in self
            .dynamic_features
            .iter()
            .map(|f| f.name.as_str())
            .chain(self.static_features.iter().map(|s| s.as_str()))
            .chain(self.marker_names().iter().map(|s| s.as_str()))
        {
            if !seen.insert(name.to_string()) {
                return Err(Error::contract(format!("duplicate column name {name:?}")));
            }
        }
        Ok(())
    }

    /// Marker column names, in stored order. These drive reward
    /// recomputation for the clinical kinds and correlation analysis.
    pub fn marker_names(&self) -> Vec<String> {
        match self.reward {
            RewardKind::Sepsis => vec![
                "sofa".to_string(),
                "delta_sofa".to_string(),
                "lactate".to_string(),
            ],
            RewardKind::Hypotension => vec![
                "map".to_string(),
                "urine".to_string(),
                "urine_measured".to_string(),
            ],
            RewardKind::External => self.external_markers.clone(),
        }
    }

    pub fn num_dynamics(&self) -> usize {
        self.dynamic_features.len()
    }

    pub fn num_actions(&self) -> usize {
        self.action_grid.num_actions()
    }

    /// Width of the per-timestep network observation: normalized dynamic
    /// features plus the previous action's one-hot encoding.
    pub fn obs_dim(&self) -> usize {
        self.num_dynamics() + self.num_actions()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize schema: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: CohortSchema = toml::from_str(text)
            .map_err(|e| Error::Config(format!("bad schema file: {e}")))?;
        s.validate()?;
        Ok(s)
    }
}

/// One timestep of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepRow {
    pub dynamics: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    /// Values for `schema.marker_names()`, in order.
    pub markers: Vec<f64>,
}

/// One patient trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub statics: Vec<f64>,
    pub rows: Vec<TimestepRow>,
    /// Binary outcome used for stratified splitting (true = favourable).
    pub outcome: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Marker value by column index at a timestep.
    pub fn marker(&self, t: usize, idx: usize) -> f64 {
        self.rows[t].markers[idx]
    }

    /// The reward the schema's reward function assigns to the action taken
    /// at `t`: computed from the marker columns at `t` and `t + 1`, with the
    /// final timestep fixed at zero (no successor). Returns `None` for
    /// `External` cohorts.
    pub fn expected_reward(&self, schema: &CohortSchema, t: usize) -> Result<Option<f64>> {
        if t >= self.rows.len() {
            return Err(Error::contract(format!(
                "timestep {t} outside episode of length {}",
                self.rows.len()
            )));
        }
        if t + 1 == self.rows.len() {
            return Ok(match schema.reward {
                RewardKind::External => None,
                _ => Some(0.0),
            });
        }
        let cur = &self.rows[t].markers;
        let next = &self.rows[t + 1].markers;
        match schema.reward {
            RewardKind::Sepsis => Ok(Some(rewards::sepsis_reward(
                next[0], cur[0], next[2], cur[2],
            )?)),
            RewardKind::Hypotension => Ok(Some(rewards::hypotension_reward(
                next[0],
                next[1],
                next[2] != 0.0,
            )?)),
            RewardKind::External => Ok(None),
        }
    }

    /// Overwrites stored rewards with the schema-recomputed values.
    pub fn fill_rewards(&mut self, schema: &CohortSchema) -> Result<()> {
        for t in 0..self.rows.len() {
            if let Some(r) = self.expected_reward(schema, t)? {
                self.rows[t].reward = r;
            }
        }
        Ok(())
    }
}
