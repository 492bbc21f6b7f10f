//! History-window and transition construction.
//!
//! Each timestep of an episode becomes one training transition. The
//! network's per-timestep observation row is the normalized dynamic
//! features concatenated with the one-hot of the *previous* action (zeros
//! at t = 0). Transition t sees the last `k + 1` rows up to and including
//! t; its successor window is the same span shifted one step forward. The
//! final timestep is terminal (no successor window).
//!
//! All windows of an episode share one reference-counted row matrix, so a
//! full-cohort transition list is cheap to hold in a replay buffer.

use std::sync::Arc;

use crate::cohort::normalize::Normalizer;
use crate::cohort::{CohortSchema, Episode};
use crate::error::{Error, Result};
use crate::net::HistoryWindow;
use crate::replay::Transition;

/// Builds the per-timestep observation rows of one episode:
/// `[normalized dynamics, one-hot of previous action]`.
pub fn observation_rows(
    ep: &Episode,
    num_actions: usize,
    normalizer: &Normalizer,
) -> Result<Arc<Vec<Vec<f64>>>> {
    let mut rows = Vec::with_capacity(ep.rows.len());
    for (t, row) in ep.rows.iter().enumerate() {
        let mut obs = normalizer.normalize_dynamics(&row.dynamics)?;
        let mut one_hot = vec![0.0; num_actions];
        if t > 0 {
            let prev = ep.rows[t - 1].action;
            if prev >= num_actions {
                return Err(Error::contract(format!(
                    "episode {:?} action {prev} outside 0..{num_actions}",
                    ep.id
                )));
            }
            one_hot[prev] = 1.0;
        }
        obs.extend_from_slice(&one_hot);
        rows.push(obs);
    }
    Ok(Arc::new(rows))
}

/// History window ending at timestep `t` with lookback `k` (at most `k + 1`
/// valid rows).
pub fn window_at(rows: &Arc<Vec<Vec<f64>>>, t: usize, k: usize) -> Result<HistoryWindow> {
    if t >= rows.len() {
        return Err(Error::contract(format!(
            "timestep {t} outside episode of length {}",
            rows.len()
        )));
    }
    let start = t.saturating_sub(k);
    HistoryWindow::view(Arc::clone(rows), start, t - start + 1)
}

/// One transition per timestep of the episode; the last one is terminal.
pub fn episode_transitions(
    ep: &Episode,
    schema: &CohortSchema,
    normalizer: &Normalizer,
    k: usize,
) -> Result<Vec<Transition>> {
    if ep.rows.len() < 2 {
        return Err(Error::contract(format!(
            "episode {:?} has {} rows; at least 2 required",
            ep.id,
            ep.rows.len()
        )));
    }
    let rows = observation_rows(ep, schema.num_actions(), normalizer)?;
    let statics = Arc::new(normalizer.normalize_statics(&ep.statics)?);
    let mut out = Vec::with_capacity(ep.rows.len());
    for t in 0..ep.rows.len() {
        let window = window_at(&rows, t, k)?;
        let next_window = if t + 1 < ep.rows.len() {
            Some(window_at(&rows, t + 1, k)?)
        } else {
            None
        };
        out.push(Transition {
            window,
            statics: Arc::clone(&statics),
            action: ep.rows[t].action,
            reward: ep.rows[t].reward,
            next_window,
        });
    }
    Ok(out)
}

/// Flattens a set of episodes into one transition list (episode order, then
/// timestep order).
pub fn cohort_transitions(
    episodes: &[Episode],
    schema: &CohortSchema,
    normalizer: &Normalizer,
    k: usize,
) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    for ep in episodes {
        out.extend(episode_transitions(ep, schema, normalizer, k)?);
    }
    Ok(out)
}
