//! Attention-trace extraction and the correlation analysis between
//! attention weights and clinical marker columns.
//!
//! The attention architecture produces, for every decision point, one
//! weight vector per (layer, head) over the valid history positions. This
//! module extracts those traces for whole cohort folds, pools them into
//! Pearson correlations against the schema's marker columns (for sepsis:
//! SOFA, delta-SOFA, lactate), dumps them in a long-format delimited file,
//! and renders per-episode dual-series figures (marker value and received
//! attention over time) as self-contained SVG.
//!
//! Pooling unit for the correlation: every (patient, decision timestep,
//! history position) triple, with the marker value taken at the *source*
//! timestep of the history position — the observation the weight actually
//! points at — not at the decision timestep.

use rayon::prelude::*;

use crate::cohort::windows::{observation_rows, window_at};
use crate::cohort::{CohortSchema, Episode};
use crate::error::{Error, Result};
use crate::net::Architecture;
use crate::train::TrainedPolicy;

/// Attention weights of one decision point, trimmed to the valid window.
///
/// `layers[layer][head]` has `valid_len` entries in chronological order;
/// each sums to 1. Position `p` refers to episode timestep
/// [`TraceRecord::source_timestep`]`(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// Episode identifier ("patient").
    pub episode_id: String,
    /// Index of the episode within the fold the traces were extracted from.
    pub episode_index: usize,
    /// Decision timestep within the episode.
    pub t: usize,
    /// Number of real observations in the window (≥ 1).
    pub valid_len: usize,
    /// `layers[layer][head][position]` attention weights.
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl TraceRecord {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers.first().map(|l| l.len()).unwrap_or(0)
    }

    /// Episode timestep that history position `p` (0-based, chronological)
    /// refers to: `t − (valid_len − 1) + p`.
    pub fn source_timestep(&self, p: usize) -> usize {
        self.t + 1 - self.valid_len + p
    }

    /// Head-averaged weights for one layer, over valid positions.
    pub fn head_mean(&self, layer: usize) -> Vec<f64> {
        let heads = &self.layers[layer];
        let mut out = vec![0.0; self.valid_len];
        for head in heads {
            for (o, w) in out.iter_mut().zip(head) {
                *o += w;
            }
        }
        for o in &mut out {
            *o /= heads.len() as f64;
        }
        out
    }
}

/// Runs the policy's network over every decision point of every episode
/// and captures the attention weights.
///
/// Only the attention architecture carries traces; the baselines yield a
/// contract error naming the offending architecture. Episodes are
/// processed in parallel against the frozen parameters; the output order
/// is (episode index, timestep), deterministic regardless of thread count.
pub fn extract_traces(
    policy: &TrainedPolicy,
    episodes: &[Episode],
    schema: &CohortSchema,
) -> Result<Vec<TraceRecord>> {
    schema.validate()?;
    let arch = policy.net.architecture();
    if arch != Architecture::Daqn {
        return Err(Error::contract(format!(
            "attention traces exist only for the attention architecture; \
             this checkpoint holds {:?} weights",
            arch.tag()
        )));
    }
    let num_actions = schema.action_grid.num_actions();
    let lookback = policy.net.config().lookback();

    let per_episode: Vec<Vec<TraceRecord>> = episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            let rows = observation_rows(ep, num_actions, &policy.normalizer)?;
            let statics = policy.normalizer.normalize_statics(&ep.statics)?;
            (0..ep.rows.len())
                .map(|t| {
                    let window = window_at(&rows, t, lookback)?;
                    let (_, trace) = policy.net.q_values_traced(&window, &statics)?;
                    let trace = trace.expect("attention architecture always traces");
                    let valid = trace.valid_len;
                    let layers: Vec<Vec<Vec<f64>>> = trace
                        .layers
                        .iter()
                        .map(|heads| heads.iter().map(|w| w[..valid].to_vec()).collect())
                        .collect();
                    Ok(TraceRecord {
                        episode_id: ep.id.clone(),
                        episode_index: i,
                        t,
                        valid_len: valid,
                        layers,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_episode.into_iter().flatten().collect())
}

/// Per-layer Pearson correlations between head-averaged attention weights
/// and each marker column, pooled over every (patient, timestep, position)
/// triple.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AttentionCorrelation {
    pub marker_names: Vec<String>,
    /// `coefficients[layer][marker]`; `None` where the coefficient is
    /// undefined (zero variance on either side).
    pub coefficients: Vec<Vec<Option<f64>>>,
    /// Number of pooled (weight, marker) samples per coefficient.
    pub samples: usize,
}

impl AttentionCorrelation {
    /// Long-format summary: `layer,marker,coefficient,samples`; undefined
    /// coefficients leave the field empty.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("layer,marker,coefficient,samples\n");
        for (l, row) in self.coefficients.iter().enumerate() {
            for (m, c) in row.iter().enumerate() {
                let printed = match c {
                    Some(v) => format!("{v:.6}"),
                    None => String::new(),
                };
                out.push_str(&format!(
                    "{l},{},{printed},{}\n",
                    self.marker_names[m], self.samples
                ));
            }
        }
        out
    }
}

/// Streaming Pearson coefficient (Welford-style joint moments). Returns
/// `None` when either side has zero variance, where the coefficient is
/// undefined.
fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    debug_assert_eq!(xs.len(), ys.len());
    let mut n = 0.0;
    let mut mean_x = 0.0;
    let mut mean_y = 0.0;
    let mut cxx = 0.0;
    let mut cyy = 0.0;
    let mut cxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        n += 1.0;
        let dx = x - mean_x;
        mean_x += dx / n;
        let dy = y - mean_y;
        mean_y += dy / n;
        cxx += dx * (x - mean_x);
        cyy += dy * (y - mean_y);
        cxy += dx * (y - mean_y);
    }
    if cxx <= 0.0 || cyy <= 0.0 {
        return None;
    }
    Some(cxy / (cxx * cyy).sqrt())
}

/// Pools the traces against the episodes' marker columns and computes the
/// per-(layer, marker) Pearson coefficients.
///
/// Every trace position contributes one sample: the head-averaged weight
/// paired with the marker value at the position's source timestep. Needs
/// at least 3 pooled samples; coefficients with zero variance on either
/// side are reported as absent rather than 0.
pub fn correlate(
    traces: &[TraceRecord],
    episodes: &[Episode],
    schema: &CohortSchema,
) -> Result<AttentionCorrelation> {
    let marker_names = schema.marker_names();
    let num_markers = marker_names.len();
    if traces.is_empty() {
        return Err(Error::contract("correlation needs at least 3 pooled samples"));
    }
    let num_layers = traces[0].num_layers();

    let samples: usize = traces.iter().map(|r| r.valid_len).sum();
    if samples < 3 {
        return Err(Error::contract(format!(
            "correlation needs at least 3 pooled samples, found {samples}"
        )));
    }

    // Pool weights per layer and marker values per marker, in trace order.
    let mut weights: Vec<Vec<f64>> = vec![Vec::with_capacity(samples); num_layers];
    let mut markers: Vec<Vec<f64>> = vec![Vec::with_capacity(samples); num_markers];
    for record in traces {
        if record.num_layers() != num_layers {
            return Err(Error::contract(format!(
                "trace for episode {:?} t={} reports {} layers, others have {num_layers}",
                record.episode_id,
                record.t,
                record.num_layers()
            )));
        }
        let ep = episodes.get(record.episode_index).ok_or_else(|| {
            Error::contract(format!(
                "trace references episode index {} outside the fold of {}",
                record.episode_index,
                episodes.len()
            ))
        })?;
        if ep.id != record.episode_id {
            return Err(Error::contract(format!(
                "trace for episode {:?} does not match fold episode {:?} at index {}",
                record.episode_id, ep.id, record.episode_index
            )));
        }
        if record.t >= ep.rows.len() || record.valid_len > record.t + 1 {
            return Err(Error::contract(format!(
                "trace for episode {:?} t={} valid_len={} is inconsistent with \
                 an episode of length {}",
                record.episode_id,
                record.t,
                record.valid_len,
                ep.rows.len()
            )));
        }
        for (layer, pooled) in weights.iter_mut().enumerate() {
            pooled.extend(record.head_mean(layer));
        }
        for p in 0..record.valid_len {
            let ts = record.source_timestep(p);
            for (m, pooled) in markers.iter_mut().enumerate() {
                pooled.push(ep.marker(ts, m));
            }
        }
    }

    let coefficients = weights
        .iter()
        .map(|w| markers.iter().map(|x| pearson(w, x)).collect())
        .collect();
    Ok(AttentionCorrelation {
        marker_names,
        coefficients,
        samples,
    })
}

/// Serializes traces in long format: one row per
/// `(patient, timestep, layer, head, position, weight)`.
pub fn trace_dump_csv(traces: &[TraceRecord]) -> Result<String> {
    let mut body = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut body);
        w.write_record(["patient", "timestep", "layer", "head", "position", "weight"])
            .map_err(|e| Error::contract(format!("csv write failed: {e}")))?;
        for record in traces {
            for (layer, heads) in record.layers.iter().enumerate() {
                for (head, ws) in heads.iter().enumerate() {
                    for (p, weight) in ws.iter().enumerate() {
                        w.write_record([
                            record.episode_id.as_str(),
                            &record.t.to_string(),
                            &layer.to_string(),
                            &head.to_string(),
                            &p.to_string(),
                            &format!("{weight:.12}"),
                        ])
                        .map_err(|e| Error::contract(format!("csv write failed: {e}")))?;
                    }
                }
            }
        }
        w.flush()?;
    }
    String::from_utf8(body).map_err(|e| Error::contract(format!("csv is not utf-8: {e}")))
}

/// Mean attention each episode timestep receives in one layer, averaged
/// over every decision window that covers it. Timesteps covered by no
/// passed record report 0.
pub fn received_attention(
    records: &[TraceRecord],
    layer: usize,
    episode_len: usize,
) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::contract("received attention needs at least one trace"));
    }
    let id = &records[0].episode_id;
    let mut sums = vec![0.0; episode_len];
    let mut counts = vec![0usize; episode_len];
    for record in records {
        if &record.episode_id != id {
            return Err(Error::contract(format!(
                "received attention mixes episodes {id:?} and {:?}",
                record.episode_id
            )));
        }
        if layer >= record.num_layers() {
            return Err(Error::contract(format!(
                "layer {layer} out of range for a {}-layer trace",
                record.num_layers()
            )));
        }
        let mean = record.head_mean(layer);
        for (p, w) in mean.iter().enumerate() {
            let ts = record.source_timestep(p);
            if ts >= episode_len {
                return Err(Error::contract(format!(
                    "trace at t={} points at timestep {ts}, beyond episode length \
                     {episode_len}",
                    record.t
                )));
            }
            sums[ts] += w;
            counts[ts] += 1;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

const FIG_WIDTH: f64 = 860.0;
const FIG_HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 70.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 50.0;
const MARKER_COLOR: &str = "#c44e52";
const ATTENTION_COLOR: &str = "#4c72b0";

fn scaled_points(series: &[f64]) -> Vec<(f64, f64)> {
    let n = series.len();
    let lo = series.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let x0 = MARGIN_LEFT;
    let x1 = FIG_WIDTH - MARGIN_RIGHT;
    let y0 = FIG_HEIGHT - MARGIN_BOTTOM;
    let y1 = MARGIN_TOP;
    series
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let fx = i as f64 / (n - 1) as f64;
            let fy = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            (x0 + fx * (x1 - x0), y0 + fy * (y1 - y0))
        })
        .collect()
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let pts: Vec<String> = points
        .iter()
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect();
    format!(
        "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
        pts.join(" ")
    )
}

/// Renders a dual-series figure — the marker values and the per-timestep
/// received attention of one episode — as a self-contained SVG file with
/// exactly two polylines and labelled axes. Each series is min–max scaled
/// to the plot box (the attention axis is annotated on the right, the
/// marker axis on the left). Identical inputs produce byte-identical
/// files.
pub fn render_trace_figure(
    marker: &[f64],
    attention: &[f64],
    marker_name: &str,
    path: &std::path::Path,
) -> Result<()> {
    if marker.is_empty() || attention.is_empty() {
        return Err(Error::contract("figure series must be nonempty"));
    }
    if marker.len() != attention.len() {
        return Err(Error::contract(format!(
            "figure series lengths differ: {} marker values vs {} attention values",
            marker.len(),
            attention.len()
        )));
    }
    if marker.len() < 2 {
        return Err(Error::contract("figure needs at least 2 timesteps"));
    }
    if marker.iter().chain(attention).any(|v| !v.is_finite()) {
        return Err(Error::contract("figure series must be finite"));
    }

    let n = marker.len();
    let (m_lo, m_hi) = (
        marker.iter().cloned().fold(f64::INFINITY, f64::min),
        marker.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (a_lo, a_hi) = (
        attention.iter().cloned().fold(f64::INFINITY, f64::min),
        attention.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let x0 = MARGIN_LEFT;
    let x1 = FIG_WIDTH - MARGIN_RIGHT;
    let y0 = FIG_HEIGHT - MARGIN_BOTTOM;
    let y1 = MARGIN_TOP;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{FIG_WIDTH}\" \
         height=\"{FIG_HEIGHT}\" viewBox=\"0 0 {FIG_WIDTH} {FIG_HEIGHT}\">\n"
    ));
    svg.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // Plot frame and axes (lines, not polylines).
    svg.push_str(&format!(
        "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"{MARKER_COLOR}\"/>\n"
    ));
    svg.push_str(&format!(
        "  <line x1=\"{x1}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y1}\" stroke=\"{ATTENTION_COLOR}\"/>\n"
    ));

    svg.push_str(&polyline(&scaled_points(marker), MARKER_COLOR));
    svg.push_str(&polyline(&scaled_points(attention), ATTENTION_COLOR));

    // Axis legend: axis names plus the value ranges each axis spans.
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"14\">timestep \
         (0..{})</text>\n",
        (x0 + x1) / 2.0,
        FIG_HEIGHT - 14.0,
        n - 1
    ));
    svg.push_str(&format!(
        "  <text x=\"18\" y=\"{:.2}\" transform=\"rotate(-90 18 {:.2})\" \
         text-anchor=\"middle\" font-size=\"14\" fill=\"{MARKER_COLOR}\">{marker_name} \
         [{m_lo:.3} .. {m_hi:.3}]</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" transform=\"rotate(90 {:.2} {:.2})\" \
         text-anchor=\"middle\" font-size=\"14\" fill=\"{ATTENTION_COLOR}\">attention weight \
         [{a_lo:.3} .. {a_hi:.3}]</text>\n",
        FIG_WIDTH - 18.0,
        (y0 + y1) / 2.0,
        FIG_WIDTH - 18.0,
        (y0 + y1) / 2.0
    ));
    svg.push_str("</svg>\n");

    std::fs::write(path, svg).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}
