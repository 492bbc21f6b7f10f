//! Cohort and schema files.
//!
//! A cohort file is a one-line version header followed by CSV:
//!
//! ```text
//! #cohort v1 sepsis
//! episode_id,t,outcome,<static columns>,action,reward,<marker columns>,<dynamic columns>
//! p0,0,1,...
//! ```
//!
//! Rows of one episode are contiguous with timesteps 0,1,2,…; statics and
//! outcome repeat on every row and must not vary within an episode. For the
//! clinical reward kinds the stored reward column must recompute from the
//! marker columns (tolerance 1e-9 to survive foreign float formatting; our
//! own writer round-trips bit-exactly). Missing or non-finite values are
//! rejected — no imputation happens here. Schemas are stored as TOML.

use std::fs;
use std::path::Path;

use crate::cohort::{CohortSchema, Episode, RewardKind, TimestepRow};
use crate::error::{Error, Result};

const VERSION_PREFIX: &str = "#cohort v1 ";
const REWARD_TOLERANCE: f64 = 1e-9;

/// Episodes plus non-fatal ingestion warnings (e.g. an empty file).
#[derive(Debug)]
pub struct LoadedCohort {
    pub episodes: Vec<Episode>,
    pub warnings: Vec<String>,
}

fn ingest(row: usize, msg: impl Into<String>) -> Error {
    Error::Ingest {
        row,
        msg: msg.into(),
    }
}

/// Per-episode checks shared by save and load. On failure returns the
/// offending row index (when one is identifiable) and a message.
fn validate_episode(
    schema: &CohortSchema,
    ep: &Episode,
) -> std::result::Result<(), (Option<usize>, String)> {
    if ep.rows.len() < 2 {
        return Err((
            None,
            format!("episode {:?} has {} rows; at least 2 required", ep.id, ep.rows.len()),
        ));
    }
    if ep.statics.len() != schema.static_features.len() {
        return Err((
            None,
            format!(
                "episode {:?} has {} statics, schema defines {}",
                ep.id,
                ep.statics.len(),
                schema.static_features.len()
            ),
        ));
    }
    let n_markers = schema.marker_names().len();
    for (t, row) in ep.rows.iter().enumerate() {
        if row.dynamics.len() != schema.num_dynamics() {
            return Err((
                Some(t),
                format!(
                    "row has {} dynamic values, schema defines {}",
                    row.dynamics.len(),
                    schema.num_dynamics()
                ),
            ));
        }
        if row.markers.len() != n_markers {
            return Err((
                Some(t),
                format!(
                    "row has {} marker values, schema defines {n_markers}",
                    row.markers.len()
                ),
            ));
        }
        if row.action >= schema.num_actions() {
            return Err((
                Some(t),
                format!(
                    "action {} outside 0..{}",
                    row.action,
                    schema.num_actions()
                ),
            ));
        }
        for &v in row.dynamics.iter().chain(row.markers.iter()) {
            if !v.is_finite() {
                return Err((Some(t), format!("non-finite value {v}")));
            }
        }
        if !row.reward.is_finite() {
            return Err((Some(t), format!("non-finite reward {}", row.reward)));
        }
    }
    for &v in &ep.statics {
        if !v.is_finite() {
            return Err((None, format!("episode {:?} has non-finite static {v}", ep.id)));
        }
    }
    match schema.reward {
        RewardKind::Sepsis => {
            // Markers: sofa, delta_sofa, lactate.
            for (t, row) in ep.rows.iter().enumerate() {
                let expected_delta = if t == 0 {
                    0.0
                } else {
                    row.markers[0] - ep.rows[t - 1].markers[0]
                };
                if (row.markers[1] - expected_delta).abs() > 1e-9 {
                    return Err((
                        Some(t),
                        format!(
                            "delta_sofa {} disagrees with sofa change {expected_delta}",
                            row.markers[1]
                        ),
                    ));
                }
            }
        }
        RewardKind::Hypotension => {
            for (t, row) in ep.rows.iter().enumerate() {
                let m = row.markers[2];
                if m != 0.0 && m != 1.0 {
                    return Err((Some(t), format!("urine_measured must be 0 or 1, got {m}")));
                }
            }
        }
        RewardKind::External => {}
    }
    for t in 0..ep.rows.len() {
        let expected = ep
            .expected_reward(schema, t)
            .map_err(|e| (Some(t), e.to_string()))?;
        if let Some(expected) = expected {
            let stored = ep.rows[t].reward;
            if (stored - expected).abs() > REWARD_TOLERANCE {
                return Err((
                    Some(t),
                    format!(
                        "stored reward {stored} does not recompute from markers \
                         (expected {expected})"
                    ),
                ));
            }
        }
    }
    Ok(())
}

fn format_f64(v: f64) -> String {
    format!("{v}")
}

/// Writes episodes in the versioned cohort format. Fails without touching
/// the file if any episode violates the schema.
pub fn save_cohort(path: &Path, schema: &CohortSchema, episodes: &[Episode]) -> Result<()> {
    schema.validate()?;
    for ep in episodes {
        validate_episode(schema, ep).map_err(|(t, msg)| {
            Error::contract(match t {
                Some(t) => format!("episode {:?} timestep {t}: {msg}", ep.id),
                None => msg,
            })
        })?;
    }

    let mut header: Vec<String> = vec!["episode_id".into(), "t".into(), "outcome".into()];
    header.extend(schema.static_features.iter().cloned());
    header.push("action".into());
    header.push("reward".into());
    header.extend(schema.marker_names());
    header.extend(schema.dynamic_features.iter().map(|f| f.name.clone()));

    let mut body = Vec::new();
    {
        let mut w = csv::WriterBuilder::new().from_writer(&mut body);
        w.write_record(&header)
            .map_err(|e| Error::contract(format!("csv write failed: {e}")))?;
        for ep in episodes {
            for (t, row) in ep.rows.iter().enumerate() {
                let mut rec: Vec<String> = vec![
                    ep.id.clone(),
                    t.to_string(),
                    if ep.outcome { "1".into() } else { "0".into() },
                ];
                rec.extend(ep.statics.iter().map(|&v| format_f64(v)));
                rec.push(row.action.to_string());
                rec.push(format_f64(row.reward));
                rec.extend(row.markers.iter().map(|&v| format_f64(v)));
                rec.extend(row.dynamics.iter().map(|&v| format_f64(v)));
                w.write_record(&rec)
                    .map_err(|e| Error::contract(format!("csv write failed: {e}")))?;
            }
        }
        w.flush()?;
    }

    let mut out = format!("{VERSION_PREFIX}{}\n", schema.reward.tag()).into_bytes();
    out.extend_from_slice(&body);
    fs::write(path, out)?;
    Ok(())
}

struct EpisodeBuilder {
    id: String,
    outcome: bool,
    statics: Vec<f64>,
    rows: Vec<TimestepRow>,
    lines: Vec<usize>,
}

impl EpisodeBuilder {
    fn finish(self, schema: &CohortSchema) -> Result<Episode> {
        let ep = Episode {
            id: self.id,
            statics: self.statics,
            rows: self.rows,
            outcome: self.outcome,
        };
        validate_episode(schema, &ep).map_err(|(t, msg)| {
            let row = t
                .and_then(|t| self.lines.get(t).copied())
                .unwrap_or_else(|| self.lines.last().copied().unwrap_or(0));
            ingest(row, format!("episode {:?}: {msg}", ep.id))
        })?;
        Ok(ep)
    }
}

/// Reads and validates a cohort file against a schema. An empty file yields
/// zero episodes plus a warning; every structural violation is an
/// ingestion error carrying the 1-based file line number.
pub fn load_cohort(path: &Path, schema: &CohortSchema) -> Result<LoadedCohort> {
    schema.validate()?;
    let text = fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Ok(LoadedCohort {
            episodes: Vec::new(),
            warnings: vec![format!("cohort file {} is empty: zero episodes", path.display())],
        });
    }
    let (version_line, rest) = match text.split_once('\n') {
        Some((first, rest)) => (first.trim_end_matches('\r'), rest),
        None => (text.trim_end_matches('\r'), ""),
    };
    let tag = version_line
        .strip_prefix(VERSION_PREFIX)
        .ok_or_else(|| ingest(1, format!("expected version header {VERSION_PREFIX:?}<kind>")))?
        .trim();
    let file_kind = RewardKind::from_tag(tag).map_err(|e| ingest(1, e.to_string()))?;
    if file_kind != schema.reward {
        return Err(ingest(
            1,
            format!(
                "file declares reward kind {:?}, schema expects {:?}",
                file_kind.tag(),
                schema.reward.tag()
            ),
        ));
    }

    let mut expected_header: Vec<String> = vec!["episode_id".into(), "t".into(), "outcome".into()];
    expected_header.extend(schema.static_features.iter().cloned());
    expected_header.push("action".into());
    expected_header.push("reward".into());
    expected_header.extend(schema.marker_names());
    expected_header.extend(schema.dynamic_features.iter().map(|f| f.name.clone()));

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(rest.as_bytes());
    {
        let got: Vec<String> = rdr
            .headers()
            .map_err(|e| ingest(2, format!("bad column header: {e}")))?
            .iter()
            .map(|s| s.to_string())
            .collect();
        if got != expected_header {
            for (i, want) in expected_header.iter().enumerate() {
                match got.get(i) {
                    Some(g) if g == want => {}
                    Some(g) => {
                        return Err(ingest(
                            2,
                            format!("column {i} is {g:?}, expected {want:?}"),
                        ))
                    }
                    None => return Err(ingest(2, format!("missing column {want:?}"))),
                }
            }
            return Err(ingest(
                2,
                format!(
                    "{} extra column(s) beyond the schema layout",
                    got.len() - expected_header.len()
                ),
            ));
        }
    }

    let n_statics = schema.static_features.len();
    let n_markers = schema.marker_names().len();
    let n_dyn = schema.num_dynamics();
    let mut episodes = Vec::new();
    let mut warnings = Vec::new();
    let mut seen_ids: std::collections::HashSet<String> = std::collections::HashSet::new();
    let mut current: Option<EpisodeBuilder> = None;

    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line() as usize + 1)
                .unwrap_or(0);
            ingest(line, format!("malformed csv record: {e}"))
        })?;
        // The csv reader counts the header as line 1 of its input, which is
        // line 2 of the file.
        let line = rec
            .position()
            .map(|p| p.line() as usize + 1)
            .unwrap_or(0);
        if rec.len() != expected_header.len() {
            return Err(ingest(
                line,
                format!("row has {} fields, expected {}", rec.len(), expected_header.len()),
            ));
        }
        let field = |i: usize| -> &str { rec.get(i).unwrap() };
        let parse_f64 = |i: usize| -> Result<f64> {
            let s = field(i);
            let v: f64 = s.parse().map_err(|_| {
                ingest(
                    line,
                    format!("column {:?}: cannot parse {s:?} as a number", expected_header[i]),
                )
            })?;
            if !v.is_finite() {
                return Err(ingest(
                    line,
                    format!("column {:?}: non-finite value {s:?}", expected_header[i]),
                ));
            }
            Ok(v)
        };

        let id = field(0).to_string();
        if id.is_empty() {
            return Err(ingest(line, "empty episode_id"));
        }
        let t: usize = field(1)
            .parse()
            .map_err(|_| ingest(line, format!("cannot parse timestep {:?}", field(1))))?;
        let outcome = match field(2) {
            "0" => false,
            "1" => true,
            other => return Err(ingest(line, format!("outcome must be 0 or 1, got {other:?}"))),
        };
        let mut statics = Vec::with_capacity(n_statics);
        for i in 0..n_statics {
            statics.push(parse_f64(3 + i)?);
        }
        let action: usize = field(3 + n_statics).parse().map_err(|_| {
            ingest(
                line,
                format!("cannot parse action {:?}", field(3 + n_statics)),
            )
        })?;
        if action >= schema.num_actions() {
            return Err(ingest(
                line,
                format!("action {action} outside 0..{}", schema.num_actions()),
            ));
        }
        let reward = parse_f64(4 + n_statics)?;
        let mut markers = Vec::with_capacity(n_markers);
        for i in 0..n_markers {
            markers.push(parse_f64(5 + n_statics + i)?);
        }
        let mut dynamics = Vec::with_capacity(n_dyn);
        for i in 0..n_dyn {
            dynamics.push(parse_f64(5 + n_statics + n_markers + i)?);
        }
        let row = TimestepRow {
            dynamics,
            action,
            reward,
            markers,
        };

        let start_new = match &current {
            None => true,
            Some(b) => b.id != id,
        };
        if start_new {
            if let Some(b) = current.take() {
                episodes.push(b.finish(schema)?);
            }
            if !seen_ids.insert(id.clone()) {
                return Err(ingest(
                    line,
                    format!("episode {id:?} reappears; episode rows must be contiguous"),
                ));
            }
            if t != 0 {
                return Err(ingest(
                    line,
                    format!("episode {id:?} starts at timestep {t}, expected 0"),
                ));
            }
            current = Some(EpisodeBuilder {
                id,
                outcome,
                statics,
                rows: vec![row],
                lines: vec![line],
            });
        } else {
            let b = current.as_mut().unwrap();
            if t != b.rows.len() {
                return Err(ingest(
                    line,
                    format!(
                        "episode {:?} timestep {t} out of order, expected {}",
                        b.id,
                        b.rows.len()
                    ),
                ));
            }
            if b.outcome != outcome {
                return Err(ingest(
                    line,
                    format!("episode {:?} changes outcome mid-episode", b.id),
                ));
            }
            if b.statics != statics {
                return Err(ingest(
                    line,
                    format!("episode {:?} changes static features mid-episode", b.id),
                ));
            }
            b.rows.push(row);
            b.lines.push(line);
        }
    }
    if let Some(b) = current.take() {
        episodes.push(b.finish(schema)?);
    }
    if episodes.is_empty() {
        warnings.push(format!(
            "cohort file {} contains a header but no data rows: zero episodes",
            path.display()
        ));
    }
    Ok(LoadedCohort { episodes, warnings })
}

pub fn save_schema(path: &Path, schema: &CohortSchema) -> Result<()> {
    fs::write(path, schema.to_toml()?)?;
    Ok(())
}

pub fn load_schema(path: &Path) -> Result<CohortSchema> {
    let text = fs::read_to_string(path)?;
    CohortSchema::from_toml(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::tests::sepsis_schema;

    fn sample_episodes(schema: &CohortSchema) -> Vec<Episode> {
        let mk_row = |sofa: f64, delta: f64, lact: f64, action: usize| TimestepRow {
            dynamics: vec![80.5, 120.25],
            action,
            reward: 0.0,
            markers: vec![sofa, delta, lact],
        };
        let mut eps = vec![
            Episode {
                id: "p0".into(),
                statics: vec![1.0, 0.0, 0.0, 64.5, 82.25],
                rows: vec![
                    mk_row(6.0, 0.0, 2.5, 3),
                    mk_row(4.0, -2.0, 1.75, 17),
                    mk_row(4.0, 0.0, 1.75, 0),
                ],
                outcome: true,
            },
            Episode {
                id: "p1".into(),
                statics: vec![0.0, 1.0, 0.0, 71.0, 65.5],
                rows: vec![mk_row(2.0, 0.0, 1.0, 24), mk_row(3.0, 1.0, 1.5, 12)],
                outcome: false,
            },
        ];
        for ep in &mut eps {
            ep.fill_rewards(schema).unwrap();
        }
        eps
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let schema = sepsis_schema();
        let eps = sample_episodes(&schema);
        let path = dir.path().join("cohort.csv");
        save_cohort(&path, &schema, &eps).unwrap();

        let loaded = load_cohort(&path, &schema).unwrap();
        assert!(loaded.warnings.is_empty());
        assert_eq!(loaded.episodes, eps);

        let path2 = dir.path().join("cohort2.csv");
        save_cohort(&path2, &schema, &loaded.episodes).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn empty_file_gives_zero_episodes_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        fs::write(&path, "").unwrap();
        let loaded = load_cohort(&path, &sepsis_schema()).unwrap();
        assert!(loaded.episodes.is_empty());
        assert_eq!(loaded.warnings.len(), 1);
    }

    #[test]
    fn header_only_file_warns() {
        let dir = tempfile::tempdir().unwrap();
        let schema = sepsis_schema();
        let path = dir.path().join("header.csv");
        save_cohort(&path, &schema, &[]).unwrap();
        let loaded = load_cohort(&path, &schema).unwrap();
        assert!(loaded.episodes.is_empty());
        assert_eq!(loaded.warnings.len(), 1);
    }

    #[test]
    fn out_of_range_action_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let schema = sepsis_schema();
        let eps = sample_episodes(&schema);
        let path = dir.path().join("cohort.csv");
        save_cohort(&path, &schema, &eps).unwrap();
        // Episode p0 row t=1 is file line 4; corrupt its action (17 → 25).
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let corrupted = lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if i == 3 {
                    l.replacen(",17,", ",25,", 1)
                } else {
                    l.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n");
        fs::write(&path, corrupted + "\n").unwrap();
        match load_cohort(&path, &schema) {
            Err(Error::Ingest { row, msg }) => {
                assert_eq!(row, 4);
                assert!(msg.contains("action 25"), "{msg}");
            }
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn non_monotone_timestep_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let schema = sepsis_schema();
        let path = dir.path().join("cohort.csv");
        save_cohort(&path, &schema, &sample_episodes(&schema)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        // Row t=2 of p0 (line 5) becomes t=7.
        let corrupted = text.replacen("p0,2,", "p0,7,", 1);
        fs::write(&path, corrupted).unwrap();
        match load_cohort(&path, &schema) {
            Err(Error::Ingest { row, msg }) => {
                assert_eq!(row, 5);
                assert!(msg.contains("out of order"), "{msg}");
            }
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn reward_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let schema = sepsis_schema();
        let mut eps = sample_episodes(&schema);
        eps[0].rows[0].reward += 0.5;
        let path = dir.path().join("cohort.csv");
        // Save validates too.
        assert!(save_cohort(&path, &schema, &eps).is_err());
        // Rebuild a valid file, then corrupt the stored reward text.
        let eps = sample_episodes(&schema);
        save_cohort(&path, &schema, &eps).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let needle = format!(",{},", eps[0].rows[0].reward);
        let corrupted = text.replacen(&needle, ",0.777,", 1);
        assert_ne!(text, corrupted, "corruption must hit");
        fs::write(&path, corrupted).unwrap();
        match load_cohort(&path, &schema) {
            Err(Error::Ingest { row, msg }) => {
                assert_eq!(row, 3);
                assert!(msg.contains("recompute"), "{msg}");
            }
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_or_kind_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let schema = sepsis_schema();
        let path = dir.path().join("cohort.csv");
        fs::write(&path, "#cohort v2 sepsis\n").unwrap();
        assert!(matches!(
            load_cohort(&path, &schema),
            Err(Error::Ingest { row: 1, .. })
        ));
        fs::write(&path, "#cohort v1 hypotension\nepisode_id\n").unwrap();
        assert!(matches!(
            load_cohort(&path, &schema),
            Err(Error::Ingest { row: 1, .. })
        ));
    }

    #[test]
    fn header_mismatch_names_column() {
        let dir = tempfile::tempdir().unwrap();
        let schema = sepsis_schema();
        let path = dir.path().join("cohort.csv");
        save_cohort(&path, &schema, &sample_episodes(&schema)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let corrupted = text.replacen(",sofa,", ",sofa_score,", 1);
        fs::write(&path, corrupted).unwrap();
        match load_cohort(&path, &schema) {
            Err(Error::Ingest { row, msg }) => {
                assert_eq!(row, 2);
                assert!(msg.contains("sofa"), "{msg}");
            }
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn short_episode_rejected() {
        let schema = sepsis_schema();
        let mut eps = sample_episodes(&schema);
        eps[1].rows.truncate(1);
        eps[1].rows[0].reward = 0.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.csv");
        assert!(save_cohort(&path, &schema, &eps).is_err());
    }

    #[test]
    fn inconsistent_statics_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let schema = sepsis_schema();
        let path = dir.path().join("cohort.csv");
        save_cohort(&path, &schema, &sample_episodes(&schema)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        // p1's second row (line 7): age 71 → 72.
        let lines: Vec<String> = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                if i == 6 {
                    l.replacen(",71,", ",72,", 1)
                } else {
                    l.to_string()
                }
            })
            .collect();
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        match load_cohort(&path, &schema) {
            Err(Error::Ingest { row, msg }) => {
                assert_eq!(row, 7);
                assert!(msg.contains("static"), "{msg}");
            }
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn missing_value_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let schema = sepsis_schema();
        let path = dir.path().join("cohort.csv");
        save_cohort(&path, &schema, &sample_episodes(&schema)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let corrupted = text.replacen("80.5", "", 1);
        fs::write(&path, corrupted).unwrap();
        assert!(matches!(
            load_cohort(&path, &schema),
            Err(Error::Ingest { .. })
        ));
    }

    #[test]
    fn delta_sofa_consistency_enforced() {
        let schema = sepsis_schema();
        let mut eps = sample_episodes(&schema);
        eps[0].rows[1].markers[1] = 5.0; // sofa went 6 → 4, delta must be −2
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.csv");
        assert!(save_cohort(&path, &schema, &eps).is_err());
    }

    #[test]
    fn schema_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let schema = sepsis_schema();
        let path = dir.path().join("schema.toml");
        save_schema(&path, &schema).unwrap();
        assert_eq!(load_schema(&path).unwrap(), schema);
    }
}
