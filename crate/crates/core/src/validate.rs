//! Re-checks written artifacts: suites, manifests, configs, checkpoints,
//! reports, learning curves and JSONL dumps.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::ablation::AblationTable;
use crate::error::Error;
use crate::gridnav::{load_manifest, load_suite, read_json, Suite, TemplateManifest, MANIFEST_FILE};
use crate::metrics::{read_jsonl, AttentionRecord, MetricsReport, MetricsSummary, TrajectoryRecord};
use crate::train::{load_checkpoint, RunConfig, TrainRow};

/// Tolerance on attention row sums.
pub const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArtifactKind {
    Suite,
    TemplateManifest,
    RunConfig,
    Checkpoint,
    Report,
    LearningCurve,
    AblationTable,
    Trajectories,
    Attention,
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Suite => "suite",
            Self::TemplateManifest => "template manifest",
            Self::RunConfig => "run config",
            Self::Checkpoint => "checkpoint",
            Self::Report => "metrics report",
            Self::LearningCurve => "learning curve",
            Self::AblationTable => "ablation table",
            Self::Trajectories => "trajectory log",
            Self::Attention => "attention dump",
        };
        f.write_str(s)
    }
}

/// Per-episode `t` strictly increasing, terminal flag on the last record
/// only, and `w_vis + w_aud = 1` wherever importance is present.
pub fn check_trajectories(records: &[TrajectoryRecord]) -> Result<(), Error> {
    let mut last: BTreeMap<u64, (u32, bool)> = BTreeMap::new();
    for r in records {
        if let Some(&(t, done)) = last.get(&r.episode) {
            if done {
                return Err(Error::Data(format!("episode {}: record at t={} after the terminal one", r.episode, r.t)));
            }
            if r.t <= t {
                return Err(Error::Data(format!("episode {}: t={} does not follow t={t}", r.episode, r.t)));
            }
        }
        match (r.w_vis, r.w_aud) {
            (Some(v), Some(a)) if v + a != 1.0 => {
                return Err(Error::Data(format!(
                    "episode {} t={}: w_vis {v} + w_aud {a} != 1",
                    r.episode, r.t
                )))
            }
            (Some(_), None) | (None, Some(_)) => {
                return Err(Error::Data(format!("episode {} t={}: only one importance weight", r.episode, r.t)))
            }
            _ => {}
        }
        last.insert(r.episode, (r.t, r.done));
    }
    if let Some((ep, _)) = last.iter().find(|(_, &(_, done))| !done) {
        return Err(Error::Data(format!("episode {ep} has no terminal record")));
    }
    Ok(())
}

/// Row sums within [`ROW_SUM_TOL`] of one, entries in `[0, 1]`, and per step
/// `w_vis` equal to the masked sum of visual-key mass averaged over all
/// records of that step, with `w_vis + w_aud = 1` exactly.
pub fn check_attention(records: &[AttentionRecord]) -> Result<(), Error> {
    let mut steps: BTreeMap<(u64, u32), Vec<&AttentionRecord>> = BTreeMap::new();
    for r in records {
        let at = || format!("episode {} t={} layer {} head {} slot {}", r.episode, r.t, r.layer, r.head, r.slot);
        let sum: f64 = r.weights.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Data(format!("{}: weights sum to {sum}", at())));
        }
        if r.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Data(format!("{}: weight outside [0, 1]", at())));
        }
        if r.boundary > r.weights.len() {
            return Err(Error::Data(format!("{}: boundary past the last key", at())));
        }
        steps.entry((r.episode, r.t)).or_default().push(r);
    }
    for ((episode, t), rs) in steps {
        let total: f64 = rs.iter().map(|r| r.weights[..r.boundary].iter().sum::<f64>()).sum();
        let w_vis = (total / rs.len() as f64).clamp(0.0, 1.0);
        for r in &rs {
            if r.w_vis != w_vis || r.w_vis + r.w_aud != 1.0 {
                return Err(Error::Data(format!(
                    "episode {episode} t={t}: recorded (w_vis {}, w_aud {}) but weights give w_vis {w_vis}",
                    r.w_vis, r.w_aud
                )));
            }
        }
    }
    Ok(())
}

fn check_report(report: &MetricsReport) -> Result<(), Error> {
    let s = &report.summary;
    let again = MetricsReport::from_records(&s.suite, &s.split, &s.ablation, report.records.clone())?;
    if again.summary != *s {
        return Err(Error::Data(format!(
            "summary {s:?} disagrees with its records, which give {:?}",
            again.summary
        )));
    }
    if s.spl > s.sr || s.sna > s.sr {
        return Err(Error::Data("SPL and SNA must not exceed SR".into()));
    }
    Ok(())
}

fn check_curve(path: &Path) -> Result<(), Error> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut prev: Option<TrainRow> = None;
    for row in rdr.deserialize::<TrainRow>() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if let Some(p) = &prev {
            if row.update != p.update + 1 || row.env_steps < p.env_steps {
                return Err(Error::Data(format!("update {} does not continue update {}", row.update, p.update)));
            }
        }
        prev = Some(row);
    }
    Ok(())
}

fn manifest_beside(path: &Path) -> Result<TemplateManifest, Error> {
    let dir = path.parent().unwrap_or(Path::new("."));
    load_manifest(&dir.join(MANIFEST_FILE)).map_err(|e| Error::from(e).context("suite needs templates.json beside it"))
}

fn first_line(path: &Path) -> Result<String, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(text.lines().next().unwrap_or_default().to_string())
}

/// Detects what `path` holds from its name and contents and re-checks it.
pub fn validate_path(path: &Path) -> Result<ArtifactKind, Error> {
    let ctx = |e: Error| e.context(path.display());
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default();
    match ext.as_str() {
        "bin" | "opt" => {
            load_checkpoint(path).map_err(ctx)?;
            Ok(ArtifactKind::Checkpoint)
        }
        "jsonl" => {
            let line = first_line(path)?;
            if line.contains("\"layer\"") {
                check_attention(&read_jsonl::<AttentionRecord>(path)?).map_err(ctx)?;
                Ok(ArtifactKind::Attention)
            } else {
                check_trajectories(&read_jsonl::<TrajectoryRecord>(path)?).map_err(ctx)?;
                Ok(ArtifactKind::Trajectories)
            }
        }
        "csv" => {
            let header = first_line(path)?;
            let stem = path.with_extension("");
            if header.starts_with("update,") {
                check_curve(path).map_err(ctx)?;
                Ok(ArtifactKind::LearningCurve)
            } else if header.starts_with("model,") {
                validate_path(&path.with_extension("json"))
            } else {
                let dir = path.parent().unwrap_or(Path::new("."));
                let stem = stem.file_name().unwrap_or_default().to_string_lossy().into_owned();
                check_report(&MetricsReport::read(dir, &stem)?).map_err(ctx)?;
                Ok(ArtifactKind::Report)
            }
        }
        "json" => {
            let value: serde_json::Value = read_json(path)?;
            if name == MANIFEST_FILE || value.get("templates").is_some_and(|t| t.is_array()) {
                load_manifest(path).map_err(|e| ctx(e.into()))?;
                Ok(ArtifactKind::TemplateManifest)
            } else if value.get("tensors").is_some() {
                load_checkpoint(path).map_err(ctx)?;
                Ok(ArtifactKind::Checkpoint)
            } else if value.get("episodes").is_some_and(|e| e.is_array()) {
                let suite: Suite = load_suite(path)?;
                let manifest = manifest_beside(path)?;
                suite.validate(&manifest, 0).map_err(|e| ctx(e.into()))?;
                Ok(ArtifactKind::Suite)
            } else if value.get("rows").is_some() {
                let table: AblationTable = read_json(path)?;
                if table.rows.len() != crate::ablation::VARIANTS.len() {
                    return Err(Error::Data(format!("{}: expected 4 rows", path.display())));
                }
                Ok(ArtifactKind::AblationTable)
            } else if value.get("suite_dir").is_some() {
                RunConfig::load(path)?.validate().map_err(ctx)?;
                Ok(ArtifactKind::RunConfig)
            } else if value.get("sr").is_some() {
                let summary: MetricsSummary = read_json(path)?;
                let dir = path.parent().unwrap_or(Path::new("."));
                let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let report = MetricsReport::read(dir, &stem)?;
                if report.summary != summary {
                    return Err(Error::Data(format!("{}: summary changed while reading", path.display())));
                }
                check_report(&report).map_err(ctx)?;
                Ok(ArtifactKind::Report)
            } else {
                Err(Error::Data(format!("{}: unrecognized JSON artifact", path.display())))
            }
        }
        _ => Err(Error::Data(format!("{}: unrecognized artifact type", path.display()))),
    }
}

#[cfg(test)]
mod tests;
