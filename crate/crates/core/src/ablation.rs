//! Full model versus the three ablations, trained with shared seeds and
//! scored on shared heard/unheard suites.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::gridnav::{load_suite, Suite};
use crate::metrics::{evaluate, Agent, EvalOptions, MetricsSummary};
use crate::net::AblationFlags;
use crate::train::{load_checkpoint, train, RunConfig, SuiteFiles, TrainOptions};

/// Row labels and the ablation each one trains.
pub const VARIANTS: [(&str, &str); 4] = [
    ("DMTF", "none"),
    ("w/o MTI", "no-mti"),
    ("w/o PE", "no-pe"),
    ("w/o ENSA", "no-ensa"),
];

pub const TABLE_COLUMNS: [&str; 6] = ["sna_heard", "sr_heard", "spl_heard", "sna_unheard", "sr_unheard", "spl_unheard"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub model: String,
    pub ablation: String,
    pub heard: Option<MetricsSummary>,
    pub unheard: Option<MetricsSummary>,
    /// Why this variant produced no numbers.
    pub error: Option<String>,
}

impl AblationRow {
    /// SNA, SR, SPL on heard then unheard; `None` where unavailable.
    pub fn values(&self) -> [Option<f64>; 6] {
        let triple = |s: &Option<MetricsSummary>| match s {
            Some(s) => [Some(s.sna), Some(s.sr), Some(s.spl)],
            None => [None; 3],
        };
        let [a, b, c] = triple(&self.heard);
        let [d, e, f] = triple(&self.unheard);
        [a, b, c, d, e, f]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationTable {
    pub seed: u64,
    /// Suite ids every row was scored on, heard then unheard.
    pub eval_suites: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, ablation: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == ablation)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(|r| r.error.is_some())
    }

    /// Writes `ablation.json` and `ablation.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), Error> {
        let json = dir.join("ablation.json");
        fs::write(&json, serde_json::to_vec_pretty(self).expect("table serializes"))
            .map_err(|e| Error::Data(format!("{}: {e}", json.display())))?;
        let path = dir.join("ablation.csv");
        let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        let mut header = vec!["model"];
        header.extend(TABLE_COLUMNS);
        w.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![r.model.clone()];
            rec.extend(r.values().iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

fn run_variant(
    cfg: &RunConfig,
    out: &Path,
    opts: &TrainOptions,
    heard: &Suite,
    unheard: &Suite,
) -> Result<(Option<MetricsSummary>, Option<MetricsSummary>), Error> {
    let outcome = train(cfg, out, opts)?;
    let last = outcome.checkpoints.last().ok_or_else(|| Error::Data("run produced no checkpoint".into()))?;
    let (net, meta) = load_checkpoint(last)?;
    let suites = SuiteFiles::load(&cfg.suite_dir, cfg.env.success_radius)?;
    let eval_opts = EvalOptions {
        workers: opts.workers,
        ..EvalOptions::default()
    };
    let score = |suite: &Suite| -> Result<Option<MetricsSummary>, Error> {
        if suite.episodes.is_empty() {
            return Ok(None);
        }
        let out = evaluate(Agent::Policy(&net), &cfg.env, &suites.manifest, suite, &meta.train_templates, &eval_opts)?;
        Ok(Some(out.report.summary))
    };
    Ok((score(heard)?, score(unheard)?))
}

/// Trains every variant of [`VARIANTS`] into `out/<ablation>` and scores
/// each on the `{stage}_heard` and `{stage}_unheard` suites. A failing
/// variant leaves an error in its row instead of aborting the sweep; the
/// errors themselves are returned alongside the table.
pub fn ablate(
    cfg: &RunConfig,
    out: &Path,
    stage: &str,
    opts: &TrainOptions,
) -> Result<(AblationTable, Vec<Error>), Error> {
    cfg.validate()?;
    let heard = load_suite(&cfg.suite_dir.join(format!("{stage}_heard.json")))?;
    let unheard = load_suite(&cfg.suite_dir.join(format!("{stage}_unheard.json")))?;
    fs::create_dir_all(out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
    let mut rows = Vec::with_capacity(VARIANTS.len());
    let mut errors = Vec::new();
    for (model, tag) in VARIANTS {
        let flags = AblationFlags::from_tag(tag).expect("known tag");
        let variant = cfg.with_ablation(flags);
        let result = variant
            .validate()
            .and_then(|()| run_variant(&variant, &out.join(tag), opts, &heard, &unheard));
        let row = match result {
            Ok((h, u)) => AblationRow {
                model: model.into(),
                ablation: tag.into(),
                heard: h,
                unheard: u,
                error: None,
            },
            Err(e) => {
                log::warn!("{model} failed: {e}");
                let row = AblationRow {
                    model: model.into(),
                    ablation: tag.into(),
                    heard: None,
                    unheard: None,
                    error: Some(e.to_string()),
                };
                errors.push(e);
                row
            }
        };
        rows.push(row);
    }
    let table = AblationTable {
        seed: cfg.seed,
        eval_suites: vec![heard.id.clone(), unheard.id.clone()],
        rows,
    };
    table.write(out)?;
    Ok((table, errors))
}

#[cfg(test)]
mod tests;
