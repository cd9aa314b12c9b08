//! Success rate, SPL and SNA, plus greedy evaluation of an agent over a suite.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gridnav::{
    Action, AgentPose, EnvConfig, EnvError, EpisodeRecord, EpisodeSpec, NavEnv, Observation, Suite, TemplateBank,
    TemplateManifest, TemplateSplit, NUM_ACTIONS,
};
use crate::net::{DmtfNet, NetError};
use crate::seeds::rng_for;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("argument error: {0}")]
    Argument(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("episode {episode}: {source}")]
    Env { episode: u64, source: EnvError },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn non_empty(records: &[EpisodeRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Argument("no episodes to score".into()));
    }
    Ok(records.len() as f64)
}

/// Fraction of successful episodes.
pub fn success_rate(records: &[EpisodeRecord]) -> Result<f64, MetricsError> {
    let n = non_empty(records)?;
    Ok(records.iter().filter(|r| r.success).count() as f64 / n)
}

/// Success weighted by `l / max(p, l)`.
pub fn spl(records: &[EpisodeRecord]) -> Result<f64, MetricsError> {
    let n = non_empty(records)?;
    let mut total = 0.0;
    for r in records.iter().filter(|r| r.success) {
        if r.shortest == 0 {
            return Err(MetricsError::Data(format!(
                "episode {} succeeded with zero shortest path",
                r.episode_id
            )));
        }
        let l = f64::from(r.shortest);
        total += l / l.max(f64::from(r.path));
    }
    Ok(total / n)
}

fn check_actions(r: &EpisodeRecord) -> Result<(), MetricsError> {
    if r.actions == 0 {
        return Err(MetricsError::Data(format!(
            "episode {} succeeded with zero actions",
            r.episode_id
        )));
    }
    Ok(())
}

/// Success weighted by the inverse action count, `S / a`.
pub fn sna(records: &[EpisodeRecord]) -> Result<f64, MetricsError> {
    let n = non_empty(records)?;
    let mut total = 0.0;
    for r in records.iter().filter(|r| r.success) {
        check_actions(r)?;
        total += 1.0 / f64::from(r.actions);
    }
    Ok(total / n)
}

/// Action count relative to the optimum, `S · a* / max(a, a*)`.
pub fn sna_normalized(records: &[EpisodeRecord]) -> Result<f64, MetricsError> {
    let n = non_empty(records)?;
    let mut total = 0.0;
    for r in records.iter().filter(|r| r.success) {
        check_actions(r)?;
        let best = f64::from(r.optimal_actions);
        total += best / best.max(f64::from(r.actions));
    }
    Ok(total / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSummary {
    pub suite: String,
    pub split: String,
    pub ablation: String,
    pub episodes: usize,
    pub sr: f64,
    pub spl: f64,
    pub sna: f64,
    /// Not part of the headline metrics: normalized by the optimal action count.
    pub sna_normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub summary: MetricsSummary,
    /// Sorted by episode id.
    pub records: Vec<EpisodeRecord>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    episode_id: u64,
    #[serde(rename = "S")]
    success: u8,
    l: u32,
    p: u32,
    a: u32,
    a_star: u32,
    #[serde(rename = "return")]
    episode_return: f64,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> MetricsError {
    MetricsError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

impl MetricsReport {
    /// Scores `records` after sorting them by episode id, so the result does
    /// not depend on completion order.
    pub fn from_records(
        suite: &str,
        split: &str,
        ablation: &str,
        mut records: Vec<EpisodeRecord>,
    ) -> Result<Self, MetricsError> {
        records.sort_by_key(|r| r.episode_id);
        let summary = MetricsSummary {
            suite: suite.to_string(),
            split: split.to_string(),
            ablation: ablation.to_string(),
            episodes: records.len(),
            sr: success_rate(&records)?,
            spl: spl(&records)?,
            sna: sna(&records)?,
            sna_normalized: sna_normalized(&records)?,
        };
        Ok(Self { summary, records })
    }

    /// Writes `{stem}.csv` (one row per episode) and `{stem}.json` (summary).
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf), MetricsError> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_err(&csv_path, e))?;
        for r in &self.records {
            w.serialize(CsvRow {
                episode_id: r.episode_id,
                success: u8::from(r.success),
                l: r.shortest,
                p: r.path,
                a: r.actions,
                a_star: r.optimal_actions,
                episode_return: r.episode_return,
            })
            .map_err(|e| io_err(&csv_path, e))?;
        }
        w.flush().map_err(|e| io_err(&csv_path, e))?;
        let json = serde_json::to_string_pretty(&self.summary).map_err(|e| io_err(&json_path, e))?;
        std::fs::write(&json_path, json).map_err(|e| io_err(&json_path, e))?;
        Ok((csv_path, json_path))
    }

    /// Reads a report written by [`MetricsReport::write`].
    pub fn read(dir: &Path, stem: &str) -> Result<Self, MetricsError> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&json_path).map_err(|e| io_err(&json_path, e))?;
        let summary: MetricsSummary = serde_json::from_str(&text).map_err(|e| io_err(&json_path, e))?;
        let mut rdr = csv::Reader::from_path(&csv_path).map_err(|e| io_err(&csv_path, e))?;
        let mut records = Vec::new();
        for row in rdr.deserialize::<CsvRow>() {
            let row = row.map_err(|e| io_err(&csv_path, e))?;
            records.push(EpisodeRecord {
                episode_id: row.episode_id,
                success: row.success == 1,
                shortest: row.l,
                path: row.p,
                actions: row.a,
                optimal_actions: row.a_star,
                episode_return: row.episode_return,
            });
        }
        Ok(Self { summary, records })
    }
}

/// Rejects suites whose templates contradict their split: heard suites must
/// use heard templates, unheard suites held-out ones never seen in training.
pub fn check_split(suite: &Suite, manifest: &TemplateManifest, train_templates: &[u32]) -> Result<(), MetricsError> {
    for ep in &suite.episodes {
        let violation = match suite.template_split {
            TemplateSplit::Heard => (!manifest.heard.contains(&ep.template))
                .then(|| format!("template {} is not a heard template", ep.template)),
            TemplateSplit::Unheard if train_templates.contains(&ep.template) => {
                Some(format!("unheard template {} was used in training", ep.template))
            }
            TemplateSplit::Unheard => (!manifest.unheard.contains(&ep.template))
                .then(|| format!("template {} is not an unheard template", ep.template)),
        };
        if let Some(v) = violation {
            return Err(MetricsError::Protocol(format!("suite {} episode {}: {v}", suite.id, ep.id)));
        }
    }
    Ok(())
}

/// Who chooses actions during evaluation.
#[derive(Clone, Copy)]
pub enum Agent<'a> {
    /// Greedy (argmax) actions from a trained network.
    Policy(&'a DmtfNet),
    /// The geodesic oracle, lowest-index optimal action.
    Oracle,
    /// Uniform random actions, seeded per episode.
    Random { seed: u64 },
}

impl Agent<'_> {
    pub fn tag(&self) -> String {
        match self {
            Agent::Policy(net) => net.config().ablation.tag(),
            Agent::Oracle => "oracle".into(),
            Agent::Random { .. } => "random".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode: u64,
    pub t: u32,
    /// Pose before the action.
    pub pose: AgentPose,
    pub action: Action,
    pub reward: f64,
    /// Geodesic distance to the source before the action.
    pub geodesic: u32,
    pub w_vis: Option<f64>,
    pub w_aud: Option<f64>,
    pub done: bool,
}

/// Cross-attention weights of one decoder slot for one head and layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub episode: u64,
    pub t: u32,
    pub layer: usize,
    pub head: usize,
    pub slot: usize,
    /// Keys before this index are visual tokens, the rest audio.
    pub boundary: usize,
    pub weights: Vec<f64>,
    pub w_vis: f64,
    pub w_aud: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub workers: usize,
    pub trajectories: bool,
    pub attention: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub trajectories: Vec<TrajectoryRecord>,
    pub attention: Vec<AttentionRecord>,
}

fn argmax(p: &[f64]) -> usize {
    (0..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best })
}

struct EvalStream {
    env: NavEnv,
    obs: Observation,
    hidden: Vec<f64>,
    rng: rand_chacha::ChaCha8Rng,
    done: bool,
    trajectory: Vec<TrajectoryRecord>,
    attention: Vec<AttentionRecord>,
}

type ChunkOutput = (Vec<EpisodeRecord>, Vec<TrajectoryRecord>, Vec<AttentionRecord>);

fn run_chunk(
    agent: Agent<'_>,
    env_config: &EnvConfig,
    bank: &Arc<TemplateBank>,
    specs: &[EpisodeSpec],
    opts: &EvalOptions,
) -> Result<ChunkOutput, MetricsError> {
    let mut streams = Vec::with_capacity(specs.len());
    for spec in specs {
        let env_err = |source| MetricsError::Env {
            episode: spec.id,
            source,
        };
        let mut env = NavEnv::new(env_config.clone(), Arc::clone(bank)).map_err(env_err)?;
        let obs = env.reset(spec).map_err(env_err)?;
        let seed = match agent {
            Agent::Random { seed } => seed,
            _ => 0,
        };
        streams.push(EvalStream {
            env,
            obs,
            hidden: match agent {
                Agent::Policy(net) => net.zero_hidden(),
                _ => Vec::new(),
            },
            rng: rng_for(seed, &[spec.id]),
            done: false,
            trajectory: Vec::new(),
            attention: Vec::new(),
        });
    }
    loop {
        let live: Vec<usize> = (0..streams.len()).filter(|&i| !streams[i].done).collect();
        if live.is_empty() {
            break;
        }
        let outputs = match agent {
            Agent::Policy(net) => {
                let obs: Vec<&Observation> = live.iter().map(|&i| &streams[i].obs).collect();
                let hidden: Vec<&[f64]> = live.iter().map(|&i| streams[i].hidden.as_slice()).collect();
                net.step_many(&obs, &hidden, opts.attention)?.into_iter().map(Some).collect()
            }
            _ => vec![None; live.len()],
        };
        for (&i, out) in live.iter().zip(outputs) {
            let s = &mut streams[i];
            let episode = s.env.spec().map_err(|source| MetricsError::Env { episode: 0, source })?.id;
            let env_err = |source| MetricsError::Env { episode, source };
            let t = s.env.t().map_err(env_err)?;
            let pose = s.env.pose().map_err(env_err)?;
            let geodesic = s.env.geodesic().map_err(env_err)?;
            let action = match (&agent, &out) {
                (Agent::Policy(_), Some(o)) => Action::from_index(argmax(&o.probs)).expect("valid action index"),
                (Agent::Oracle, _) => s.env.oracle_action().map_err(env_err)?,
                _ => Action::from_index(s.rng.gen_range(0..NUM_ACTIONS)).expect("valid action index"),
            };
            let result = s.env.step(action).map_err(env_err)?;
            s.obs = result.observation;
            if let Some(o) = &out {
                s.hidden.clone_from(&o.hidden);
                if let Some(cap) = &o.attention {
                    for (layer, w) in cap.decoder_cross.iter().enumerate() {
                        let [_, heads, slots, keys] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
                        for head in 0..heads {
                            for slot in 0..slots {
                                let at = (head * slots + slot) * keys;
                                s.attention.push(AttentionRecord {
                                    episode,
                                    t,
                                    layer,
                                    head,
                                    slot,
                                    boundary: cap.boundary,
                                    weights: w.data()[at..at + keys].to_vec(),
                                    w_vis: o.w_vis,
                                    w_aud: o.w_aud,
                                });
                            }
                        }
                    }
                }
            }
            if opts.trajectories {
                s.trajectory.push(TrajectoryRecord {
                    episode,
                    t,
                    pose,
                    action,
                    reward: result.reward,
                    geodesic,
                    w_vis: out.as_ref().map(|o| o.w_vis),
                    w_aud: out.as_ref().map(|o| o.w_aud),
                    done: result.done,
                });
            }
            s.done = result.done;
        }
    }
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for s in streams {
        let id = s.env.spec().map(|sp| sp.id).unwrap_or_default();
        out.0.push(s.env.record().map_err(|source| MetricsError::Env { episode: id, source })?);
        out.1.extend(s.trajectory);
        out.2.extend(s.attention);
    }
    Ok(out)
}

/// Runs every suite episode to completion and scores it. Episodes are split
/// into `opts.workers` chunks evaluated in parallel; the output does not
/// depend on the worker count.
pub fn evaluate(
    agent: Agent<'_>,
    env_config: &EnvConfig,
    manifest: &TemplateManifest,
    suite: &Suite,
    train_templates: &[u32],
    opts: &EvalOptions,
) -> Result<EvalOutput, MetricsError> {
    if suite.episodes.is_empty() {
        return Err(MetricsError::Argument(format!("suite {} has no episodes", suite.id)));
    }
    check_split(suite, manifest, train_templates)?;
    let bank = Arc::new(manifest.bank());
    let chunk = suite.episodes.len().div_ceil(opts.workers.max(1));
    let parts: Vec<Result<ChunkOutput, MetricsError>> = suite
        .episodes
        .par_chunks(chunk)
        .map(|specs| run_chunk(agent, env_config, &bank, specs, opts))
        .collect();
    let (mut records, mut trajectories, mut attention) = (Vec::new(), Vec::new(), Vec::new());
    for p in parts {
        let (r, t, a) = p?;
        records.extend(r);
        trajectories.extend(t);
        attention.extend(a);
    }
    let report = MetricsReport::from_records(&suite.id, suite.template_split.as_str(), &agent.tag(), records)?;
    Ok(EvalOutput {
        report,
        trajectories,
        attention,
    })
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), MetricsError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| io_err(path, e))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| io_err(path, format!("line {}: {e}", i + 1))))
        .collect()
}
