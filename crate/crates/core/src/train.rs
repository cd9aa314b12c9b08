//! Run configuration, the collect/update training loop, checkpoints and resume.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::gridnav::{load_manifest, load_suite, EnvConfig, Suite, TemplateManifest, IMAGE_CHANNELS, MANIFEST_FILE};
use crate::metrics::{evaluate, Agent, EvalOptions, MetricsReport};
use crate::ndgrad::{checkpoint, AdamConfig, AdamState};
use crate::net::{AblationFlags, DmtfNet, ModelConfig};
use crate::ppo::{collect_rollouts, compute_gae, ppo_update, PpoConfig};
use crate::seeds::{derive_seed, rng_for};

pub const METRICS_FILE: &str = "metrics.csv";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

const INIT_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;
const EPISODE_STREAM: u64 = 2;
const UPDATE_STREAM: u64 = 3;

/// Everything a training run needs, loaded from one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub env: EnvConfig,
    /// Directory written by suite generation; relative paths resolve against
    /// the config file's directory.
    pub suite_dir: PathBuf,
    /// Default output directory when none is given on the command line.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Updates between checkpoints; the last update is always saved.
    #[serde(default = "one")]
    pub checkpoint_every: usize,
    /// Updates between validation passes; 0 evaluates only after the last update.
    #[serde(default)]
    pub eval_every: usize,
    /// Stop after the update that brings the environment step count to this budget.
    #[serde(default)]
    pub max_env_steps: Option<u64>,
}

fn one() -> usize {
    1
}

impl RunConfig {
    /// Parses a config file and resolves `suite_dir` relative to it.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.suite_dir.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.suite_dir = parent.join(&cfg.suite_dir);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate().map_err(|e| Error::from(e).context("model"))?;
        self.ppo.validate()?;
        let r = &self.env.render;
        let expected_image = [r.height, r.width, IMAGE_CHANNELS];
        if self.model.image != expected_image {
            return Err(Error::Config(format!(
                "model.image {:?} does not match env.render {:?}",
                self.model.image, expected_image
            )));
        }
        let a = &self.env.audio;
        if self.model.audio[..2] != [a.freq_bins, a.time_frames] {
            return Err(Error::Config(format!(
                "model.audio {:?} does not match env.audio {}x{}",
                self.model.audio, a.freq_bins, a.time_frames
            )));
        }
        if self.model.pointgoal != self.env.pointgoal {
            return Err(Error::Config("model.pointgoal and env.pointgoal disagree".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    /// The config with its ablation replaced.
    pub fn with_ablation(&self, ablation: AblationFlags) -> Self {
        let mut c = self.clone();
        c.model.ablation = ablation;
        c
    }
}

/// The suites a run reads from `suite_dir`.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteFiles {
    pub manifest: TemplateManifest,
    pub train: Suite,
    pub val_heard: Suite,
    pub val_unheard: Suite,
}

impl SuiteFiles {
    pub fn load(dir: &Path, success_radius: u32) -> Result<Self, Error> {
        let manifest = load_manifest(&dir.join(MANIFEST_FILE))?;
        let read = |name: &str| -> Result<Suite, Error> {
            let suite = load_suite(&dir.join(format!("{name}.json")))?;
            suite.validate(&manifest, success_radius)?;
            Ok(suite)
        };
        let files = Self {
            train: read("train")?,
            val_heard: read("val_heard")?,
            val_unheard: read("val_unheard")?,
            manifest,
        };
        if files.train.episodes.is_empty() {
            return Err(Error::Data("train suite has no episodes".into()));
        }
        Ok(files)
    }
}

/// One line of the learning-curve CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub update: usize,
    pub env_steps: u64,
    pub mean_return: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub matching_loss: f64,
    pub sr_val: Option<f64>,
    pub spl_val: Option<f64>,
    pub sna_val: Option<f64>,
    pub match_cost: f64,
    pub null_fraction: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Metadata stored in every checkpoint manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub update: usize,
    pub env_steps: u64,
    pub ablation: String,
    /// Target queries actually instantiated.
    pub num_targets: usize,
    pub train_templates: Vec<u32>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointPaths {
    pub manifest: PathBuf,
    pub weights: PathBuf,
    pub optimizer: PathBuf,
}

impl CheckpointPaths {
    pub fn for_update(dir: &Path, update: usize) -> Self {
        let stem = dir.join(format!("ckpt_{update:06}"));
        Self {
            manifest: stem.with_extension("json"),
            weights: stem.with_extension("bin"),
            optimizer: stem.with_extension("opt"),
        }
    }

    /// Sibling files of a `.bin` or `.json` checkpoint path.
    pub fn from_path(path: &Path) -> Self {
        Self {
            manifest: path.with_extension("json"),
            weights: path.with_extension("bin"),
            optimizer: path.with_extension("opt"),
        }
    }
}

/// Loads a policy and its metadata from a checkpoint written by [`train`].
pub fn load_checkpoint(path: &Path) -> Result<(DmtfNet, CheckpointMeta), Error> {
    let paths = CheckpointPaths::from_path(path);
    let manifest = checkpoint::read_manifest(&paths.manifest)?;
    let meta: CheckpointMeta = serde_json::from_value(manifest.metadata.clone())
        .map_err(|e| Error::Data(format!("{}: checkpoint metadata: {e}", paths.manifest.display())))?;
    let mut net = DmtfNet::new(meta.config.model.clone(), 0)?;
    checkpoint::load_into(net.params_mut(), &manifest, &paths.weights)?;
    Ok((net, meta))
}

/// Highest-numbered checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, CheckpointPaths)>, Error> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return Ok(None),
    };
    let mut best = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(num) = name.strip_prefix("ckpt_").and_then(|s| s.strip_suffix(".json")) else {
            continue;
        };
        if let Ok(u) = num.parse::<usize>() {
            if best.is_none_or(|b| u > b) {
                best = Some(u);
            }
        }
    }
    Ok(best.map(|u| (u, CheckpointPaths::for_update(dir, u))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainOptions {
    pub workers: usize,
    pub resume: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { workers: 1, resume: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub rows: Vec<TrainRow>,
    pub checkpoints: Vec<PathBuf>,
    /// Final validation reports on the heard and (when non-empty) unheard suites.
    pub val_heard: MetricsReport,
    pub val_unheard: Option<MetricsReport>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

fn read_rows(path: &Path) -> Result<Vec<TrainRow>, Error> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_rows(path: &Path, rows: &[TrainRow]) -> Result<(), Error> {
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(io(path))
}

fn same_run(a: &RunConfig, b: &RunConfig) -> bool {
    let strip = |c: &RunConfig| {
        let mut c = c.clone();
        c.ppo.updates = 0;
        c.out_dir = None;
        c.suite_dir = PathBuf::new();
        c
    };
    strip(a) == strip(b)
}

/// Trains `cfg.ppo.updates` collect/update iterations, writing checkpoints,
/// the learning-curve CSV and final validation reports into `out`.
///
/// Every random draw derives from `cfg.seed` and the update index, so a run
/// resumed from any checkpoint reproduces the uninterrupted one bitwise.
pub fn train(cfg: &RunConfig, out: &Path, opts: &TrainOptions) -> Result<TrainOutcome, Error> {
    cfg.validate()?;
    let suites = SuiteFiles::load(&cfg.suite_dir, cfg.env.success_radius)?;
    let train_templates = suites.train.templates();
    let bank = Arc::new(suites.manifest.bank());
    fs::create_dir_all(out).map_err(io(out))?;
    let metrics_path = out.join(METRICS_FILE);

    let mut net = DmtfNet::new(cfg.model.clone(), derive_seed(cfg.seed, &[INIT_STREAM]))?;
    let mut adam = AdamState::new(net.params(), AdamConfig::with_lr(cfg.ppo.lr));
    let mut rows = Vec::new();
    let mut env_steps = 0u64;
    let mut start = 1;
    if opts.resume {
        if let Some((update, paths)) = latest_checkpoint(out)? {
            let (loaded, meta) = load_checkpoint(&paths.manifest)?;
            if !same_run(&meta.config, cfg) {
                return Err(Error::Config(format!(
                    "{} was written with a different configuration",
                    paths.manifest.display()
                )));
            }
            net = loaded;
            checkpoint::load_adam(&mut adam, &paths.optimizer)?;
            env_steps = meta.env_steps;
            start = update + 1;
            if metrics_path.exists() {
                rows = read_rows(&metrics_path)?;
                rows.retain(|r| r.update <= update);
            }
            log::info!("resuming after update {update} ({env_steps} environment steps)");
        }
    } else if metrics_path.exists() {
        return Err(Error::Config(format!(
            "{} already holds a run; resume it or choose another output directory",
            out.display()
        )));
    }
    write_rows(&metrics_path, &rows)?;

    let eval_opts = EvalOptions {
        workers: opts.workers,
        ..EvalOptions::default()
    };
    let mut checkpoints = Vec::new();
    let last = cfg.ppo.updates;
    for update in start..=last {
        let u = update as u64;
        let mut pick = rng_for(cfg.seed, &[SAMPLE_STREAM, u]);
        let n = cfg.ppo.episodes_per_update;
        let specs: Vec<_> = (0..n)
            .map(|_| suites.train.episodes[pick.gen_range(0..suites.train.episodes.len())].clone())
            .collect();
        let seeds: Vec<u64> = (0..n as u64).map(|i| derive_seed(cfg.seed, &[EPISODE_STREAM, u, i])).collect();
        let step = collect_rollouts(&net, &cfg.env, &bank, &specs, &seeds, cfg.ppo.horizon, opts.workers)
            .and_then(|buffer| {
                let estimates = compute_gae(&buffer, cfg.ppo.gamma, cfg.ppo.gae_lambda);
                let mut rng = rng_for(cfg.seed, &[UPDATE_STREAM, u]);
                let report = ppo_update(&mut net, &mut adam, &buffer, &estimates, &cfg.ppo, &mut rng)?;
                Ok((buffer, report))
            })
            .map_err(Error::from);
        let (buffer, report) = match step {
            Err(Error::Numeric(msg)) => {
                let dump = out.join(NAN_DUMP_FILE);
                let body = serde_json::json!({
                    "update": update,
                    "env_steps": env_steps,
                    "episodes": specs.iter().map(|e| e.id).collect::<Vec<_>>(),
                    "message": msg,
                });
                fs::write(&dump, serde_json::to_vec_pretty(&body).expect("json value")).map_err(io(&dump))?;
                return Err(Error::Numeric(format!("update {update}: {msg} (details in {})", dump.display())));
            }
            r => r?,
        };
        env_steps += buffer.len() as u64;
        let finished = update == last || cfg.max_env_steps.is_some_and(|b| env_steps >= b);

        let eval_now = finished || (cfg.eval_every > 0 && update % cfg.eval_every == 0);
        let val = if eval_now {
            let r = evaluate(
                Agent::Policy(&net),
                &cfg.env,
                &suites.manifest,
                &suites.val_heard,
                &train_templates,
                &eval_opts,
            )?;
            Some(r.report.summary)
        } else {
            None
        };
        let l = &report.losses;
        rows.push(TrainRow {
            update,
            env_steps,
            mean_return: buffer.mean_return(),
            surrogate: l.surrogate,
            value_loss: l.value_loss,
            entropy: l.entropy,
            matching_loss: l.matching_loss,
            sr_val: val.as_ref().map(|s| s.sr),
            spl_val: val.as_ref().map(|s| s.spl),
            sna_val: val.as_ref().map(|s| s.sna),
            match_cost: l.match_cost,
            null_fraction: l.null_fraction,
            clip_fraction: l.clip_fraction,
            grad_norm: report.grad_norm,
        });
        write_rows(&metrics_path, &rows)?;
        log::info!(
            "update {update}/{last}: steps {env_steps}, return {:.3}, sr_val {:?}",
            buffer.mean_return(),
            val.as_ref().map(|s| s.sr)
        );

        if finished || update % cfg.checkpoint_every == 0 {
            let paths = CheckpointPaths::for_update(out, update);
            let meta = CheckpointMeta {
                update,
                env_steps,
                ablation: cfg.model.ablation.tag(),
                num_targets: cfg.model.effective_targets(),
                train_templates: train_templates.clone(),
                config: cfg.clone(),
            };
            let meta = serde_json::to_value(&meta).expect("metadata serializes");
            checkpoint::save(net.params(), meta, &paths.manifest, &paths.weights)?;
            checkpoint::save_adam(&adam, &paths.optimizer)?;
            checkpoints.push(paths.weights);
        }
        if finished {
            break;
        }
    }

    let eval = |suite: &Suite| -> Result<MetricsReport, Error> {
        Ok(evaluate(Agent::Policy(&net), &cfg.env, &suites.manifest, suite, &train_templates, &eval_opts)?.report)
    };
    let val_heard = eval(&suites.val_heard)?;
    val_heard.write(out, "val_heard")?;
    let val_unheard = if suites.val_unheard.episodes.is_empty() {
        None
    } else {
        let r = eval(&suites.val_unheard)?;
        r.write(out, "val_unheard")?;
        Some(r)
    };
    Ok(TrainOutcome {
        rows,
        checkpoints,
        val_heard,
        val_unheard,
    })
}

#[cfg(test)]
mod tests;
