use std::path::{Path, PathBuf};

use clap::Args;
use dmtf_core::ablation::{self, TABLE_COLUMNS};
use dmtf_core::gridnav::{generate_suites, load_manifest, load_suite, SuiteParams, MANIFEST_FILE, SUITE_FILES};
use dmtf_core::metrics::{evaluate, write_jsonl, Agent, EvalOptions};
use dmtf_core::net::{AblationFlags, DmtfNet};
use dmtf_core::ndgrad::checkpoint;
use dmtf_core::train::{self, load_checkpoint, CheckpointPaths, RunConfig, TrainOptions, METRICS_FILE};
use dmtf_core::validate::validate_path;
use dmtf_core::Error;

use crate::{AgentKind, Split, Stage};

pub const THREADS_VAR: &str = "DMTF_THREADS";

/// Worker count: the machine's parallelism, capped by `DMTF_THREADS`. Also
/// sizes the global thread pool.
pub fn configure_workers() -> Result<usize, Error> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let workers = match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n.min(available),
            _ => return Err(Error::Config(format!("{THREADS_VAR}={v:?} is not a positive integer"))),
        },
        Err(_) => available,
    };
    // A pool may already exist when called twice in one process; the cap still
    // applies through the chunk count.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    Ok(workers)
}

fn check_written(paths: &[PathBuf]) -> Result<(), Error> {
    for p in paths {
        validate_path(p).map_err(|e| e.context("output failed validation"))?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenSuiteArgs {
    #[arg(long)]
    pub seed: u64,
    /// Number of sound templates.
    #[arg(long)]
    pub count: usize,
    /// Map side length in cells, border included.
    #[arg(long)]
    pub size: usize,
    /// Interior obstacle density.
    #[arg(long)]
    pub density: f64,
    /// Fraction of templates held out as unheard.
    #[arg(long)]
    pub split_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing suite files.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 200)]
    pub train_episodes: usize,
    #[arg(long, default_value_t = 50)]
    pub eval_episodes: usize,
    #[arg(long, default_value_t = 500)]
    pub max_steps: u32,
    /// Spectrogram frequency bins per template.
    #[arg(long, default_value_t = 64)]
    pub bins: usize,
    #[arg(long, default_value_t = 1)]
    pub success_radius: u32,
}

pub fn gen_suite(a: &GenSuiteArgs) -> Result<(), Error> {
    let params = SuiteParams {
        seed: a.seed,
        templates: a.count,
        bins: a.bins,
        unheard_fraction: a.split_fraction,
        size: a.size,
        density: a.density,
        max_steps: a.max_steps,
        success_radius: a.success_radius,
        train_episodes: a.train_episodes,
        eval_episodes: a.eval_episodes,
    };
    let set = generate_suites(&params)?;
    let written = set.write(&a.out, a.force)?;
    let manifest = load_manifest(&a.out.join(MANIFEST_FILE))?;
    for name in SUITE_FILES {
        load_suite(&a.out.join(format!("{name}.json")))?.validate(&manifest, a.success_radius)?;
    }
    check_written(&written)?;
    println!(
        "wrote {} files to {}: {} heard / {} unheard templates",
        written.len(),
        a.out.display(),
        manifest.heard.len(),
        manifest.unheard.len()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config's ablation: none, no-pe, no-mti or no-ensa.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Continue from the newest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

fn load_config(path: &Path, ablation: Option<&str>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(tag) = ablation {
        cfg = cfg.with_ablation(AblationFlags::from_tag(tag)?);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs, workers: usize) -> Result<(), Error> {
    let cfg = load_config(&a.config, a.ablation.as_deref())?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))?;
    let outcome = train::train(&cfg, &out, &TrainOptions { workers, resume: a.resume })?;
    let mut written = vec![out.join(METRICS_FILE), out.join("val_heard.json")];
    written.extend(outcome.checkpoints.last().cloned());
    check_written(&written)?;
    let s = &outcome.val_heard.summary;
    println!(
        "trained {} updates into {}; val heard SR {:.3} SPL {:.3} SNA {:.3}",
        cfg.ppo.updates,
        out.display(),
        s.sr,
        s.spl,
        s.sna
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint `.bin` or `.json`; required for the policy agent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Run config supplying model and environment settings. With a checkpoint
    /// its weights are loaded into this config's model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Suite directory written by gen-suite.
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long, value_enum)]
    pub split: Split,
    #[arg(long, value_enum, default_value = "test")]
    pub stage: Stage,
    #[arg(long, value_enum, default_value = "policy")]
    pub agent: AgentKind,
    /// Seed of the random agent.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write per-step cross-attention weights to attention.jsonl.
    #[arg(long)]
    pub dump_attention: bool,
    /// Write per-step trajectory records to trajectories.jsonl.
    #[arg(long)]
    pub dump_trajectories: bool,
}

pub fn eval(a: &EvalArgs, workers: usize) -> Result<(), Error> {
    let (net, env, train_templates) = match (&a.checkpoint, &a.config) {
        (Some(ckpt), None) => {
            let (net, meta) = load_checkpoint(ckpt)?;
            (Some(net), meta.config.env, Some(meta.train_templates))
        }
        (Some(ckpt), Some(cfg_path)) => {
            let cfg = load_config(cfg_path, None)?;
            let paths = CheckpointPaths::from_path(ckpt);
            let manifest = checkpoint::read_manifest(&paths.manifest)?;
            let mut net = DmtfNet::new(cfg.model.clone(), 0)?;
            checkpoint::load_into(net.params_mut(), &manifest, &paths.weights)?;
            let templates = manifest
                .metadata
                .get("train_templates")
                .and_then(|t| serde_json::from_value(t.clone()).ok());
            (Some(net), cfg.env, templates)
        }
        (None, Some(cfg_path)) => (None, load_config(cfg_path, None)?.env, None),
        (None, None) => return Err(Error::Config("pass --checkpoint, --config or both".into())),
    };
    let agent = match (a.agent, &net) {
        (AgentKind::Policy, Some(net)) => Agent::Policy(net),
        (AgentKind::Policy, None) => return Err(Error::Config("the policy agent needs --checkpoint".into())),
        (AgentKind::Oracle, _) => Agent::Oracle,
        (AgentKind::Random, _) => Agent::Random { seed: a.seed },
    };
    let stage = match a.stage {
        Stage::Val => "val",
        Stage::Test => "test",
    };
    let split = match a.split {
        Split::Heard => "heard",
        Split::Unheard => "unheard",
    };
    let manifest = load_manifest(&a.suite.join(MANIFEST_FILE))?;
    let suite = load_suite(&a.suite.join(format!("{stage}_{split}.json")))?;
    let train_templates = match train_templates {
        Some(t) => t,
        None => load_suite(&a.suite.join("train.json"))?.templates(),
    };
    let opts = EvalOptions {
        workers,
        trajectories: a.dump_trajectories,
        attention: a.dump_attention,
    };
    if a.dump_attention && net.is_none() {
        return Err(Error::Config("attention dumps need a policy checkpoint".into()));
    }
    let out = evaluate(agent, &env, &manifest, &suite, &train_templates, &opts)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Data(format!("{}: {e}", a.out.display())))?;
    let stem = format!("{stage}_{split}");
    let (csv_path, json_path) = out.report.write(&a.out, &stem)?;
    let mut written = vec![csv_path, json_path];
    if a.dump_trajectories {
        let p = a.out.join("trajectories.jsonl");
        write_jsonl(&p, &out.trajectories)?;
        written.push(p);
    }
    if a.dump_attention {
        let p = a.out.join("attention.jsonl");
        write_jsonl(&p, &out.attention)?;
        written.push(p);
    }
    check_written(&written)?;
    println!("{}", serde_json::to_string_pretty(&out.report.summary).expect("summary serializes"));
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Suites the table is scored on.
    #[arg(long, value_enum, default_value = "test")]
    pub stage: Stage,
}

pub fn ablate(a: &AblateArgs, workers: usize) -> Result<(), Error> {
    let mut cfg = load_config(&a.config, None)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let stage = match a.stage {
        Stage::Val => "val",
        Stage::Test => "test",
    };
    let (table, errors) = ablation::ablate(&cfg, &a.out, stage, &TrainOptions { workers, resume: false })?;
    println!("{:<10}{}", "model", TABLE_COLUMNS.map(|c| format!("{c:>13}")).concat());
    for r in &table.rows {
        let cells: String = r
            .values()
            .iter()
            .map(|v| v.map_or_else(|| format!("{:>13}", "-"), |x| format!("{x:>13.3}")))
            .collect();
        println!("{:<10}{cells}", r.model);
    }
    match errors.into_iter().next() {
        Some(e) => Err(e.context("ablation table is partial")),
        None => Ok(()),
    }
}

pub fn validate(paths: &[PathBuf]) -> Result<(), Error> {
    let mut first = None;
    for p in paths {
        match validate_path(p) {
            Ok(kind) => println!("ok   {} ({kind})", p.display()),
            Err(e) => {
                println!("FAIL {}: {e}", p.display());
                first.get_or_insert(e);
            }
        }
    }
    first.map_or(Ok(()), Err)
}
