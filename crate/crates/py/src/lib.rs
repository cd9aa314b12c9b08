//! Python bindings: suite generation, training, evaluation, artifact
//! validation, and step-level access to the simulator and the policy.
//!
//! Structured values cross the boundary as plain dicts and lists, using the
//! same field names as the JSON artifacts.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dmtf_core::gridnav::{
    generate_suites as gen_suites, load_manifest, load_suite, Action, EnvConfig, NavEnv, Observation as CoreObs,
    Suite, SuiteParams, MANIFEST_FILE,
};
use dmtf_core::matching;
use dmtf_core::metrics::{self as core_metrics, Agent, EvalOptions};
use dmtf_core::net::{DmtfNet, ModelConfig};
use dmtf_core::train::{self as core_train, load_checkpoint, RunConfig, TrainOptions};
use dmtf_core::validate::validate_path;
use dmtf_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(dmtf, ConfigError, PyValueError, "Invalid configuration or arguments.");
create_exception!(dmtf, DataError, PyRuntimeError, "Missing, malformed or inconsistent data.");
create_exception!(dmtf, NumericError, PyArithmeticError, "Non-finite values during training.");

fn py_err(e: impl Into<Error>) -> PyErr {
    match e.into() {
        Error::Config(m) => ConfigError::new_err(m),
        Error::Data(m) => DataError::new_err(m),
        Error::Numeric(m) => NumericError::new_err(m),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| DataError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>, what: &str) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| ConfigError::new_err(format!("{what}: {e}")))
}

fn suite_file(dir: &Path, stage: &str, split: &str) -> PyResult<PathBuf> {
    if !matches!(stage, "val" | "test") {
        return Err(ConfigError::new_err(format!("stage must be val or test, got {stage:?}")));
    }
    if !matches!(split, "heard" | "unheard") {
        return Err(ConfigError::new_err(format!("split must be heard or unheard, got {split:?}")));
    }
    Ok(dir.join(format!("{stage}_{split}.json")))
}

/// One observation: an `H×W×3` image and an `F×T×2` spectrogram, both
/// flattened row-major with channels last.
#[pyclass(module = "dmtf", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Observation {
    inner: CoreObs,
}

#[pymethods]
impl Observation {
    #[getter]
    fn image(&self) -> Vec<f32> {
        self.inner.image.clone()
    }

    #[getter]
    fn audio(&self) -> Vec<f32> {
        self.inner.audio.clone()
    }

    /// (forward, left) displacement to the source in pointgoal mode.
    #[getter]
    fn delta(&self) -> Option<(f64, f64)> {
        self.inner.delta.map(|[f, l]| (f, l))
    }

    fn __repr__(&self) -> String {
        format!("Observation(image={}, audio={})", self.inner.image.len(), self.inner.audio.len())
    }
}

/// A simulator bound to a suite directory.
#[pyclass(module = "dmtf", unsendable)]
struct Env {
    env: NavEnv,
    dir: PathBuf,
    suites: HashMap<String, Suite>,
}

impl Env {
    fn suite(&mut self, name: &str) -> PyResult<&Suite> {
        if !self.suites.contains_key(name) {
            let suite = load_suite(&self.dir.join(format!("{name}.json"))).map_err(py_err)?;
            self.suites.insert(name.to_string(), suite);
        }
        Ok(&self.suites[name])
    }
}

#[pymethods]
impl Env {
    /// `config` is an environment config dict; omitted fields take defaults.
    #[new]
    #[pyo3(signature = (suite_dir, config=None))]
    fn new(suite_dir: PathBuf, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let config: EnvConfig = match config {
            Some(c) => from_py(c, "env config")?,
            None => EnvConfig::default(),
        };
        let manifest = load_manifest(&suite_dir.join(MANIFEST_FILE)).map_err(py_err)?;
        let env = NavEnv::new(config, Arc::new(manifest.bank())).map_err(py_err)?;
        Ok(Self {
            env,
            dir: suite_dir,
            suites: HashMap::new(),
        })
    }

    /// Episode ids of a suite such as `"train"` or `"val_heard"`.
    fn episodes(&mut self, suite: &str) -> PyResult<Vec<u64>> {
        Ok(self.suite(suite)?.episodes.iter().map(|e| e.id).collect())
    }

    fn reset(&mut self, suite: &str, episode: u64) -> PyResult<Observation> {
        let spec = self
            .suite(suite)?
            .episodes
            .iter()
            .find(|e| e.id == episode)
            .cloned()
            .ok_or_else(|| ConfigError::new_err(format!("episode {episode} is not in {suite}")))?;
        let inner = self.env.reset(&spec).map_err(py_err)?;
        Ok(Observation { inner })
    }

    /// Applies an action index (0 forward, 1 left, 2 right, 3 stop) and
    /// returns `(observation, reward, done, info)`.
    fn step(&mut self, py: Python<'_>, action: usize) -> PyResult<(Observation, f64, bool, Py<PyAny>)> {
        let action =
            Action::from_index(action).ok_or_else(|| ConfigError::new_err(format!("no action {action}")))?;
        let r = self.env.step(action).map_err(py_err)?;
        Ok((Observation { inner: r.observation }, r.reward, r.done, to_py(py, &r.info)?))
    }

    /// The action an optimal agent takes from the current pose.
    fn oracle_action(&self) -> PyResult<usize> {
        Ok(self.env.oracle_action().map_err(py_err)?.index())
    }

    fn geodesic(&self) -> PyResult<u32> {
        self.env.geodesic().map_err(py_err)
    }

    /// Terminal summary of the current episode.
    fn record(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.env.record().map_err(py_err)?)
    }
}

/// The fusion policy network.
#[pyclass(module = "dmtf", frozen)]
struct Policy {
    net: DmtfNet,
}

#[pymethods]
impl Policy {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &Bound<'_, PyAny>, seed: u64) -> PyResult<Self> {
        let config: ModelConfig = from_py(config, "model config")?;
        Ok(Self {
            net: DmtfNet::new(config, seed).map_err(py_err)?,
        })
    }

    /// Loads a checkpoint written by training (`.bin` or its `.json` manifest).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (net, _) = load_checkpoint(&path).map_err(py_err)?;
        Ok(Self { net })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.net.config())
    }

    fn zero_hidden(&self) -> Vec<f64> {
        self.net.zero_hidden()
    }

    /// One recurrent step. Returns a dict with `probs`, `value`, `hidden`,
    /// `class_probs`, `modality`, `w_vis` and `w_aud`.
    #[pyo3(signature = (obs, hidden=None))]
    fn step(&self, py: Python<'_>, obs: &Observation, hidden: Option<Vec<f64>>) -> PyResult<Py<PyAny>> {
        let hidden = hidden.unwrap_or_else(|| self.net.zero_hidden());
        let out = self.net.step(&obs.inner, &hidden, false).map_err(py_err)?;
        let doc = serde_json::json!({
            "probs": out.probs,
            "value": out.value,
            "hidden": out.hidden,
            "class_probs": out.class_probs,
            "modality": out.modality,
            "w_vis": out.w_vis,
            "w_aud": out.w_aud,
        });
        to_py(py, &doc)
    }
}

/// Generates templates and train/val/test suites into `out`; returns the
/// written paths.
#[pyfunction]
#[pyo3(signature = (
    out, seed, templates, size, density, unheard_fraction=0.2, bins=64, max_steps=500,
    success_radius=1, train_episodes=200, eval_episodes=50, force=false
))]
#[allow(clippy::too_many_arguments)]
fn generate_suites(
    out: PathBuf,
    seed: u64,
    templates: usize,
    size: usize,
    density: f64,
    unheard_fraction: f64,
    bins: usize,
    max_steps: u32,
    success_radius: u32,
    train_episodes: usize,
    eval_episodes: usize,
    force: bool,
) -> PyResult<Vec<PathBuf>> {
    let params = SuiteParams {
        seed,
        templates,
        bins,
        unheard_fraction,
        size,
        density,
        max_steps,
        success_radius,
        train_episodes,
        eval_episodes,
    };
    let set = gen_suites(&params).map_err(py_err)?;
    set.write(&out, force).map_err(py_err)
}

/// Trains from a run config file and returns `{"rows": [...], "checkpoints":
/// [...], "val_heard": {...}}`. The GIL is released while training.
#[pyfunction]
#[pyo3(signature = (config, out=None, resume=false, workers=1))]
fn train(py: Python<'_>, config: PathBuf, out: Option<PathBuf>, resume: bool, workers: usize) -> PyResult<Py<PyAny>> {
    let cfg = RunConfig::load(&config).map_err(py_err)?;
    cfg.validate().map_err(py_err)?;
    let out = out
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| ConfigError::new_err("no output directory: pass out or set out_dir"))?;
    let opts = TrainOptions { workers, resume };
    let outcome = py.detach(|| core_train::train(&cfg, &out, &opts)).map_err(py_err)?;
    let doc = serde_json::json!({
        "rows": outcome.rows,
        "checkpoints": outcome.checkpoints,
        "val_heard": outcome.val_heard.summary,
    });
    to_py(py, &doc)
}

/// Scores an agent on `{stage}_{split}.json` in `suite_dir`. `agent` is
/// `"policy"` (needs `checkpoint`), `"oracle"` or `"random"`. Returns the
/// report with its summary and per-episode records.
#[pyfunction]
#[pyo3(signature = (suite_dir, split, stage="test", checkpoint=None, agent="policy", env_config=None, seed=0, workers=1))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    suite_dir: PathBuf,
    split: &str,
    stage: &str,
    checkpoint: Option<PathBuf>,
    agent: &str,
    env_config: Option<&Bound<'_, PyAny>>,
    seed: u64,
    workers: usize,
) -> PyResult<Py<PyAny>> {
    let loaded = checkpoint.map(|p| load_checkpoint(&p)).transpose().map_err(py_err)?;
    let env: EnvConfig = match (env_config, &loaded) {
        (Some(c), _) => from_py(c, "env config")?,
        (None, Some((_, meta))) => meta.config.env.clone(),
        (None, None) => EnvConfig::default(),
    };
    let agent = match (agent, &loaded) {
        ("policy", Some((net, _))) => Agent::Policy(net),
        ("policy", None) => return Err(ConfigError::new_err("the policy agent needs a checkpoint")),
        ("oracle", _) => Agent::Oracle,
        ("random", _) => Agent::Random { seed },
        (other, _) => return Err(ConfigError::new_err(format!("unknown agent {other:?}"))),
    };
    let manifest = load_manifest(&suite_dir.join(MANIFEST_FILE)).map_err(py_err)?;
    let suite = load_suite(&suite_file(&suite_dir, stage, split)?).map_err(py_err)?;
    let train_templates = match &loaded {
        Some((_, meta)) => meta.train_templates.clone(),
        None => load_suite(&suite_dir.join("train.json")).map_err(py_err)?.templates(),
    };
    let opts = EvalOptions {
        workers,
        ..EvalOptions::default()
    };
    let out = py
        .detach(|| core_metrics::evaluate(agent, &env, &manifest, &suite, &train_templates, &opts))
        .map_err(py_err)?;
    to_py(py, &out.report)
}

/// SR, SPL, SNA and normalized SNA of a list of episode record dicts.
#[pyfunction]
fn metrics(py: Python<'_>, records: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let records: Vec<dmtf_core::gridnav::EpisodeRecord> = from_py(records, "episode records")?;
    let doc = serde_json::json!({
        "sr": core_metrics::success_rate(&records).map_err(py_err)?,
        "spl": core_metrics::spl(&records).map_err(py_err)?,
        "sna": core_metrics::sna(&records).map_err(py_err)?,
        "sna_normalized": core_metrics::sna_normalized(&records).map_err(py_err)?,
    });
    to_py(py, &doc)
}

/// Minimum-cost assignment of a square cost matrix: `(assignment, cost)`
/// where `assignment[i]` is the column matched to row `i`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let n = cost.len();
    if cost.iter().any(|row| row.len() != n) {
        return Err(ConfigError::new_err("cost matrix must be square"));
    }
    let flat: Vec<f64> = cost.into_iter().flatten().collect();
    let r = matching::hungarian(&flat, n).map_err(py_err)?;
    Ok((r.assignment, r.cost))
}

/// Checks an artifact on disk and returns its detected kind.
#[pyfunction]
fn validate(path: PathBuf) -> PyResult<String> {
    validate_path(&path).map(|k| k.to_string()).map_err(py_err)
}

#[pymodule]
fn dmtf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("NumericError", py.get_type::<NumericError>())?;
    m.add_class::<Observation>()?;
    m.add_class::<Env>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(generate_suites, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    Ok(())
}
