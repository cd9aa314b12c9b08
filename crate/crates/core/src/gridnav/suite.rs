use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::audio::{SoundTemplate, TemplateBank, TemplateSplit};
use super::env::{EpisodeSpec, MapSpec};
use super::map::GridMap;
use super::pose::{AgentPose, Heading};
use super::EnvError;
use crate::seeds::{derive_seed, rng_for};

/// A named list of episodes drawn from one template split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    pub id: String,
    pub split: String,
    pub template_split: TemplateSplit,
    pub episodes: Vec<EpisodeSpec>,
}

/// Template bank plus the heard/unheard partition it induces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateManifest {
    pub seed: u64,
    pub count: usize,
    pub unheard_fraction: f64,
    pub heard: Vec<u32>,
    pub unheard: Vec<u32>,
    pub templates: Vec<SoundTemplate>,
}

impl TemplateManifest {
    pub fn from_bank(bank: &TemplateBank, unheard_fraction: f64) -> Self {
        Self {
            seed: bank.seed,
            count: bank.templates.len(),
            unheard_fraction,
            heard: bank.ids(TemplateSplit::Heard),
            unheard: bank.ids(TemplateSplit::Unheard),
            templates: bank.templates.clone(),
        }
    }

    pub fn bank(&self) -> TemplateBank {
        TemplateBank {
            seed: self.seed,
            templates: self.templates.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bank = self.bank();
        bank.validate()?;
        if bank.ids(TemplateSplit::Heard) != self.heard || bank.ids(TemplateSplit::Unheard) != self.unheard {
            return Err(EnvError::Format("heard/unheard lists disagree with template tags".into()));
        }
        if self.count != self.templates.len() {
            return Err(EnvError::Format(format!(
                "manifest count {} but {} templates",
                self.count,
                self.templates.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteParams {
    pub seed: u64,
    pub templates: usize,
    pub bins: usize,
    pub unheard_fraction: f64,
    pub size: usize,
    pub density: f64,
    pub max_steps: u32,
    pub success_radius: u32,
    pub train_episodes: usize,
    pub eval_episodes: usize,
}

impl Default for SuiteParams {
    fn default() -> Self {
        Self {
            seed: 0,
            templates: 10,
            bins: 64,
            unheard_fraction: 0.2,
            size: 8,
            density: 0.0,
            max_steps: 500,
            success_radius: 1,
            train_episodes: 200,
            eval_episodes: 50,
        }
    }
}

/// Train, validation and test suites with a shared template manifest.
///
/// Heard and unheard suites of the same split share episode geometry and differ
/// only in the template drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteSet {
    pub manifest: TemplateManifest,
    pub suites: Vec<Suite>,
}

pub const SUITE_FILES: [&str; 5] = ["train", "val_heard", "val_unheard", "test_heard", "test_unheard"];
pub const MANIFEST_FILE: &str = "templates.json";

fn draw_episode(params: &SuiteParams, stream: u64, index: u64, templates: &[u32]) -> Result<EpisodeSpec, EnvError> {
    let map_seed = derive_seed(params.seed, &[stream, index, 0]);
    let map = super::map::generate_map(map_seed, params.size, params.size, params.density)?;
    let mut rng = rng_for(params.seed, &[stream, index, 1]);
    let free = map.free_cells();
    let choice = rng.gen_range(0..u32::MAX);
    for _ in 0..1000 {
        let start = free[rng.gen_range(0..free.len())];
        let field = map.distance_field(start)?;
        let targets: Vec<_> = free
            .iter()
            .copied()
            .filter(|&c| field.at(c).is_some_and(|d| d > params.success_radius))
            .collect();
        if targets.is_empty() {
            continue;
        }
        let source = targets[rng.gen_range(0..targets.len())];
        let heading = Heading::from_index(rng.gen_range(0..4));
        return Ok(EpisodeSpec {
            id: index,
            map: MapSpec {
                seed: map_seed,
                width: params.size,
                height: params.size,
                density: params.density,
            },
            start: AgentPose::new(start, heading),
            source,
            template: templates[choice as usize % templates.len()],
            max_steps: params.max_steps,
            seed: derive_seed(params.seed, &[stream, index, 2]),
        });
    }
    Err(EnvError::Generation(format!(
        "no start/source pair farther than {} cells on map {map_seed}",
        params.success_radius
    )))
}

fn episodes(params: &SuiteParams, stream: u64, n: usize, templates: &[u32]) -> Result<Vec<EpisodeSpec>, EnvError> {
    if templates.is_empty() {
        return Err(EnvError::Argument(format!(
            "no templates available for suite stream {stream}"
        )));
    }
    (0..n as u64).map(|i| draw_episode(params, stream, i, templates)).collect()
}

pub fn generate_suites(params: &SuiteParams) -> Result<SuiteSet, EnvError> {
    if params.train_episodes == 0 || params.eval_episodes == 0 || params.max_steps == 0 {
        return Err(EnvError::Argument("episode counts and max_steps must be positive".into()));
    }
    let bank = TemplateBank::generate(params.seed, params.templates, params.bins, params.unheard_fraction)?;
    let manifest = TemplateManifest::from_bank(&bank, params.unheard_fraction);
    let heard = manifest.heard.clone();
    let unheard = manifest.unheard.clone();
    let suite = |id: &str, split: &str, template_split, eps| Suite {
        id: id.to_string(),
        split: split.to_string(),
        template_split,
        episodes: eps,
    };
    let mut suites = vec![suite("train", "train", TemplateSplit::Heard, episodes(params, 0, params.train_episodes, &heard)?)];
    for (stream, split) in [(1u64, "val"), (2, "test")] {
        suites.push(suite(
            &format!("{split}_heard"),
            split,
            TemplateSplit::Heard,
            episodes(params, stream, params.eval_episodes, &heard)?,
        ));
        let unheard_eps = if unheard.is_empty() {
            Vec::new()
        } else {
            episodes(params, stream, params.eval_episodes, &unheard)?
        };
        suites.push(suite(&format!("{split}_unheard"), split, TemplateSplit::Unheard, unheard_eps));
    }
    Ok(SuiteSet { manifest, suites })
}

impl SuiteSet {
    /// Writes every suite and the manifest into `dir`; existing files need `force`.
    pub fn write(&self, dir: &Path, force: bool) -> Result<Vec<PathBuf>, EnvError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut paths: Vec<PathBuf> = self.suites.iter().map(|s| dir.join(format!("{}.json", s.id))).collect();
        paths.push(dir.join(MANIFEST_FILE));
        if !force {
            if let Some(p) = paths.iter().find(|p| p.exists()) {
                return Err(EnvError::Argument(format!(
                    "{} exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
        for (suite, path) in self.suites.iter().zip(&paths) {
            write_json(path, suite)?;
        }
        write_json(&paths[paths.len() - 1], &self.manifest)?;
        Ok(paths)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> EnvError {
    EnvError::Io(format!("{}: {e}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EnvError> {
    let json = serde_json::to_string_pretty(value).map_err(|e| EnvError::Format(e.to_string()))?;
    fs::write(path, json).map_err(|e| io_err(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, EnvError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| EnvError::Format(format!("{}: {e}", path.display())))
}

pub fn load_suite(path: &Path) -> Result<Suite, EnvError> {
    read_json(path)
}

pub fn load_manifest(path: &Path) -> Result<TemplateManifest, EnvError> {
    let m: TemplateManifest = read_json(path)?;
    m.validate()?;
    Ok(m)
}

impl Suite {
    /// Re-checks every episode against the map generator and the manifest.
    pub fn validate(&self, manifest: &TemplateManifest, success_radius: u32) -> Result<(), EnvError> {
        let allowed = match self.template_split {
            TemplateSplit::Heard => &manifest.heard,
            TemplateSplit::Unheard => &manifest.unheard,
        };
        for ep in &self.episodes {
            let ctx = |msg: String| EnvError::Setup(format!("suite {} episode {}: {msg}", self.id, ep.id));
            if !allowed.contains(&ep.template) {
                return Err(ctx(format!(
                    "template {} is not in the {} split",
                    ep.template,
                    self.template_split.as_str()
                )));
            }
            if ep.max_steps == 0 {
                return Err(ctx("max_steps must be positive".into()));
            }
            let map: GridMap = ep.map.build().map_err(|e| ctx(e.to_string()))?;
            if !map.is_free(ep.start.cell) || !map.is_free(ep.source) {
                return Err(ctx("start and source must be free".into()));
            }
            let d = map.distance_field(ep.source)?.at(ep.start.cell);
            match d {
                None => return Err(ctx("source unreachable from start".into())),
                Some(d) if d <= success_radius => {
                    return Err(ctx(format!("start already within {success_radius} cells of source")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn templates(&self) -> Vec<u32> {
        let mut t: Vec<u32> = self.episodes.iter().map(|e| e.template).collect();
        t.sort_unstable();
        t.dedup();
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SuiteParams {
        SuiteParams {
            seed: 3,
            templates: 10,
            bins: 16,
            unheard_fraction: 0.2,
            size: 10,
            density: 0.2,
            max_steps: 100,
            success_radius: 1,
            train_episodes: 12,
            eval_episodes: 6,
        }
    }

    #[test]
    fn suites_are_deterministic_and_valid() {
        let a = generate_suites(&params()).unwrap();
        assert_eq!(a, generate_suites(&params()).unwrap());
        assert_eq!(a.suites.len(), 5);
        for s in &a.suites {
            s.validate(&a.manifest, 1).unwrap();
        }
        assert_eq!(a.manifest.heard.len(), 8);
        assert_eq!(a.manifest.unheard.len(), 2);
    }

    #[test]
    fn matched_suites_share_geometry() {
        let set = generate_suites(&params()).unwrap();
        let (h, u) = (&set.suites[1], &set.suites[2]);
        assert_eq!(h.episodes.len(), u.episodes.len());
        for (a, b) in h.episodes.iter().zip(&u.episodes) {
            assert_eq!((a.map, a.start, a.source), (b.map, b.start, b.source));
            assert!(set.manifest.heard.contains(&a.template));
            assert!(set.manifest.unheard.contains(&b.template));
        }
    }

    #[test]
    fn training_never_uses_unheard_templates() {
        let set = generate_suites(&params()).unwrap();
        for t in set.suites[0].templates() {
            assert!(!set.manifest.unheard.contains(&t));
        }
    }

    #[test]
    fn write_refuses_existing_files() {
        let dir = tempfile::tempdir().unwrap();
        let set = generate_suites(&params()).unwrap();
        set.write(dir.path(), false).unwrap();
        assert!(set.write(dir.path(), false).is_err());
        set.write(dir.path(), true).unwrap();
        let back = load_suite(&dir.path().join("val_unheard.json")).unwrap();
        assert_eq!(back, set.suites[2]);
        assert_eq!(load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap(), set.manifest);
    }

    #[test]
    fn validation_catches_split_leaks() {
        let set = generate_suites(&params()).unwrap();
        let mut leaked = set.suites[0].clone();
        leaked.episodes[0].template = set.manifest.unheard[0];
        assert!(leaked.validate(&set.manifest, 1).is_err());
    }
}
