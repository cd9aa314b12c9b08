use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::audio::{synth_from, AudioConfig, TemplateBank, AUDIO_CHANNELS};
use super::map::{generate_map, DistanceField, GridMap};
use super::oracle::{first_actions_from_field, ActionCosts, OraclePlan};
use super::pose::{Action, AgentPose};
use super::render::{render_visual, RenderConfig, IMAGE_CHANNELS};
use super::{Cell, EnvError};
use crate::seeds::derive_seed;

pub const SUCCESS_REWARD: f64 = 10.0;
pub const STEP_PENALTY: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub render: RenderConfig,
    pub audio: AudioConfig,
    pub success_radius: u32,
    pub pointgoal: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            render: RenderConfig::default(),
            audio: AudioConfig::default(),
            success_radius: 1,
            pointgoal: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub density: f64,
}

impl MapSpec {
    pub fn build(&self) -> Result<GridMap, EnvError> {
        generate_map(self.seed, self.width, self.height, self.density)
    }
}

fn default_max_steps() -> u32 {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub id: u64,
    pub map: MapSpec,
    pub start: AgentPose,
    pub source: Cell,
    pub template: u32,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    /// Seed for the per-step audio noise.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// `H×W×3`, row-major, channel last.
    pub image: Vec<f32>,
    /// `F×T×2`, row-major, channel last.
    pub audio: Vec<f32>,
    /// Displacement to the source as (forward, left) cells, pointgoal mode only.
    pub delta: Option<[f64; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub geodesic: u32,
    pub collided: bool,
    pub success: bool,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Terminal summary of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: u64,
    pub success: bool,
    /// Geodesic start-to-source distance in cells.
    pub shortest: u32,
    /// Cells actually moved.
    pub path: u32,
    /// Actions executed, Stop included.
    pub actions: u32,
    /// Fewest actions an optimal agent needs, Stop included.
    pub optimal_actions: u32,
    pub episode_return: f64,
}

struct Episode {
    spec: EpisodeSpec,
    map: Arc<GridMap>,
    field: DistanceField,
    profile: Vec<f64>,
    pose: AgentPose,
    t: u32,
    done: bool,
    success: bool,
    path: u32,
    episode_return: f64,
    shortest: u32,
    optimal_actions: u32,
    costs: ActionCosts,
}

/// One simulator instance; cheap to clone the template bank across a pool.
pub struct NavEnv {
    config: EnvConfig,
    bank: Arc<TemplateBank>,
    map_cache: Option<(MapSpec, Arc<GridMap>)>,
    episode: Option<Episode>,
}

impl NavEnv {
    pub fn new(config: EnvConfig, bank: Arc<TemplateBank>) -> Result<Self, EnvError> {
        if config.render.height == 0
            || config.render.width == 0
            || config.render.view_width == 0
            || config.render.view_depth == 0
            || config.audio.freq_bins == 0
            || config.audio.time_frames == 0
        {
            return Err(EnvError::Argument("render and audio extents must be positive".into()));
        }
        if !(0.0..=0.5).contains(&config.audio.noise) {
            return Err(EnvError::Argument(format!(
                "audio noise {} outside [0, 0.5]",
                config.audio.noise
            )));
        }
        Ok(Self {
            config,
            bank,
            map_cache: None,
            episode: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.config.render.height, self.config.render.width, IMAGE_CHANNELS]
    }

    pub fn audio_shape(&self) -> [usize; 3] {
        [self.config.audio.freq_bins, self.config.audio.time_frames, AUDIO_CHANNELS]
    }

    fn map_for(&mut self, spec: &MapSpec) -> Result<Arc<GridMap>, EnvError> {
        if let Some((cached, map)) = &self.map_cache {
            if cached == spec {
                return Ok(Arc::clone(map));
            }
        }
        let map = Arc::new(spec.build().map_err(|e| EnvError::Setup(e.to_string()))?);
        self.map_cache = Some((*spec, Arc::clone(&map)));
        Ok(map)
    }

    pub fn reset(&mut self, spec: &EpisodeSpec) -> Result<Observation, EnvError> {
        let map = self.map_for(&spec.map)?;
        self.reset_with_map(map, spec)
    }

    /// Starts an episode on a caller-supplied map; `spec.map` is ignored.
    pub fn reset_with_map(&mut self, map: Arc<GridMap>, spec: &EpisodeSpec) -> Result<Observation, EnvError> {
        let setup = |msg: String| EnvError::Setup(format!("episode {}: {msg}", spec.id));
        if spec.max_steps == 0 {
            return Err(setup("max_steps must be positive".into()));
        }
        let template = self
            .bank
            .get(spec.template)
            .ok_or_else(|| setup(format!("unknown template {}", spec.template)))?;
        if template.profile.len() != self.config.audio.freq_bins {
            return Err(setup(format!(
                "template {} has {} bands, audio expects {}",
                template.id,
                template.profile.len(),
                self.config.audio.freq_bins
            )));
        }
        let profile = template.profile.clone();
        if !map.is_free(spec.start.cell) || !map.is_free(spec.source) {
            return Err(setup("start and source must be free cells".into()));
        }
        let field = map.distance_field(spec.source)?;
        let shortest = field
            .at(spec.start.cell)
            .ok_or_else(|| setup("source unreachable from start".into()))?;
        let costs = ActionCosts::new(&field, &map, self.config.success_radius);
        let optimal_actions = costs
            .at(spec.start)
            .ok_or_else(|| setup("source unreachable from start".into()))?;
        self.episode = Some(Episode {
            spec: spec.clone(),
            map,
            field,
            profile,
            pose: spec.start,
            t: 0,
            done: false,
            success: false,
            path: 0,
            episode_return: 0.0,
            shortest,
            optimal_actions,
            costs,
        });
        Ok(self.observe())
    }

    fn episode(&self) -> Result<&Episode, EnvError> {
        self.episode
            .as_ref()
            .ok_or_else(|| EnvError::Protocol("no active episode; call reset first".into()))
    }

    fn observe(&self) -> Observation {
        let ep = self.episode.as_ref().expect("observe after reset");
        let d = ep.field.at(ep.pose.cell).expect("agent stays in the source component");
        let image = render_visual(&ep.map, ep.pose, &self.config.render);
        let step_seed = derive_seed(ep.spec.seed, &[u64::from(ep.t)]);
        let audio = synth_from(d, ep.pose.bearing_to(ep.spec.source), &ep.profile, step_seed, &self.config.audio);
        let delta = self.config.pointgoal.then(|| {
            let (f, l) = ep.pose.to_agent_frame(
                f64::from(ep.spec.source.x - ep.pose.cell.x),
                f64::from(ep.spec.source.y - ep.pose.cell.y),
            );
            [f, l]
        });
        Observation { image, audio, delta }
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        let radius = self.config.success_radius;
        let ep = self
            .episode
            .as_mut()
            .ok_or_else(|| EnvError::Protocol("no active episode; call reset first".into()))?;
        if ep.done {
            return Err(EnvError::Protocol(format!(
                "episode {} already finished at t={}",
                ep.spec.id, ep.t
            )));
        }
        let before = ep.field.at(ep.pose.cell).expect("reachable");
        let mut collided = false;
        let mut stopped = false;
        match action {
            Action::MoveForward => {
                let ahead = ep.pose.ahead();
                if ep.map.is_free(ahead) {
                    ep.pose.cell = ahead;
                    ep.path += 1;
                } else {
                    collided = true;
                }
            }
            Action::TurnLeft => ep.pose.heading = ep.pose.heading.left(),
            Action::TurnRight => ep.pose.heading = ep.pose.heading.right(),
            Action::Stop => stopped = true,
        }
        ep.t += 1;
        let after = ep.field.at(ep.pose.cell).expect("reachable");
        let success = stopped && after <= radius;
        let truncated = !stopped && ep.t >= ep.spec.max_steps;
        ep.done = stopped || truncated;
        ep.success = success;
        let reward = if success { SUCCESS_REWARD } else { 0.0 } + f64::from(before) - f64::from(after) - STEP_PENALTY;
        ep.episode_return += reward;
        let done = ep.done;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done,
            info: StepInfo {
                geodesic: after,
                collided,
                success,
                truncated,
            },
        })
    }

    pub fn pose(&self) -> Result<AgentPose, EnvError> {
        Ok(self.episode()?.pose)
    }

    pub fn t(&self) -> Result<u32, EnvError> {
        Ok(self.episode()?.t)
    }

    pub fn is_done(&self) -> Result<bool, EnvError> {
        Ok(self.episode()?.done)
    }

    pub fn geodesic(&self) -> Result<u32, EnvError> {
        let ep = self.episode()?;
        Ok(ep.field.at(ep.pose.cell).expect("reachable"))
    }

    /// Largest distance-to-success over the episode map, at least 1.
    pub fn d_max(&self) -> Result<u32, EnvError> {
        let ep = self.episode()?;
        Ok(ep.field.max().saturating_sub(self.config.success_radius).max(1))
    }

    pub fn map(&self) -> Result<&GridMap, EnvError> {
        Ok(&self.episode()?.map)
    }

    pub fn spec(&self) -> Result<&EpisodeSpec, EnvError> {
        Ok(&self.episode()?.spec)
    }

    /// Optimal first actions from the current pose.
    pub fn oracle_plan(&self) -> Result<OraclePlan, EnvError> {
        let ep = self.episode()?;
        first_actions_from_field(&ep.field, &ep.map, ep.pose, self.config.success_radius)
    }

    /// Scripted oracle choice: fewest moves, then fewest actions, lowest index on ties.
    pub fn oracle_action(&self) -> Result<Action, EnvError> {
        let ep = self.episode()?;
        ep.costs
            .best_action(&ep.field, ep.pose, self.config.success_radius)
            .ok_or_else(|| EnvError::Setup("source unreachable".into()))
    }

    /// Summary of the current episode; only available once it has ended.
    pub fn record(&self) -> Result<EpisodeRecord, EnvError> {
        let ep = self.episode()?;
        if !ep.done {
            return Err(EnvError::Protocol(format!("episode {} still running", ep.spec.id)));
        }
        Ok(EpisodeRecord {
            episode_id: ep.spec.id,
            success: ep.success,
            shortest: ep.shortest,
            path: ep.path,
            actions: ep.t,
            optimal_actions: ep.optimal_actions,
            episode_return: ep.episode_return,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridnav::pose::Heading;
    use crate::gridnav::TemplateBank;

    fn bank(bins: usize) -> Arc<TemplateBank> {
        Arc::new(TemplateBank::generate(0, 3, bins, 0.0).unwrap())
    }

    fn small_config() -> EnvConfig {
        EnvConfig {
            render: RenderConfig {
                height: 16,
                width: 16,
                view_width: 5,
                view_depth: 4,
            },
            audio: AudioConfig {
                freq_bins: 8,
                time_frames: 8,
                noise: 0.01,
            },
            success_radius: 1,
            pointgoal: false,
        }
    }

    fn room_spec(start: AgentPose, source: Cell) -> EpisodeSpec {
        EpisodeSpec {
            id: 1,
            map: MapSpec {
                seed: 0,
                width: 10,
                height: 10,
                density: 0.0,
            },
            start,
            source,
            template: 0,
            max_steps: 50,
            seed: 17,
        }
    }

    #[test]
    fn stop_adjacent_succeeds() {
        let mut env = NavEnv::new(small_config(), bank(8)).unwrap();
        env.reset(&room_spec(AgentPose::new(Cell::new(3, 3), Heading::N), Cell::new(3, 4)))
            .unwrap();
        let r = env.step(Action::Stop).unwrap();
        assert!(r.done && r.info.success);
        assert_eq!(r.reward, SUCCESS_REWARD - STEP_PENALTY);
        assert!(matches!(env.step(Action::Stop), Err(EnvError::Protocol(_))));
    }

    #[test]
    fn collision_leaves_pose() {
        let mut env = NavEnv::new(small_config(), bank(8)).unwrap();
        let start = AgentPose::new(Cell::new(1, 8), Heading::N);
        env.reset(&room_spec(start, Cell::new(5, 5))).unwrap();
        let r = env.step(Action::MoveForward).unwrap();
        assert!(r.info.collided && !r.done);
        assert_eq!(r.reward, -STEP_PENALTY);
        assert_eq!(env.pose().unwrap(), start);
    }

    #[test]
    fn stop_far_away_fails() {
        let mut env = NavEnv::new(small_config(), bank(8)).unwrap();
        env.reset(&room_spec(AgentPose::new(Cell::new(1, 1), Heading::N), Cell::new(5, 5)))
            .unwrap();
        let r = env.step(Action::Stop).unwrap();
        assert!(r.done && !r.info.success && !r.info.truncated);
        assert!(!env.record().unwrap().success);
    }

    #[test]
    fn scripted_corridor_return() {
        // Source five cells ahead along a corridor: walk onto it, then stop.
        let corridor = Arc::new(GridMap::from_ascii(&["########", "#......#", "########"]));
        let spec = room_spec(AgentPose::new(Cell::new(1, 1), Heading::E), Cell::new(6, 1));
        let mut env = NavEnv::new(small_config(), bank(8)).unwrap();
        env.reset_with_map(corridor, &spec).unwrap();
        let mut total = 0.0;
        for _ in 0..5 {
            total += env.step(Action::MoveForward).unwrap().reward;
        }
        let last = env.step(Action::Stop).unwrap();
        assert!(last.info.success);
        total += last.reward;
        assert!((total - (10.0 + 5.0 - 0.01 * 6.0)).abs() < 1e-12);
        assert_eq!(env.record().unwrap().episode_return, total);
    }

    #[test]
    fn truncation_at_budget() {
        let mut env = NavEnv::new(small_config(), bank(8)).unwrap();
        let mut spec = room_spec(AgentPose::new(Cell::new(1, 1), Heading::N), Cell::new(5, 5));
        spec.max_steps = 3;
        env.reset(&spec).unwrap();
        env.step(Action::TurnLeft).unwrap();
        env.step(Action::TurnLeft).unwrap();
        let r = env.step(Action::TurnLeft).unwrap();
        assert!(r.done && r.info.truncated && !r.info.success);
        let rec = env.record().unwrap();
        assert_eq!((rec.actions, rec.path), (3, 0));
    }

    #[test]
    fn reset_is_deterministic_and_validated() {
        let mut env = NavEnv::new(small_config(), bank(8)).unwrap();
        let spec = room_spec(AgentPose::new(Cell::new(2, 2), Heading::S), Cell::new(6, 7));
        assert_eq!(env.reset(&spec).unwrap(), env.reset(&spec).unwrap());
        let mut bad = spec.clone();
        bad.source = Cell::new(0, 0);
        assert!(matches!(env.reset(&bad), Err(EnvError::Setup(_))));
        let mut bad = spec.clone();
        bad.template = 99;
        assert!(matches!(env.reset(&bad), Err(EnvError::Setup(_))));
        let mut bad = spec;
        bad.max_steps = 0;
        assert!(matches!(env.reset(&bad), Err(EnvError::Setup(_))));
    }

    #[test]
    fn pointgoal_delta_in_agent_frame() {
        let mut cfg = small_config();
        cfg.pointgoal = true;
        let mut env = NavEnv::new(cfg, bank(8)).unwrap();
        let obs = env
            .reset(&room_spec(AgentPose::new(Cell::new(4, 4), Heading::E), Cell::new(4, 6)))
            .unwrap();
        // Two cells north while facing east: straight to the left.
        assert_eq!(obs.delta, Some([0.0, 2.0]));
        let obs = env.step(Action::TurnLeft).unwrap().observation;
        assert_eq!(obs.delta, Some([2.0, 0.0]));
        let plain = NavEnv::new(small_config(), bank(8))
            .unwrap()
            .reset(&room_spec(AgentPose::new(Cell::new(4, 4), Heading::E), Cell::new(4, 6)))
            .unwrap();
        assert_eq!(plain.delta, None);
    }

    #[test]
    fn oracle_moves_reduce_geodesic_by_one() {
        let spec = EpisodeSpec {
            id: 9,
            map: MapSpec {
                seed: 4,
                width: 12,
                height: 12,
                density: 0.3,
            },
            start: AgentPose::new(Cell::new(0, 0), Heading::N),
            source: Cell::new(0, 0),
            template: 1,
            max_steps: 200,
            seed: 5,
        };
        let map = spec.map.build().unwrap();
        let free = map.free_cells();
        let spec = EpisodeSpec {
            start: AgentPose::new(free[0], Heading::N),
            source: *free.last().unwrap(),
            ..spec
        };
        let mut env = NavEnv::new(small_config(), bank(8)).unwrap();
        env.reset(&spec).unwrap();
        loop {
            let a = env.oracle_plan().unwrap().actions[0];
            let before = env.geodesic().unwrap();
            let r = env.step(a).unwrap();
            assert!(r.info.geodesic + 1 >= before);
            if a == Action::MoveForward {
                assert_eq!(r.info.geodesic + 1, before);
            }
            if r.done {
                assert!(r.info.success);
                break;
            }
        }
        let rec = env.record().unwrap();
        assert!(rec.actions >= rec.optimal_actions);
        assert_eq!(rec.path, rec.shortest - 1);
    }
}
