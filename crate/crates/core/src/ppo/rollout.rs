use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::PpoError;
use crate::gridnav::{Action, EnvConfig, EpisodeRecord, EpisodeSpec, NavEnv, Observation, TemplateBank};
use crate::matching::{build_gt_set, GroundTruthItem};
use crate::net::DmtfNet;
use crate::seeds::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    /// Recurrent state before this step.
    pub hidden: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub value: f64,
    pub log_prob: f64,
    pub done: bool,
    /// Oracle targets for the matching loss at this state.
    pub targets: Vec<GroundTruthItem>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRollout {
    pub episode_id: u64,
    pub steps: Vec<Transition>,
    /// Ended by the agent (Stop) rather than a step limit.
    pub terminated: bool,
    /// Value estimate after the last step; 0 when terminated.
    pub bootstrap: f64,
    /// Simulator summary, present when the simulator itself ended the episode.
    pub record: Option<EpisodeRecord>,
}

impl EpisodeRollout {
    pub fn episode_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBuffer {
    pub episodes: Vec<EpisodeRollout>,
}

impl RolloutBuffer {
    /// Total number of transitions.
    pub fn len(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean_return(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(EpisodeRollout::episode_return).sum::<f64>() / self.episodes.len() as f64
    }
}

/// Inverse-CDF draw from a categorical distribution.
pub fn sample_action<R: Rng>(probs: &[f64], rng: &mut R) -> Action {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return Action::from_index(i).expect("policy has one probability per action");
        }
    }
    Action::from_index(last).expect("policy has one probability per action")
}

enum Phase {
    Acting,
    /// Cut by a step limit; one more forward pass yields the bootstrap value.
    Bootstrap,
    Finished,
}

struct Stream {
    env: NavEnv,
    rng: ChaCha8Rng,
    obs: Observation,
    hidden: Vec<f64>,
    phase: Phase,
    rollout: EpisodeRollout,
}

/// Runs `specs` to completion with actions sampled from `net`, each episode
/// seeded by the matching entry of `seeds`. Episodes are split into
/// `workers` contiguous chunks that run in parallel; each chunk advances its
/// episodes in lockstep with one batched forward pass per step. The result is
/// independent of `workers`.
pub fn collect_rollouts(
    net: &DmtfNet,
    env_config: &EnvConfig,
    bank: &Arc<TemplateBank>,
    specs: &[EpisodeSpec],
    seeds: &[u64],
    horizon: u32,
    workers: usize,
) -> Result<RolloutBuffer, PpoError> {
    if specs.len() != seeds.len() || specs.is_empty() || horizon == 0 {
        return Err(PpoError::Config(format!(
            "{} episodes with {} seeds and horizon {horizon}",
            specs.len(),
            seeds.len()
        )));
    }
    let chunk = specs.len().div_ceil(workers.max(1));
    let parts: Vec<Result<Vec<EpisodeRollout>, PpoError>> = specs
        .par_chunks(chunk)
        .zip(seeds.par_chunks(chunk))
        .map(|(s, k)| run_chunk(net, env_config, bank, s, k, horizon))
        .collect();
    let mut episodes = Vec::with_capacity(specs.len());
    for p in parts {
        episodes.extend(p?);
    }
    Ok(RolloutBuffer { episodes })
}

fn run_chunk(
    net: &DmtfNet,
    env_config: &EnvConfig,
    bank: &Arc<TemplateBank>,
    specs: &[EpisodeSpec],
    seeds: &[u64],
    horizon: u32,
) -> Result<Vec<EpisodeRollout>, PpoError> {
    let radius = env_config.success_radius;
    let n_t = net.config().effective_targets();
    let mut streams = Vec::with_capacity(specs.len());
    for (spec, &seed) in specs.iter().zip(seeds) {
        let env_err = |source| PpoError::Env {
            episode: spec.id,
            source,
        };
        let mut env = NavEnv::new(env_config.clone(), Arc::clone(bank)).map_err(env_err)?;
        let obs = env.reset(spec).map_err(env_err)?;
        streams.push(Stream {
            env,
            rng: rng_for(seed, &[]),
            obs,
            hidden: net.zero_hidden(),
            phase: Phase::Acting,
            rollout: EpisodeRollout {
                episode_id: spec.id,
                steps: Vec::new(),
                terminated: false,
                bootstrap: 0.0,
                record: None,
            },
        });
    }
    loop {
        let live: Vec<usize> = (0..streams.len())
            .filter(|&i| !matches!(streams[i].phase, Phase::Finished))
            .collect();
        if live.is_empty() {
            break;
        }
        let obs: Vec<&Observation> = live.iter().map(|&i| &streams[i].obs).collect();
        let hidden: Vec<&[f64]> = live.iter().map(|&i| streams[i].hidden.as_slice()).collect();
        let outputs = net.step_many(&obs, &hidden, false)?;
        for (&i, out) in live.iter().zip(outputs) {
            let s = &mut streams[i];
            if matches!(s.phase, Phase::Bootstrap) {
                s.rollout.bootstrap = out.value;
                s.phase = Phase::Finished;
                continue;
            }
            let episode = s.rollout.episode_id;
            let env_err = |source| PpoError::Env { episode, source };
            let plan = s.env.oracle_plan().map_err(env_err)?;
            let d_max = f64::from(s.env.d_max().map_err(env_err)?);
            let targets = build_gt_set(&plan, radius, d_max, n_t);
            let action = sample_action(&out.probs, &mut s.rng);
            let result = s.env.step(action).map_err(env_err)?;
            s.rollout.steps.push(Transition {
                observation: std::mem::replace(&mut s.obs, result.observation),
                hidden: std::mem::replace(&mut s.hidden, out.hidden),
                action,
                reward: result.reward,
                value: out.value,
                log_prob: out.log_probs[action.index()],
                done: result.done,
                targets,
            });
            if result.done {
                s.rollout.record = Some(s.env.record().map_err(env_err)?);
                if result.info.truncated {
                    s.phase = Phase::Bootstrap;
                } else {
                    s.rollout.terminated = true;
                    s.phase = Phase::Finished;
                }
            } else if s.rollout.steps.len() >= horizon as usize {
                s.phase = Phase::Bootstrap;
            }
        }
    }
    Ok(streams.into_iter().map(|s| s.rollout).collect())
}
