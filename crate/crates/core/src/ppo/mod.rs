//! Recurrent PPO: rollout collection, advantage estimation and clipped updates.

mod config;
mod gae;
mod rollout;
mod update;

pub use config::PpoConfig;
pub use gae::{compute_gae, gae, AdvantageEstimates};
pub use rollout::{collect_rollouts, sample_action, EpisodeRollout, RolloutBuffer, Transition};
pub use update::{minibatch_loss, normalize, ppo_update, EpisodeTargets, LossParts, UpdateReport};

use crate::gridnav::EnvError;
use crate::matching::MatchError;
use crate::ndgrad::GradError;
use crate::net::NetError;

#[derive(Debug, thiserror::Error)]
pub enum PpoError {
    #[error("config error: {0}")]
    Config(String),
    #[error("episode {episode}: {source}")]
    Env { episode: u64, source: EnvError },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
}

#[cfg(test)]
mod tests;
