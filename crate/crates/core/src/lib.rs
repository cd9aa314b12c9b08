//! Audio-visual navigation with multi-target transformer fusion.

#![allow(clippy::needless_range_loop)]

pub mod ablation;
pub mod error;
pub mod gridnav;
pub mod matching;
pub mod metrics;
pub mod ndgrad;
pub mod net;
pub mod ppo;
pub mod seeds;
pub mod train;
pub mod validate;

pub use error::Error;

#[cfg(test)]
pub(crate) mod gradcheck;
#[cfg(test)]
pub(crate) mod testkit;
