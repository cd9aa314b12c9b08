use serde::{Deserialize, Serialize};

use super::PpoError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub epochs: usize,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub lr: f64,
    /// Number of collect/update iterations.
    pub updates: usize,
    pub episodes_per_update: usize,
    /// Step cap per rollout episode, on top of the episode's own limit.
    pub horizon: u32,
    /// Weight of the auxiliary matching loss; 0 disables it.
    pub match_coef: f64,
    /// Minibatches per epoch; episodes are never split across minibatches.
    pub minibatches: usize,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            clip: 0.1,
            value_coef: 0.5,
            entropy_coef: 0.01,
            gamma: 0.99,
            gae_lambda: 0.95,
            lr: 1e-4,
            updates: 100,
            episodes_per_update: 16,
            horizon: 500,
            match_coef: 0.1,
            minibatches: 4,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |field: &str, why: &str| Err(PpoError::Config(format!("ppo.{field}: {why}")));
        if self.clip <= 0.0 || !self.clip.is_finite() {
            return bad("clip", "must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda", "must lie in [0, 1]");
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return bad("lr", "must be positive");
        }
        if self.max_grad_norm <= 0.0 || !self.max_grad_norm.is_finite() {
            return bad("max_grad_norm", "must be positive");
        }
        for (field, v) in [
            ("epochs", self.epochs),
            ("updates", self.updates),
            ("episodes_per_update", self.episodes_per_update),
            ("minibatches", self.minibatches),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        if self.horizon == 0 || self.horizon > 500 {
            return bad("horizon", "must lie in [1, 500]");
        }
        for (field, v) in [
            ("value_coef", self.value_coef),
            ("entropy_coef", self.entropy_coef),
            ("match_coef", self.match_coef),
        ] {
            if v < 0.0 || !v.is_finite() {
                return bad(field, "must be non-negative");
            }
        }
        Ok(())
    }
}
