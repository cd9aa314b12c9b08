use super::RolloutBuffer;

/// Per-step advantages and return targets, episode-major in buffer order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageEstimates {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Generalized advantage estimation over one episode. `bootstrap` is the value
/// after the last step: 0 when the episode terminated, `V(s_T)` when truncated.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

pub fn compute_gae(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> AdvantageEstimates {
    let mut out = AdvantageEstimates {
        advantages: Vec::with_capacity(buffer.len()),
        returns: Vec::with_capacity(buffer.len()),
    };
    for ep in &buffer.episodes {
        let rewards: Vec<f64> = ep.steps.iter().map(|s| s.reward).collect();
        let values: Vec<f64> = ep.steps.iter().map(|s| s.value).collect();
        let (a, r) = gae(&rewards, &values, ep.bootstrap, gamma, lambda);
        out.advantages.extend(a);
        out.returns.extend(r);
    }
    out
}
