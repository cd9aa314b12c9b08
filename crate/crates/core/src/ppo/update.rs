use std::cmp::Reverse;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AdvantageEstimates, EpisodeRollout, PpoConfig, PpoError, RolloutBuffer};
use crate::gridnav::{Observation, NUM_ACTIONS};
use crate::matching::{matching_loss, GroundTruthItem};
use crate::ndgrad::{clip_grad_norm, AdamState, Tape, Tensor, Var};
use crate::net::{DmtfNet, ObsBatch};

/// Scalar pieces of one minibatch objective, as evaluated before the step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub matching_loss: f64,
    pub match_cost: f64,
    pub null_fraction: f64,
    /// Fraction of steps whose ratio left the clip interval.
    pub clip_fraction: f64,
    /// Largest `|ρ − 1|` in the minibatch.
    pub max_ratio_deviation: f64,
}

impl LossParts {
    fn accumulate(&mut self, o: &LossParts) {
        self.total += o.total;
        self.surrogate += o.surrogate;
        self.value_loss += o.value_loss;
        self.entropy += o.entropy;
        self.matching_loss += o.matching_loss;
        self.match_cost += o.match_cost;
        self.null_fraction += o.null_fraction;
        self.clip_fraction += o.clip_fraction;
        self.max_ratio_deviation = self.max_ratio_deviation.max(o.max_ratio_deviation);
    }

    fn scaled(mut self, k: f64) -> Self {
        for v in [
            &mut self.total,
            &mut self.surrogate,
            &mut self.value_loss,
            &mut self.entropy,
            &mut self.matching_loss,
            &mut self.match_cost,
            &mut self.null_fraction,
            &mut self.clip_fraction,
        ] {
            *v *= k;
        }
        self
    }
}

/// Minibatch means over the whole update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub losses: LossParts,
    pub minibatches: usize,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
}

/// Zero mean, unit variance; a constant input maps to zeros.
pub fn normalize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    x.iter().map(|v| (v - mean) / std).collect()
}

/// Per-step training inputs for one episode, aligned with its transitions.
pub struct EpisodeTargets<'a> {
    pub episode: &'a EpisodeRollout,
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

/// Builds the PPO objective for whole episodes. Observations are encoded in
/// one batch; the GRU then runs over time with episodes ordered by length so
/// the active episodes at every step form a prefix.
pub fn minibatch_loss(
    tape: &mut Tape<'_>,
    net: &DmtfNet,
    batch: &[EpisodeTargets<'_>],
    cfg: &PpoConfig,
) -> Result<(Var, LossParts), PpoError> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by_key(|&e| Reverse(batch[e].episode.steps.len()));
    let lens: Vec<usize> = order.iter().map(|&e| batch[e].episode.steps.len()).collect();
    if lens.first().is_none_or(|&l| l == 0) || lens.contains(&0) {
        return Err(PpoError::Config("minibatch holds an empty episode".into()));
    }
    let total: usize = lens.iter().sum();
    let mut starts = Vec::with_capacity(lens.len());
    let mut acc = 0;
    for &l in &lens {
        starts.push(acc);
        acc += l;
    }

    let steps = || order.iter().flat_map(|&e| batch[e].episode.steps.iter());
    let obs: Vec<&Observation> = steps().map(|s| &s.observation).collect();
    let enc = net.encode(tape, &ObsBatch::from_observations(net.config(), &obs)?, false)?;

    let hid = net.config().gru_hidden;
    let mut h = tape.constant(Tensor::zeros(vec![lens.len(), hid]));
    let mut states = Vec::with_capacity(lens[0]);
    let mut offsets = Vec::with_capacity(lens[0]);
    let mut placed = 0;
    for t in 0..lens[0] {
        let active = lens.iter().take_while(|&&l| l > t).count();
        let rows: Vec<usize> = starts[..active].iter().map(|s| s + t).collect();
        let x = tape.gather_rows(enc.embed, &rows)?;
        if tape.shape(h)[0] != active {
            h = tape.slice_rows(h, 0, active)?;
        }
        h = net.gru_step(tape, x, h)?;
        states.push(h);
        offsets.push(placed);
        placed += active;
    }
    let stacked = tape.concat_rows(&states)?;
    let mut perm = vec![0; total];
    for (k, (&start, &len)) in starts.iter().zip(&lens).enumerate() {
        for t in 0..len {
            perm[start + t] = offsets[t] + k;
        }
    }
    let state = tape.gather_rows(stacked, &perm)?;
    let (logits, values) = net.heads(tape, state)?;

    let mut pick_idx = Vec::with_capacity(total);
    let mut old = Vec::with_capacity(total);
    let mut adv = Vec::with_capacity(total);
    let mut ret = Vec::with_capacity(total);
    for &e in &order {
        let b = &batch[e];
        for (t, s) in b.episode.steps.iter().enumerate() {
            pick_idx.push((pick_idx.len()) * NUM_ACTIONS + s.action.index());
            old.push(s.log_prob);
            adv.push(b.advantages[t]);
            ret.push(b.returns[t]);
        }
    }

    let logp_all = tape.log_softmax(logits)?;
    let logp = tape.pick(logp_all, &pick_idx)?;
    let old_v = tape.constant(Tensor::vector(old));
    let log_ratio = tape.sub(logp, old_v)?;
    let ratio = tape.exp(log_ratio)?;
    let adv_v = tape.constant(Tensor::vector(adv));
    let unclipped = tape.mul(ratio, adv_v)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
    let clipped = tape.mul(clipped_ratio, adv_v)?;
    let chosen = tape.minimum(unclipped, clipped)?;
    let mean_obj = tape.mean(chosen)?;
    let surrogate = tape.scale(mean_obj, -1.0)?;

    let v = tape.reshape(values, &[total])?;
    let ret_v = tape.constant(Tensor::vector(ret));
    let err = tape.sub(v, ret_v)?;
    let sq = tape.mul(err, err)?;
    let value_loss = tape.mean(sq)?;

    let probs = tape.exp(logp_all)?;
    let plogp = tape.mul(probs, logp_all)?;
    let neg_ent = tape.sum(plogp)?;
    let entropy = tape.scale(neg_ent, -1.0 / total as f64)?;

    let vterm = tape.scale(value_loss, cfg.value_coef)?;
    let eterm = tape.scale(entropy, -cfg.entropy_coef)?;
    let mut loss = tape.add(surrogate, vterm)?;
    loss = tape.add(loss, eterm)?;

    let mut parts = LossParts::default();
    if cfg.match_coef > 0.0 {
        let sets: Vec<Vec<GroundTruthItem>> = steps().map(|s| s.targets.clone()).collect();
        let class_probs = tape.softmax(enc.class_logits)?;
        let (m, diag) = matching_loss(tape, &sets, class_probs, enc.modality)?;
        parts.matching_loss = tape.value(m).item();
        parts.match_cost = diag.mean_cost;
        parts.null_fraction = diag.null_fraction;
        let mterm = tape.scale(m, cfg.match_coef)?;
        loss = tape.add(loss, mterm)?;
    }

    let r = tape.value(ratio).data();
    parts.max_ratio_deviation = r.iter().fold(0.0, |m, x| m.max((x - 1.0).abs()));
    parts.clip_fraction = r.iter().filter(|&&x| (x - 1.0).abs() > cfg.clip).count() as f64 / total as f64;
    parts.surrogate = tape.value(surrogate).item();
    parts.value_loss = tape.value(value_loss).item();
    parts.entropy = tape.value(entropy).item();
    parts.total = tape.value(loss).item();
    Ok((loss, parts))
}

/// Runs `cfg.epochs` passes over shuffled episode minibatches with one Adam
/// step each. Advantages are normalized over the whole buffer first.
pub fn ppo_update<R: Rng>(
    net: &mut DmtfNet,
    adam: &mut AdamState,
    buffer: &RolloutBuffer,
    estimates: &AdvantageEstimates,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateReport, PpoError> {
    if buffer.is_empty() || estimates.advantages.len() != buffer.len() {
        return Err(PpoError::Config(format!(
            "{} advantages for {} transitions",
            estimates.advantages.len(),
            buffer.len()
        )));
    }
    let adv = normalize(&estimates.advantages);
    let mut targets = Vec::with_capacity(buffer.episodes.len());
    let mut at = 0;
    for ep in &buffer.episodes {
        let n = ep.steps.len();
        targets.push(EpisodeTargets {
            episode: ep,
            advantages: &adv[at..at + n],
            returns: &estimates.returns[at..at + n],
        });
        at += n;
    }

    let mut report = UpdateReport::default();
    let groups = cfg.minibatches.min(targets.len());
    let mut idx: Vec<usize> = (0..targets.len()).collect();
    for epoch in 0..cfg.epochs {
        idx.shuffle(rng);
        for g in 0..groups {
            let members: Vec<usize> = idx.iter().skip(g).step_by(groups).copied().collect();
            let mb: Vec<EpisodeTargets<'_>> = members
                .iter()
                .map(|&i| EpisodeTargets {
                    episode: targets[i].episode,
                    advantages: targets[i].advantages,
                    returns: targets[i].returns,
                })
                .collect();
            let (mut grads, parts) = {
                let mut tape = Tape::with_params(net.params());
                let (loss, parts) = minibatch_loss(&mut tape, net, &mb, cfg)?;
                if !parts.total.is_finite() {
                    let ids: Vec<u64> = mb.iter().map(|t| t.episode.episode_id).collect();
                    return Err(PpoError::NonFinite(format!(
                        "epoch {epoch}, minibatch {g}, episodes {ids:?}: {parts:?}"
                    )));
                }
                tape.backward(loss)?;
                (tape.param_grads(), parts)
            };
            report.grad_norm += clip_grad_norm(&mut grads, cfg.max_grad_norm);
            adam.step(net.params_mut(), &grads)?;
            net.params_mut().round_to_f32();
            report.losses.accumulate(&parts);
            report.minibatches += 1;
        }
    }
    let k = 1.0 / report.minibatches as f64;
    report.losses = report.losses.scaled(k);
    report.grad_norm *= k;
    Ok(report)
}
