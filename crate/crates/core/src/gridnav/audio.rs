use rand::Rng;
use serde::{Deserialize, Serialize};

use super::map::GridMap;
use super::pose::AgentPose;
use super::{Cell, EnvError};
use crate::seeds::rng_for;

pub const AUDIO_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioConfig {
    pub freq_bins: usize,
    pub time_frames: usize,
    /// Half-width of the uniform additive noise; 0 disables it.
    pub noise: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            freq_bins: 64,
            time_frames: 64,
            noise: 0.01,
        }
    }
}

impl AudioConfig {
    pub fn len(&self) -> usize {
        self.freq_bins * self.time_frames * AUDIO_CHANNELS
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateSplit {
    Heard,
    Unheard,
}

impl TemplateSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateSplit::Heard => "heard",
            TemplateSplit::Unheard => "unheard",
        }
    }
}

/// Spectral profile of one sound source, normalized to unit maximum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundTemplate {
    pub id: u32,
    pub profile: Vec<f64>,
    pub split: TemplateSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub seed: u64,
    pub templates: Vec<SoundTemplate>,
}

impl TemplateBank {
    /// `count` templates with `round(count · unheard_fraction)` held out as unheard.
    pub fn generate(seed: u64, count: usize, bins: usize, unheard_fraction: f64) -> Result<Self, EnvError> {
        if count == 0 || bins == 0 {
            return Err(EnvError::Argument("template bank needs count, bins > 0".into()));
        }
        if !(0.0..=1.0).contains(&unheard_fraction) {
            return Err(EnvError::Argument(format!(
                "unheard fraction {unheard_fraction} outside [0, 1]"
            )));
        }
        let unheard = (count as f64 * unheard_fraction).round() as usize;
        let mut order: Vec<usize> = (0..count).collect();
        let mut rng = rng_for(seed, &[u64::MAX]);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut split = vec![TemplateSplit::Heard; count];
        for &i in &order[..unheard] {
            split[i] = TemplateSplit::Unheard;
        }
        let templates = (0..count)
            .map(|i| SoundTemplate {
                id: i as u32,
                profile: random_profile(seed, i as u64, bins),
                split: split[i],
            })
            .collect();
        Ok(Self { seed, templates })
    }

    pub fn get(&self, id: u32) -> Option<&SoundTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    pub fn ids(&self, split: TemplateSplit) -> Vec<u32> {
        self.templates.iter().filter(|t| t.split == split).map(|t| t.id).collect()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let mut ids: Vec<u32> = self.templates.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(EnvError::Format("duplicate template id".into()));
        }
        for t in &self.templates {
            let max = t.profile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if t.profile.is_empty() || (max - 1.0).abs() > 1e-12 || t.profile.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(EnvError::Format(format!(
                    "template {} profile is not normalized to unit maximum",
                    t.id
                )));
            }
        }
        Ok(())
    }
}

/// Sum of one to three Gaussian bumps over a small floor, scaled to unit maximum.
fn random_profile(seed: u64, id: u64, bins: usize) -> Vec<f64> {
    let mut rng = rng_for(seed, &[id]);
    let bumps = rng.gen_range(1..=3);
    let mut profile = vec![0.05; bins];
    let b = bins as f64;
    for _ in 0..bumps {
        let center = rng.gen_range(0.0..b);
        let width = rng.gen_range((b / 32.0).max(1.0)..(b / 6.0).max(1.5));
        let amp = rng.gen_range(0.3..1.0);
        for (f, p) in profile.iter_mut().enumerate() {
            let z = (f as f64 - center) / width;
            *p += amp * (-0.5 * z * z).exp();
        }
    }
    let max = profile.iter().copied().fold(0.0, f64::max);
    profile.iter_mut().for_each(|p| *p /= max);
    profile
}

/// Interaural level gains `(left, right)` for a bearing positive to the left.
pub fn ild_gains(theta: f64) -> (f64, f64) {
    let s = theta.sin();
    ((1.0 + s) / 2.0, (1.0 - s) / 2.0)
}

/// Binaural spectrogram `F×T×2` (channel last) from a geodesic distance and bearing.
pub fn synth_from(d_geo: u32, theta: f64, profile: &[f64], step_seed: u64, cfg: &AudioConfig) -> Vec<f32> {
    let amp = 1.0 / (1.0 + f64::from(d_geo));
    let (gl, gr) = ild_gains(theta);
    let mut rng = rng_for(step_seed, &[]);
    let mut out = Vec::with_capacity(cfg.len());
    for f in 0..cfg.freq_bins {
        let base = profile.get(f).copied().unwrap_or(0.0) * amp;
        for _ in 0..cfg.time_frames {
            for g in [gl, gr] {
                let noise = if cfg.noise > 0.0 {
                    rng.gen_range(-cfg.noise..=cfg.noise)
                } else {
                    0.0
                };
                out.push((g * base + noise).clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

pub fn synth_audio(
    map: &GridMap,
    pose: AgentPose,
    source: Cell,
    template: &SoundTemplate,
    step_seed: u64,
    cfg: &AudioConfig,
) -> Result<Vec<f32>, EnvError> {
    let d = map
        .distance_field(source)?
        .at(pose.cell)
        .ok_or_else(|| EnvError::Setup(format!("source {source:?} unreachable from {:?}", pose.cell)))?;
    Ok(synth_from(d, pose.bearing_to(source), &template.profile, step_seed, cfg))
}
