use serde::{Deserialize, Serialize};

use super::NetError;

/// Ablation switches; at most one may be set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Audio goes through a strided convolution encoder instead of patch embedding.
    pub no_pe: bool,
    /// A single target query.
    pub no_mti: bool,
    /// Encoder self-attention layers are skipped.
    pub no_ensa: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<(), NetError> {
        let set = [self.no_pe, self.no_mti, self.no_ensa].iter().filter(|&&f| f).count();
        if set > 1 {
            return Err(NetError::Config(format!(
                "contradictory ablation flags: {} are set, at most one allowed",
                self.tag()
            )));
        }
        Ok(())
    }

    /// `none`, `no-pe`, `no-mti`, `no-ensa`, or a `+`-joined list.
    pub fn tag(&self) -> String {
        let mut names = Vec::new();
        if self.no_pe {
            names.push("no-pe");
        }
        if self.no_mti {
            names.push("no-mti");
        }
        if self.no_ensa {
            names.push("no-ensa");
        }
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self, NetError> {
        let mut flags = Self::default();
        match tag {
            "none" | "full" => {}
            "no-pe" | "no_pe" => flags.no_pe = true,
            "no-mti" | "no_mti" => flags.no_mti = true,
            "no-ensa" | "no_ensa" => flags.no_ensa = true,
            other => {
                return Err(NetError::Config(format!(
                    "unknown ablation {other:?}; expected none, no-pe, no-mti or no-ensa"
                )))
            }
        }
        Ok(flags)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_targets: usize,
    pub patch: usize,
    pub gru_hidden: usize,
    pub ffn_mult: usize,
    /// Image extents `[H, W, C]`; audio is prepared to the same extents.
    pub image: [usize; 3],
    /// Raw spectrogram extents `[F, T, 2]`.
    pub audio: [usize; 3],
    pub pointgoal: bool,
    pub ablation: AblationFlags,
    pub no_pe_channels: usize,
    pub delta_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            num_targets: 8,
            patch: 16,
            gru_hidden: 512,
            ffn_mult: 4,
            image: [64, 64, 3],
            audio: [64, 64, 2],
            pointgoal: false,
            ablation: AblationFlags::default(),
            no_pe_channels: 16,
            delta_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        self.ablation.validate()?;
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("decoder_layers", self.decoder_layers),
            ("num_targets", self.num_targets),
            ("patch", self.patch),
            ("gru_hidden", self.gru_hidden),
            ("ffn_mult", self.ffn_mult),
            ("image height", self.image[0]),
            ("image width", self.image[1]),
            ("image channels", self.image[2]),
            ("audio bins", self.audio[0]),
            ("audio frames", self.audio[1]),
            ("audio channels", self.audio[2]),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(NetError::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(NetError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        let [h, w, c] = self.image;
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(NetError::Shape(format!(
                "image {h}x{w} not divisible by patch {}",
                self.patch
            )));
        }
        if c < self.audio[2] {
            return Err(NetError::Shape(format!(
                "image has {c} channels, fewer than the {} audio channels",
                self.audio[2]
            )));
        }
        if self.ablation.no_pe {
            if self.conv_kernel().is_none() {
                return Err(NetError::Config(format!(
                    "no-pe convolution encoder needs a square patch size, got {}",
                    self.patch
                )));
            }
            if self.no_pe_channels == 0 {
                return Err(NetError::Config("no_pe_channels must be positive".into()));
            }
        }
        if self.pointgoal && self.delta_dim == 0 {
            return Err(NetError::Config("delta_dim must be positive in pointgoal mode".into()));
        }
        Ok(())
    }

    /// Kernel and stride of the two no-PE convolutions, `√patch`, so that
    /// together they downsample by `patch`.
    pub fn conv_kernel(&self) -> Option<usize> {
        (1..=self.patch).find(|k| k * k == self.patch)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn tokens_per_modality(&self) -> usize {
        (self.image[0] / self.patch) * (self.image[1] / self.patch)
    }

    /// Query slots after ablations.
    pub fn effective_targets(&self) -> usize {
        if self.ablation.no_mti {
            1
        } else {
            self.num_targets
        }
    }

    pub fn effective_encoder_layers(&self) -> usize {
        if self.ablation.no_ensa {
            0
        } else {
            self.encoder_layers
        }
    }

    pub fn image_len(&self) -> usize {
        self.image.iter().product()
    }

    pub fn audio_len(&self) -> usize {
        self.audio.iter().product()
    }
}
