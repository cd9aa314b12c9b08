use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::importance::modality_importance;
use super::layers::{
    decoder_layer, encoder_layer, gru_cell, linear, norm, param, ParamBuilder,
};
use super::prep::prep_audio;
use super::NetError;
use crate::gridnav::{Observation, NUM_ACTIONS, NUM_CLASSES};
use crate::ndgrad::{AttnLayout, ParamStore, PatchGeometry, Tape, Tensor, Var};

/// Number of modality-attention components (audio, visual).
pub const MODALITIES: usize = 2;
/// Final-layer gain of the actor so the initial policy is near uniform.
const ACTOR_GAIN: f64 = 0.01;

fn group_slice(t: &Tensor, g: usize) -> Tensor {
    let mut shape = t.shape().to_vec();
    let per = t.len() / shape[0];
    shape[0] = 1;
    Tensor::new(shape, t.data()[g * per..(g + 1) * per].to_vec()).expect("slice of a valid tensor")
}

impl AttentionCapture {
    /// The weights belonging to batch item `g`.
    pub fn item(&self, g: usize) -> Self {
        let pick = |ws: &[Tensor]| ws.iter().map(|t| group_slice(t, g)).collect();
        Self {
            boundary: self.boundary,
            encoder_visual: pick(&self.encoder_visual),
            encoder_audio: pick(&self.encoder_audio),
            decoder_self: pick(&self.decoder_self),
            decoder_cross: pick(&self.decoder_cross),
        }
    }
}

/// Network inputs for `batch` observations, one row per observation.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsBatch {
    pub batch: usize,
    /// `[B, H·W·C]`.
    pub image: Tensor,
    /// Prepared audio, `[B, H·W·C]`.
    pub audio: Tensor,
    /// `[B, 2]` in pointgoal mode.
    pub delta: Option<Tensor>,
}

impl ObsBatch {
    pub fn from_observations(cfg: &ModelConfig, obs: &[&Observation]) -> Result<Self, NetError> {
        if obs.is_empty() {
            return Err(NetError::Shape("empty observation batch".into()));
        }
        let n = cfg.image_len();
        let mut image = Vec::with_capacity(obs.len() * n);
        let mut audio = Vec::with_capacity(obs.len() * n);
        let mut delta = Vec::new();
        for o in obs {
            if o.image.len() != n {
                return Err(NetError::Shape(format!(
                    "image holds {} values, model expects {:?}",
                    o.image.len(),
                    cfg.image
                )));
            }
            image.extend(o.image.iter().map(|&v| f64::from(v)));
            audio.extend(prep_audio(&o.audio, cfg.audio, cfg.image)?);
            if cfg.pointgoal {
                let d = o.delta.ok_or_else(|| {
                    NetError::Shape("pointgoal model needs a displacement in every observation".into())
                })?;
                delta.extend_from_slice(&d);
            }
        }
        let b = obs.len();
        Ok(Self {
            batch: b,
            image: Tensor::new(vec![b, n], image)?,
            audio: Tensor::new(vec![b, n], audio)?,
            delta: if cfg.pointgoal {
                Some(Tensor::new(vec![b, 2], delta)?)
            } else {
                None
            },
        })
    }
}

/// Attention weights of one forward pass, each `[B, heads, tq, tk]` per layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionCapture {
    /// Number of visual tokens at the front of the fused memory.
    pub boundary: usize,
    pub encoder_visual: Vec<Tensor>,
    pub encoder_audio: Vec<Tensor>,
    pub decoder_self: Vec<Tensor>,
    pub decoder_cross: Vec<Tensor>,
}

/// Tape handles produced by [`DmtfNet::encode`].
pub struct Encoded {
    /// GRU input `[B, d_model]`.
    pub embed: Var,
    /// Final slot states `[B·N_t, d_model]`.
    pub slots: Var,
    /// `[B·N_t, |actions| + 1]`, the last class is ∅.
    pub class_logits: Var,
    /// Sigmoid modality vector `[B·N_t, 2]` ordered (audio, visual).
    pub modality: Var,
    pub capture: Option<AttentionCapture>,
}

/// Tape-free result of a single recurrent step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub value: f64,
    pub hidden: Vec<f64>,
    /// Row-major `[N_t, |actions| + 1]` class probabilities.
    pub class_probs: Vec<f64>,
    /// Row-major `[N_t, 2]`.
    pub modality: Vec<f64>,
    pub w_vis: f64,
    pub w_aud: f64,
    pub attention: Option<AttentionCapture>,
}

#[derive(Clone, Debug)]
pub struct DmtfNet {
    config: ModelConfig,
    params: ParamStore,
}

fn tile_indices(rows: usize, times: usize) -> Vec<usize> {
    (0..times).flat_map(|_| 0..rows).collect()
}

/// Interleaves `[all visual; all audio]` rows into per-item `[visual_b; audio_b]` blocks.
fn interleave_indices(batch: usize, nv: usize, na: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * (nv + na));
    for b in 0..batch {
        idx.extend(b * nv..(b + 1) * nv);
        idx.extend(batch * nv + b * na..batch * nv + (b + 1) * na);
    }
    idx
}

/// Token-wise concatenation of per-item visual and audio tokens plus modality-type
/// embeddings (row 0 visual, row 1 audio). Returns the fused rows and the boundary.
pub fn fuse_concat(
    tape: &mut Tape<'_>,
    visual: Var,
    audio: Option<Var>,
    type_embedding: Var,
    batch: usize,
) -> Result<(Var, usize), NetError> {
    let vshape = tape.shape(visual).to_vec();
    if vshape.len() != 2 || batch == 0 || !vshape[0].is_multiple_of(batch) {
        return Err(NetError::Shape(format!("visual tokens {vshape:?} for batch {batch}")));
    }
    let nv = vshape[0] / batch;
    let (rows, types) = match audio {
        Some(a) => {
            let ashape = tape.shape(a).to_vec();
            if ashape.len() != 2 || ashape[1] != vshape[1] || !ashape[0].is_multiple_of(batch) {
                return Err(NetError::Shape(format!(
                    "audio tokens {ashape:?} do not match visual {vshape:?}"
                )));
            }
            let na = ashape[0] / batch;
            let stacked = tape.concat_rows(&[visual, a])?;
            let fused = tape.gather_rows(stacked, &interleave_indices(batch, nv, na))?;
            let types: Vec<usize> = (0..batch)
                .flat_map(|_| std::iter::repeat_n(0, nv).chain(std::iter::repeat_n(1, na)))
                .collect();
            (fused, types)
        }
        None => (visual, vec![0; batch * nv]),
    };
    let type_rows = tape.gather_rows(type_embedding, &types)?;
    Ok((tape.add(rows, type_rows)?, nv))
}

impl DmtfNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut rng);
        let d = config.d_model;
        let [_, _, c] = config.image;
        let p = config.patch;
        let n_tok = config.tokens_per_modality();
        let hidden = d * config.ffn_mult;

        b.linear("vis.patch", p * p * c, d)?;
        b.embedding("vis.pos", n_tok, d)?;
        if config.ablation.no_pe {
            let k2 = config.patch;
            b.linear("aud.conv1", k2 * c, config.no_pe_channels)?;
            b.linear("aud.conv2", k2 * config.no_pe_channels, d)?;
        } else {
            b.linear("aud.patch", p * p * c, d)?;
        }
        b.embedding("aud.pos", n_tok, d)?;
        b.embedding("type", MODALITIES, d)?;
        for l in 0..config.effective_encoder_layers() {
            b.encoder_layer(&format!("enc.vis.{l}"), d, hidden)?;
        }
        for l in 0..config.effective_encoder_layers() {
            b.encoder_layer(&format!("enc.aud.{l}"), d, hidden)?;
        }
        b.norm("mem.ln", d)?;
        b.embedding("queries", config.effective_targets(), d)?;
        for l in 0..config.decoder_layers {
            b.decoder_layer(&format!("dec.{l}"), d, hidden)?;
        }
        b.norm("dec.ln", d)?;
        b.linear("cls", d, NUM_CLASSES)?;
        b.linear("modal", d, MODALITIES)?;
        let mut pooled = d;
        if config.pointgoal {
            b.linear("delta", 2, config.delta_dim)?;
            pooled += config.delta_dim;
        }
        b.linear("proj", pooled, d)?;
        b.gru("gru", d, config.gru_hidden)?;
        b.linear_scaled("actor", config.gru_hidden, NUM_ACTIONS, ACTOR_GAIN)?;
        b.linear("critic", config.gru_hidden, 1)?;
        let mut params = b.store;
        params.round_to_f32();
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking they match the config's layout.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, NetError> {
        let fresh = Self::new(config.clone(), 0)?;
        if fresh.params.len() != params.len() {
            return Err(NetError::Shape(format!(
                "config needs {} tensors, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in fresh.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(NetError::Shape(format!(
                    "tensor {n2} {:?} does not match expected {n1} {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    fn patch_geometry(&self, batch: usize, kernel: usize, h: usize, w: usize, c: usize) -> PatchGeometry {
        PatchGeometry {
            batch,
            height: h,
            width: w,
            channels: c,
            kernel,
            stride: kernel,
        }
    }

    /// Patch tokens plus positional embedding, `[B·N_p, d_model]`.
    pub fn patch_embed(&self, tape: &mut Tape<'_>, x: Var, batch: usize, prefix: &str) -> Result<Var, NetError> {
        let [h, w, c] = self.config.image;
        let cols = tape.im2col(x, self.patch_geometry(batch, self.config.patch, h, w, c))?;
        let tokens = linear(tape, &self.params, cols, &format!("{prefix}.patch"))?;
        self.add_positions(tape, tokens, batch, prefix)
    }

    fn add_positions(&self, tape: &mut Tape<'_>, tokens: Var, batch: usize, prefix: &str) -> Result<Var, NetError> {
        let pos = param(tape, &self.params, &format!("{prefix}.pos"))?;
        let tiled = tape.gather_rows(pos, &tile_indices(self.config.tokens_per_modality(), batch))?;
        Ok(tape.add(tokens, tiled)?)
    }

    /// Two non-overlapping `√patch` convolutions with a ReLU between them.
    fn conv_embed(&self, tape: &mut Tape<'_>, x: Var, batch: usize) -> Result<Var, NetError> {
        let [h, w, c] = self.config.image;
        let k = self.config.conv_kernel().expect("validated square patch");
        let cols = tape.im2col(x, self.patch_geometry(batch, k, h, w, c))?;
        let y = linear(tape, &self.params, cols, "aud.conv1")?;
        let y = tape.relu(y)?;
        let cols = tape.im2col(y, self.patch_geometry(batch, k, h / k, w / k, self.config.no_pe_channels))?;
        let tokens = linear(tape, &self.params, cols, "aud.conv2")?;
        self.add_positions(tape, tokens, batch, "aud")
    }

    /// Everything up to the GRU input: embeddings, encoders, fusion, decoder and slot heads.
    pub fn encode(&self, tape: &mut Tape<'_>, obs: &ObsBatch, capture: bool) -> Result<Encoded, NetError> {
        let cfg = &self.config;
        let bsz = obs.batch;
        let layout = AttnLayout {
            groups: bsz,
            heads: cfg.heads,
        };
        let img = tape.constant(obs.image.clone());
        let aud = tape.constant(obs.audio.clone());
        let mut vis = self.patch_embed(tape, img, bsz, "vis")?;
        let mut au = if cfg.ablation.no_pe {
            self.conv_embed(tape, aud, bsz)?
        } else {
            self.patch_embed(tape, aud, bsz, "aud")?
        };
        let mut cap = AttentionCapture::default();
        for l in 0..cfg.effective_encoder_layers() {
            let (v, wv) = encoder_layer(tape, &self.params, vis, &format!("enc.vis.{l}"), layout)?;
            let (a, wa) = encoder_layer(tape, &self.params, au, &format!("enc.aud.{l}"), layout)?;
            vis = v;
            au = a;
            if capture {
                cap.encoder_visual.push(wv);
                cap.encoder_audio.push(wa);
            }
        }
        let type_emb = param(tape, &self.params, "type")?;
        let (fused, boundary) = fuse_concat(tape, vis, Some(au), type_emb, bsz)?;
        cap.boundary = boundary;
        let memory = norm(tape, &self.params, fused, "mem.ln")?;
        let nt = cfg.effective_targets();
        let queries = param(tape, &self.params, "queries")?;
        let mut slots = tape.gather_rows(queries, &tile_indices(nt, bsz))?;
        for l in 0..cfg.decoder_layers {
            let out = decoder_layer(tape, &self.params, slots, memory, &format!("dec.{l}"), layout)?;
            slots = out.slots;
            if capture {
                cap.decoder_self.push(out.self_weights);
                cap.decoder_cross.push(out.cross_weights);
            }
        }
        let slots = norm(tape, &self.params, slots, "dec.ln")?;
        let class_logits = linear(tape, &self.params, slots, "cls")?;
        let m = linear(tape, &self.params, slots, "modal")?;
        let modality = tape.sigmoid(m)?;
        let mut pooled = tape.group_mean_rows(slots, nt)?;
        if cfg.pointgoal {
            let delta = obs
                .delta
                .clone()
                .ok_or_else(|| NetError::Shape("pointgoal model needs displacements".into()))?;
            let dv = tape.constant(delta);
            let de = linear(tape, &self.params, dv, "delta")?;
            let de = tape.relu(de)?;
            pooled = tape.concat_cols(&[pooled, de])?;
        }
        let embed = linear(tape, &self.params, pooled, "proj")?;
        Ok(Encoded {
            embed,
            slots,
            class_logits,
            modality,
            capture: capture.then_some(cap),
        })
    }

    pub fn gru_step(&self, tape: &mut Tape<'_>, embed: Var, hidden: Var) -> Result<Var, NetError> {
        gru_cell(tape, &self.params, embed, hidden, "gru")
    }

    /// Actor logits `[n, 4]` and critic values `[n, 1]`.
    pub fn heads(&self, tape: &mut Tape<'_>, state: Var) -> Result<(Var, Var), NetError> {
        let logits = linear(tape, &self.params, state, "actor")?;
        let value = linear(tape, &self.params, state, "critic")?;
        Ok((logits, value))
    }

    pub fn zero_hidden(&self) -> Vec<f64> {
        vec![0.0; self.config.gru_hidden]
    }

    /// One recurrent step outside any training graph.
    pub fn step(&self, obs: &Observation, hidden: &[f64], capture: bool) -> Result<StepOutput, NetError> {
        let mut out = self.step_many(&[obs], &[hidden], capture)?;
        Ok(out.pop().expect("one output per observation"))
    }

    /// One recurrent step for several independent streams at once. Rows never
    /// interact, so each output matches a single-stream [`DmtfNet::step`] bitwise.
    pub fn step_many(
        &self,
        obs: &[&Observation],
        hidden: &[&[f64]],
        capture: bool,
    ) -> Result<Vec<StepOutput>, NetError> {
        let hid = self.config.gru_hidden;
        if obs.is_empty() || obs.len() != hidden.len() {
            return Err(NetError::Shape(format!(
                "{} observations with {} hidden states",
                obs.len(),
                hidden.len()
            )));
        }
        if let Some(h) = hidden.iter().find(|h| h.len() != hid) {
            return Err(NetError::Shape(format!(
                "hidden state has {} values, model expects {hid}",
                h.len()
            )));
        }
        let n = obs.len();
        let batch = ObsBatch::from_observations(&self.config, obs)?;
        let mut tape = Tape::with_params(&self.params);
        let enc = self.encode(&mut tape, &batch, true)?;
        let h = tape.constant(Tensor::new(vec![n, hid], hidden.concat())?);
        let s = self.gru_step(&mut tape, enc.embed, h)?;
        let (logits, value) = self.heads(&mut tape, s)?;
        let probs = tape.softmax(logits)?;
        let log_probs = tape.log_softmax(logits)?;
        let class_probs = tape.softmax(enc.class_logits)?;
        let cap = enc.capture.expect("captured");
        let importance = modality_importance(&cap.decoder_cross, cap.boundary)?;
        let nt = self.config.effective_targets();
        let rows = |v: Var, i: usize, per: usize| {
            let t = tape.value(v);
            let w = t.last_dim() * per;
            t.data()[i * w..(i + 1) * w].to_vec()
        };
        let mut out = Vec::with_capacity(n);
        for (i, &(w_vis, w_aud)) in importance.iter().enumerate() {
            out.push(StepOutput {
                probs: rows(probs, i, 1),
                log_probs: rows(log_probs, i, 1),
                value: tape.value(value).data()[i],
                hidden: rows(s, i, 1),
                class_probs: rows(class_probs, i, nt),
                modality: rows(enc.modality, i, nt),
                w_vis,
                w_aud,
                attention: capture.then(|| cap.item(i)),
            });
        }
        Ok(out)
    }
}
