//! Named-parameter building blocks shared by the encoder, decoder and heads.

use rand::Rng;

use super::NetError;
use crate::ndgrad::{fan_in, uniform, AttnLayout, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const EMBED_SCALE: f64 = 0.02;

/// Registers parameters in a fixed order so the layout is a pure function of the config.
pub struct ParamBuilder<'r, R: Rng> {
    pub store: ParamStore,
    rng: &'r mut R,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            store: ParamStore::new(),
            rng,
        }
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<(), NetError> {
        self.store.insert(name, t)?;
        Ok(())
    }

    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Result<(), NetError> {
        self.linear_scaled(prefix, d_in, d_out, 1.0)
    }

    pub fn linear_scaled(&mut self, prefix: &str, d_in: usize, d_out: usize, gain: f64) -> Result<(), NetError> {
        let mut w = fan_in(self.rng, d_in, d_out);
        w.data_mut().iter_mut().for_each(|v| *v *= gain);
        self.insert(format!("{prefix}.w"), w)?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(vec![d_out]))
    }

    pub fn norm(&mut self, prefix: &str, d: usize) -> Result<(), NetError> {
        self.insert(format!("{prefix}.g"), Tensor::filled(vec![d], 1.0))?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(vec![d]))
    }

    pub fn embedding(&mut self, name: &str, rows: usize, d: usize) -> Result<(), NetError> {
        let t = uniform(self.rng, &[rows, d], EMBED_SCALE);
        self.insert(name.to_string(), t)
    }

    pub fn attention(&mut self, prefix: &str, d: usize) -> Result<(), NetError> {
        for part in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{part}"), d, d)?;
        }
        Ok(())
    }

    pub fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> Result<(), NetError> {
        self.linear(&format!("{prefix}.fc1"), d, hidden)?;
        self.linear(&format!("{prefix}.fc2"), hidden, d)
    }

    pub fn encoder_layer(&mut self, prefix: &str, d: usize, hidden: usize) -> Result<(), NetError> {
        self.norm(&format!("{prefix}.ln1"), d)?;
        self.attention(&format!("{prefix}.attn"), d)?;
        self.norm(&format!("{prefix}.ln2"), d)?;
        self.ffn(&format!("{prefix}.ffn"), d, hidden)
    }

    pub fn decoder_layer(&mut self, prefix: &str, d: usize, hidden: usize) -> Result<(), NetError> {
        self.norm(&format!("{prefix}.ln1"), d)?;
        self.attention(&format!("{prefix}.self"), d)?;
        self.norm(&format!("{prefix}.ln2"), d)?;
        self.attention(&format!("{prefix}.cross"), d)?;
        self.norm(&format!("{prefix}.ln3"), d)?;
        self.ffn(&format!("{prefix}.ffn"), d, hidden)
    }

    /// GRU weights with gates packed as `[reset | update | candidate]` columns.
    pub fn gru(&mut self, prefix: &str, d_in: usize, hidden: usize) -> Result<(), NetError> {
        self.linear(&format!("{prefix}.ih"), d_in, 3 * hidden)?;
        self.linear(&format!("{prefix}.hh"), hidden, 3 * hidden)
    }
}

pub fn param(tape: &mut Tape<'_>, params: &ParamStore, name: &str) -> Result<Var, NetError> {
    let i = params
        .lookup(name)
        .ok_or_else(|| NetError::Config(format!("missing parameter {name}")))?;
    Ok(tape.param(i))
}

pub fn linear(tape: &mut Tape<'_>, params: &ParamStore, x: Var, prefix: &str) -> Result<Var, NetError> {
    let w = param(tape, params, &format!("{prefix}.w"))?;
    let b = param(tape, params, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add_bias(y, b)?)
}

pub fn norm(tape: &mut Tape<'_>, params: &ParamStore, x: Var, prefix: &str) -> Result<Var, NetError> {
    let g = param(tape, params, &format!("{prefix}.g"))?;
    let b = param(tape, params, &format!("{prefix}.b"))?;
    Ok(tape.layer_norm(x, g, b, LN_EPS)?)
}

/// Projected multi-head attention; returns the output and `[groups, heads, tq, tk]` weights.
pub fn multi_head(
    tape: &mut Tape<'_>,
    params: &ParamStore,
    queries: Var,
    keys: Var,
    prefix: &str,
    layout: AttnLayout,
) -> Result<(Var, Tensor), NetError> {
    let q = linear(tape, params, queries, &format!("{prefix}.q"))?;
    let k = linear(tape, params, keys, &format!("{prefix}.k"))?;
    let v = linear(tape, params, keys, &format!("{prefix}.v"))?;
    let (o, w) = tape.attention(q, k, v, layout)?;
    Ok((linear(tape, params, o, &format!("{prefix}.o"))?, w))
}

pub fn ffn(tape: &mut Tape<'_>, params: &ParamStore, x: Var, prefix: &str) -> Result<Var, NetError> {
    let h = linear(tape, params, x, &format!("{prefix}.fc1"))?;
    let h = tape.relu(h)?;
    linear(tape, params, h, &format!("{prefix}.fc2"))
}

/// Pre-norm self-attention block followed by a pre-norm feed-forward block.
pub fn encoder_layer(
    tape: &mut Tape<'_>,
    params: &ParamStore,
    x: Var,
    prefix: &str,
    layout: AttnLayout,
) -> Result<(Var, Tensor), NetError> {
    let n = norm(tape, params, x, &format!("{prefix}.ln1"))?;
    let (a, w) = multi_head(tape, params, n, n, &format!("{prefix}.attn"), layout)?;
    let x = tape.add(x, a)?;
    let n = norm(tape, params, x, &format!("{prefix}.ln2"))?;
    let f = ffn(tape, params, n, &format!("{prefix}.ffn"))?;
    Ok((tape.add(x, f)?, w))
}

pub struct DecoderOut {
    pub slots: Var,
    pub self_weights: Tensor,
    pub cross_weights: Tensor,
}

/// Slot self-attention, cross-attention into `memory`, then feed-forward; all pre-norm.
pub fn decoder_layer(
    tape: &mut Tape<'_>,
    params: &ParamStore,
    slots: Var,
    memory: Var,
    prefix: &str,
    layout: AttnLayout,
) -> Result<DecoderOut, NetError> {
    let n = norm(tape, params, slots, &format!("{prefix}.ln1"))?;
    let (a, self_weights) = multi_head(tape, params, n, n, &format!("{prefix}.self"), layout)?;
    let x = tape.add(slots, a)?;
    let n = norm(tape, params, x, &format!("{prefix}.ln2"))?;
    let (c, cross_weights) = multi_head(tape, params, n, memory, &format!("{prefix}.cross"), layout)?;
    let x = tape.add(x, c)?;
    let n = norm(tape, params, x, &format!("{prefix}.ln3"))?;
    let f = ffn(tape, params, n, &format!("{prefix}.ffn"))?;
    Ok(DecoderOut {
        slots: tape.add(x, f)?,
        self_weights,
        cross_weights,
    })
}

/// `h' = (1 − z)⊙h + z⊙n`: a closed update gate (z → 0) keeps the previous state.
pub fn gru_cell(
    tape: &mut Tape<'_>,
    params: &ParamStore,
    x: Var,
    h: Var,
    prefix: &str,
) -> Result<Var, NetError> {
    let hidden = tape.shape(h)[1];
    let gi = linear(tape, params, x, &format!("{prefix}.ih"))?;
    let gh = linear(tape, params, h, &format!("{prefix}.hh"))?;
    let (ir, iz, inn) = (
        tape.slice_cols(gi, 0, hidden)?,
        tape.slice_cols(gi, hidden, hidden)?,
        tape.slice_cols(gi, 2 * hidden, hidden)?,
    );
    let (hr, hz, hn) = (
        tape.slice_cols(gh, 0, hidden)?,
        tape.slice_cols(gh, hidden, hidden)?,
        tape.slice_cols(gh, 2 * hidden, hidden)?,
    );
    let r = tape.add(ir, hr)?;
    let r = tape.sigmoid(r)?;
    let z = tape.add(iz, hz)?;
    let z = tape.sigmoid(z)?;
    let rh = tape.mul(r, hn)?;
    let n = tape.add(inn, rh)?;
    let n = tape.tanh(n)?;
    let diff = tape.sub(n, h)?;
    let step = tape.mul(z, diff)?;
    Ok(tape.add(h, step)?)
}
