//! Causal self-attention decoder and the sigmoid LVTR head.

use rand::Rng;

use crate::attention::MultiHeadAttention;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, FeedForward, LayerNorm, Linear, ParamStore};

pub use crate::attention::build_causal_mask;

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub norm_attn: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

impl DecoderStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        head_dim: usize,
        ff_hidden: usize,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let layers = (0..n_layers)
            .map(|l| {
                let name = format!("decoder.{l}");
                DecoderLayer {
                    norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d_model),
                    attention: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d_model, n_heads, head_dim),
                    norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d_model),
                    ff: FeedForward::new(store, rng, &format!("{name}.ff"), d_model, ff_hidden),
                }
            })
            .collect();
        Ok(Self {
            layers,
            final_norm: LayerNorm::new(store, "decoder.final_norm", d_model),
            head: Linear::new(store, rng, "decoder.head", d_model, 1, 0.0),
        })
    }

    /// Per-position head logits, shape `[n, 1]`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, latent: Var) -> Result<Var> {
        let shape = tape.shape(latent);
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "decoder expects [n, d]".into(),
            });
        }
        let mask = build_causal_mask(shape[0])?;
        let mut x = latent;
        for layer in &self.layers {
            let h = layer.norm_attn.forward(tape, p, x)?;
            let a = layer.attention.forward(tape, p, h, h, Some(&mask))?;
            x = tape.add(x, a)?;
            let f = layer.norm_ff.forward(tape, p, x)?;
            let f = layer.ff.forward(tape, p, f)?;
            x = tape.add(x, f)?;
        }
        let x = self.final_norm.forward(tape, p, x)?;
        self.head.forward(tape, p, x)
    }

    /// Predicted LVTR `s`, shape `[n, 1]`, each entry in `(0, 1)`.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, latent: Var) -> Result<Var> {
        let logits = self.logits(tape, p, latent)?;
        tape.sigmoid(logits)
    }
}
