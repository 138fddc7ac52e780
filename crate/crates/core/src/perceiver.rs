//! Streamer-conditioned perceiver blocks.
//!
//! The latent queries are `n` copies of the streamer embedding `u` (plus the
//! positional rows when enabled); keys and values are the `2n` stacked rows
//! `[e ; n x u]`. Each block is pre-norm cross-attention followed by a
//! pre-norm feed-forward, both residual around the latent stream. Every
//! block attends to the same `[e ; n x u]`, so the output keeps shape `[n, d]`.

use rand::Rng;

use crate::attention::build_block_causal_mask;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, FeedForward, LayerNorm, ParamStore};

pub use crate::attention::MultiHeadAttention;

#[derive(Clone, Copy, Debug)]
pub struct PerceiverLayer {
    pub norm_query: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl PerceiverLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_model: usize,
        n_heads: usize,
        head_dim: usize,
        ff_hidden: usize,
    ) -> Self {
        Self {
            norm_query: LayerNorm::new(store, &format!("{name}.norm_query"), d_model),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), d_model),
            attention: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d_model, n_heads, head_dim),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d_model),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d_model, ff_hidden),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        latent: Var,
        keys_values: Var,
        mask: Option<&crate::autodiff::Tensor>,
    ) -> Result<Var> {
        let q = self.norm_query.forward(tape, p, latent)?;
        let kv = self.norm_kv.forward(tape, p, keys_values)?;
        let attended = self.attention.forward(tape, p, q, kv, mask)?;
        let h = tape.add(latent, attended)?;
        let f = self.norm_ff.forward(tape, p, h)?;
        let f = self.ff.forward(tape, p, f)?;
        tape.add(h, f)
    }
}

#[derive(Clone, Debug)]
pub struct PerceiverStack {
    pub layers: Vec<PerceiverLayer>,
    /// Restrict latent step `i` to time steps `<= i` of both halves of the keys.
    pub causal: bool,
}

impl PerceiverStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        head_dim: usize,
        ff_hidden: usize,
        causal: bool,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("perceiver needs at least one layer".into()));
        }
        let layers = (0..n_layers)
            .map(|l| PerceiverLayer::new(store, rng, &format!("perceiver.{l}"), d_model, n_heads, head_dim, ff_hidden))
            .collect();
        Ok(Self { layers, causal })
    }

    /// `tokens` is `e` and `streamer` is `n x u`, both `[n, d]`; `latent` is
    /// the initial query, `n x u` optionally with positions added.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, tokens: Var, streamer: Var, latent: Var) -> Result<Var> {
        let (te, ts, tl) = (tape.shape(tokens), tape.shape(streamer), tape.shape(latent));
        if te != ts || te != tl || te.len() != 2 {
            return Err(Error::shape("perceiver", te, ts));
        }
        let n = te[0];
        let kv = tape.concat(&[tokens, streamer], 0)?;
        let mask = if self.causal {
            Some(build_block_causal_mask(n, 2)?)
        } else {
            None
        };
        let mut x = latent;
        for layer in &self.layers {
            x = layer.forward(tape, p, x, kv, mask.as_ref())?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer_norm_rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows())
            .map(|r| {
                let row = t.row(r);
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
                row.iter()
                    .map(|v| (v - mean) / (var + crate::nn::LAYER_NORM_EPS).sqrt())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn uniform_scores_average_the_values() {
        let (n, d) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let stack = PerceiverStack::new(&mut store, &mut rng, 1, d, 1, d, 8, false).unwrap();
        let layer = stack.layers[0];
        let att = layer.attention;
        for lin in [att.query, att.value, att.output] {
            *store.get_mut(lin.weight) = Tensor::identity(d);
        }
        // Zero key projection: every key is the same vector.
        *store.get_mut(att.key.weight) = Tensor::zeros(&[d, d]);
        *store.get_mut(layer.ff.down.weight) = Tensor::zeros(&[8, d]);

        let e = Tensor::new(vec![n, d], (0..n * d).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let u = Tensor::new(vec![n, d], [0.2, -0.4, 1.0, 0.3].repeat(n)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let ev = tape.constant(e.clone());
        let uv = tape.constant(u.clone());
        let out = stack.forward(&mut tape, &p, ev, uv, uv).unwrap();
        assert_eq!(tape.shape(out), &[n, d]);

        let mut kv_rows: Vec<Vec<f64>> = (0..n).map(|r| e.row(r).to_vec()).collect();
        kv_rows.extend((0..n).map(|r| u.row(r).to_vec()));
        let normed = layer_norm_rows(&Tensor::from_rows(&kv_rows).unwrap());
        let mean: Vec<f64> = (0..d).map(|c| normed.iter().map(|r| r[c]).sum::<f64>() / (2 * n) as f64).collect();
        for i in 0..n {
            for c in 0..d {
                let want = u.row(i)[c] + mean[c];
                assert!((tape.value(out).row(i)[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stacking_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let stack = PerceiverStack::new(&mut store, &mut rng, 3, 8, 2, 4, 16, true).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let e = tape.constant(Tensor::full(&[5, 8], 0.3));
        let u = tape.constant(Tensor::new(vec![5, 8], (0..40).map(|i| (i % 8) as f64).collect()).unwrap());
        let out = stack.forward(&mut tape, &p, e, u, u).unwrap();
        assert_eq!(tape.shape(out), &[5, 8]);
        let short = tape.constant(Tensor::zeros(&[4, 8]));
        assert!(stack.forward(&mut tape, &p, e, short, u).is_err());
        assert!(PerceiverStack::new(&mut store, &mut rng, 0, 8, 2, 4, 16, true).is_err());
    }
}
