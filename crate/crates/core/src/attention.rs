//! Scaled dot-product multi-head attention shared by the perceiver and
//! decoder blocks.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_model: usize,
        n_heads: usize,
        head_dim: usize,
    ) -> Self {
        let inner = n_heads * head_dim;
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), d_model, inner, 0.0),
            key: Linear::new(store, rng, &format!("{name}.key"), d_model, inner, 0.0),
            value: Linear::new(store, rng, &format!("{name}.value"), d_model, inner, 0.0),
            output: Linear::new(store, rng, &format!("{name}.output"), inner, d_model, 0.0),
            n_heads,
            head_dim,
        }
    }

    /// `softmax(Q K^T / sqrt(d_h) + M) V` per head, heads concatenated and
    /// projected. `mask`, when given, is `[queries, keys]` over `{0, -inf}`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        queries: Var,
        keys_values: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let (nq, nk) = (tape.shape(queries)[0], tape.shape(keys_values)[0]);
        if let Some(m) = mask {
            if m.shape() != [nq, nk] {
                return Err(Error::shape("attention mask", &[nq, nk], m.shape()));
            }
        }
        let q = self.query.forward(tape, p, queries)?;
        let k = self.key.forward(tape, p, keys_values)?;
        let v = self.value.forward(tape, p, keys_values)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let start = h * self.head_dim;
            let qh = tape.narrow(q, 1, start, self.head_dim)?;
            let kh = tape.narrow(k, 1, start, self.head_dim)?;
            let vh = tape.narrow(v, 1, start, self.head_dim)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.masked_softmax(scores, mask)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        self.output.forward(tape, p, joined)
    }
}

/// Causal mask over `n` positions: `(i, j)` is 0 when `j <= i`, `-inf` otherwise.
pub fn build_causal_mask(n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Invalid("causal mask needs n >= 1".into()));
    }
    let data = (0..n * n)
        .map(|k| if k % n <= k / n { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    Tensor::new(vec![n, n], data)
}

/// Causal mask for `n` queries over `blocks` stacked copies of the same `n`
/// time steps, shape `[n, blocks * n]`.
pub fn build_block_causal_mask(n: usize, blocks: usize) -> Result<Tensor> {
    let base = build_causal_mask(n)?;
    let mut data = Vec::with_capacity(n * n * blocks);
    for i in 0..n {
        for _ in 0..blocks {
            data.extend_from_slice(base.row(i));
        }
    }
    Tensor::new(vec![n, n * blocks], data)
}
