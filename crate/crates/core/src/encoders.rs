//! Trainable stand-ins for the visual and text feature extractors, the
//! streamer id table, positional rows, and token assembly.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore};

/// Encoder biases start slightly positive so fresh relu rows are not all zero.
pub const ENCODER_BIAS_INIT: f64 = 0.1;

/// Starting value of the learned positional table: the usual interleaved
/// sine/cosine rows, so distinct positions are far apart from step zero.
pub fn sinusoidal_table(rows: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * width);
    for pos in 0..rows {
        for c in 0..width {
            let freq = 10_000f64.powf(-((c / 2 * 2) as f64) / width as f64);
            let angle = pos as f64 * freq;
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![rows, width], data).expect("positive dims")
}

#[derive(Clone, Copy, Debug)]
pub struct Encoders {
    pub visual: Linear,
    pub text: Linear,
    pub streamer_table: ParamId,
    pub positions: Option<ParamId>,
    pub n_streamers: usize,
    pub d_model: usize,
}

impl Encoders {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        raw_visual_dim: usize,
        raw_text_dim: usize,
        d_model: usize,
        n_streamers: usize,
        window: usize,
        positional: bool,
    ) -> Result<Self> {
        if d_model % 2 != 0 || d_model == 0 {
            return Err(Error::Config(format!("d_model must be even, got {d_model}")));
        }
        let half = d_model / 2;
        let visual = Linear::new(store, rng, "encoder.visual", raw_visual_dim, half, ENCODER_BIAS_INIT);
        let text = Linear::new(store, rng, "encoder.text", raw_text_dim, half, ENCODER_BIAS_INIT);
        let mut uniform_table = |rows: usize, scale: f64| {
            let data = (0..rows * d_model).map(|_| rng.random_range(-scale..scale)).collect();
            Tensor::new(vec![rows, d_model], data).expect("positive dims")
        };
        let table = uniform_table(n_streamers, 0.5);
        let pos_table = sinusoidal_table(window, d_model);
        let streamer_table = store.add("encoder.streamer_table", table);
        let positions = positional.then(|| store.add("encoder.positions", pos_table));
        Ok(Self {
            visual,
            text,
            streamer_table,
            positions,
            n_streamers,
            d_model,
        })
    }

    /// `v = relu(raw W + b)`, one row per segment.
    pub fn encode_visual(&self, tape: &mut Tape, p: &Bound, raw: Var) -> Result<Var> {
        let h = self.visual.forward(tape, p, raw)?;
        tape.relu(h)
    }

    pub fn encode_text(&self, tape: &mut Tape, p: &Bound, raw: Var) -> Result<Var> {
        let h = self.text.forward(tape, p, raw)?;
        tape.relu(h)
    }

    /// Row `i` is `[v_i ; z_i]`, plus the positional row when enabled.
    pub fn assemble_tokens(&self, tape: &mut Tape, p: &Bound, v: Var, z: Var) -> Result<Var> {
        let e = tape.concat(&[v, z], 1)?;
        self.add_positions(tape, p, e)
    }

    pub fn add_positions(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match self.positions {
            None => Ok(x),
            Some(pos) => {
                let n = tape.shape(x)[0];
                let rows = tape.shape(p[pos])[0];
                if n != rows {
                    return Err(Error::shape("positions", tape.shape(x), tape.shape(p[pos])));
                }
                tape.add(x, p[pos])
            }
        }
    }

    /// The streamer's embedding row repeated `repeat` times, shape `[repeat, d]`.
    pub fn lookup_streamer(&self, tape: &mut Tape, p: &Bound, id: usize, repeat: usize) -> Result<Var> {
        if id >= self.n_streamers {
            return Err(Error::IndexOutOfRange {
                what: "streamer id",
                index: id,
                len: self.n_streamers,
            });
        }
        tape.gather_rows(p[self.streamer_table], &vec![id; repeat])
    }
}
