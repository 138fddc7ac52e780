//! The full highlight model: encoders, streamer-conditioned perceiver stack
//! and causal decoder, plus the per-window training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::SampleWindow;
use crate::decoder::DecoderStack;
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::losses::{combined_loss, pairwise_loss, pointwise_loss, LossComponents, LossConfig};
use crate::mtam::{align_loss, AlignmentConfig};
use crate::nn::{Bound, ParamStore};
use crate::perceiver::PerceiverStack;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub perceiver_layers: usize,
    pub decoder_layers: usize,
    /// Feed-forward hidden width; 0 means `4 * d_model`.
    pub ff_hidden: usize,
    pub positional: bool,
    pub perceiver_causal: bool,
    pub window: usize,
    pub raw_visual_dim: usize,
    pub raw_text_dim: usize,
    pub n_streamers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            head_dim: 8,
            perceiver_layers: 3,
            decoder_layers: 1,
            ff_hidden: 0,
            positional: true,
            perceiver_causal: false,
            window: 20,
            raw_visual_dim: 16,
            raw_text_dim: 12,
            n_streamers: 4,
        }
    }
}

impl ModelConfig {
    pub fn ff_width(&self) -> usize {
        if self.ff_hidden == 0 {
            4 * self.d_model
        } else {
            self.ff_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("perceiver_layers", self.perceiver_layers),
            ("decoder_layers", self.decoder_layers),
            ("window", self.window),
            ("raw_visual_dim", self.raw_visual_dim),
            ("raw_text_dim", self.raw_text_dim),
            ("n_streamers", self.n_streamers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config(format!("d_model must be even, got {}", self.d_model)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoders: Encoders,
    pub perceiver: PerceiverStack,
    pub decoder: DecoderStack,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Predictions, `[n, 1]`.
    pub s: Var,
    /// Visual encoder output, `[n, d/2]`.
    pub v: Var,
    /// Text encoder output, `[n, d/2]`.
    pub z: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct WindowLoss {
    pub loss: Var,
    pub forward: Forward,
    pub components: LossComponents,
    pub histogram: [usize; 3],
    pub pairs_included: usize,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let c = &config;
        let encoders = Encoders::new(
            &mut params,
            rng,
            c.raw_visual_dim,
            c.raw_text_dim,
            c.d_model,
            c.n_streamers,
            c.window,
            c.positional,
        )?;
        let perceiver = PerceiverStack::new(
            &mut params,
            rng,
            c.perceiver_layers,
            c.d_model,
            c.n_heads,
            c.head_dim,
            c.ff_width(),
            c.perceiver_causal,
        )?;
        let decoder = DecoderStack::new(&mut params, rng, c.decoder_layers, c.d_model, c.n_heads, c.head_dim, c.ff_width())?;
        Ok(Self {
            config,
            params,
            encoders,
            perceiver,
            decoder,
        })
    }

    /// Forward pass from raw feature handles, `[n, raw_visual_dim]` and `[n, raw_text_dim]`.
    pub fn forward_raw(&self, tape: &mut Tape, p: &Bound, raw_visual: Var, raw_text: Var, streamer_id: usize) -> Result<Forward> {
        let n = tape.shape(raw_visual)[0];
        if n != self.config.window {
            return Err(Error::shape("model input", &[self.config.window], &[n]));
        }
        let v = self.encoders.encode_visual(tape, p, raw_visual)?;
        let z = self.encoders.encode_text(tape, p, raw_text)?;
        let e = self.encoders.assemble_tokens(tape, p, v, z)?;
        let u = self.encoders.lookup_streamer(tape, p, streamer_id, n)?;
        let latent = self.encoders.add_positions(tape, p, u)?;
        let h = self.perceiver.forward(tape, p, e, u, latent)?;
        let s = self.decoder.decode(tape, p, h)?;
        Ok(Forward { s, v, z })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, window: &SampleWindow) -> Result<Forward> {
        let rv = tape.constant(window.visual_matrix());
        let rt = tape.constant(window.text_matrix());
        self.forward_raw(tape, p, rv, rt, window.streamer_id)
    }

    /// Predictions only, without keeping gradients.
    pub fn predict(&self, window: &SampleWindow) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let out = self.forward(&mut tape, &p, window)?;
        Ok(tape.value(out.s).data().to_vec())
    }

    /// The weighted objective on one window. The alignment term is only
    /// built (and `rng` only consumed) when its weight is positive.
    pub fn window_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        window: &SampleWindow,
        losses: &LossConfig,
        alignment: &AlignmentConfig,
        rng: &mut impl Rng,
    ) -> Result<WindowLoss> {
        let out = self.forward(tape, p, window)?;
        objective(tape, &out, window, losses, alignment, rng)
    }
}

/// Builds the objective on top of an existing forward pass.
pub fn objective(
    tape: &mut Tape,
    out: &Forward,
    window: &SampleWindow,
    losses: &LossConfig,
    alignment: &AlignmentConfig,
    rng: &mut impl Rng,
) -> Result<WindowLoss> {
    let mask = window.loss_mask();
    let y = window.targets();
    let point = pointwise_loss(tape, out.s, &y, &mask)?;
    let pair = pairwise_loss(tape, out.s, &y, &mask, losses)?;
    let align = if losses.lambda_align > 0.0 {
        Some(align_loss(tape, out.z, out.v, alignment, rng)?.0)
    } else {
        None
    };
    let (loss, components) = combined_loss(tape, Some(point), align, Some(pair.loss), losses)?;
    Ok(WindowLoss {
        loss,
        forward: *out,
        components,
        histogram: pair.histogram,
        pairs_included: pair.included,
    })
}
