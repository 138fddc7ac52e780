//! Helpers shared by the integration tests and the acceptance runner:
//! finite-difference gradient cases, brute-force metric oracles and small
//! fixtures.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use streamhl::attention::{build_causal_mask, MultiHeadAttention};
use streamhl::autodiff::gradcheck::{central_difference, max_relative_error};
use streamhl::autodiff::{Reduction, Tape, Tensor, Unary, Var};
use streamhl::data::{generate_stream, SampleWindow, StreamConfig};
use streamhl::decoder::DecoderStack;
use streamhl::encoders::Encoders;
use streamhl::error::Result;
use streamhl::losses::{combined_loss, pairwise_loss, pointwise_loss, LossConfig, PairReduction, PairVariant};
use streamhl::model::{Model, ModelConfig};
use streamhl::mtam::{
    align_loss_with, draw_augmentation, dtw_on_tape, normalize_rows, similarity_matrix, similarity_on_tape, AlignmentConfig,
    DtwMode,
};
use streamhl::nn::{Bound, FeedForward, LayerNorm, Linear, ParamStore};
use streamhl::perceiver::PerceiverStack;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, per unit of `max(1, |f|)`.
/// With a step of 1e-5 the rounding noise of a central difference is about
/// `1e-11 * |f|` (up to 1e-9 once the alignment logits are scaled by
/// `1 / tau_c`), so exact-zero gradients such as key biases are compared
/// absolutely against this floor instead of relatively against noise.
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Normal draws pushed at least `gap` away from zero, for kinked ops.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    randn(rng, shape).map(|x| if x >= 0.0 { x + gap } else { x - gap })
}

/// Sums the output against fixed, uneven weights so every element matters.
fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(tape.sum(out));
    }
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).len();
    let w = Tensor::new(shape, (0..n).map(|k| 0.5 + ((k as f64 + 1.0) * 0.618_033_988_75).fract()).collect())?;
    let w = tape.constant(w);
    let weighted = tape.mul(out, w)?;
    Ok(tape.sum(weighted))
}

type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Largest relative error between tape gradients and central differences of
/// `build` with respect to every entry of every tensor in `inputs`.
pub fn gradient_error(inputs: &[Tensor], build: &Builder<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = project(&mut tape, out)?;
    let magnitude = tape.value(loss).item().abs().max(1.0);
    tape.backward(loss)?;
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| tape.grad_or_zeros(v).into_data()).collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let eval = |x: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let mut offset = 0;
        let vars: Vec<Var> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), x[offset..offset + n].to_vec()).unwrap();
                offset += n;
                tape.constant(t)
            })
            .collect();
        let out = build(&mut tape, &vars).expect("perturbed forward");
        let loss = project(&mut tape, out).expect("projection");
        tape.value(loss).item()
    };
    let numeric = central_difference(eval, &flat, FD_STEP);
    Ok(max_relative_error(&analytic, &numeric, GRAD_FLOOR * magnitude))
}

/// Gradient check for a module whose parameters live in `store`: the
/// parameters come first in the input list, followed by `extra`.
pub fn module_gradient_error(store: &ParamStore, extra: &[Tensor], build: &dyn Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>) -> Result<f64> {
    let k = store.len();
    let inputs: Vec<Tensor> = store.tensors().iter().cloned().chain(extra.iter().cloned()).collect();
    gradient_error(&inputs, &|tape, vars| {
        let p = Bound::from_vars(vars[..k].to_vec());
        build(tape, &p, &vars[k..])
    })
}

pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<f64>,
}

macro_rules! case {
    ($name:literal, $f:expr) => {
        GradCase { name: $name, run: $f }
    };
}

fn unary_case(seed: u64, kind: Unary) -> Result<f64> {
    let mut r = rng(seed);
    let x = match kind {
        Unary::Log | Unary::Sqrt => uniform(&mut r, &[3, 4], 0.2, 3.0),
        Unary::Relu => away_from_zero(&mut r, &[3, 4], 0.05),
        _ => randn(&mut r, &[3, 4]),
    };
    gradient_error(&[x], &|t, v| t.unary(kind, v[0]))
}

fn small_window(seed: u64, n: usize, raw_visual: usize, raw_text: usize, streamers: usize) -> SampleWindow {
    let config = StreamConfig {
        n_segments_per_window: n,
        raw_visual_dim: raw_visual,
        raw_text_dim: raw_text,
        n_streams: 1,
        windows_per_stream: 1,
        n_streamers: streamers,
        n_viewers: 80,
        misalignment_fraction: 0.5,
        misalignment_shift: 1,
        seed,
        ..StreamConfig::default()
    };
    generate_stream(&config).unwrap().remove(0)
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 24,
        n_heads: 2,
        head_dim: 4,
        perceiver_layers: 2,
        decoder_layers: 1,
        ff_hidden: 12,
        positional: true,
        perceiver_causal: false,
        window: 6,
        raw_visual_dim: 5,
        raw_text_dim: 4,
        n_streamers: 3,
    }
}

/// The full weighted objective on a tiny model; the augmentation is drawn
/// once so that the finite differences see the same negatives.
fn full_model_case(seed: u64) -> Result<f64> {
    let mut config = tiny_model_config();
    config.perceiver_causal = seed % 3 == 0;
    let model = Model::new(config.clone(), seed)?;
    let window = small_window(seed + 100, config.window, config.raw_visual_dim, config.raw_text_dim, config.n_streamers);
    let variants = [PairVariant::L0, PairVariant::L1, PairVariant::L2, PairVariant::L3];
    let losses = LossConfig {
        pair_variant: variants[seed as usize % 4],
        pair_reduction: if seed % 2 == 0 { PairReduction::Mean } else { PairReduction::Sum },
        ..LossConfig::default()
    };
    let alignment = AlignmentConfig {
        mode: if seed % 2 == 0 { DtwMode::Min } else { DtwMode::Max },
        negatives: 4,
        ..AlignmentConfig::default()
    };
    let aug = {
        let mut tape = Tape::new();
        let p = model.params.bind_constant(&mut tape);
        let out = model.forward(&mut tape, &p, &window)?;
        let d = similarity_matrix(tape.value(out.z), tape.value(out.v))?;
        draw_augmentation(&d.0, &alignment, &mut rng(seed))?
    };
    let y = window.targets();
    let mask = window.loss_mask();
    module_gradient_error(&model.params, &[], &|tape, p, _| {
        let out = model.forward(tape, p, &window)?;
        let point = pointwise_loss(tape, out.s, &y, &mask)?;
        let pair = pairwise_loss(tape, out.s, &y, &mask, &losses)?;
        let (align, _) = align_loss_with(tape, out.z, out.v, &aug, &alignment)?;
        Ok(combined_loss(tape, Some(point), Some(align), Some(pair.loss), &losses)?.0)
    })
}

fn pairwise_case(seed: u64, variant: PairVariant, reduction: PairReduction) -> Result<f64> {
    let mut r = rng(seed);
    let n = 8;
    let s = uniform(&mut r, &[n, 1], 0.05, 0.95);
    let y: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let mut mask = vec![true; n];
    mask[n - 1] = false;
    let config = LossConfig {
        pair_variant: variant,
        pair_reduction: reduction,
        ..LossConfig::default()
    };
    gradient_error(&[s], &|t, v| Ok(pairwise_loss(t, v[0], &y, &mask, &config)?.loss))
}

fn align_case(seed: u64, mode: DtwMode) -> Result<f64> {
    let mut r = rng(seed);
    let (z, v) = (randn(&mut r, &[5, 3]), randn(&mut r, &[5, 3]));
    let config = AlignmentConfig {
        mode,
        ..AlignmentConfig::default()
    };
    let d = similarity_matrix(&z, &v)?;
    let aug = draw_augmentation(&d.0, &config, &mut r)?;
    gradient_error(&[z, v], &|t, x| Ok(align_loss_with(t, x[0], x[1], &aug, &config)?.0))
}

/// Every differentiable operation and composite, by name.
pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        case!("matmul", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[3, 4]), randn(&mut r, &[4, 2])], &|t, v| t.matmul(v[0], v[1]))
        }),
        case!("add_broadcast_row", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[3, 4]), randn(&mut r, &[1, 4])], &|t, v| t.add(v[0], v[1]))
        }),
        case!("sub_broadcast_column", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[3, 4]), randn(&mut r, &[3, 1])], &|t, v| t.sub(v[0], v[1]))
        }),
        case!("mul", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])], &|t, v| t.mul(v[0], v[1]))
        }),
        case!("div_broadcast", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[3, 4]), uniform(&mut r, &[1, 4], 0.5, 2.0)], &|t, v| t.div(v[0], v[1]))
        }),
        case!("sigmoid", |s| unary_case(s, Unary::Sigmoid)),
        case!("exp", |s| unary_case(s, Unary::Exp)),
        case!("log", |s| unary_case(s, Unary::Log)),
        case!("relu", |s| unary_case(s, Unary::Relu)),
        case!("sqrt", |s| unary_case(s, Unary::Sqrt)),
        case!("softplus", |s| unary_case(s, Unary::Softplus)),
        case!("neg", |s| unary_case(s, Unary::Neg)),
        case!("affine", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[2, 3])], &|t, v| Ok(t.affine(v[0], -1.7, 0.3)))
        }),
        case!("reduce_sum_axis0", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[3, 4])], &|t, v| t.reduce(v[0], Reduction::Sum, Some(0)))
        }),
        case!("reduce_mean_axis1", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[3, 4])], &|t, v| t.reduce(v[0], Reduction::Mean, Some(1)))
        }),
        case!("reduce_max_axis1", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[3, 4])], &|t, v| t.reduce(v[0], Reduction::Max, Some(1)))
        }),
        case!("reduce_max_all", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[3, 4])], &|t, v| t.reduce(v[0], Reduction::Max, None))
        }),
        case!("softmax", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[3, 5])], &|t, v| t.softmax(v[0]))
        }),
        case!("masked_softmax_causal", |s| {
            let mut r = rng(s);
            let mask = build_causal_mask(4)?;
            gradient_error(&[randn(&mut r, &[4, 4])], &|t, v| t.masked_softmax(v[0], Some(&mask)))
        }),
        case!("log_softmax", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[3, 5])], &|t, v| t.log_softmax(v[0]))
        }),
        case!("concat_rows", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[2, 3]), randn(&mut r, &[4, 3])], &|t, v| t.concat(&[v[0], v[1]], 0))
        }),
        case!("concat_columns", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[3, 2]), randn(&mut r, &[3, 1])], &|t, v| t.concat(&[v[0], v[1]], 1))
        }),
        case!("transpose", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[3, 4])], &|t, v| t.transpose(v[0]))
        }),
        case!("reshape", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[3, 4])], &|t, v| t.reshape(v[0], &[2, 6]))
        }),
        case!("narrow_columns", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[3, 5])], &|t, v| t.narrow(v[0], 1, 1, 3))
        }),
        case!("gather_rows_repeated", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[4, 3])], &|t, v| t.gather_rows(v[0], &[2, 0, 2, 3, 2]))
        }),
        case!("select_sum", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[4, 4])], &|t, v| t.select_sum(v[0], &[0, 5, 6, 11, 15]))
        }),
        case!("linear", |s| {
            let mut r = rng(s);
            let mut store = ParamStore::new();
            let lin = Linear::new(&mut store, &mut r, "lin", 4, 3, 0.1);
            module_gradient_error(&store, &[randn(&mut r, &[5, 4])], &|t, p, x| lin.forward(t, p, x[0]))
        }),
        case!("layer_norm", |s| {
            let mut r = rng(s);
            let mut store = ParamStore::new();
            let ln = LayerNorm::new(&mut store, "ln", 6);
            *store.get_mut(store.find("ln.gain").unwrap()) = uniform(&mut r, &[1, 6], 0.5, 1.5);
            module_gradient_error(&store, &[randn(&mut r, &[4, 6])], &|t, p, x| ln.forward(t, p, x[0]))
        }),
        case!("feed_forward", |s| {
            let mut r = rng(s);
            let mut store = ParamStore::new();
            let ff = FeedForward::new(&mut store, &mut r, "ff", 4, 6);
            module_gradient_error(&store, &[randn(&mut r, &[3, 4])], &|t, p, x| ff.forward(t, p, x[0]))
        }),
        case!("attention_masked", |s| {
            let mut r = rng(s);
            let mut store = ParamStore::new();
            let att = MultiHeadAttention::new(&mut store, &mut r, "att", 6, 2, 3);
            let mask = build_causal_mask(4)?;
            module_gradient_error(&store, &[randn(&mut r, &[4, 6]), randn(&mut r, &[4, 6])], &|t, p, x| {
                att.forward(t, p, x[0], x[1], Some(&mask))
            })
        }),
        case!("perceiver_one_layer", |s| {
            let mut r = rng(s);
            let mut store = ParamStore::new();
            let stack = PerceiverStack::new(&mut store, &mut r, 1, 6, 2, 3, 8, s % 2 == 1)?;
            let (e, u, lat) = (randn(&mut r, &[4, 6]), randn(&mut r, &[4, 6]), randn(&mut r, &[4, 6]));
            module_gradient_error(&store, &[e, u, lat], &|t, p, x| stack.forward(t, p, x[0], x[1], x[2]))
        }),
        case!("decoder", |s| {
            let mut r = rng(s);
            let mut store = ParamStore::new();
            let dec = DecoderStack::new(&mut store, &mut r, 2, 6, 2, 3, 8)?;
            module_gradient_error(&store, &[randn(&mut r, &[5, 6])], &|t, p, x| dec.decode(t, p, x[0]))
        }),
        case!("encoders_tokens", |s| {
            let mut r = rng(s);
            let mut store = ParamStore::new();
            let enc = Encoders::new(&mut store, &mut r, 3, 2, 6, 2, 4, true)?;
            let (rv, rt) = (randn(&mut r, &[4, 3]), randn(&mut r, &[4, 2]));
            module_gradient_error(&store, &[rv, rt], &|t, p, x| {
                let v = enc.encode_visual(t, p, x[0])?;
                let z = enc.encode_text(t, p, x[1])?;
                let e = enc.assemble_tokens(t, p, v, z)?;
                let u = enc.lookup_streamer(t, p, 1, 4)?;
                let q = enc.add_positions(t, p, u)?;
                t.concat(&[e, q], 0)
            })
        }),
        case!("normalize_rows", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[4, 3])], &|t, v| normalize_rows(t, v[0]))
        }),
        case!("similarity", |s| {
            let mut r = rng(s);
            gradient_error(&[randn(&mut r, &[4, 3]), randn(&mut r, &[4, 3])], &|t, v| similarity_on_tape(t, v[0], v[1]))
        }),
        case!("dtw_min", |s| {
            let mut r = rng(s);
            gradient_error(&[uniform(&mut r, &[5, 5], -1.0, 1.0)], &|t, v| dtw_on_tape(t, v[0], DtwMode::Min))
        }),
        case!("dtw_max", |s| {
            let mut r = rng(s);
            gradient_error(&[uniform(&mut r, &[5, 5], -1.0, 1.0)], &|t, v| dtw_on_tape(t, v[0], DtwMode::Max))
        }),
        case!("align_loss_min", |s| align_case(s, DtwMode::Min)),
        case!("align_loss_max", |s| align_case(s, DtwMode::Max)),
        case!("pointwise_loss", |s| {
            let mut r = rng(s);
            let y: Vec<f64> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();
            let mask = [true, true, false, true, true, false];
            gradient_error(&[uniform(&mut r, &[6, 1], 0.05, 0.95)], &|t, v| pointwise_loss(t, v[0], &y, &mask))
        }),
        case!("pairwise_l0_mean", |s| pairwise_case(s, PairVariant::L0, PairReduction::Mean)),
        case!("pairwise_l1_mean", |s| pairwise_case(s, PairVariant::L1, PairReduction::Mean)),
        case!("pairwise_l2_sum", |s| pairwise_case(s, PairVariant::L2, PairReduction::Sum)),
        case!("pairwise_l3_sum", |s| pairwise_case(s, PairVariant::L3, PairReduction::Sum)),
        case!("full_model_objective", full_model_case),
    ]
}

/// Brute-force tau over positions with `y > delta`, by direct pair
/// classification. `None` when the window would be skipped.
pub fn tau_oracle(s: &[f64], y: &[f64], delta: f64, tau_b: bool) -> Option<f64> {
    let kept: Vec<usize> = (0..y.len()).filter(|&i| y[i] > delta).collect();
    let n = kept.len() as u64;
    if n < 2 {
        return None;
    }
    let (mut concordant, mut discordant, mut ties_s, mut ties_y) = (0i64, 0i64, 0u64, 0u64);
    for (a, &i) in kept.iter().enumerate() {
        for &j in &kept[a + 1..] {
            let (ds, dy) = (s[i] - s[j], y[i] - y[j]);
            if ds == 0.0 {
                ties_s += 1;
            }
            if dy == 0.0 {
                ties_y += 1;
            }
            if ds * dy > 0.0 {
                concordant += 1;
            } else if ds * dy < 0.0 {
                discordant += 1;
            }
        }
    }
    let total = n * (n - 1) / 2;
    if ties_y == total || ties_s == total {
        return None;
    }
    let net = (concordant - discordant) as f64;
    let value = if tau_b {
        net / ((total - ties_y) as f64 * (total - ties_s) as f64).sqrt()
    } else {
        net / total as f64
    };
    Some(value.clamp(-1.0, 1.0))
}

/// AP from the definition: each positive contributes the precision at its
/// own rank, where rank counts every item scored higher or tied with a
/// lower index.
pub fn ap_oracle(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let ahead = |r: usize, j: usize| scores[j] > scores[r] || (scores[j] == scores[r] && j < r);
    let mut contributions: Vec<(usize, f64)> = (0..scores.len())
        .filter(|&r| labels[r] != 0)
        .map(|r| {
            let rank = 1 + (0..scores.len()).filter(|&j| ahead(r, j)).count();
            let hits = 1 + (0..scores.len()).filter(|&j| labels[j] != 0 && ahead(r, j)).count();
            (rank, hits as f64 / rank as f64)
        })
        .collect();
    if contributions.is_empty() {
        return None;
    }
    contributions.sort_by_key(|c| c.0);
    let total: f64 = contributions.iter().map(|c| c.1).sum();
    Some(total / contributions.len() as f64)
}

/// Values on a coarse grid so that ties are common.
pub fn tied_vector(rng: &mut impl Rng, n: usize, levels: u32) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect()
}

pub fn configs_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Largest `|ds_i / d raw_j|` and `|s_i(perturbed j) - s_i|` over all
/// `j > i`, for one random draw of a causal-perceiver model and its input.
pub fn causal_leak(seed: u64) -> Result<(f64, f64)> {
    let config = ModelConfig {
        perceiver_causal: true,
        ..tiny_model_config()
    };
    let n = config.window;
    let model = Model::new(config.clone(), seed)?;
    let mut r = rng(seed ^ 0xfeed);
    let visual = randn(&mut r, &[n, config.raw_visual_dim]);
    let text = randn(&mut r, &[n, config.raw_text_dim]);
    let streamer = r.random_range(0..config.n_streamers);

    let mut worst_grad = 0.0f64;
    for i in 0..n {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let (rv, rt) = (tape.leaf(visual.clone()), tape.leaf(text.clone()));
        let out = model.forward_raw(&mut tape, &p, rv, rt, streamer)?;
        let si = tape.narrow(out.s, 0, i, 1)?;
        let si = tape.sum(si);
        tape.backward(si)?;
        for g in [tape.grad_or_zeros(rv), tape.grad_or_zeros(rt)] {
            for j in i + 1..n {
                worst_grad = g.row(j).iter().fold(worst_grad, |m, x| m.max(x.abs()));
            }
        }
    }

    let predict = |v: &Tensor, t: &Tensor| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = model.params.bind_constant(&mut tape);
        let (rv, rt) = (tape.constant(v.clone()), tape.constant(t.clone()));
        let out = model.forward_raw(&mut tape, &p, rv, rt, streamer)?;
        Ok(tape.value(out.s).data().to_vec())
    };
    let base = predict(&visual, &text)?;
    let mut worst_shift = 0.0f64;
    for j in 1..n {
        let (mut v, mut t) = (visual.clone(), text.clone());
        let width_v = config.raw_visual_dim;
        let width_t = config.raw_text_dim;
        for c in 0..width_v {
            v.data_mut()[j * width_v + c] += r.random_range(-2.0..2.0);
        }
        for c in 0..width_t {
            t.data_mut()[j * width_t + c] += r.random_range(-2.0..2.0);
        }
        let moved = predict(&v, &t)?;
        for i in 0..j {
            worst_shift = worst_shift.max((moved[i] - base[i]).abs());
        }
    }
    Ok((worst_grad, worst_shift))
}

/// Continuous `(s, y)` with the last position masked, so no pair sits on a
/// region border (checked by the callers).
pub fn random_scored_window(rng: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let s = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
    let y = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut mask = vec![true; n];
    mask[n - 1] = false;
    (s, y, mask)
}

/// A dataset and training config small enough for repeated short runs.
pub fn quick_setup(epochs: usize) -> (streamhl::data::Dataset, streamhl::train::TrainConfig) {
    let data = streamhl::data::generate_dataset(&StreamConfig {
        n_segments_per_window: 8,
        n_streams: 4,
        windows_per_stream: 3,
        misalignment_fraction: 0.5,
        seed: 3,
        ..StreamConfig::default()
    })
    .unwrap();
    let mut cfg = streamhl::train::TrainConfig {
        epochs,
        batch_size: 4,
        seed: 42,
        ..Default::default()
    };
    cfg.model.d_model = 16;
    cfg.model.perceiver_layers = 2;
    cfg.model.head_dim = 4;
    cfg.alignment.negatives = 3;
    cfg.fit_to(&data);
    (data, cfg)
}
