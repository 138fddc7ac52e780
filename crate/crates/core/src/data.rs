//! Synthetic live-stream windows with LVTR labels.
//!
//! Each stream carries a latent quality process `q` (a smooth AR(1) base
//! plus occasional bursts). Visual and text features are noisy linear
//! read-outs of `q` and a drifting content state, offset by a per-streamer
//! signature. Labels simulate `n_viewers` impressions per segment: viewer
//! `k` watches `mu(q) * E_k` seconds with `E_k ~ Exp(1)`, where
//! `mu(q) = base_mean * exp(gain * (q - 0.5) + streamer_bias)`. The LVTR is
//! the fraction watching longer than the threshold, so
//! `P(long view | q) = exp(-threshold / mu(q))`.
//!
//! Emitted windows have their labels left-shifted: target `i` is the LVTR
//! of segment `i + 1`, and the last position is excluded from every loss.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::KeyValues;
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "streamhl-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Viewer watch-time law.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WatchModel {
    /// `mu(q) * Exp(1)` seconds.
    Exponential,
    /// Every viewer watches exactly `watch_constant_seconds`.
    Constant,
}

impl std::str::FromStr for WatchModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exponential" => Ok(WatchModel::Exponential),
            "constant" => Ok(WatchModel::Constant),
            _ => Err(format!("unknown watch model {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub n_segments_per_window: usize,
    pub raw_visual_dim: usize,
    pub raw_text_dim: usize,
    pub n_viewers: usize,
    pub long_view_threshold_seconds: f64,
    pub segment_seconds: f64,
    pub misalignment_shift: i64,
    pub misalignment_fraction: f64,
    pub highlight_base_rate: f64,
    pub seed: u64,
    pub n_streams: usize,
    /// Index of the first generated stream. Splits that share a seed but
    /// not streams share feature read-outs and streamer profiles.
    #[serde(default)]
    pub first_stream: usize,
    pub windows_per_stream: usize,
    pub n_streamers: usize,
    pub content_dim: usize,
    pub feature_noise: f64,
    pub signature_scale: f64,
    pub streamer_bias_scale: f64,
    pub burst_threshold: f64,
    pub watch_model: WatchModel,
    pub watch_base_mean_seconds: f64,
    pub watch_quality_gain: f64,
    pub watch_constant_seconds: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            n_segments_per_window: 20,
            raw_visual_dim: 16,
            raw_text_dim: 12,
            n_viewers: 400,
            long_view_threshold_seconds: 60.0,
            segment_seconds: 30.0,
            misalignment_shift: 2,
            misalignment_fraction: 0.0,
            highlight_base_rate: 0.08,
            seed: 0,
            n_streams: 16,
            first_stream: 0,
            windows_per_stream: 4,
            n_streamers: 4,
            content_dim: 4,
            feature_noise: 0.1,
            signature_scale: 0.5,
            streamer_bias_scale: 0.3,
            burst_threshold: 0.75,
            watch_model: WatchModel::Exponential,
            watch_base_mean_seconds: 60.0,
            watch_quality_gain: 3.0,
            watch_constant_seconds: 0.0,
        }
    }
}

impl StreamConfig {
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut c = Self::default();
        kv.take("n_segments_per_window", &mut c.n_segments_per_window)?;
        kv.take("raw_visual_dim", &mut c.raw_visual_dim)?;
        kv.take("raw_text_dim", &mut c.raw_text_dim)?;
        kv.take("n_viewers", &mut c.n_viewers)?;
        kv.take("long_view_threshold_seconds", &mut c.long_view_threshold_seconds)?;
        kv.take("segment_seconds", &mut c.segment_seconds)?;
        kv.take("misalignment_shift", &mut c.misalignment_shift)?;
        kv.take("misalignment_fraction", &mut c.misalignment_fraction)?;
        kv.take("highlight_base_rate", &mut c.highlight_base_rate)?;
        kv.take("seed", &mut c.seed)?;
        kv.take("n_streams", &mut c.n_streams)?;
        kv.take("first_stream", &mut c.first_stream)?;
        kv.take("windows_per_stream", &mut c.windows_per_stream)?;
        kv.take("n_streamers", &mut c.n_streamers)?;
        kv.take("content_dim", &mut c.content_dim)?;
        kv.take("feature_noise", &mut c.feature_noise)?;
        kv.take("signature_scale", &mut c.signature_scale)?;
        kv.take("streamer_bias_scale", &mut c.streamer_bias_scale)?;
        kv.take("burst_threshold", &mut c.burst_threshold)?;
        kv.take("watch_model", &mut c.watch_model)?;
        kv.take("watch_base_mean_seconds", &mut c.watch_base_mean_seconds)?;
        kv.take("watch_quality_gain", &mut c.watch_quality_gain)?;
        kv.take("watch_constant_seconds", &mut c.watch_constant_seconds)?;
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let c = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let counts = [
            self.n_segments_per_window,
            self.raw_visual_dim,
            self.raw_text_dim,
            self.n_streams,
            self.windows_per_stream,
            self.n_streamers,
            self.content_dim,
        ];
        if counts.contains(&0) {
            return bad("counts must be positive");
        }
        if self.n_segments_per_window < 2 {
            return bad("windows need at least 2 segments");
        }
        if self.n_viewers < 60 {
            return bad("n_viewers must be at least 60");
        }
        for p in [self.misalignment_fraction, self.highlight_base_rate, self.burst_threshold] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.misalignment_shift.unsigned_abs() as usize >= self.n_segments_per_window {
            return bad("|misalignment_shift| must be below n_segments_per_window");
        }
        if !(self.long_view_threshold_seconds >= 0.0 && self.segment_seconds > 0.0) {
            return bad("durations must be non-negative");
        }
        if !(self.watch_base_mean_seconds > 0.0) || self.watch_constant_seconds < 0.0 {
            return bad("watch-time parameters out of range");
        }
        Ok(())
    }

    /// Mean watch time for quality `q` and streamer offset `bias`.
    pub fn mean_watch_seconds(&self, q: f64, bias: f64) -> f64 {
        self.watch_base_mean_seconds * (self.watch_quality_gain * (q - 0.5) + bias).exp()
    }

    /// Closed-form probability that one impression is a long view.
    pub fn long_view_probability(&self, q: f64, bias: f64) -> f64 {
        let t = self.long_view_threshold_seconds;
        match self.watch_model {
            WatchModel::Exponential => (-t / self.mean_watch_seconds(q, bias)).exp(),
            WatchModel::Constant => f64::from(u8::from(self.watch_constant_seconds > t)),
        }
    }

    /// LVTR from unit-exponential viewer draws (common random numbers: the
    /// draws do not depend on `q`, so the result is monotone in `q`).
    pub fn lvtr(&self, q: f64, bias: f64, unit_draws: &[f64]) -> f64 {
        let t = self.long_view_threshold_seconds;
        let long = match self.watch_model {
            WatchModel::Exponential => {
                let mu = self.mean_watch_seconds(q, bias);
                unit_draws.iter().filter(|&&e| mu * e > t).count()
            }
            WatchModel::Constant => {
                if self.watch_constant_seconds > t {
                    unit_draws.len()
                } else {
                    0
                }
            }
        };
        long as f64 / unit_draws.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub raw_visual: Vec<f64>,
    pub raw_text: Vec<f64>,
    pub q: f64,
    pub y: f64,
    pub y_binary: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    pub stream_id: usize,
    pub streamer_id: usize,
    pub segments: Vec<Segment>,
    pub label_shift_applied: bool,
}

impl SampleWindow {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Positions whose target is known. The final position is dropped once
    /// labels have been shifted.
    pub fn loss_mask(&self) -> Vec<bool> {
        let n = self.len();
        (0..n)
            .map(|i| !(self.label_shift_applied && i + 1 == n))
            .collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.y).collect()
    }

    pub fn binary_targets(&self) -> Vec<u8> {
        self.segments.iter().map(|s| s.y_binary).collect()
    }

    pub fn visual_matrix(&self) -> Tensor {
        Tensor::from_rows(&self.segments.iter().map(|s| &s.raw_visual[..]).collect::<Vec<_>>())
            .expect("segments share a visual width")
    }

    pub fn text_matrix(&self) -> Tensor {
        Tensor::from_rows(&self.segments.iter().map(|s| &s.raw_text[..]).collect::<Vec<_>>())
            .expect("segments share a text width")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: StreamConfig,
    pub windows: Vec<SampleWindow>,
}

/// Rounds to 9 significant digits, the precision of the dataset file.
pub fn quantize(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Streamer {
    visual_signature: Vec<f64>,
    text_signature: Vec<f64>,
    bias: f64,
}

fn streamer_profile(config: &StreamConfig, id: usize) -> Streamer {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream((1u64 << 40) | id as u64);
    let mut sig = |n: usize| (0..n).map(|_| config.signature_scale * normal(&mut rng)).collect::<Vec<_>>();
    let visual_signature = sig(config.raw_visual_dim);
    let text_signature = sig(config.raw_text_dim);
    let bias = config.streamer_bias_scale * normal(&mut rng);
    Streamer {
        visual_signature,
        text_signature,
        bias,
    }
}

/// Feature read-out matrices shared by every stream, `[out, 1 + content_dim]`.
fn readouts(config: &StreamConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let width = 1 + config.content_dim;
    let mut mat = |rows: usize| {
        (0..rows)
            .map(|_| {
                (0..width)
                    .map(|c| if c == 0 { 3.0 } else { 1.0 } * normal(&mut rng))
                    .collect()
            })
            .collect::<Vec<Vec<f64>>>()
    };
    let v = mat(config.raw_visual_dim);
    let t = mat(config.raw_text_dim);
    (v, t)
}

const BASE_PERSISTENCE: f64 = 0.85;
const CONTENT_PERSISTENCE: f64 = 0.7;

fn generate_one_stream(
    config: &StreamConfig,
    stream_id: usize,
    visual_readout: &[Vec<f64>],
    text_readout: &[Vec<f64>],
) -> Result<Vec<SampleWindow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream_id as u64 + 1);
    let streamer_id = stream_id % config.n_streamers;
    let profile = streamer_profile(config, streamer_id);
    let n = config.n_segments_per_window;
    let total = n * config.windows_per_stream;

    let innov = |rho: f64| (1.0 - rho * rho).sqrt();
    let mut base = normal(&mut rng);
    let mut content: Vec<f64> = (0..config.content_dim).map(|_| normal(&mut rng)).collect();
    let mut burst_left = 0usize;
    let mut burst_amp = 0.0;
    let mut draws = vec![0.0; config.n_viewers];
    let mut segments = Vec::with_capacity(total);
    for t in 0..total {
        if t > 0 {
            base = BASE_PERSISTENCE * base + innov(BASE_PERSISTENCE) * normal(&mut rng);
            for c in content.iter_mut() {
                *c = CONTENT_PERSISTENCE * *c + innov(CONTENT_PERSISTENCE) * normal(&mut rng);
            }
        }
        if burst_left == 0 && rng.random::<f64>() < config.highlight_base_rate {
            burst_left = rng.random_range(2..=4);
            burst_amp = rng.random_range(1.5..3.0);
        }
        let burst = if burst_left > 0 {
            burst_left -= 1;
            burst_amp
        } else {
            0.0
        };
        let q = quantize(logistic(1.2 * base + burst - 0.8));

        let mut state = Vec::with_capacity(1 + config.content_dim);
        state.push(q);
        state.extend_from_slice(&content);
        let mut read = |readout: &[Vec<f64>], signature: &[f64]| {
            readout
                .iter()
                .zip(signature)
                .map(|(row, s)| {
                    let clean: f64 = row.iter().zip(&state).map(|(w, h)| w * h).sum();
                    quantize(clean + s + config.feature_noise * normal(&mut rng))
                })
                .collect::<Vec<f64>>()
        };
        let raw_visual = read(visual_readout, &profile.visual_signature);
        let raw_text = read(text_readout, &profile.text_signature);

        for d in draws.iter_mut() {
            *d = rng.sample(Exp1);
        }
        let y = quantize(config.lvtr(q, profile.bias, &draws));
        segments.push(Segment {
            raw_visual,
            raw_text,
            q,
            y,
            y_binary: u8::from(q > config.burst_threshold),
        });
    }

    let mut windows = Vec::with_capacity(config.windows_per_stream);
    for chunk in segments.chunks(n) {
        let mut w = SampleWindow {
            stream_id,
            streamer_id,
            segments: chunk.to_vec(),
            label_shift_applied: false,
        };
        if rng.random::<f64>() < config.misalignment_fraction {
            w = inject_misalignment(&w, config.misalignment_shift)?;
        }
        windows.push(left_shift_labels(&w)?);
    }
    Ok(windows)
}

/// Generates every window of every stream. Streams are independent given
/// the master seed and are generated in parallel.
pub fn generate_stream(config: &StreamConfig) -> Result<Vec<SampleWindow>> {
    config.validate()?;
    let (vr, tr) = readouts(config);
    let per_stream: Vec<Vec<SampleWindow>> = (config.first_stream..config.first_stream + config.n_streams)
        .into_par_iter()
        .map(|s| generate_one_stream(config, s, &vr, &tr))
        .collect::<Result<_>>()?;
    Ok(per_stream.into_iter().flatten().collect())
}

pub fn generate_dataset(config: &StreamConfig) -> Result<Dataset> {
    Ok(Dataset {
        config: config.clone(),
        windows: generate_stream(config)?,
    })
}

/// Delays (positive `shift`) or advances the text sequence; positions that
/// would read outside the window repeat the edge segment.
pub fn inject_misalignment(window: &SampleWindow, shift: i64) -> Result<SampleWindow> {
    let n = window.len() as i64;
    if shift.abs() >= n {
        return Err(Error::Invalid(format!(
            "misalignment shift {shift} out of range for window of {n}"
        )));
    }
    let mut out = window.clone();
    for (i, seg) in out.segments.iter_mut().enumerate() {
        let src = (i as i64 - shift).clamp(0, n - 1) as usize;
        seg.raw_text = window.segments[src].raw_text.clone();
    }
    Ok(out)
}

pub fn left_shift_labels(window: &SampleWindow) -> Result<SampleWindow> {
    if window.label_shift_applied {
        return Err(Error::Invalid("labels already left-shifted".into()));
    }
    let mut out = window.clone();
    for i in 0..window.len().saturating_sub(1) {
        out.segments[i].y = window.segments[i + 1].y;
        out.segments[i].y_binary = window.segments[i + 1].y_binary;
    }
    out.label_shift_applied = true;
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    n_windows: usize,
    config: StreamConfig,
}

#[derive(Deserialize)]
struct Record {
    stream_id: usize,
    streamer_id: usize,
    label_shift_applied: bool,
    q: Vec<f64>,
    y: Vec<f64>,
    y_binary: Vec<u8>,
    raw_visual: Vec<Vec<f64>>,
    raw_text: Vec<Vec<f64>>,
}

fn write_reals(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!("{x:.8e}"));
    }
    out.push(']');
}

fn record_line(w: &SampleWindow) -> String {
    let mut s = format!(
        "{{\"stream_id\":{},\"streamer_id\":{},\"label_shift_applied\":{},\"q\":",
        w.stream_id, w.streamer_id, w.label_shift_applied
    );
    let col = |f: fn(&Segment) -> f64| w.segments.iter().map(f).collect::<Vec<_>>();
    write_reals(&mut s, &col(|g| g.q));
    s.push_str(",\"y\":");
    write_reals(&mut s, &col(|g| g.y));
    s.push_str(",\"y_binary\":[");
    let bins: Vec<String> = w.segments.iter().map(|g| g.y_binary.to_string()).collect();
    s.push_str(&bins.join(","));
    s.push_str("],\"raw_visual\":[");
    for (i, g) in w.segments.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write_reals(&mut s, &g.raw_visual);
    }
    s.push_str("],\"raw_text\":[");
    for (i, g) in w.segments.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write_reals(&mut s, &g.raw_text);
    }
    s.push_str("]}");
    s
}

/// JSON-lines file: one header object, then one object per window.
pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        n_windows: dataset.windows.len(),
        config: dataset.config.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).map_err(|e| Error::Invalid(e.to_string()))?)?;
    for w in &dataset.windows {
        writeln!(out, "{}", record_line(w))?;
    }
    out.flush()?;
    Ok(())
}

fn check_record(rec: Record, config: &StreamConfig) -> std::result::Result<SampleWindow, String> {
    let n = config.n_segments_per_window;
    let lens = [
        rec.q.len(),
        rec.y.len(),
        rec.y_binary.len(),
        rec.raw_visual.len(),
        rec.raw_text.len(),
    ];
    if lens.iter().any(|&l| l != n) {
        return Err(format!("expected {n} segments, got field lengths {lens:?}"));
    }
    if rec.streamer_id >= config.n_streamers {
        return Err(format!("streamer_id {} out of range", rec.streamer_id));
    }
    let mut segments = Vec::with_capacity(n);
    for i in 0..n {
        let (v, t) = (&rec.raw_visual[i], &rec.raw_text[i]);
        if v.len() != config.raw_visual_dim || t.len() != config.raw_text_dim {
            return Err(format!("segment {i}: feature width mismatch"));
        }
        if !(0.0..=1.0).contains(&rec.y[i]) || rec.y_binary[i] > 1 {
            return Err(format!("segment {i}: label out of range"));
        }
        segments.push(Segment {
            raw_visual: v.clone(),
            raw_text: t.clone(),
            q: rec.q[i],
            y: rec.y[i],
            y_binary: rec.y_binary[i],
        });
    }
    Ok(SampleWindow {
        stream_id: rec.stream_id,
        streamer_id: rec.streamer_id,
        segments,
        label_shift_applied: rec.label_shift_applied,
    })
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        message: format!("header: {e}"),
    })?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported format {} v{}", header.format, header.version),
        });
    }
    header.config.validate()?;
    let mut windows = Vec::with_capacity(header.n_windows);
    for (k, line) in lines.enumerate() {
        let line = line?;
        let line_no = k + 2;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: format!("record {k}: {e}"),
        })?;
        windows.push(check_record(rec, &header.config).map_err(|m| Error::Parse {
            line: line_no,
            message: format!("record {k}: {m}"),
        })?);
    }
    if windows.len() != header.n_windows {
        return Err(Error::Parse {
            line: windows.len() + 2,
            message: format!(
                "record {}: missing (header declares {} records)",
                windows.len(),
                header.n_windows
            ),
        });
    }
    Ok(Dataset {
        config: header.config,
        windows,
    })
}
