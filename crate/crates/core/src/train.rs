//! Training configuration, the epoch loop, evaluation and checkpoint state.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::{rng_from_tensor, rng_to_tensor, Checkpoint};
use crate::config::KeyValues;
use crate::data::{Dataset, SampleWindow};
use crate::error::{Error, Result};
use crate::losses::{LossComponents, LossConfig};
use crate::metrics::{mean_ap, rows_to_csv, tau_report, APReport, MetricsRow, TauReport, TauVariant, DEFAULT_DELTAS};
use crate::model::{Model, ModelConfig};
use crate::mtam::AlignmentConfig;
use crate::optim::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub alignment: AlignmentConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate every this many epochs (the final epoch is always evaluated).
    pub eval_every: usize,
    /// Write a numbered checkpoint every this many epochs; 0 keeps only the last.
    pub checkpoint_every: usize,
    pub deltas: Vec<f64>,
    pub tau_variant: TauVariant,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            losses: LossConfig::default(),
            alignment: AlignmentConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 8,
            epochs: 50,
            seed: 0,
            eval_every: 1,
            checkpoint_every: 0,
            deltas: DEFAULT_DELTAS.to_vec(),
            tau_variant: TauVariant::B,
            train_data: None,
            eval_data: None,
        }
    }
}

pub fn parse_deltas(text: &str) -> Result<Vec<f64>> {
    let deltas = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("delta {t:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if deltas.is_empty() || deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::Config("delta list must hold finite numbers".into()));
    }
    Ok(deltas)
}

impl TrainConfig {
    /// Reads training keys from `kv`, starting from `self`.
    pub fn apply(mut self, kv: &mut KeyValues) -> Result<Self> {
        let m = &mut self.model;
        kv.take("d_model", &mut m.d_model)?;
        kv.take("n_heads", &mut m.n_heads)?;
        kv.take("head_dim", &mut m.head_dim)?;
        kv.take("perceiver_layers", &mut m.perceiver_layers)?;
        kv.take("decoder_layers", &mut m.decoder_layers)?;
        kv.take("ff_hidden", &mut m.ff_hidden)?;
        kv.take_bool("positional", &mut m.positional)?;
        kv.take_bool("perceiver_causal", &mut m.perceiver_causal)?;
        let l = &mut self.losses;
        kv.take("sigma", &mut l.sigma)?;
        kv.take("lambda1", &mut l.lambda_point)?;
        kv.take("lambda2", &mut l.lambda_align)?;
        kv.take("lambda3", &mut l.lambda_pair)?;
        kv.take("pair_variant", &mut l.pair_variant)?;
        kv.take("pair_epsilon", &mut l.pair_epsilon)?;
        kv.take("pair_reduction", &mut l.pair_reduction)?;
        let a = &mut self.alignment;
        kv.take("gamma", &mut a.gamma)?;
        kv.take("tau_c", &mut a.tau_c)?;
        kv.take("negatives", &mut a.negatives)?;
        kv.take("dtw_mode", &mut a.mode)?;
        let o = &mut self.adam;
        kv.take("learning_rate", &mut o.learning_rate)?;
        kv.take("beta1", &mut o.beta1)?;
        kv.take("beta2", &mut o.beta2)?;
        kv.take("adam_epsilon", &mut o.epsilon)?;
        kv.take("batch_size", &mut self.batch_size)?;
        kv.take("epochs", &mut self.epochs)?;
        kv.take("seed", &mut self.seed)?;
        kv.take("eval_every", &mut self.eval_every)?;
        kv.take("checkpoint_every", &mut self.checkpoint_every)?;
        let mut deltas = String::new();
        kv.take("deltas", &mut deltas)?;
        if !deltas.is_empty() {
            self.deltas = parse_deltas(&deltas)?;
        }
        let mut variant = String::new();
        kv.take("tau_variant", &mut variant)?;
        match variant.as_str() {
            "" => {}
            "a" => self.tau_variant = TauVariant::A,
            "b" => self.tau_variant = TauVariant::B,
            other => return Err(Error::Config(format!("tau_variant must be a or b, got {other:?}"))),
        }
        let mut path = String::new();
        kv.take("train_data", &mut path)?;
        if !path.is_empty() {
            self.train_data = Some(PathBuf::from(&path));
        }
        path.clear();
        kv.take("eval_data", &mut path)?;
        if !path.is_empty() {
            self.eval_data = Some(PathBuf::from(&path));
        }
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let c = Self::default().apply(&mut kv)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.losses.validate()?;
        self.alignment.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Copies window length, raw feature widths and streamer count from the data.
    pub fn fit_to(&mut self, data: &Dataset) {
        let c = &data.config;
        self.model.window = c.n_segments_per_window;
        self.model.raw_visual_dim = c.raw_visual_dim;
        self.model.raw_text_dim = c.raw_text_dim;
        self.model.n_streamers = c.n_streamers;
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub tau: TauReport,
    pub ap: APReport,
    pub loss: LossComponents,
    pub regions: [f64; 3],
}

fn region_fractions(h: [usize; 3]) -> [f64; 3] {
    let total: usize = h.iter().sum();
    if total == 0 {
        return [0.0; 3];
    }
    h.map(|c| c as f64 / total as f64)
}

fn add_components(acc: &mut LossComponents, c: &LossComponents) {
    acc.total += c.total;
    acc.point += c.point;
    acc.align += c.align;
    acc.pair += c.pair;
}

fn scale_components(c: &mut LossComponents, k: f64) {
    c.total *= k;
    c.point *= k;
    c.align *= k;
    c.pair *= k;
}

/// Seed for the alignment augmentation of window `index` during evaluation.
fn eval_seed(seed: u64, index: usize) -> u64 {
    seed ^ 0x5eed_0000_0000_0000 ^ index as u64
}

/// Scores every window without updating parameters. Tau and AP only see
/// positions whose target is known.
pub fn evaluate(model: &Model, windows: &[SampleWindow], config: &TrainConfig) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let per_window = windows
        .par_iter()
        .enumerate()
        .map(|(k, w)| {
            let mut tape = Tape::new();
            let p = model.params.bind_constant(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(config.seed, k));
            let wl = model.window_loss(&mut tape, &p, w, &config.losses, &config.alignment, &mut rng)?;
            let s = tape.value(wl.forward.s).data().to_vec();
            Ok((s, wl.components, wl.histogram))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scored = Vec::with_capacity(windows.len());
    let mut binary = Vec::with_capacity(windows.len());
    let mut loss = LossComponents::default();
    let mut hist = [0usize; 3];
    for (w, (s, c, h)) in windows.iter().zip(&per_window) {
        let mask = w.loss_mask();
        let keep = |xs: Vec<f64>| xs.into_iter().zip(&mask).filter(|(_, &m)| m).map(|(x, _)| x).collect::<Vec<_>>();
        let y = keep(w.targets());
        let sk = keep(s.clone());
        let labels = w
            .binary_targets()
            .into_iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(l, _)| l)
            .collect();
        binary.push((sk.clone(), labels));
        scored.push((sk, y));
        add_components(&mut loss, c);
        for r in 0..3 {
            hist[r] += h[r];
        }
    }
    scale_components(&mut loss, 1.0 / windows.len() as f64);
    Ok(Evaluation {
        tau: tau_report(&scored, &config.deltas, config.tau_variant)?,
        ap: mean_ap(&binary)?,
        loss,
        regions: region_fractions(hist),
    })
}

pub fn evaluation_rows(epoch: usize, split: &str, eval: &Evaluation) -> Vec<MetricsRow> {
    eval.tau
        .per_delta
        .iter()
        .map(|d| MetricsRow {
            epoch,
            split: split.to_string(),
            delta: d.delta,
            mean_tau: d.mean_tau,
            n_windows: d.n_windows,
            n_skipped: d.n_skipped,
            map: eval.ap.mean,
            loss: eval.loss,
            regions: eval.regions,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean over training windows of the components seen during the epoch.
    pub loss: LossComponents,
    pub regions: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::with_rng(config.model.clone(), &mut rng)?;
        let adam = AdamState::zeros_like(model.params.tensors());
        Ok(Self {
            config,
            model,
            adam,
            rng,
            epoch: 0,
        })
    }

    pub fn train_epoch(&mut self, windows: &[SampleWindow]) -> Result<EpochStats> {
        if windows.is_empty() {
            return Err(Error::Invalid("cannot train on an empty split".into()));
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut self.rng);
        let mut seen = LossComponents::default();
        let mut hist = [0usize; 3];
        for batch in order.chunks(self.config.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| self.rng.random()).collect();
            let model = &self.model;
            let cfg = &self.config;
            let results = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&idx, &seed)| {
                    let mut tape = Tape::new();
                    let p = model.params.bind(&mut tape);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let wl = model.window_loss(&mut tape, &p, &windows[idx], &cfg.losses, &cfg.alignment, &mut rng)?;
                    let c = wl.components;
                    if ![c.total, c.point, c.align, c.pair].iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            total: c.total,
                            point: c.point,
                            align: c.align,
                            pair: c.pair,
                        });
                    }
                    tape.backward(wl.loss)?;
                    Ok((p.gradients(&tape), c, wl.histogram))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads: Vec<Tensor> = self.model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (g, c, h) in &results {
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.add_assign_slice(gi.data());
                }
                add_components(&mut seen, c);
                for r in 0..3 {
                    hist[r] += h[r];
                }
            }
            adam_step(self.model.params.tensors_mut(), &grads, &mut self.adam, &self.config.adam)?;
        }
        scale_components(&mut seen, 1.0 / windows.len() as f64);
        self.epoch = epoch;
        Ok(EpochStats {
            epoch,
            loss: seen,
            regions: region_fractions(hist),
        })
    }

    /// Trains until `config.epochs` epochs are complete, evaluating at epoch
    /// 0 (fresh runs only), every `eval_every` epochs and at the end.
    /// Returns every metrics row; checkpoints go to `out` when given.
    pub fn run(
        &mut self,
        train: &[SampleWindow],
        eval: Option<&[SampleWindow]>,
        out: Option<&Path>,
        mut on_rows: impl FnMut(&[MetricsRow]),
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        let mut record = |trainer: &Self, rows: &mut Vec<MetricsRow>| -> Result<()> {
            let mut new = evaluation_rows(trainer.epoch, "train", &evaluate(&trainer.model, train, &trainer.config)?);
            if let Some(e) = eval {
                new.extend(evaluation_rows(trainer.epoch, "eval", &evaluate(&trainer.model, e, &trainer.config)?));
            }
            on_rows(&new);
            rows.extend(new);
            Ok(())
        };
        if self.epoch == 0 {
            record(self, &mut rows)?;
        }
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            if self.epoch == 0 {
                self.checkpoint().save(dir.join("checkpoint_epoch0.khl"))?;
            }
        }
        while self.epoch < self.config.epochs {
            self.train_epoch(train)?;
            let last = self.epoch == self.config.epochs;
            if last || self.epoch % self.config.eval_every == 0 {
                record(self, &mut rows)?;
            }
            if let Some(dir) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && self.epoch % every == 0 {
                    self.checkpoint().save(dir.join(format!("checkpoint_epoch{}.khl", self.epoch)))?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(dir.join("checkpoint.khl"))?;
            std::fs::write(dir.join("metrics.csv"), rows_to_csv(&rows))?;
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        for (name, t) in self.model.params.iter() {
            c.push(name, t.clone());
        }
        for (k, name) in self.model.params.ids().map(|id| self.model.params.name(id)).enumerate() {
            c.push(format!("adam.m.{name}"), self.adam.m[k].clone());
            c.push(format!("adam.v.{name}"), self.adam.v[k].clone());
        }
        c.push("adam.t", Tensor::scalar(self.adam.t as f64));
        c.push("rng.state", rng_to_tensor(&self.rng));
        c.push("epoch", Tensor::scalar(self.epoch as f64));
        c
    }

    /// Rebuilds a trainer from `config` (which fixes the architecture) and a
    /// saved checkpoint; every parameter must match by name and shape.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut trainer = Self::new(config)?;
        load_params(&mut trainer.model, ckpt)?;
        let names: Vec<String> = trainer.model.params.ids().map(|id| trainer.model.params.name(id).to_string()).collect();
        for (k, name) in names.iter().enumerate() {
            let shape = trainer.model.params.tensors()[k].shape().to_vec();
            for (slot, prefix) in [(&mut trainer.adam.m[k], "adam.m"), (&mut trainer.adam.v[k], "adam.v")] {
                let t = ckpt.require(&format!("{prefix}.{name}"))?;
                if t.shape() != shape {
                    return Err(Error::Checkpoint(format!("{prefix}.{name}: shape {:?} vs {:?}", t.shape(), shape)));
                }
                *slot = t.clone();
            }
        }
        trainer.adam.t = whole(ckpt.require("adam.t")?, "adam.t")?;
        trainer.rng = rng_from_tensor(ckpt.require("rng.state")?)?;
        trainer.epoch = whole(ckpt.require("epoch")?, "epoch")? as usize;
        Ok(trainer)
    }
}

fn whole(t: &Tensor, name: &str) -> Result<u64> {
    let x = t.data().first().copied().unwrap_or(f64::NAN);
    if t.len() != 1 || !(x >= 0.0) || x.fract() != 0.0 {
        return Err(Error::Checkpoint(format!("{name} must be a non-negative integer")));
    }
    Ok(x as u64)
}

/// Copies parameter blocks from `ckpt` into `model`, checking names and shapes.
pub fn load_params(model: &mut Model, ckpt: &Checkpoint) -> Result<()> {
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let t = ckpt.require(&name)?;
        if t.shape() != model.params.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                model.params.get(id).shape()
            )));
        }
        *model.params.get_mut(id) = t.clone();
    }
    Ok(())
}
