//! Scripted experiments: overfit sanity, pointwise collapse under the
//! unconstrained pairwise loss, and the alignment-loss ablation.
//!
//! An experiment file is flat `key = value` text. `data_config` and
//! `train_config` name files relative to the experiment file; every other
//! key either belongs to the experiment (`name`, `seeds`, `tau_target`,
//! `heldout_first_stream`) or overrides a training key.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::KeyValues;
use crate::data::{generate_dataset, Dataset, StreamConfig};
use crate::error::{Error, Result};
use crate::losses::PairVariant;
use crate::metrics::{rows_to_csv, MetricsRow};
use crate::train::{evaluate, evaluation_rows, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Overfit,
    Collapse,
    MtamAblation,
}

impl std::str::FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "overfit" => Ok(ExperimentKind::Overfit),
            "collapse" => Ok(ExperimentKind::Collapse),
            "mtam-ablation" => Ok(ExperimentKind::MtamAblation),
            _ => Err(format!("unknown experiment {s:?} (overfit, collapse, mtam-ablation)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub data: StreamConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Overfit only: the training tau at delta 0 that counts as reached.
    pub tau_target: f64,
    /// Ablation only: index of the first held-out stream. The held-out
    /// split reuses the training generator seed, so it shares feature
    /// read-outs and streamer profiles but none of the streams.
    pub heldout_first_stream: usize,
}

fn resolve(base: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|t| t.trim().parse().map_err(|e| Error::Config(format!("seed {t:?}: {e}"))))
        .collect()
}

impl ExperimentSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(path)?;
        let mut kv = KeyValues::parse(&text)?;
        let mut name = String::new();
        kv.take("name", &mut name)?;
        let kind: ExperimentKind = name.parse().map_err(Error::Config)?;
        let (mut data_name, mut train_name) = (String::new(), String::new());
        kv.take("data_config", &mut data_name)?;
        kv.take("train_config", &mut train_name)?;
        if data_name.is_empty() || train_name.is_empty() {
            return Err(Error::Config("experiment needs data_config and train_config".into()));
        }
        let data = StreamConfig::parse(&std::fs::read_to_string(resolve(dir, &data_name))?)?;
        let base = TrainConfig::parse(&std::fs::read_to_string(resolve(dir, &train_name))?)?;
        let mut seeds = String::from("0");
        kv.take("seeds", &mut seeds)?;
        let mut tau_target = 0.8;
        kv.take("tau_target", &mut tau_target)?;
        let mut heldout_first_stream = data.first_stream + data.n_streams;
        kv.take("heldout_first_stream", &mut heldout_first_stream)?;
        let train = base.apply(&mut kv)?;
        kv.finish()?;
        train.validate()?;
        Ok(Self {
            kind,
            data,
            train,
            seeds: parse_seeds(&seeds)?,
            tau_target,
            heldout_first_stream,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunTrace {
    pub seed: u64,
    pub label: String,
    pub rows: Vec<MetricsRow>,
}

impl RunTrace {
    fn final_row(&self, split: &str, delta: f64) -> Option<&MetricsRow> {
        self.rows.iter().rev().find(|r| r.split == split && r.delta == delta)
    }

    /// Final mean tau on `split` at `delta`; NaN when every window was skipped.
    pub fn final_tau(&self, split: &str, delta: f64) -> f64 {
        self.final_row(split, delta).and_then(|r| r.mean_tau).unwrap_or(f64::NAN)
    }

    pub fn final_point_loss(&self) -> f64 {
        self.final_row("train", 0.0).map_or(f64::NAN, |r| r.loss.point)
    }

    pub fn final_part3_fraction(&self) -> f64 {
        self.final_row("train", 0.0).map_or(f64::NAN, |r| r.regions[2])
    }
}

#[derive(Clone, Debug)]
pub struct OverfitReport {
    pub trace: RunTrace,
    /// First evaluated epoch with train tau at delta 0 at or above the target.
    pub reached_at: Option<usize>,
    pub initial_tau: f64,
    pub final_tau: Vec<(f64, f64)>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct CollapseSeed {
    pub seed: u64,
    pub l0: RunTrace,
    pub l1: RunTrace,
}

impl CollapseSeed {
    /// L0 ends with strictly more Part3 pairs and a higher pointwise loss.
    pub fn collapsed(&self) -> bool {
        self.l0.final_part3_fraction() > self.l1.final_part3_fraction() && self.l0.final_point_loss() > self.l1.final_point_loss()
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub seed: u64,
    pub lambda_align: f64,
    pub trace: RunTrace,
    pub heldout_tau: f64,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub mean_without: f64,
    pub mean_with: f64,
}

impl AblationReport {
    pub fn margin(&self) -> f64 {
        self.mean_with - self.mean_without
    }
}

#[derive(Clone, Debug)]
pub enum ExperimentReport {
    Overfit(OverfitReport),
    Collapse(Vec<CollapseSeed>),
    MtamAblation(AblationReport),
}

fn fitted(spec: &ExperimentSpec, data: &Dataset, seed: u64) -> TrainConfig {
    let mut cfg = spec.train.clone();
    cfg.fit_to(data);
    cfg.seed = seed;
    cfg
}

fn train_run(cfg: TrainConfig, label: &str, train: &Dataset, eval: Option<&Dataset>) -> Result<RunTrace> {
    let seed = cfg.seed;
    let mut trainer = Trainer::new(cfg)?;
    let rows = trainer.run(&train.windows, eval.map(|d| &d.windows[..]), None, |_| {})?;
    Ok(RunTrace {
        seed,
        label: label.to_string(),
        rows,
    })
}

pub fn run_overfit(spec: &ExperimentSpec) -> Result<OverfitReport> {
    let data = generate_dataset(&spec.data)?;
    let seed = spec.seeds.first().copied().unwrap_or(0);
    let cfg = fitted(spec, &data, seed);
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut rows = evaluation_rows(0, "train", &evaluate(&trainer.model, &data.windows, &cfg)?);
    let initial_tau = rows.iter().find(|r| r.delta == 0.0).and_then(|r| r.mean_tau).unwrap_or(f64::NAN);
    let mut reached_at = None;
    while trainer.epoch < cfg.epochs {
        trainer.train_epoch(&data.windows)?;
        if trainer.epoch % cfg.eval_every == 0 || trainer.epoch == cfg.epochs {
            let new = evaluation_rows(trainer.epoch, "train", &evaluate(&trainer.model, &data.windows, &cfg)?);
            let tau = new.iter().find(|r| r.delta == 0.0).and_then(|r| r.mean_tau);
            rows.extend(new);
            if tau.is_some_and(|t| t >= spec.tau_target) {
                reached_at = Some(trainer.epoch);
                break;
            }
        }
    }
    let trace = RunTrace {
        seed,
        label: "overfit".into(),
        rows,
    };
    let final_tau = cfg.deltas.iter().map(|&d| (d, trace.final_tau("train", d))).collect();
    Ok(OverfitReport {
        trace,
        reached_at,
        initial_tau,
        final_tau,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_collapse(spec: &ExperimentSpec) -> Result<Vec<CollapseSeed>> {
    let data = generate_dataset(&spec.data)?;
    spec.seeds
        .iter()
        .map(|&seed| {
            let run = |variant: PairVariant| {
                let mut cfg = fitted(spec, &data, seed);
                cfg.losses.pair_variant = variant;
                train_run(cfg, &variant.to_string(), &data, None)
            };
            Ok(CollapseSeed {
                seed,
                l0: run(PairVariant::L0)?,
                l1: run(PairVariant::L1)?,
            })
        })
        .collect()
}

pub const ABLATION_WEIGHTS: [f64; 2] = [0.0, 0.15];

pub fn run_mtam_ablation(spec: &ExperimentSpec) -> Result<AblationReport> {
    let train = generate_dataset(&spec.data)?;
    let heldout = generate_dataset(&StreamConfig {
        first_stream: spec.heldout_first_stream,
        ..spec.data.clone()
    })?;
    let mut runs = Vec::new();
    for &seed in &spec.seeds {
        for &lambda in &ABLATION_WEIGHTS {
            let mut cfg = fitted(spec, &train, seed);
            cfg.losses.lambda_align = lambda;
            let trace = train_run(cfg, &format!("lambda2={lambda}"), &train, Some(&heldout))?;
            let heldout_tau = trace.final_tau("eval", 0.0);
            runs.push(AblationRun {
                seed,
                lambda_align: lambda,
                trace,
                heldout_tau,
            });
        }
    }
    let mean = |lambda: f64| {
        let xs: Vec<f64> = runs.iter().filter(|r| r.lambda_align == lambda).map(|r| r.heldout_tau).collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    Ok(AblationReport {
        mean_without: mean(ABLATION_WEIGHTS[0]),
        mean_with: mean(ABLATION_WEIGHTS[1]),
        runs,
    })
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    Ok(match spec.kind {
        ExperimentKind::Overfit => ExperimentReport::Overfit(run_overfit(spec)?),
        ExperimentKind::Collapse => ExperimentReport::Collapse(run_collapse(spec)?),
        ExperimentKind::MtamAblation => ExperimentReport::MtamAblation(run_mtam_ablation(spec)?),
    })
}

fn write_trace(dir: &Path, trace: &RunTrace) -> Result<()> {
    let file = format!("{}_seed{}.csv", trace.label.replace('=', "_"), trace.seed);
    std::fs::write(dir.join(file), rows_to_csv(&trace.rows))?;
    Ok(())
}

/// Writes per-run metric traces and a plain-text summary into `dir`;
/// returns the summary.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<String> {
    std::fs::create_dir_all(dir)?;
    let mut summary = String::new();
    match report {
        ExperimentReport::Overfit(r) => {
            write_trace(dir, &r.trace)?;
            summary.push_str(&format!("initial train tau (delta 0): {:.4}\n", r.initial_tau));
            for (d, t) in &r.final_tau {
                summary.push_str(&format!("final train tau (delta {d}): {t:.4}\n"));
            }
            match r.reached_at {
                Some(e) => summary.push_str(&format!("target reached at epoch {e}\n")),
                None => summary.push_str("target not reached\n"),
            }
            summary.push_str(&format!("elapsed seconds: {:.1}\n", r.seconds));
        }
        ExperimentReport::Collapse(seeds) => {
            summary.push_str("seed,variant,final_point_loss,final_pair_loss,final_part3_fraction\n");
            for s in seeds {
                for t in [&s.l0, &s.l1] {
                    write_trace(dir, t)?;
                    let pair = t.final_row("train", 0.0).map_or(f64::NAN, |r| r.loss.pair);
                    summary.push_str(&format!(
                        "{},{},{},{},{}\n",
                        s.seed,
                        t.label,
                        t.final_point_loss(),
                        pair,
                        t.final_part3_fraction()
                    ));
                }
            }
            let hits = seeds.iter().filter(|s| s.collapsed()).count();
            summary.push_str(&format!("seeds where l0 collapses relative to l1: {hits} of {}\n", seeds.len()));
        }
        ExperimentReport::MtamAblation(r) => {
            summary.push_str("seed,lambda2,heldout_tau\n");
            for run in &r.runs {
                write_trace(dir, &run.trace)?;
                summary.push_str(&format!("{},{},{}\n", run.seed, run.lambda_align, run.heldout_tau));
            }
            summary.push_str(&format!(
                "mean heldout tau: lambda2=0 {:.4}, lambda2=0.15 {:.4}, margin {:+.4}\n",
                r.mean_without,
                r.mean_with,
                r.margin()
            ));
        }
    }
    std::fs::write(dir.join("summary.txt"), &summary)?;
    Ok(summary)
}
