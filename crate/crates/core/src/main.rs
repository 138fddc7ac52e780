use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use streamhl::checkpoint::Checkpoint;
use streamhl::data::{generate_dataset, read_dataset, write_dataset, StreamConfig};
use streamhl::experiments::{run_experiment, write_report, ExperimentSpec};
use streamhl::losses::PairVariant;
use streamhl::metrics::{rows_to_csv, CSV_HEADER};
use streamhl::mtam::DtwMode;
use streamhl::train::{evaluate, evaluation_rows, load_params, parse_deltas, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "streamhl", about = "Live-stream highlight prediction: data generation, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; the dataset is written to `dataset.jsonl` inside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write metrics and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training dataset (overrides `train_data` in the config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scripted experiment: overfit, collapse or mtam-ablation.
    Experiment {
        name: String,
        /// Experiment file; defaults to `configs/experiment_<name>.cfg`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the blocks stored in a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dtw_mode: Option<DtwMode>,
    #[arg(long)]
    pair_variant: Option<PairVariant>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau_c: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    /// Comma-separated tau thresholds, e.g. `0,0.2,0.4,0.6`.
    #[arg(long)]
    delta_list: Option<String>,
    #[arg(long)]
    no_pos_emb: bool,
    #[arg(long)]
    perceiver_causal: bool,
}

impl Overrides {
    fn apply(&self, c: &mut TrainConfig) -> Result<()> {
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.dtw_mode {
            c.alignment.mode = v;
        }
        if let Some(v) = self.pair_variant {
            c.losses.pair_variant = v;
        }
        for (src, dst) in [
            (self.lambda1, &mut c.losses.lambda_point),
            (self.lambda2, &mut c.losses.lambda_align),
            (self.lambda3, &mut c.losses.lambda_pair),
            (self.sigma, &mut c.losses.sigma),
            (self.gamma, &mut c.alignment.gamma),
            (self.tau_c, &mut c.alignment.tau_c),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
        if let Some(n) = self.negatives {
            c.alignment.negatives = n;
        }
        if let Some(d) = &self.delta_list {
            c.deltas = parse_deltas(d)?;
        }
        if self.no_pos_emb {
            c.model.positional = false;
        }
        if self.perceiver_causal {
            c.model.perceiver_causal = true;
        }
        c.validate()?;
        Ok(())
    }
}

fn load_train_config(path: Option<&Path>, overrides: &Overrides) -> Result<TrainConfig> {
    let mut c = match path {
        Some(p) => TrainConfig::parse(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut c)?;
    Ok(c)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenerateData { config, seed, out } => {
            let mut c = match config {
                Some(p) => StreamConfig::parse(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => StreamConfig::default(),
            };
            if let Some(s) = seed {
                c.seed = s;
            }
            let data = generate_dataset(&c)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("dataset.jsonl");
            write_dataset(&data, &path)?;
            println!("wrote {} windows to {}", data.windows.len(), path.display());
        }
        Command::Train {
            config,
            data,
            eval_data,
            resume,
            overrides,
            out,
        } => {
            let mut c = load_train_config(config.as_deref(), &overrides)?;
            let Some(train_path) = data.or_else(|| c.train_data.clone()) else {
                bail!("no training data: pass --data or set train_data in the config");
            };
            let train = read_dataset(&train_path).with_context(|| format!("reading {}", train_path.display()))?;
            let eval = eval_data.or_else(|| c.eval_data.clone()).map(read_dataset).transpose()?;
            c.fit_to(&train);
            let mut trainer = match resume {
                Some(p) => Trainer::from_checkpoint(c, &Checkpoint::load(&p)?)?,
                None => Trainer::new(c)?,
            };
            println!("{CSV_HEADER}");
            trainer.run(&train.windows, eval.as_ref().map(|d| &d.windows[..]), Some(&out), |rows| {
                for r in rows {
                    println!("{}", r.to_csv());
                }
            })?;
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            overrides,
            out,
        } => {
            let mut c = load_train_config(config.as_deref(), &overrides)?;
            let dataset = read_dataset(&data)?;
            c.fit_to(&dataset);
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut trainer = Trainer::new(c.clone())?;
            load_params(&mut trainer.model, &ckpt)?;
            let epoch = ckpt.get("epoch").map_or(0, |t| t.item() as usize);
            let rows = evaluation_rows(epoch, "eval", &evaluate(&trainer.model, &dataset.windows, &c)?);
            let csv = rows_to_csv(&rows);
            print!("{csv}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("eval.csv"), csv)?;
            }
        }
        Command::Experiment { name, config, out } => {
            let path = config.unwrap_or_else(|| PathBuf::from(format!("configs/experiment_{}.cfg", name.replace('-', "_"))));
            let spec = ExperimentSpec::load(&path).with_context(|| format!("loading {}", path.display()))?;
            if spec.kind != name.parse().map_err(anyhow::Error::msg)? {
                bail!("{} describes a different experiment than {name:?}", path.display());
            }
            let report = run_experiment(&spec)?;
            print!("{}", write_report(&report, &out)?);
        }
        Command::InspectCheckpoint { path } => {
            let ckpt = Checkpoint::load(&path)?;
            for (name, t) in &ckpt.blocks {
                println!("{name}\t{:?}\t{} values", t.shape(), t.len());
            }
        }
    }
    Ok(())
}
