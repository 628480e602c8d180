//! Command-line front end: `train`, `eval`, `embed`, `sweep` and `generate`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hycore::checkpoint;
use hycore::data::{self, Dataset, DatasetSpec, ShapeKind};
use hycore::nn::ModelConfig;
use hycore::optim::OptimConfig;
use hycore::regularizer::{LossWeights, TripletConfig};
use hycore::run::{self, DataSource, EmbedOptions, RunConfig, SweepAxis};
use hycore::train::{EvalMode, TrainConfig};
use hycore::Error;

#[derive(Parser, Debug)]
#[command(name = "hycore", version, about = "Hyperbolic part-whole regularized point-cloud classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one or more modes.
    Eval(EvalArgs),
    /// Export ball embeddings of objects and their parts.
    Embed(EmbedArgs),
    /// Train a grid of configurations and tabulate test accuracy.
    Sweep(SweepArgs),
    /// Write a synthetic dataset directory.
    Generate(GenerateArgs),
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset directory (manifest.csv + .xyz files); synthetic data otherwise.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Comma-separated shape classes of the synthetic dataset.
    #[arg(long, value_delimiter = ',', default_value = "sphere,cube,cylinder,cone,torus,pyramid,table,chair")]
    classes: Vec<String>,
    #[arg(long, default_value_t = 125)]
    per_class_train: usize,
    #[arg(long, default_value_t = 125)]
    per_class_test: usize,
    /// Points per synthetic cloud.
    #[arg(long, default_value_t = 1024)]
    points: usize,
    #[arg(long, default_value_t = 0.04)]
    noise_sigma: f64,
    /// Seed of dataset generation and of the train/test split.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl DataArgs {
    fn source(&self) -> Result<DataSource, Error> {
        if let Some(path) = &self.data_dir {
            return Ok(DataSource::Directory {
                path: path.clone(),
                per_class_train: self.per_class_train,
                per_class_test: self.per_class_test,
                seed: self.data_seed,
            });
        }
        let classes = self
            .classes
            .iter()
            .map(|c| c.parse::<ShapeKind>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(DataSource::Synthetic(DatasetSpec {
            classes,
            per_class_train: self.per_class_train,
            per_class_test: self.per_class_test,
            points_per_cloud: self.points,
            noise_sigma: self.noise_sigma,
            seed: self.data_seed,
        }))
    }

    fn num_classes(&self) -> Result<usize, Error> {
        match self.source()? {
            DataSource::Synthetic(spec) => Ok(spec.classes.len()),
            DataSource::Directory { path, .. } => Ok(data::load_dataset(&path)?.num_classes()),
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Curvature magnitude c of the Poincaré ball.
    #[arg(long, default_value_t = 1.0)]
    curvature: f64,
    /// Flat-space ablation: Möbius operations become linear ones.
    #[arg(long)]
    euclidean_mode: bool,
    /// Embedding dimension.
    #[arg(long, default_value_t = 16)]
    f: usize,
    /// Encoder output width.
    #[arg(long, default_value_t = 256)]
    m: usize,
    /// Hidden widths of the per-point encoder.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 128])]
    hidden: Vec<usize>,
    /// Clip encoder outputs to this norm before the lift.
    #[arg(long, default_value_t = 2.0)]
    feature_clip: f64,
    /// Disable the feature clip.
    #[arg(long)]
    no_feature_clip: bool,
}

#[derive(Args, Debug, Clone)]
struct LossArgs {
    /// Weight of the contrastive regularizer.
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// Weight of the hierarchy regularizer.
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    /// Hierarchy margin numerator (margin = gamma / part size).
    #[arg(long, default_value_t = 1000.0)]
    gamma: f64,
    /// Contrastive margin.
    #[arg(long, default_value_t = 4.0)]
    delta: f64,
    #[arg(long, default_value_t = 800)]
    whole_min: usize,
    #[arg(long, default_value_t = 1024)]
    whole_max: usize,
    #[arg(long, default_value_t = 200)]
    part_min: usize,
    #[arg(long, default_value_t = 600)]
    part_max: usize,
    /// Add cross-entropy on random kNN crops.
    #[arg(long)]
    crop_augment: bool,
}

#[derive(Args, Debug, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Global gradient-norm clipping threshold.
    #[arg(long, default_value_t = 10.0)]
    clip_norm: f64,
    /// Seed of initialization, shuffling and triplet sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate accuracies every this many epochs (always after the last).
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
}

#[derive(Args, Debug, Clone)]
struct OutArgs {
    /// Output directory; defaults to a directory under the output root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, env = "HYCORE_OUT_DIR", default_value = "runs")]
    out_root: PathBuf,
}

impl OutArgs {
    fn dir(&self, default_name: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.out_root.join(default_name))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Re-run a saved config.json; other training flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    out: OutArgs,
}

fn train_config(data: &DataArgs, model: &ModelArgs, loss: &LossArgs, optim: &OptimArgs) -> Result<TrainConfig, Error> {
    if model.hidden.len() != 2 {
        return Err(Error::Config(format!("--hidden takes two widths, got {}", model.hidden.len())));
    }
    Ok(TrainConfig {
        model: ModelConfig {
            hidden: [model.hidden[0], model.hidden[1]],
            m: model.m,
            f: model.f,
            classes: data.num_classes()?,
            curvature: model.curvature,
            euclidean_mode: model.euclidean_mode,
            feature_clip: (!model.no_feature_clip).then_some(model.feature_clip),
        },
        weights: LossWeights {
            alpha: loss.alpha,
            beta: loss.beta,
            gamma: loss.gamma,
            delta: loss.delta,
        },
        triplets: TripletConfig {
            whole_min: loss.whole_min,
            whole_max: loss.whole_max,
            part_min: loss.part_min,
            part_max: loss.part_max,
        },
        optim: OptimConfig {
            lr: optim.lr,
            momentum: optim.momentum,
            weight_decay: optim.weight_decay,
            epochs: optim.epochs,
            batch_size: optim.batch_size,
            seed: optim.seed,
            clip_norm: optim.clip_norm,
        },
        crop_augment: loss.crop_augment,
        eval_every: optim.eval_every,
    })
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Which part of the split to evaluate.
    #[arg(long, default_value = "test", value_parser = ["train", "test", "all"])]
    split: String,
    /// Evaluation modes: full, subsample:<k> or part:<n>; repeatable.
    #[arg(long = "mode", default_value = "full", value_delimiter = ',')]
    modes: Vec<EvalMode>,
    /// Seed of the random views.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "test", value_parser = ["train", "test", "all"])]
    split: String,
    #[arg(long, default_value_t = 3)]
    parts_per_object: usize,
    #[arg(long, default_value_t = 200)]
    part_min: usize,
    #[arg(long, default_value_t = 650)]
    part_max: usize,
    #[arg(long, default_value_t = 800)]
    whole_min: usize,
    #[arg(long, default_value_t = 1024)]
    whole_max: usize,
    /// Object ids for the pairwise geodesic-distance matrix.
    #[arg(long, value_delimiter = ',')]
    distance_ids: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// dim, curvature or ablation.
    #[arg(long)]
    axis: SweepAxis,
    /// Training seeds shared by every variant.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
}

fn pick_split(data: &DataArgs, split: &str) -> Result<Dataset, Error> {
    let (train, test) = data.source()?.load()?;
    Ok(match split {
        "train" => train,
        "test" => test,
        _ => Dataset {
            class_names: train.class_names.clone(),
            clouds: train.clouds.into_iter().chain(test.clouds).collect(),
        },
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(a) => {
            let cfg = match &a.config {
                Some(path) => {
                    let mut cfg = RunConfig::load(path)?;
                    if let Some(out) = &a.out.out {
                        cfg.out_dir = out.clone();
                    }
                    cfg
                }
                None => RunConfig {
                    data: a.data.source()?,
                    train: train_config(&a.data, &a.model, &a.loss, &a.optim)?,
                    out_dir: a.out.dir(&format!("train-seed{}", a.optim.seed)),
                },
            };
            let run = run::cmd_train(&cfg)?;
            let last = run.outcome.records.last().expect("at least one epoch");
            println!(
                "{}: final test OA {:.4} AA {:.4}; best test OA {:.4} at epoch {}",
                run.dir.display(),
                last.test_oa,
                last.test_aa,
                run.outcome.records[run.outcome.best_epoch].test_oa,
                run.outcome.best_epoch
            );
        }
        Command::Eval(a) => {
            let state = checkpoint::load(&a.checkpoint)?;
            let dataset = pick_split(&a.data, &a.split)?;
            let reports = run::cmd_eval(&state, &dataset, &a.modes, a.seed)?;
            let table = run::eval_table(&reports);
            print!("{table}");
            if let Some(path) = &a.out {
                std::fs::write(path, &table).map_err(|source| Error::Io {
                    path: path.clone(),
                    source,
                })?;
            }
        }
        Command::Embed(a) => {
            let state = checkpoint::load(&a.checkpoint)?;
            let dataset = pick_split(&a.data, &a.split)?;
            let opts = EmbedOptions {
                parts_per_object: a.parts_per_object,
                part_range: (a.part_min, a.part_max),
                whole_range: (a.whole_min, a.whole_max),
                distance_ids: a.distance_ids.clone(),
                seed: a.seed,
            };
            let dir = a.out.dir("embed");
            let records = run::cmd_embed(&state, &dataset, &opts, &dir)?;
            println!("{}: {} records", dir.join("embeddings.csv").display(), records.len());
        }
        Command::Sweep(a) => {
            let base = RunConfig {
                data: a.data.source()?,
                train: train_config(&a.data, &a.model, &a.loss, &a.optim)?,
                out_dir: a.out.dir(&format!("sweep-{:?}", a.axis).to_lowercase()),
            };
            let rows = run::cmd_sweep(&base, a.axis, &a.seeds)?;
            print!("{}", run::sweep_table(&rows));
        }
        Command::Generate(a) => {
            let spec = match a.data.source()? {
                DataSource::Synthetic(spec) => spec,
                DataSource::Directory { .. } => {
                    return Err(Error::Config("generate writes synthetic data; drop --data-dir".into()))
                }
            };
            let dir = a.out.dir("dataset");
            let dataset = data::generate_dataset(&spec)?;
            data::save_dataset(&dir, &dataset)?;
            println!("{}: {} clouds", dir.display(), dataset.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
