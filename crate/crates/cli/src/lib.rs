//! `auseg` command-line tool: training, evaluation, prediction, gradient
//! checks, synthetic data, and learning-rate sweeps.

pub mod checkpoint;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use auseg::data::{self, DatasetSpec, Sample};
use auseg::gradsuite;
use auseg::loss::{inverse_frequency_weights, LossConfig};
use auseg::metrics::{format_report, report_csv, EvalRow};
use auseg::train::{self, TrainConfig};
use auseg::Error;

pub use checkpoint::Checkpoint;
pub use config::{ClassWeights, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "auseg", version, about = "Attention-gated Unet segmentation")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints, the training log, and a loss chart.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// CSV report path; defaults to `<ckpt stem>_<split>.csv` beside the checkpoint.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Row label in the report; defaults to the checkpoint stem.
        #[arg(long)]
        name: Option<String>,
    },
    /// Segment one PPM image into a PGM label map.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks over every differentiable unit.
    Gradcheck {
        /// Overrides every per-unit tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
        /// First of three consecutive seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dataset split.
    Synth {
        /// Dataset root; files go to `<out>/<split>/`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train and score once per learning rate.
    SweepLr {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated learning rates.
        #[arg(long, value_delimiter = ',', required = true)]
        lrs: Vec<f64>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                error::EXIT_CONFIG
            } else {
                error::EXIT_OK
            };
        }
    };
    match run(cli) {
        Ok(()) => error::EXIT_OK,
        Err(e) => {
            eprintln!("auseg: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.threads {
        None => dispatch(cli.command),
        Some(0) => Err(Error::Config("--threads must be at least 1".into()).into()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| dispatch(cli.command)),
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Eval {
            ckpt,
            data,
            split,
            csv,
            name,
        } => cmd_eval(&ckpt, &data, &split, csv.as_deref(), name),
        Command::Predict { ckpt, image, out } => cmd_predict(&ckpt, &image, &out),
        Command::Gradcheck { tolerance, seed } => cmd_gradcheck(tolerance, seed),
        Command::Synth {
            out,
            count,
            size,
            classes,
            seed,
            split,
        } => cmd_synth(&out, count, size[0], size[1], classes, seed, &split),
        Command::SweepLr { config, lrs, out } => cmd_sweep_lr(&config, &lrs, out.as_deref()),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
    .into()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<Sample>, CliError> {
    let mut spec = DatasetSpec::new(&cfg.data_root, split, cfg.model.num_classes);
    spec.ignore_index = cfg.train.loss.ignore_index;
    let samples = spec.load()?;
    if samples.is_empty() {
        return Err(Error::Config(format!("split {} holds no samples", spec.dir().display())).into());
    }
    Ok(samples)
}

/// Loads both splits and checks them against the model before any training.
fn load_training_data(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
    let train_set = load_split(cfg, &cfg.train_split)?;
    let val_set = load_split(cfg, &cfg.val_split)?;
    let probe = auseg::model::UnetModel::build(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let (h, w) = cfg
        .train
        .augment
        .crop
        .unwrap_or((train_set[0].height(), train_set[0].width()));
    probe.check_input(&[1, train_set[0].image.shape()[0], h, w])?;
    let v = &val_set[0];
    probe.check_input(&[1, v.image.shape()[0], v.height(), v.width()])?;
    Ok((train_set, val_set))
}

/// The configured loss with class weights resolved against the training labels.
pub fn resolve_loss(cfg: &RunConfig, train_set: &[Sample]) -> LossConfig {
    let mut loss = cfg.train.loss.clone();
    loss.class_weights = match &cfg.class_weights {
        ClassWeights::Uniform => None,
        ClassWeights::Fixed(w) => Some(w.clone()),
        ClassWeights::InverseFrequency => Some(inverse_frequency_weights(
            train_set.iter().map(|s| &s.label),
            cfg.model.num_classes,
            loss.ignore_index,
        )),
    };
    loss
}

fn train_config(cfg: &RunConfig, train_set: &[Sample]) -> TrainConfig {
    TrainConfig {
        loss: resolve_loss(cfg, train_set),
        ..cfg.train.clone()
    }
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(config, seed)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write(&out.join("config.resolved"), cfg.resolved())?;
    let (train_set, val_set) = load_training_data(&cfg)?;
    let tc = train_config(&cfg, &train_set);
    let model = train::init_model(&cfg.model, tc.seed)?;
    eprintln!(
        "training {} parameters on {} samples, validating on {}",
        model.num_scalars(),
        train_set.len(),
        val_set.len()
    );
    let mut clock = Instant::now();
    let outcome = train::train_with(model, &train_set, &val_set, &tc, |r| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}  lr {:.3e}  mIoU {:.4}  PA {:.4}  {:.1}s",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.lr,
            r.miou,
            r.pa,
            clock.elapsed().as_secs_f64()
        );
        clock = Instant::now();
    })?;
    Checkpoint::from_model(&cfg, &outcome.best).save(&out.join("best.ckpt"))?;
    Checkpoint::from_model(&cfg, &outcome.final_model).save(&out.join("final.ckpt"))?;
    write(&out.join("trainlog.csv"), outcome.log.to_csv())?;
    write(&out.join("losscurve.svg"), outcome.log.to_svg())?;
    let best = outcome.log.best().expect("at least one epoch");
    println!(
        "best epoch {} val_loss {:.6} mIoU {:.4} PA {:.4}{}",
        best.epoch,
        best.val_loss,
        best.miou,
        best.pa,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    data_root: &Path,
    split: &str,
    csv: Option<&Path>,
    name: Option<String>,
) -> Result<(), CliError> {
    let (cfg, model) = Checkpoint::load(ckpt)?.restore(ckpt)?;
    let mut spec = DatasetSpec::new(data_root, split, cfg.model.num_classes);
    spec.ignore_index = cfg.train.loss.ignore_index;
    let samples = spec.load()?;
    if samples.is_empty() {
        return Err(Error::Data(format!("split {} holds no samples", spec.dir().display())).into());
    }
    let loss = LossConfig {
        class_weights: None,
        ..cfg.train.loss.clone()
    };
    let eval = train::evaluate(&model, &samples, cfg.train.batch_size, &loss)?;
    let stem = ckpt
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    let row = EvalRow::from_matrix(name.unwrap_or_else(|| stem.clone()), &eval.confusion)?;
    print!("{}", format_report(std::slice::from_ref(&row), spec.ignore_index));
    let csv_path = csv
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.with_file_name(format!("{stem}_{split}.csv")));
    write(&csv_path, report_csv(&[row]))?;
    eprintln!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_predict(ckpt: &Path, image: &Path, out: &Path) -> Result<(), CliError> {
    let (_, model) = Checkpoint::load(ckpt)?.restore(ckpt)?;
    let img = data::read_ppm_image(image)?;
    let shape: Vec<usize> = std::iter::once(1).chain(img.shape().iter().copied()).collect();
    let labels = model.predict_labels(&img.reshaped(&shape)?)?;
    data::write_pgm_labels(out, &labels)?;
    Ok(())
}

fn cmd_gradcheck(tolerance: Option<f64>, seed: u64) -> Result<(), CliError> {
    if let Some(t) = tolerance {
        if !(t > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {t}")).into());
        }
    }
    let seeds = [seed, seed + 1, seed + 2];
    let results = gradsuite::run_suite(&seeds, tolerance)?;
    println!("{:<28} {:>12} {:>10}  status", "unit", "worst", "tolerance");
    for r in &results {
        println!(
            "{:<28} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.worst,
            r.tol,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient mismatch beyond tolerance in {}",
            failed.join(", ")
        )))
    }
}

fn cmd_synth(
    out: &Path,
    count: usize,
    h: usize,
    w: usize,
    classes: usize,
    seed: u64,
    split: &str,
) -> Result<(), CliError> {
    let samples = data::synth_generate(count, h, w, classes, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let dir = out.join(split);
    for s in &samples {
        data::write_sample(&dir, s)?;
    }
    println!("wrote {} pairs to {}", samples.len(), dir.display());
    Ok(())
}

fn cmd_sweep_lr(config: &Path, lrs: &[f64], out: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(config, None)?;
    let (train_set, val_set) = load_training_data(&cfg)?;
    let tc = train_config(&cfg, &train_set);
    let rows = train::lr_sweep(&cfg.model, &train_set, &val_set, &tc, lrs)?;
    let report = train::format_sweep(&rows);
    print!("{report}");
    if let Some(path) = out {
        write(path, &report)?;
    }
    Ok(())
}
