//! `ffinet`: data generation, mask generation, training, evaluation,
//! prediction export and λ sweeps from the command line.

mod image;
mod settings;

use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ffinet::container::ToPayload;
use ffinet::data::{build_dataset, Dataset};
use ffinet::metrics::{evaluate, EvalOptions, EvalReport, GroundTruth};
use ffinet::occlusion::{apply_masks, MaskSet};
use ffinet::tensor::{Scalar, Tensor};
use ffinet::train::{lambda_sweep, log_csv, sweep_csv, Checkpoint, Trainer, SWEEP_LAMBDAS};

use settings::{Common, Precision, Settings};

#[derive(Debug, Parser)]
#[command(name = "ffinet", version, about = "Occluded video prediction with Fourier-domain convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a bouncing-sprite dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a fixed evaluation mask set.
    GenMasks {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model, or resume from `--ckpt`.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Score the true future frames instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Export input/occluded/recovered/predicted/target strips of one sequence.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Sequence index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Train and evaluate one model per recovery weight.
    LambdaSweep {
        #[command(flatten)]
        common: Common,
        /// Held-out dataset (defaults to `--data`).
        #[arg(long)]
        eval_data: Option<std::path::PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_LAMBDAS.to_vec())]
        lambdas: Vec<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads().and_then(|_| run(cli.command)) {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FFINET_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("FFINET_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common } => gen_data(Settings::resolve("gen-data", &common)?),
        Command::GenMasks { common } => gen_masks(Settings::resolve("gen-masks", &common)?),
        Command::Train { common } => {
            let s = Settings::resolve("train", &common)?;
            match s.precision {
                Precision::Std => train::<f32>(s),
                Precision::High => train::<f64>(s),
            }
        }
        Command::Eval { common, oracle } => {
            let s = Settings::resolve("eval", &common)?;
            match s.precision {
                Precision::Std => eval::<f32>(s, oracle),
                Precision::High => eval::<f64>(s, oracle),
            }
        }
        Command::Predict { common, index } => {
            let s = Settings::resolve("predict", &common)?;
            match s.precision {
                Precision::Std => predict::<f32>(s, index),
                Precision::High => predict::<f64>(s, index),
            }
        }
        Command::LambdaSweep { common, eval_data, lambdas } => {
            sweep(Settings::resolve("lambda-sweep", &common)?, eval_data, &lambdas)
        }
    }
}

fn run_dir(s: &Settings) -> Result<()> {
    std::fs::create_dir_all(&s.out).with_context(|| format!("creating {}", s.out.display()))
}

fn finish(s: &Settings) -> Result<()> {
    let m = s.write_manifest()?;
    println!("manifest {}", m.display());
    Ok(())
}

fn read_data(s: &Settings, path: &Path) -> Result<Dataset> {
    let d = Dataset::read(path).with_context(|| format!("reading dataset {}", path.display()))?;
    let shape = d.frames.shape();
    let m = &s.model;
    if shape[2] != m.channels || shape[3] != m.height || shape[4] != m.width {
        bail!(
            "dataset frames {:?} do not match the model's {}x{}x{} frames",
            &shape[2..],
            m.channels,
            m.height,
            m.width
        );
    }
    Ok(d)
}

fn read_masks(s: &Settings) -> Result<Option<MaskSet>> {
    match &s.masks {
        Some(_) => {
            let p = s.require(&s.masks, "--masks")?;
            Ok(Some(MaskSet::read(p).with_context(|| format!("reading masks {}", p.display()))?))
        }
        None => Ok(None),
    }
}

fn gen_data(mut s: Settings) -> Result<()> {
    run_dir(&s)?;
    let data = build_dataset(s.count, &s.sequence_spec(), s.data_seed)?;
    let path = s.output("data", "data.ffin")?;
    data.write(&path)?;
    println!("wrote {} sequences of {} frames to {}", data.len(), data.sequence_len(), path.display());
    finish(&s)
}

fn gen_masks(mut s: Settings) -> Result<()> {
    run_dir(&s)?;
    let m = &s.model;
    let set = MaskSet::generate(s.count, m.t_in, m.height, m.width, s.mask_seed, &s.train.mask)?;
    let path = s.output("masks", "masks.ffin")?;
    set.write(&path)?;
    println!("wrote {} x {} masks to {}", s.count, s.model.t_in, path.display());
    finish(&s)
}

fn train<S: Scalar + ToPayload>(mut s: Settings) -> Result<()> {
    let data = read_data(&s, s.require(&s.data, "--data")?)?;
    let mut trainer = match &s.ckpt {
        Some(_) => {
            let p = s.require(&s.ckpt, "--ckpt")?;
            let mut ckpt = Checkpoint::<S>::load(p).with_context(|| format!("reading checkpoint {}", p.display()))?;
            ckpt.train.steps = s.train.steps;
            s.model = ckpt.model.clone();
            s.train = ckpt.train.clone();
            Trainer::resume(ckpt)?
        }
        None => Trainer::<S>::new(s.model.clone(), s.train.clone())?,
    };
    run_dir(&s)?;
    let ckpt_path = s.output("checkpoint", "checkpoint.ffin")?;
    let log_path = s.output("log", "log.csv")?;
    let total = trainer.ckpt.train.steps;
    let every = (total / 10).max(1);
    let rows = trainer.run(&data, Some(&ckpt_path), |r| {
        if r.step % every == 0 || r.step == total {
            eprintln!("step {:>6}/{total}  lr {:.3e}  loss_pre {:.6}  loss_rec {:.6}", r.step, r.lr, r.loss_pre, r.loss_rec);
        }
    })?;
    std::fs::write(&log_path, log_csv(&rows))?;
    if let Some(last) = rows.last() {
        println!(
            "final step {} loss_pre {:?} loss_rec {:?} loss_total {:?}",
            last.step, last.loss_pre, last.loss_rec, last.loss_total
        );
    }
    finish(&s)
}

fn write_report(s: &mut Settings, report: &EvalReport) -> Result<()> {
    std::fs::write(s.output("report_csv", "report.csv")?, report.to_csv())?;
    let table = report.table();
    std::fs::write(s.output("report_table", "report.txt")?, &table)?;
    print!("{table}");
    Ok(())
}

fn eval<S: Scalar + ToPayload>(mut s: Settings, oracle: bool) -> Result<()> {
    let masks = read_masks(&s)?;
    let opts = EvalOptions { masks: masks.as_ref(), fill: s.train.mask.fill, ..Default::default() };
    let report = if oracle {
        let data = read_data(&s, s.require(&s.data, "--data")?)?;
        let truth = GroundTruth { dataset: &data, t_in: s.model.t_in, t_out: s.model.t_out };
        evaluate(&truth, &data, &opts)?
    } else {
        let p = s.require(&s.ckpt, "--ckpt (or --oracle)")?;
        let ckpt = Checkpoint::<S>::load(p).with_context(|| format!("reading checkpoint {}", p.display()))?;
        s.model = ckpt.model.clone();
        let data = read_data(&s, s.require(&s.data, "--data")?)?;
        evaluate(&ckpt.net(), &data, &opts)?
    };
    run_dir(&s)?;
    write_report(&mut s, &report)?;
    finish(&s)
}

fn predict<S: Scalar + ToPayload>(mut s: Settings, index: usize) -> Result<()> {
    let p = s.require(&s.ckpt, "--ckpt")?;
    let net = Checkpoint::<S>::load(p).with_context(|| format!("reading checkpoint {}", p.display()))?.net();
    s.model = net.config.clone();
    let data = read_data(&s, s.require(&s.data, "--data")?)?;
    if index >= data.len() {
        bail!("--index {index} out of range for {} sequences", data.len());
    }
    let (t_in, t_out) = (s.model.t_in, s.model.t_out);
    let seq = data.batch(&[index])?;
    let input = seq.narrow(1, 0, t_in)?;
    let target = seq.narrow(1, t_in, t_out)?;
    let occluded = match read_masks(&s)? {
        Some(m) => apply_masks(&input, &m.batch(&[index])?.narrow(1, 0, t_in)?, s.train.mask.fill)?,
        None => input.clone(),
    };
    let (pred, rec) = net.predict(&occluded.cast::<S>())?;
    run_dir(&s)?;
    let strips: [(&str, Tensor<f32>); 5] = [
        ("input", input),
        ("occluded", occluded),
        ("recovered", rec.cast()),
        ("predicted", pred.cast()),
        ("target", target),
    ];
    for (name, frames) in strips {
        let shape = frames.shape()[1..].to_vec();
        let written = image::write_strip(&s.out.join(name), &frames.reshape(&shape)?)?;
        s.artifacts.push((name.to_string(), written.clone()));
        println!("wrote {}", written.display());
    }
    finish(&s)
}

fn sweep(mut s: Settings, eval_data: Option<std::path::PathBuf>, lambdas: &[f64]) -> Result<()> {
    let train_data = read_data(&s, s.require(&s.data, "--data")?)?;
    let eval_data = match &eval_data {
        Some(p) => read_data(&s, p)?,
        None => train_data.clone(),
    };
    let masks = read_masks(&s)?;
    let rows = lambda_sweep(&s.model, &s.train, &train_data, &eval_data, masks.as_ref(), lambdas)?;
    run_dir(&s)?;
    let csv = sweep_csv(&rows);
    std::fs::write(s.output("sweep", "sweep.csv")?, &csv)?;
    print!("{csv}");
    finish(&s)
}
