//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use cpm_core::synth::{generate, SynthConfig};
use cpm_core::train::{evaluate, TrainConfig, TrainData};

use crate::checkpoint;
use crate::dataset;
use crate::error::Result;
use crate::fsutil::{read_json, write_json};
use crate::run::{self, apply_override, fit_to_data, out_dir, RunManifest, RunOptions};

#[derive(Debug, Parser)]
#[command(
    name = "cpm",
    version,
    about = "Class-conditional prompting for audio-visual segmentation on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenData),
    /// Train a model and write checkpoints and metrics.
    Train(Train),
    /// Evaluate a checkpoint on a dataset split.
    Eval(Eval),
    /// STS series and coverage report for a checkpoint.
    Diagnose(Eval),
    /// Train once per value of one parameter and seed.
    Sweep(Sweep),
}

#[derive(Debug, Args)]
pub struct GenData {
    /// JSON generator config; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the scene count of the config.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` overrides, e.g. `ccdm=off`, `pooling=mmp`, `lambda=1`.
    #[arg(long = "ablate", value_delimiter = ',')]
    pub ablate: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct Train {
    #[command(flatten)]
    pub common: TrainArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many epochs; the learning-rate schedule is unchanged.
    #[arg(long)]
    pub until_epoch: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Sweep {
    #[command(flatten)]
    pub common: TrainArgs,
    /// Parameter to vary: lambda, components, temperature, momentum, ...
    #[arg(long)]
    pub param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_data(path: &Path) -> Result<TrainData> {
    Ok(TrainData::new(dataset::load(path)?)?)
}

fn resolve(args: &TrainArgs, data: &TrainData) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    for a in &args.ablate {
        apply_override(&mut cfg, a)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    fit_to_data(&mut cfg, data);
    cfg.validate()?;
    Ok(cfg)
}

fn split_of(data: &TrainData, split: Split) -> &[usize] {
    match split {
        Split::Train => &data.set.train,
        Split::Test => &data.set.test,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let mut cfg: SynthConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => SynthConfig::default(),
            };
            if let Some(n) = a.scenes {
                cfg.scenes = n;
            }
            let out = out_dir(a.out.as_deref(), &format!("data-seed{}", a.seed));
            let set = generate(&cfg, a.seed)?;
            let m = dataset::save(&set, &out)?;
            println!(
                "{} scenes ({} train, {} test) -> {}",
                m.scenes.len(),
                m.train.len(),
                m.test.len(),
                out.display()
            );
        }
        Command::Train(a) => {
            let data = load_data(&a.common.data)?;
            let cfg = resolve(&a.common, &data)?;
            let out = out_dir(a.out.as_deref(), &format!("train-seed{}", cfg.seed));
            let opts = RunOptions {
                resume: a.resume,
                until_epoch: a.until_epoch,
                quiet: a.common.quiet,
            };
            let r = run::train_run(&data, &a.common.data, &cfg, &out, &opts)?;
            match r.summary {
                Some(s) => println!("{}", serde_json::to_string_pretty(&s).expect("summary")),
                None => println!("stopped after epoch {} of {}", r.state.epoch, cfg.epochs),
            }
        }
        Command::Eval(a) => {
            let data = load_data(&a.data)?;
            let ck = checkpoint::load(&a.checkpoint)?;
            let out = out_dir(a.out.as_deref(), "eval");
            let mut m = RunManifest::new(
                "eval",
                ck.header.config.seed,
                serde_json::to_value(&ck.header.config).expect("config"),
                &[&a.checkpoint, &a.data],
            );
            m.config_hash = Some(ck.header.config_hash.clone());
            m.write(&out)?;
            let e = evaluate(
                &ck.state,
                &data,
                split_of(&data, a.split),
                &ck.header.config,
            )?;
            let v = serde_json::json!({
                "miou": e.miou, "f_beta": e.f_beta, "coverage": e.coverage, "scenes": e.scenes,
            });
            write_json(&out.join("eval.json"), &v)?;
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
        }
        Command::Diagnose(a) => {
            let data = load_data(&a.data)?;
            let out = out_dir(a.out.as_deref(), "diagnose");
            let d = run::diagnose(&a.checkpoint, &data, split_of(&data, a.split), &out)?;
            let ck = checkpoint::load(&a.checkpoint)?;
            let mut m = RunManifest::new(
                "diagnose",
                ck.header.config.seed,
                serde_json::to_value(&ck.header.config).expect("config"),
                &[&a.checkpoint, &a.data],
            );
            m.config_hash = Some(ck.header.config_hash);
            m.write(&out)?;
            println!("{}", serde_json::to_string_pretty(&d).expect("json"));
        }
        Command::Sweep(a) => {
            let data = load_data(&a.common.data)?;
            let cfg = resolve(&a.common, &data)?;
            let out = out_dir(a.out.as_deref(), &format!("sweep-{}", a.param));
            let rows = run::sweep(
                &data,
                &a.common.data,
                &cfg,
                &a.param,
                &a.values,
                &a.seeds,
                &out,
                a.common.quiet,
            )?;
            for r in rows {
                println!(
                    "{}={} seed {}: miou {:.4} f_beta {:.4} coverage {:.3} sts {}",
                    r.param,
                    r.value,
                    r.seed,
                    r.miou,
                    r.f_beta,
                    r.coverage,
                    r.sts.map_or("-".into(), |s| format!("{s:.4}"))
                );
            }
        }
    }
    Ok(())
}
