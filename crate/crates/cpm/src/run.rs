//! Run directories: training with checkpoints and resume, evaluation,
//! diagnostics and parameter sweeps.

use std::path::{Path, PathBuf};

use cpm_core::objectives::Pooling;
use cpm_core::train::{
    evaluate, evaluate_separation, train_epoch, RunState, TrainConfig, TrainData,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, config_hash};
use crate::error::{Error, Result};
use crate::fsutil::write_json;
use crate::report::{write_csv, EpochRow, Summary};

pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";
pub const RUN_MANIFEST: &str = "manifest.json";
/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "CPM_OUT_ROOT";

/// Named random streams derived from the run seed.
pub const STREAMS: [&str; 6] = ["init", "order", "cpm", "em", "eval-separation", "split"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub streams: Vec<String>,
    pub config_hash: Option<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    /// Extra per-command details, e.g. sweep seeds.
    pub details: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value, inputs: &[&Path]) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            streams: STREAMS.iter().map(|s| s.to_string()).collect(),
            config_hash: None,
            config,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            details: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RUN_MANIFEST), self)
    }
}

/// `--out` if given, otherwise `$CPM_OUT_ROOT/<name>` (default root `runs`).
pub fn out_dir(out: Option<&Path>, name: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(std::env::var_os(OUT_ROOT_VAR).unwrap_or_else(|| "runs".into()))
            .join(name),
    }
}

fn on_off(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Usage(format!("{key} expects on/off, got {value:?}"))),
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("{key}: cannot parse {value:?}")))
}

/// Applies one `key=value` override.
pub fn set_option(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "ccdm" => cfg.ccdm = on_off(key, value)?,
        "acp" => cfg.cpm.acp = on_off(key, value)?,
        "vcp" => cfg.cpm.vcp = on_off(key, value)?,
        "pcl" => cfg.cpm.pcl = on_off(key, value)?,
        "cpm" => {
            let v = on_off(key, value)?;
            cfg.cpm.acp = v;
            cfg.cpm.vcp = v;
            cfg.cpm.pcl = v;
        }
        "stop_encoder_grad" => cfg.cpm.stop_encoder_grad = on_off(key, value)?,
        "alternate" => cfg.alternate = on_off(key, value)?,
        "pooling" => {
            cfg.cpm.pooling = match value {
                "map" | "mean" => Pooling::Mean,
                "mmp" | "max" => Pooling::Max,
                _ => {
                    return Err(Error::Usage(format!(
                        "pooling expects map or mmp, got {value:?}"
                    )))
                }
            }
        }
        "lambda" => cfg.lambda = num(key, value)?,
        "temperature" | "tau" => cfg.cpm.temperature = num(key, value)?,
        "components" | "m" => cfg.gmm.components = num(key, value)?,
        "momentum" | "rho" => cfg.gmm.momentum = num(key, value)?,
        "bank_size" => cfg.gmm.bank_size = num(key, value)?,
        "lr" => cfg.lr = num(key, value)?,
        "weight_decay" => cfg.weight_decay = num(key, value)?,
        "epochs" => cfg.epochs = num(key, value)?,
        "batch_size" => cfg.batch_size = num(key, value)?,
        "seed" => cfg.seed = num(key, value)?,
        _ => return Err(Error::Usage(format!("unknown option {key:?}"))),
    }
    Ok(())
}

/// Parses `key=value` and applies it.
pub fn apply_override(cfg: &mut TrainConfig, spec: &str) -> Result<()> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("expected key=value, got {spec:?}")))?;
    set_option(cfg, k.trim(), v.trim())
}

/// Makes the model shape follow the dataset.
pub fn fit_to_data(cfg: &mut TrainConfig, data: &TrainData) {
    cfg.model.classes = data.classes();
    cfg.model.height = data.set.config.height;
    cfg.model.width = data.set.config.width;
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from the checkpoint in the output directory if present.
    pub resume: bool,
    /// Stop after this many completed epochs (the schedule still spans
    /// `cfg.epochs`).
    pub until_epoch: Option<usize>,
    pub quiet: bool,
}

pub struct RunOutcome {
    pub rows: Vec<EpochRow>,
    pub summary: Option<Summary>,
    pub state: RunState,
}

/// Trains `cfg` on `data` inside `out`, checkpointing after every epoch.
/// `summary` is set once all epochs are done.
pub fn train_run(
    data: &TrainData,
    data_path: &Path,
    cfg: &TrainConfig,
    out: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let ckpt_path = out.join(CHECKPOINT);
    let (mut state, mut rows) = if opts.resume && ckpt_path.exists() {
        let ck = checkpoint::load(&ckpt_path)?;
        if ck.header.config_hash != config_hash(cfg) {
            return Err(Error::Usage(format!(
                "{} was written with a different config",
                ckpt_path.display()
            )));
        }
        (ck.state, ck.header.history)
    } else {
        (RunState::new(cfg)?, Vec::new())
    };
    let mut manifest = RunManifest::new(
        "train",
        cfg.seed,
        serde_json::to_value(cfg).expect("config"),
        &[data_path],
    );
    manifest.config_hash = Some(config_hash(cfg));
    manifest.details = serde_json::json!({ "data_seed": data.set.seed });
    manifest.write(out)?;
    let stop = opts.until_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
    while state.epoch < stop {
        let epoch = train_epoch(&mut state, data, cfg)?;
        let eval = evaluate(&state, data, &data.set.test, cfg)?;
        let row = EpochRow::new(&epoch, &eval, "test");
        if !opts.quiet {
            eprintln!(
                "epoch {:>3}  loss {:.4}  miou {:.4}  f_beta {:.4}  coverage {:.3}  sts {}",
                row.epoch,
                row.loss,
                row.miou,
                row.f_beta,
                row.coverage,
                row.sts.map_or("-".to_string(), |s| format!("{s:.4}"))
            );
        }
        rows.push(row);
        checkpoint::save(&ckpt_path, cfg, &state, &rows)?;
        write_csv(&out.join(METRICS), &rows)?;
    }
    let summary = if state.epoch >= cfg.epochs {
        let eval = evaluate(&state, data, &data.set.test, cfg)?;
        let sep = evaluate_separation(&state, data, &data.set.test, cfg)?;
        let s = Summary::new(rows.len(), &eval, &state.sts_history, sep);
        write_json(&out.join(SUMMARY), &s)?;
        Some(s)
    } else {
        None
    };
    Ok(RunOutcome {
        rows,
        summary,
        state,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub seed: u64,
    pub miou: f64,
    pub f_beta: f64,
    pub coverage: f64,
    pub sts: Option<f64>,
    pub separation_mse: Option<f64>,
}

/// One training run per `(value, seed)`, sequentially; rows in that order.
pub fn sweep(
    data: &TrainData,
    data_path: &Path,
    base: &TrainConfig,
    param: &str,
    values: &[String],
    seeds: &[u64],
    out: &Path,
    quiet: bool,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for v in values {
        let mut cfg = base.clone();
        set_option(&mut cfg, param, v)?;
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            cfg.validate()?;
            runs.push((v.clone(), seed, cfg));
        }
    }
    let mut manifest = RunManifest::new(
        "sweep",
        base.seed,
        serde_json::to_value(base).expect("config"),
        &[data_path],
    );
    manifest.details = serde_json::json!({
        "param": param,
        "values": values,
        "runs": runs.iter().map(|(v, s, c)| serde_json::json!({
            "value": v, "seed": s, "config_hash": config_hash(c), "dir": run_name(param, v, *s),
        })).collect::<Vec<_>>(),
    });
    manifest.write(out)?;
    for (v, seed, cfg) in runs {
        if !quiet {
            eprintln!("{param}={v} seed {seed}");
        }
        let dir = out.join(run_name(param, &v, seed));
        let opts = RunOptions {
            resume: true,
            until_epoch: None,
            quiet,
        };
        let r = train_run(data, data_path, &cfg, &dir, &opts)?;
        let s = r.summary.expect("complete run");
        rows.push(SweepRow {
            param: param.to_string(),
            value: v,
            seed,
            miou: s.miou,
            f_beta: s.f_beta,
            coverage: s.coverage,
            sts: s.sts,
            separation_mse: s.separation_mse,
        });
        write_csv(&out.join("sweep.csv"), &rows)?;
    }
    Ok(rows)
}

fn run_name(param: &str, value: &str, seed: u64) -> String {
    format!("{param}={value}/seed{seed}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub scene: usize,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StsRow {
    pub epoch: usize,
    pub sts: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub epochs_trained: usize,
    pub sts_series: Vec<f64>,
    pub miou: f64,
    pub f_beta: f64,
    /// Mean per-scene Jaccard between post-audio-decoder classes and the
    /// sounding classes.
    pub coverage: f64,
    pub scenes: usize,
}

/// STS series and coverage report for a checkpoint on a split.
pub fn diagnose(ckpt: &Path, data: &TrainData, split: &[usize], out: &Path) -> Result<Diagnosis> {
    let ck = checkpoint::load(ckpt)?;
    let cfg = &ck.header.config;
    let eval = evaluate(&ck.state, data, split, cfg)?;
    let sts_rows: Vec<StsRow> = ck
        .state
        .sts_history
        .iter()
        .enumerate()
        .map(|(epoch, &sts)| StsRow { epoch, sts })
        .collect();
    let cov_rows: Vec<CoverageRow> = split
        .iter()
        .zip(&eval.per_scene_coverage)
        .map(|(&scene, &coverage)| CoverageRow { scene, coverage })
        .collect();
    write_csv(&out.join("sts.csv"), &sts_rows)?;
    write_csv(&out.join("coverage.csv"), &cov_rows)?;
    let d = Diagnosis {
        epochs_trained: ck.state.epoch,
        sts_series: ck.state.sts_history.clone(),
        miou: eval.miou,
        f_beta: eval.f_beta,
        coverage: eval.coverage,
        scenes: eval.scenes,
    };
    write_json(&out.join("report.json"), &d)?;
    Ok(d)
}
