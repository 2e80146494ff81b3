//! The single-artifact subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use npse_core::evaluation::{c2st, mmd2, median_bandwidth, C2stConfig, MmdEstimator};
use npse_core::oracles::{reference_posterior, RwmConfig};
use npse_core::samplers::{partition_observations, run_sampler, NetworkScores, SamplerConfig};
use npse_core::tasks::{draw_observations, task_by_name};
use npse_core::training::{generate_dataset, select_best, train_with_observer, EpochRecord};
use serde::{Deserialize, Serialize};

use crate::artifacts::*;
use crate::config::{ExperimentConfig, Metric, Setting};
use crate::error::{CliError, CliResult};
use crate::manifest::{check_before_use, file_sha256, RunManifest};
use crate::results::{ResultRecord, Status};

pub const DATASET_FILE: &str = "dataset.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const SIMULATE_MANIFEST: &str = "simulate.manifest.json";
pub const TRAIN_MANIFEST: &str = "train.manifest.json";

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

/// `<file>.manifest.json` beside a single-file output.
pub fn sidecar_manifest(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}

fn parent_dir(p: &Path) -> &Path {
    p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

pub fn default_setting(cfg: &ExperimentConfig, seed: u64) -> CliResult<Setting> {
    Ok(Setting { method: cfg.method, budget: cfg.budget, m_max: cfg.m_max_resolved()?, seed })
}

/// Generates the training set for one setting into `out_dir`.
pub fn simulate_setting(cfg: &ExperimentConfig, s: Setting, out_dir: &Path) -> CliResult<DatasetHeader> {
    ensure_dir(out_dir)?;
    let task = task_by_name(&cfg.task)?;
    if s.budget < s.m_max {
        return Err(CliError::Config(format!("budget {} is below m_max {}", s.budget, s.m_max)));
    }
    let data = generate_dataset(task.as_ref(), s.budget, s.m_max, s.seed)?;
    let header = DatasetHeader {
        task: cfg.task.clone(),
        m_max: s.m_max,
        budget: s.budget,
        seed: s.seed,
        theta_dim: task.theta_dim(),
        x_dim: task.x_dim(),
        examples: data.examples.len(),
        simulator_calls: data.simulator_calls,
        rejected_calls: data.rejected_calls,
    };
    let path = out_dir.join(DATASET_FILE);
    write_dataset(&path, &header, &data)?;
    RunManifest::build("simulate", &cfg.hash(), out_dir, &[("dataset", &path)])?.write(&out_dir.join(SIMULATE_MANIFEST))?;
    Ok(header)
}

pub fn cmd_simulate(cfg: &ExperimentConfig, seed: u64, out_dir: &Path) -> CliResult<DatasetHeader> {
    simulate_setting(cfg, default_setting(cfg, seed)?, out_dir)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub lr: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs: Vec<usize>,
}

/// Runs the learning-rate grid on `dataset` and writes the best network,
/// the per-epoch log of every run and a manifest into `out_dir`.
pub fn train_setting(cfg: &ExperimentConfig, s: Setting, dataset: &Path, out_dir: &Path, quiet: bool) -> CliResult<TrainSummary> {
    ensure_dir(out_dir)?;
    check_before_use(dataset)?;
    let (h, data) = read_dataset(dataset)?;
    if h.task != cfg.task || h.m_max != s.m_max {
        return Err(CliError::Config(format!(
            "dataset was generated for task {} with m_max {}, config expects {} with m_max {}",
            h.task, h.m_max, cfg.task, s.m_max
        )));
    }
    let sch = cfg.schedule.build()?;
    let net_cfg = cfg.network_config(h.theta_dim, h.x_dim, s.m_max);
    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let _ = std::fs::remove_file(&log_path);
    let mut runs = Vec::new();
    for &lr in &cfg.lr_grid {
        let tcfg = cfg.training_config(Setting { seed: h.seed, ..s }, lr);
        let mut io_err = None;
        let out = train_with_observer(&data.examples, net_cfg, &tcfg, &sch, |r: &EpochRecord| {
            if !quiet && (r.epoch == 1 || r.epoch.is_multiple_of(50)) {
                eprintln!("lr {lr:e} epoch {} train {:.5} val {:.5}", r.epoch, r.train_loss, r.val_loss);
            }
            if let Err(e) = append_jsonl(&log_path, r) {
                io_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_err {
            return Err(e);
        }
        runs.push(out);
    }
    let best = &runs[select_best(&runs).expect("non-empty grid")];
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        network: net_cfg,
        schedule: cfg.schedule,
        training: TrainingMeta {
            task: cfg.task.clone(),
            method: s.method,
            budget: h.budget,
            seed: h.seed,
            lr: best.lr,
            lr_grid: cfg.lr_grid.clone(),
            best_val_loss: best.best_val_loss,
            best_epoch: best.best_epoch,
            epochs_run: best.log.len(),
            dataset_sha256: file_sha256(dataset)?,
        },
        n_params: best.network.num_params(),
    };
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    write_checkpoint(&ck_path, &Checkpoint { header, network: best.network.clone() })?;
    RunManifest::build("train", &cfg.hash(), out_dir, &[("checkpoint", &ck_path), ("train_log", &log_path)])?
        .write(&out_dir.join(TRAIN_MANIFEST))?;
    Ok(TrainSummary {
        lr: best.lr,
        best_val_loss: best.best_val_loss,
        best_epoch: best.best_epoch,
        epochs: runs.iter().map(|r| r.log.len()).collect(),
    })
}

pub fn cmd_train(cfg: &ExperimentConfig, dataset: &Path, out_dir: &Path) -> CliResult<TrainSummary> {
    check_before_use(dataset)?;
    let (h, _) = read_dataset(dataset)?;
    train_setting(cfg, default_setting(cfg, h.seed)?, dataset, out_dir, false)
}

fn load_observations(path: &Path, x_dim: usize) -> CliResult<Vec<Vec<f64>>> {
    let obs = read_table(path)?;
    if obs.is_empty() {
        return Err(CliError::Config(format!("{} holds no observations", path.display())));
    }
    if let Some(bad) = obs.iter().find(|r| r.len() != x_dim) {
        return Err(CliError::Config(format!("observations have dimension {}, the task expects {x_dim}", bad.len())));
    }
    Ok(obs)
}

/// Samples the composed posterior of a checkpoint given an observation file.
/// `subset_size` overrides the partition size (at most the network's `m_max`).
pub fn cmd_sample(checkpoint: &Path, observations: &Path, sampler: &SamplerConfig, subset_size: Option<usize>, out: &Path) -> CliResult<SamplesMeta> {
    let start = Instant::now();
    check_before_use(checkpoint)?;
    let ck = read_checkpoint(checkpoint)?;
    let net_cfg = ck.header.network;
    let obs = load_observations(observations, net_cfg.x_dim)?;
    let size = subset_size.unwrap_or(net_cfg.m_max);
    if size == 0 || size > net_cfg.m_max {
        return Err(CliError::Config(format!("subset size {size} outside 1..={}", net_cfg.m_max)));
    }
    let sch = ck.header.schedule.build()?;
    let sets = partition_observations(obs.len(), size)?.apply(&obs)?;
    let scores = NetworkScores::new(&ck.network, &sch, &sets)?;
    let samples = run_sampler(&scores, &sch, sampler)?;
    ensure_dir(parent_dir(out))?;
    write_samples(out, &samples)?;
    let meta = SamplesMeta {
        task: ck.header.training.task.clone(),
        source: "network".into(),
        n_samples: samples.len(),
        n_obs: obs.len(),
        seed: sampler.seed,
        space: "working".into(),
        sampler: Some(sampler.clone()),
        subsets: Some(sets.len()),
        checkpoint_sha256: Some(file_sha256(checkpoint)?),
        acceptance: None,
        wallclock: start.elapsed().as_secs_f64(),
    };
    finish_samples(out, &meta, "sample")?;
    Ok(meta)
}

fn finish_samples(out: &Path, meta: &SamplesMeta, command: &str) -> CliResult<()> {
    let mp = meta_path(out);
    write_json(&mp, meta)?;
    RunManifest::build(command, "", parent_dir(out), &[("samples", out)])?.write(&sidecar_manifest(out))
}

/// Reference posterior draws in the same format as `cmd_sample`.
pub fn cmd_oracle(task: &str, observations: &Path, rwm: &RwmConfig, n_samples: usize, seed: u64, out: &Path) -> CliResult<SamplesMeta> {
    let start = Instant::now();
    let model = task_by_name(task)?;
    let obs = load_observations(observations, model.x_dim())?;
    if n_samples == 0 {
        return Err(CliError::Config("n_samples must be positive".into()));
    }
    let reference = reference_posterior(model.as_ref(), &obs, n_samples, rwm, seed)?;
    ensure_dir(parent_dir(out))?;
    write_samples(out, &reference.samples)?;
    let meta = SamplesMeta {
        task: task.into(),
        source: reference.method.into(),
        n_samples,
        n_obs: obs.len(),
        seed,
        space: "working".into(),
        sampler: None,
        subsets: None,
        checkpoint_sha256: None,
        acceptance: reference.acceptance,
        wallclock: start.elapsed().as_secs_f64(),
    };
    finish_samples(out, &meta, "oracle")?;
    Ok(meta)
}

/// Computes the requested metrics between two sample sets.
pub fn compare(a: &[Vec<f64>], b: &[Vec<f64>], metrics: &[Metric], estimator: MmdEstimator, c2st_cfg: &C2stConfig, seed: u64) -> CliResult<ResultRecord> {
    let start = Instant::now();
    let (da, db) = (a.first().map_or(0, |r| r.len()), b.first().map_or(0, |r| r.len()));
    if da != db {
        return Err(CliError::Config(format!("sample dimensions differ: {da} vs {db}")));
    }
    let mut rec = ResultRecord::empty(Status::Ok);
    for m in metrics {
        match m {
            Metric::Mmd => {
                let rep = mmd2(a, b, median_bandwidth(a, b, seed)?, estimator)?;
                rec.mmd2 = Some(rep.mmd2);
                rec.mmd_report = Some(rep);
            }
            Metric::C2st => {
                let n = a.len().min(b.len());
                let rep = c2st(&a[..n], &b[..n], seed, seed.wrapping_add(1), c2st_cfg)?;
                rec.c2st = Some(rep.accuracy);
                rec.c2st_report = Some(rep);
            }
        }
    }
    rec.wallclock = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// Appends one record comparing two sample files to `results`.
pub fn cmd_evaluate(a: &Path, b: &Path, metrics: &[Metric], estimator: MmdEstimator, seed: u64, results: &Path) -> CliResult<ResultRecord> {
    check_before_use(a)?;
    check_before_use(b)?;
    let (xa, xb) = (read_table(a)?, read_table(b)?);
    let mut rec = compare(&xa, &xb, metrics, estimator, &C2stConfig::default(), seed)?;
    rec.samples = Some([a.to_path_buf(), b.to_path_buf()]);
    ensure_dir(parent_dir(results))?;
    append_jsonl(results, &rec)?;
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationsMeta {
    pub task: String,
    pub n_obs: usize,
    pub seed: u64,
    /// Working-space parameters the observations were simulated at.
    pub theta: Vec<f64>,
    pub native_theta: Vec<f64>,
}

/// Simulates `n` observations at a prior draw.
pub fn cmd_observe(task: &str, n: usize, seed: u64, out: &Path) -> CliResult<ObservationsMeta> {
    let model = task_by_name(task)?;
    let (theta, xs) = draw_observations(model.as_ref(), n, seed)?;
    ensure_dir(parent_dir(out))?;
    write_observations(out, &xs)?;
    let meta = ObservationsMeta { task: task.into(), n_obs: n, seed, native_theta: model.transport(&theta), theta };
    write_json(&meta_path(out), &meta)?;
    Ok(meta)
}
