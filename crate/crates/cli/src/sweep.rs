//! Resumable grid runs over method x budget x m x seed x n_obs.
//!
//! Layout under `output_dir`:
//! `reference/s{seed}-n{n}/` holds observations and reference draws,
//! `runs/{method}-m{m}-B{budget}-s{seed}/` holds the dataset and checkpoint,
//! with one `n{n}/` directory per evaluated row.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use npse_core::oracles::reference_posterior;
use npse_core::samplers::{run_sampler, NetworkScores};
use npse_core::tasks::{draw_observations, task_by_name};
use serde::Serialize;

use crate::artifacts::{append_jsonl, read_checkpoint, read_json, read_table, write_json, write_observations, write_samples};
use crate::commands::{compare, simulate_setting, train_setting, CHECKPOINT_FILE, DATASET_FILE, TRAIN_MANIFEST};
use crate::config::{sha256_hex, ExperimentConfig, Setting};
use crate::error::{CliError, CliResult};
use crate::manifest::{verified, RunManifest};
use crate::results::{ResultRecord, Status};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "NPSE_WORKERS";

pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepRow {
    pub setting: Setting,
    pub n_obs: usize,
}

/// Every row of the grid, grouped by training setting.
pub fn sweep_rows(cfg: &ExperimentConfig) -> CliResult<Vec<SweepRow>> {
    Ok(cfg.settings()?.into_iter().flat_map(|s| cfg.n_obs.iter().map(move |&n| SweepRow { setting: s, n_obs: n })).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SweepSummary {
    pub rows: usize,
    pub completed: usize,
    pub skipped: usize,
    pub failed: usize,
}

fn hash_of<T: Serialize>(v: &T) -> String {
    sha256_hex(serde_json::to_string(v).expect("serializable").as_bytes())
}

fn setting_dir(cfg: &ExperimentConfig, s: Setting) -> PathBuf {
    cfg.output_dir.join("runs").join(format!("{}-m{}-B{}-s{}", s.method.as_str(), s.m_max, s.budget, s.seed))
}

fn reference_dir(cfg: &ExperimentConfig, seed: u64, n: usize) -> PathBuf {
    cfg.output_dir.join("reference").join(format!("s{seed}-n{n}"))
}

fn setting_hash(cfg: &ExperimentConfig, s: Setting) -> String {
    hash_of(&(&cfg.task, &cfg.network, &cfg.training, &cfg.schedule, &cfg.lr_grid, s))
}

fn reference_hash(cfg: &ExperimentConfig, seed: u64, n: usize) -> String {
    hash_of(&(&cfg.task, &cfg.oracle, cfg.sampler.n_samples, seed, n))
}

fn row_hash(cfg: &ExperimentConfig, r: SweepRow) -> String {
    hash_of(&(setting_hash(cfg, r.setting), &cfg.sampler, &cfg.evaluation, reference_hash(cfg, r.setting.seed, r.n_obs)))
}

/// Valid manifest with the expected configuration hash.
fn complete(manifest: &Path, hash: &str) -> bool {
    matches!(verified(manifest), Ok(Some(m)) if m.config_hash == hash)
}

/// Observations (first `n` of a per-seed draw of `max(n_obs)`) and reference draws.
fn ensure_reference(cfg: &ExperimentConfig, seed: u64, n: usize) -> CliResult<()> {
    let dir = reference_dir(cfg, seed, n);
    let manifest = dir.join("reference.manifest.json");
    let hash = reference_hash(cfg, seed, n);
    if complete(&manifest, &hash) {
        return Ok(());
    }
    std::fs::create_dir_all(&dir)?;
    let task = task_by_name(&cfg.task)?;
    let (_, xs) = draw_observations(task.as_ref(), cfg.max_n_obs(), seed)?;
    let xs = &xs[..n];
    let reference = reference_posterior(task.as_ref(), xs, cfg.sampler.n_samples, &cfg.oracle, seed)?;
    let (obs_path, ref_path) = (dir.join("observations.csv"), dir.join("reference.csv"));
    write_observations(&obs_path, xs)?;
    write_samples(&ref_path, &reference.samples)?;
    RunManifest::build("reference", &hash, &dir, &[("observations", &obs_path), ("reference", &ref_path)])?.write(&manifest)
}

fn ensure_trained(cfg: &ExperimentConfig, s: Setting) -> CliResult<()> {
    let dir = setting_dir(cfg, s);
    let hash = setting_hash(cfg, s);
    let manifest = dir.join(TRAIN_MANIFEST);
    if complete(&manifest, &hash) {
        return Ok(());
    }
    simulate_setting(cfg, s, &dir)?;
    train_setting(cfg, s, &dir.join(DATASET_FILE), &dir, true)?;
    // re-stamp with the setting hash so unrelated grid edits do not invalidate it
    let mut m = RunManifest::load(&manifest)?;
    m.config_hash = hash;
    m.write(&manifest)
}

fn base_record(cfg: &ExperimentConfig, r: SweepRow, status: Status) -> ResultRecord {
    ResultRecord {
        task: Some(cfg.task.clone()),
        method: Some(r.setting.method),
        m: Some(r.setting.m_max),
        n_obs: Some(r.n_obs),
        budget: Some(r.setting.budget),
        seed: Some(r.setting.seed),
        ..ResultRecord::empty(status)
    }
}

fn run_row(cfg: &ExperimentConfig, r: SweepRow) -> CliResult<ResultRecord> {
    let start = Instant::now();
    let row_dir = setting_dir(cfg, r.setting).join(format!("n{}", r.n_obs));
    std::fs::create_dir_all(&row_dir)?;
    let ref_dir = reference_dir(cfg, r.setting.seed, r.n_obs);
    let obs = read_table(&ref_dir.join("observations.csv"))?;
    let reference = read_table(&ref_dir.join("reference.csv"))?;
    let ck = read_checkpoint(&setting_dir(cfg, r.setting).join(CHECKPOINT_FILE))?;
    let sch = ck.header.schedule.build()?;
    let scores = NetworkScores::from_observations(&ck.network, &sch, &obs)?;
    let samples = run_sampler(&scores, &sch, &cfg.sampler.with_seed(r.setting.seed))?;
    let samples_path = row_dir.join("samples.csv");
    write_samples(&samples_path, &samples)?;
    let metrics = compare(&samples, &reference, &cfg.evaluation.metrics, cfg.evaluation.estimator, &cfg.evaluation.c2st, r.setting.seed)?;
    let rec = ResultRecord { mmd2: metrics.mmd2, c2st: metrics.c2st, wallclock: start.elapsed().as_secs_f64(), ..base_record(cfg, r, Status::Ok) };
    let rec_path = row_dir.join("record.json");
    write_json(&rec_path, &rec)?;
    RunManifest::build("sweep-row", &row_hash(cfg, r), &row_dir, &[("samples", &samples_path), ("record", &rec_path)])?
        .write(&row_dir.join("row.manifest.json"))?;
    Ok(rec)
}

enum Outcome {
    Done(ResultRecord),
    Skipped(ResultRecord),
}

/// Runs `jobs` on a bounded pool, forwarding each result to `sink` on the
/// calling thread.
fn pool<J: Sync, T: Send>(jobs: &[J], workers: usize, work: impl Fn(&J) -> T + Sync, mut sink: impl FnMut(T)) {
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|s| {
        for _ in 0..workers.min(jobs.len()).max(1) {
            let tx = tx.clone();
            let (next, work) = (&next, &work);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                if tx.send(work(&jobs[i])).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for item in rx {
            sink(item);
        }
    });
}

/// Runs every row not already completed. Failed rows are recorded and the
/// sweep continues; the results file is written only from this thread.
pub fn cmd_sweep(cfg: &ExperimentConfig, quiet: bool) -> CliResult<SweepSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let rows = sweep_rows(cfg)?;
    let workers = worker_count();
    let results = cfg.output_dir.join("results.jsonl");
    let mut summary = SweepSummary { rows: rows.len(), ..Default::default() };

    let mut keys: Vec<(u64, usize)> = rows.iter().map(|r| (r.setting.seed, r.n_obs)).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut ref_errors = std::collections::HashMap::new();
    pool(&keys, workers, |&(seed, n)| ((seed, n), ensure_reference(cfg, seed, n)), |(k, res)| {
        if let Err(e) = res {
            ref_errors.insert(k, e.to_string());
        }
    });

    let settings = cfg.settings()?;
    let mut table: Vec<Option<ResultRecord>> = vec![None; rows.len()];
    let mut io_error = None;
    let job = |s: &Setting| -> Vec<(usize, Outcome)> {
        let mine: Vec<(usize, SweepRow)> = rows.iter().copied().enumerate().filter(|(_, r)| r.setting == *s).collect();
        let pending: Vec<_> = mine
            .iter()
            .filter(|(_, r)| {
                let dir = setting_dir(cfg, r.setting).join(format!("n{}", r.n_obs));
                !complete(&dir.join("row.manifest.json"), &row_hash(cfg, *r))
            })
            .collect();
        let trained = if pending.is_empty() { Ok(()) } else { ensure_trained(cfg, *s) };
        mine.iter()
            .map(|&(i, r)| {
                let dir = setting_dir(cfg, r.setting).join(format!("n{}", r.n_obs));
                if complete(&dir.join("row.manifest.json"), &row_hash(cfg, r)) {
                    if let Ok(rec) = read_json::<ResultRecord>(&dir.join("record.json")) {
                        return (i, Outcome::Skipped(rec));
                    }
                }
                let res = match (&trained, ref_errors.get(&(r.setting.seed, r.n_obs))) {
                    (Err(e), _) => Err(CliError::Numeric(format!("training failed: {e}"))),
                    (_, Some(e)) => Err(CliError::Numeric(format!("reference failed: {e}"))),
                    _ => run_row(cfg, r),
                };
                let rec = res.unwrap_or_else(|e| ResultRecord { error: Some(e.to_string()), ..base_record(cfg, r, Status::Failed) });
                (i, Outcome::Done(rec))
            })
            .collect()
    };
    pool(&settings, workers, job, |batch| {
        for (i, outcome) in batch {
            let rec = match outcome {
                Outcome::Skipped(rec) => {
                    summary.skipped += 1;
                    rec
                }
                Outcome::Done(rec) => {
                    match rec.status {
                        Status::Ok => summary.completed += 1,
                        Status::Failed => summary.failed += 1,
                    }
                    if !quiet {
                        eprintln!(
                            "{} m={} B={} seed={} n_obs={}: {:?} mmd2={:?}",
                            rows[i].setting.method.as_str(),
                            rows[i].setting.m_max,
                            rows[i].setting.budget,
                            rows[i].setting.seed,
                            rows[i].n_obs,
                            rec.status,
                            rec.mmd2
                        );
                    }
                    if let Err(e) = append_jsonl(&results, &rec) {
                        io_error.get_or_insert(e);
                    }
                    rec
                }
            };
            table[i] = Some(rec);
        }
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    write_table(&cfg.output_dir.join("results_table.csv"), &table)?;
    Ok(summary)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_table(path: &Path, table: &[Option<ResultRecord>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task", "method", "m", "n_obs", "budget", "seed", "status", "mmd2", "c2st", "wallclock"])?;
    for rec in table.iter().flatten() {
        w.write_record([
            opt(rec.task.as_ref()),
            opt(rec.method.map(|m| m.as_str())),
            opt(rec.m),
            opt(rec.n_obs),
            opt(rec.budget),
            opt(rec.seed),
            match rec.status {
                Status::Ok => "ok".into(),
                Status::Failed => "failed".into(),
            },
            opt(rec.mmd2),
            opt(rec.c2st),
            rec.wallclock.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
