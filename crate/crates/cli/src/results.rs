//! Result records (JSON lines) and the per-figure CSV report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use npse_core::evaluation::{C2stReport, MmdReport};
use serde::{Deserialize, Serialize};

use crate::artifacts::read_jsonl;
use crate::config::Method;
use crate::error::CliResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

/// One line of a results file. Sweep rows fill the experiment fields;
/// stand-alone evaluations fill `samples` instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_obs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub mmd2: Option<f64>,
    pub c2st: Option<f64>,
    /// Seconds spent producing this record.
    pub wallclock: f64,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd_report: Option<MmdReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c2st_report: Option<C2stReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<[PathBuf; 2]>,
}

impl ResultRecord {
    pub fn empty(status: Status) -> Self {
        ResultRecord {
            task: None,
            method: None,
            m: None,
            n_obs: None,
            budget: None,
            seed: None,
            mmd2: None,
            c2st: None,
            wallclock: 0.0,
            status,
            error: None,
            mmd_report: None,
            c2st_report: None,
            samples: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct RowKey {
    method: Method,
    m: usize,
    n_obs: usize,
    budget: usize,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Writes `mmd_vs_budget.csv` and `mmd_vs_m.csv` from the successful sweep
/// rows of `results`, averaging over seeds. When a row was recorded more
/// than once, the last record wins.
pub fn cmd_report(results: &Path, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let records: Vec<ResultRecord> = read_jsonl(results)?;
    let mut latest: BTreeMap<(String, RowKey, u64), f64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status == Status::Ok) {
        if let (Some(task), Some(method), Some(m), Some(n_obs), Some(budget), Some(seed), Some(mmd2)) =
            (&r.task, r.method, r.m, r.n_obs, r.budget, r.seed, r.mmd2)
        {
            latest.insert((task.clone(), RowKey { method, m, n_obs, budget }, seed), mmd2);
        }
    }
    let mut groups: BTreeMap<(String, RowKey), Vec<f64>> = BTreeMap::new();
    for ((task, key, _), v) in latest {
        groups.entry((task, key)).or_default().push(v);
    }

    let budget_path = out_dir.join("mmd_vs_budget.csv");
    let mut w = csv::Writer::from_path(&budget_path)?;
    w.write_record(["task", "method", "m", "n_obs", "budget", "mean_mmd2", "se_mmd2", "n_seeds"])?;
    for ((task, k), v) in &groups {
        let (mean, se) = mean_se(v);
        w.write_record([
            task.clone(),
            k.method.as_str().into(),
            k.m.to_string(),
            k.n_obs.to_string(),
            k.budget.to_string(),
            mean.to_string(),
            se.to_string(),
            v.len().to_string(),
        ])?;
    }
    w.flush()?;

    let m_path = out_dir.join("mmd_vs_m.csv");
    let mut w = csv::Writer::from_path(&m_path)?;
    w.write_record(["task", "budget", "n_obs", "m", "method", "mean_mmd2", "se_mmd2", "n_seeds"])?;
    let mut by_m: Vec<_> = groups.iter().collect();
    by_m.sort_by_key(|((task, k), _)| (task.clone(), k.budget, k.n_obs, k.m, k.method));
    for ((task, k), v) in by_m {
        let (mean, se) = mean_se(v);
        w.write_record([
            task.clone(),
            k.budget.to_string(),
            k.n_obs.to_string(),
            k.m.to_string(),
            k.method.as_str().into(),
            mean.to_string(),
            se.to_string(),
            v.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(vec![budget_path, m_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifacts::append_jsonl;

    #[test]
    fn report_averages_over_seeds_and_keeps_the_last_record() {
        let dir = tempfile::tempdir().unwrap();
        let res = dir.path().join("results.jsonl");
        let row = |seed, mmd2| ResultRecord {
            task: Some("gg".into()),
            method: Some(Method::Fnpse),
            m: Some(1),
            n_obs: Some(8),
            budget: Some(1000),
            seed: Some(seed),
            mmd2: Some(mmd2),
            ..ResultRecord::empty(Status::Ok)
        };
        for r in [row(0, 9.0), row(0, 1.0), row(1, 3.0), ResultRecord { mmd2: None, ..ResultRecord::empty(Status::Failed) }] {
            append_jsonl(&res, &r).unwrap();
        }
        let files = cmd_report(&res, dir.path()).unwrap();
        let text = std::fs::read_to_string(&files[0]).unwrap();
        let line = text.lines().nth(1).unwrap();
        assert!(line.starts_with("gg,fnpse,1,8,1000,2,1,2"), "{line}");
    }
}
