//! On-disk formats: binary datasets and checkpoints behind a one-line text
//! magic and a JSON header line, CSV sample and observation tables, and
//! JSON-lines logs.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use npse_core::schedule::ScheduleSpec;
use npse_core::score_net::{NetworkConfig, ObsScaling, ScoreNetwork, SetInput};
use npse_core::training::{Dataset, TrainingExample};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::error::{CliError, CliResult};

pub const DATASET_MAGIC: &str = "npse-dataset";
pub const CHECKPOINT_MAGIC: &str = "npse-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

fn format_err(m: impl Into<String>) -> CliError {
    CliError::Io(format!("malformed file: {}", m.into()))
}

fn write_header<T: Serialize>(w: &mut impl Write, magic: &str, header: &T) -> CliResult<()> {
    writeln!(w, "{magic} {FORMAT_VERSION}")?;
    writeln!(w, "{}", serde_json::to_string(header)?)?;
    Ok(())
}

fn read_header<T: DeserializeOwned>(r: &mut impl BufRead, magic: &str) -> CliResult<T> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != format!("{magic} {FORMAT_VERSION}") {
        return Err(format_err(format!("expected `{magic} {FORMAT_VERSION}`, found `{}`", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line)?;
    serde_json::from_str(line.trim_end()).map_err(|e| format_err(format!("header: {e}")))
}

fn put_f64s(w: &mut impl Write, values: &[f64]) -> CliResult<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_f64s(r: &mut impl Read, n: usize) -> CliResult<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf).map_err(|_| format_err("truncated body"))?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn expect_eof(r: &mut impl Read) -> CliResult<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(format_err("trailing bytes after body")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub task: String,
    pub m_max: usize,
    pub budget: usize,
    pub seed: u64,
    pub theta_dim: usize,
    pub x_dim: usize,
    pub examples: usize,
    pub simulator_calls: usize,
    pub rejected_calls: usize,
}

/// Body: per example, the set size as a little-endian `u64`, then `theta`,
/// then the `n x x_dim` observations, all as little-endian `f64`.
pub fn write_dataset(path: &Path, header: &DatasetHeader, data: &Dataset) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DATASET_MAGIC, header)?;
    for e in &data.examples {
        w.write_all(&(e.n_set() as u64).to_le_bytes())?;
        put_f64s(&mut w, &e.theta)?;
        put_f64s(&mut w, e.xs.flat())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> CliResult<(DatasetHeader, Dataset)> {
    let mut r = BufReader::new(File::open(path)?);
    let h: DatasetHeader = read_header(&mut r, DATASET_MAGIC)?;
    let mut examples = Vec::with_capacity(h.examples);
    for _ in 0..h.examples {
        let mut nb = [0u8; 8];
        r.read_exact(&mut nb).map_err(|_| format_err("truncated body"))?;
        let n = u64::from_le_bytes(nb) as usize;
        if n == 0 || n > h.m_max {
            return Err(format_err(format!("set size {n} outside 1..={}", h.m_max)));
        }
        let theta = get_f64s(&mut r, h.theta_dim)?;
        let xs = SetInput::from_flat(h.x_dim, get_f64s(&mut r, n * h.x_dim)?)?;
        examples.push(TrainingExample { theta, xs });
    }
    expect_eof(&mut r)?;
    let data = Dataset { examples, simulator_calls: h.simulator_calls, rejected_calls: h.rejected_calls };
    Ok((h, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub task: String,
    pub method: Method,
    pub budget: usize,
    pub seed: u64,
    pub lr: f64,
    pub lr_grid: Vec<f64>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub dataset_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub network: NetworkConfig,
    pub schedule: ScheduleSpec,
    pub training: TrainingMeta,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub network: ScoreNetwork,
}

/// Body: parameters in layout order, then the observation shift and scale.
pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, CHECKPOINT_MAGIC, &ck.header)?;
    put_f64s(&mut w, ck.network.params())?;
    put_f64s(&mut w, &ck.network.scaling().shift)?;
    put_f64s(&mut w, &ck.network.scaling().scale)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let header: CheckpointHeader = read_header(&mut r, CHECKPOINT_MAGIC)?;
    if header.format_version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported checkpoint version {}", header.format_version)));
    }
    let params = get_f64s(&mut r, header.n_params)?;
    let x_dim = header.network.x_dim;
    let scaling = ObsScaling { shift: get_f64s(&mut r, x_dim)?, scale: get_f64s(&mut r, x_dim)? };
    expect_eof(&mut r)?;
    let network = ScoreNetwork::from_parts(header.network, params, scaling)?;
    Ok(Checkpoint { header, network })
}

/// Rows of floats under a header of column names. Values use the shortest
/// representation that parses back to the same bits.
pub fn write_table(path: &Path, prefix: &str, rows: &[Vec<f64>]) -> CliResult<()> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..d).map(|i| format!("{prefix}{i}")))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let d = r.headers()?.len();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|e| format_err(format!("{} row {}: {e}", path.display(), i + 1))))
            .collect::<CliResult<Vec<f64>>>()?;
        if row.len() != d {
            return Err(format_err(format!("{} row {} has {} columns, header has {d}", path.display(), i + 1, row.len())));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_samples(path: &Path, rows: &[Vec<f64>]) -> CliResult<()> {
    write_table(path, "z", rows)
}

pub fn write_observations(path: &Path, rows: &[Vec<f64>]) -> CliResult<()> {
    write_table(path, "x", rows)
}

/// Sidecar describing how a samples file was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplesMeta {
    pub task: String,
    /// `"network"` or an oracle method (`"exact"`, `"rwm"`).
    pub source: String,
    pub n_samples: usize,
    pub n_obs: usize,
    pub seed: u64,
    /// Parameters are in the working space, where the prior is standard normal.
    pub space: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<npse_core::samplers::SamplerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsets: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance: Option<f64>,
    pub wallclock: f64,
}

pub fn meta_path(samples: &Path) -> std::path::PathBuf {
    let mut s = samples.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(format!("{}: {e}", path.display())))
}

/// Appends one JSON record per line; never truncates.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> CliResult<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format_err(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}
