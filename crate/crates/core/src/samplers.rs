//! Posterior samplers that compose per-subset scores.
//!
//! With `k` subsets the composed score at level `t` is
//! `c_t * (-theta) + sum_j s(theta, t, X_j)` with `c_t = (1 - k)(T - t)/T`,
//! and both samplers start from the reference `N(0, I/k)`.

use std::cmp::Ordering;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MlpScratch;
use crate::rng::{self, Purpose, Stream};
use crate::schedule::NoiseSchedule;
use crate::score_net::{ScoreNetwork, SetEncoding, SetInput};

/// Sampler state is aborted once any coordinate exceeds this magnitude.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Chains advanced together in one batched score evaluation.
const CHAIN_BLOCK: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    subsets: Vec<Vec<usize>>,
}

impl Partition {
    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn k(&self) -> usize {
        self.subsets.len()
    }

    /// Groups observations according to the partition.
    pub fn apply(&self, observations: &[Vec<f64>]) -> Result<Vec<SetInput>> {
        self.subsets
            .iter()
            .map(|idx| SetInput::new(&idx.iter().map(|&i| observations[i].clone()).collect::<Vec<_>>()))
            .collect()
    }
}

/// Contiguous chunks of at most `m_max` indices, in order.
pub fn partition_observations(n: usize, m_max: usize) -> Result<Partition> {
    if n == 0 || m_max == 0 {
        return Err(Error::InvalidArgument(format!("cannot partition n = {n} observations with m_max = {m_max}")));
    }
    let subsets = (0..n).step_by(m_max).map(|s| (s..(s + m_max).min(n)).collect()).collect();
    Ok(Partition { subsets })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    AnnealedLangevin,
    ComposedAncestral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Langevin steps per level.
    #[serde(rename = "L")]
    pub steps_per_level: usize,
    /// Dimensionless Langevin step scale.
    #[serde(rename = "a")]
    pub step_scale: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { kind: SamplerKind::AnnealedLangevin, steps_per_level: 5, step_scale: 0.3, n_samples: 2000, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == SamplerKind::AnnealedLangevin && self.steps_per_level == 0 {
            return Err(Error::InvalidArgument("annealed Langevin needs L >= 1".into()));
        }
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("step scale {} must be positive", self.step_scale)));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Per-subset scores, summed over subsets, for a block of parameter rows.
pub trait SubsetScores: Sync {
    fn theta_dim(&self) -> usize;
    /// Number of subsets `k`.
    fn subsets(&self) -> usize;
    /// Row-major `rows x theta_dim` sum of subset scores at level `t`.
    fn score_sum(&self, theta: &[f64], rows: usize, t: usize) -> Result<Vec<f64>>;
}

/// Network scores on fixed conditioning sets. Sets are encoded once and
/// summed in a canonical order, so reordering subsets does not change any bit
/// of the output.
#[derive(Debug, Clone)]
pub struct NetworkScores<'a> {
    net: &'a ScoreNetwork,
    sch: &'a NoiseSchedule,
    encodings: Vec<SetEncoding>,
}

impl<'a> NetworkScores<'a> {
    pub fn new(net: &'a ScoreNetwork, sch: &'a NoiseSchedule, sets: &[SetInput]) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::InvalidArgument("need at least one conditioning set".into()));
        }
        let mut order: Vec<usize> = (0..sets.len()).collect();
        order.sort_by(|&a, &b| sets[a].canonical_cmp(&sets[b]).then(sets[a].len().cmp(&sets[b].len())));
        let encodings = order.iter().map(|&i| net.encode_set(&sets[i])).collect::<Result<_>>()?;
        Ok(NetworkScores { net, sch, encodings })
    }

    /// Partitions the observations for the network's `m_max` and encodes each subset.
    pub fn from_observations(net: &'a ScoreNetwork, sch: &'a NoiseSchedule, observations: &[Vec<f64>]) -> Result<Self> {
        let part = partition_observations(observations.len(), net.config().m_max)?;
        Self::new(net, sch, &part.apply(observations)?)
    }
}

impl SubsetScores for NetworkScores<'_> {
    fn theta_dim(&self) -> usize {
        self.net.config().theta_dim
    }

    fn subsets(&self) -> usize {
        self.encodings.len()
    }

    fn score_sum(&self, theta: &[f64], rows: usize, t: usize) -> Result<Vec<f64>> {
        self.net.score_sum(theta, rows, t, &self.encodings, self.sch, &mut MlpScratch::default())
    }
}

/// Exact scores of diffused diagonal Gaussians, one per subset.
#[derive(Debug, Clone)]
pub struct DiagGaussianScores<'a> {
    sch: &'a NoiseSchedule,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
}

impl<'a> DiagGaussianScores<'a> {
    pub fn new(sch: &'a NoiseSchedule, components: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let d = components.first().map(|c| c.0.len()).ok_or_else(|| Error::InvalidArgument("no subsets".into()))?;
        for (m, v) in &components {
            if m.len() != d || v.len() != d {
                return Err(Error::DimensionMismatch { expected: d, found: m.len().min(v.len()) });
            }
            if v.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::NotPositiveDefinite);
            }
        }
        let (means, vars) = components.into_iter().unzip();
        Ok(DiagGaussianScores { sch, means, vars })
    }

    /// Mean and variance of subset `j` diffused to level `t`.
    pub fn diffused(&self, j: usize, t: usize) -> (Vec<f64>, Vec<f64>) {
        let g = self.sch.gamma(t);
        let m = self.means[j].iter().map(|m| g.sqrt() * m).collect();
        let v = self.vars[j].iter().map(|v| g * v + 1.0 - g).collect();
        (m, v)
    }
}

impl SubsetScores for DiagGaussianScores<'_> {
    fn theta_dim(&self) -> usize {
        self.means[0].len()
    }

    fn subsets(&self) -> usize {
        self.means.len()
    }

    fn score_sum(&self, theta: &[f64], rows: usize, t: usize) -> Result<Vec<f64>> {
        self.sch.check_level(t)?;
        let d = self.theta_dim();
        let mut out = vec![0.0; rows * d];
        for j in 0..self.subsets() {
            let (m, v) = self.diffused(j, t);
            for (o, th) in out.chunks_exact_mut(d).zip(theta.chunks_exact(d)) {
                for i in 0..d {
                    o[i] -= (th[i] - m[i]) / v[i];
                }
            }
        }
        Ok(out)
    }
}

/// Coefficient of the prior score in the composed score.
pub fn prior_weight(k: usize, t: usize, sch: &NoiseSchedule) -> f64 {
    let big_t = sch.steps() as f64;
    (1.0 - k as f64) * (big_t - t as f64) / big_t
}

/// `prior_weight * (-theta) + sum_j s_j(theta, t)` for a block of rows.
pub fn composed_score(scores: &dyn SubsetScores, theta: &[f64], rows: usize, t: usize, sch: &NoiseSchedule) -> Result<Vec<f64>> {
    let mut s = scores.score_sum(theta, rows, t)?;
    let c = prior_weight(scores.subsets(), t, sch);
    if c != 0.0 {
        s.iter_mut().zip(theta).for_each(|(v, th)| *v -= c * th);
    }
    Ok(s)
}

/// `a (1 - alpha_t) / sqrt(alpha_t)`.
pub fn langevin_step_size(t: usize, sch: &NoiseSchedule, a: f64) -> f64 {
    let alpha = sch.alpha(t);
    a * (1.0 - alpha) / alpha.sqrt()
}

fn check_block(theta: &[f64], d: usize, first_chain: usize, t: usize) -> Result<()> {
    for (i, row) in theta.chunks_exact(d).enumerate() {
        if row.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
            return Err(Error::SamplerDiverged { t, chain: first_chain + i });
        }
    }
    Ok(())
}

fn chain_streams(seed: u64, range: std::ops::Range<usize>) -> Vec<Stream> {
    range.map(|c| rng::substream(seed, Purpose::Chain, c as u64)).collect()
}

fn reference_draws(streams: &mut [Stream], d: usize, k: usize) -> Vec<f64> {
    let sd = 1.0 / (k as f64).sqrt();
    let mut theta = Vec::with_capacity(streams.len() * d);
    for r in streams.iter_mut() {
        theta.extend((0..d).map(|_| sd * r.sample::<f64, _>(StandardNormal)));
    }
    theta
}

fn add_noise(theta: &mut [f64], streams: &mut [Stream], d: usize, scale: f64) {
    for (row, r) in theta.chunks_exact_mut(d).zip(streams.iter_mut()) {
        for v in row {
            *v += scale * r.sample::<f64, _>(StandardNormal);
        }
    }
}

fn rows_to_samples(theta: &[f64], d: usize) -> Vec<Vec<f64>> {
    theta.chunks_exact(d).map(|r| r.to_vec()).collect()
}

/// Annealed unadjusted Langevin dynamics from `t = T-1` down to `t = 1`.
/// Each chain draws its noise from its own substream.
pub fn annealed_langevin(scores: &dyn SubsetScores, sch: &NoiseSchedule, cfg: &SamplerConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if cfg.kind != SamplerKind::AnnealedLangevin {
        return Err(Error::InvalidArgument("configuration is not for annealed Langevin".into()));
    }
    let (d, k) = (scores.theta_dim(), scores.subsets());
    let mut out = Vec::with_capacity(cfg.n_samples);
    for start in (0..cfg.n_samples).step_by(CHAIN_BLOCK) {
        let end = (start + CHAIN_BLOCK).min(cfg.n_samples);
        let rows = end - start;
        let mut streams = chain_streams(cfg.seed, start..end);
        let mut theta = reference_draws(&mut streams, d, k);
        for t in (1..sch.steps()).rev() {
            let delta = langevin_step_size(t, sch, cfg.step_scale);
            for _ in 0..cfg.steps_per_level {
                let s = composed_score(scores, &theta, rows, t, sch)?;
                theta.iter_mut().zip(&s).for_each(|(th, g)| *th += 0.5 * delta * g);
                add_noise(&mut theta, &mut streams, d, delta.sqrt());
                check_block(&theta, d, start, t)?;
            }
        }
        out.extend(rows_to_samples(&theta, d));
    }
    Ok(out)
}

/// Mean scale, additive coefficient and variance of one composed ancestral step.
fn ancestral_coefficients(k: usize, t: usize, sch: &NoiseSchedule) -> (f64, f64, f64, f64) {
    let alpha = sch.alpha(t);
    let kf = k as f64;
    let denom = kf - alpha * (kf - 1.0);
    let var = (1.0 - alpha) / denom;
    // mean = theta * a_theta + score_sum * a_score, before the prior correction
    let a_theta = (kf / alpha.sqrt() - (kf - 1.0) * alpha.sqrt()) / denom;
    let a_score = (1.0 - alpha) / alpha.sqrt() / denom;
    let a_prior = var * prior_weight(k, t, sch);
    (a_theta, a_score, a_prior, var)
}

/// Langevin-free sampler: at each level the `k` per-subset Gaussian reverse
/// transitions are multiplied into a single Gaussian step.
pub fn composed_ancestral(scores: &dyn SubsetScores, sch: &NoiseSchedule, cfg: &SamplerConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if cfg.kind != SamplerKind::ComposedAncestral {
        return Err(Error::InvalidArgument("configuration is not for the composed ancestral sampler".into()));
    }
    let (d, k) = (scores.theta_dim(), scores.subsets());
    let mut out = Vec::with_capacity(cfg.n_samples);
    for start in (0..cfg.n_samples).step_by(CHAIN_BLOCK) {
        let end = (start + CHAIN_BLOCK).min(cfg.n_samples);
        let rows = end - start;
        let mut streams = chain_streams(cfg.seed, start..end);
        let mut theta = reference_draws(&mut streams, d, k);
        for t in (1..sch.steps()).rev() {
            let s = scores.score_sum(&theta, rows, t)?;
            let (a_theta, a_score, a_prior, var) = ancestral_coefficients(k, t, sch);
            theta.iter_mut().zip(&s).for_each(|(th, g)| *th = a_theta * *th + a_score * g - a_prior * *th);
            check_block(&theta, d, start, t)?;
            add_noise(&mut theta, &mut streams, d, var.sqrt());
            check_block(&theta, d, start, t)?;
        }
        out.extend(rows_to_samples(&theta, d));
    }
    Ok(out)
}

pub fn run_sampler(scores: &dyn SubsetScores, sch: &NoiseSchedule, cfg: &SamplerConfig) -> Result<Vec<Vec<f64>>> {
    match cfg.kind {
        SamplerKind::AnnealedLangevin => annealed_langevin(scores, sch, cfg),
        SamplerKind::ComposedAncestral => composed_ancestral(scores, sch, cfg),
    }
}

/// Lexicographic total order on sample rows, for order-insensitive comparisons in tests.
pub fn row_order(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}
