//! Reference posteriors: conjugate Gaussians, exact mixture expansions and
//! random-walk Metropolis on the exact likelihood.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tasks::{gg_sigma_diag, GaussianMixtureTask, Multimodal, TaskModel};

/// Largest set size for which the exact mixture expansion is built.
pub const MAX_EXPANSION: usize = 12;

#[derive(Debug, Clone)]
pub struct GaussianDist {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, found: cov.nrows() });
        }
        let scale = cov.abs().max().max(1.0);
        if (&cov - cov.transpose()).abs().max() > 1e-12 * scale {
            return Err(Error::NotPositiveDefinite);
        }
        let chol = Cholesky::new(cov.clone()).ok_or(Error::NotPositiveDefinite)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(GaussianDist { mean, cov, chol, log_det })
    }

    pub fn diagonal(mean: &[f64], var: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(mean), DMatrix::from_diagonal(&DVector::from_column_slice(var)))
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim)).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.mean;
        let sol = self.chol.l().solve_lower_triangular(&diff).expect("cholesky factor is invertible");
        -0.5 * (sol.norm_squared() + self.log_det + self.dim() as f64 * (2.0 * PI).ln())
    }

    /// `grad log N(x | mean, cov)`.
    pub fn score(&self, x: &[f64]) -> DVector<f64> {
        let diff = DVector::from_column_slice(x) - &self.mean;
        -self.chol.solve(&diff)
    }

    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let eps = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &self.mean + self.chol.l() * eps
    }

    /// Law of `sqrt(g) X + sqrt(1 - g) eps` for `X` of this law.
    pub fn diffused(&self, gamma: f64) -> GaussianDist {
        let d = self.dim();
        let mean = &self.mean * gamma.sqrt();
        let cov = &self.cov * gamma + DMatrix::identity(d, d) * (1.0 - gamma);
        GaussianDist::new(mean, cov).expect("diffusion keeps the covariance positive definite")
    }
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    log_weights: Vec<f64>,
    components: Vec<GaussianDist>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GaussianMixture {
    /// Normalizes `log_weights` before storing them.
    pub fn new(log_weights: Vec<f64>, components: Vec<GaussianDist>) -> Result<Self> {
        if log_weights.len() != components.len() || components.is_empty() {
            return Err(Error::InvalidArgument("mixture needs one weight per component".into()));
        }
        let z = log_sum_exp(&log_weights);
        if !z.is_finite() {
            return Err(Error::InvalidArgument("mixture weights are degenerate".into()));
        }
        let log_weights = log_weights.into_iter().map(|w| w - z).collect();
        Ok(GaussianMixture { log_weights, components })
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn components(&self) -> &[GaussianDist] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> =
            self.log_weights.iter().zip(&self.components).map(|(w, c)| w + c.log_density(x)).collect();
        log_sum_exp(&terms)
    }

    pub fn mean(&self) -> DVector<f64> {
        self.log_weights
            .iter()
            .zip(&self.components)
            .fold(DVector::zeros(self.dim()), |acc, (w, c)| acc + c.mean() * w.exp())
    }

    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (i, w) in self.log_weights.iter().enumerate() {
            acc += w.exp();
            if u < acc {
                pick = i;
                break;
            }
        }
        self.components[pick].sample(rng)
    }

    /// Index of the component with the largest weighted density at `x`.
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        self.log_weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w + c.log_density(x))
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap()
    }
}

/// Conjugate posterior under a standard-normal prior and `x_i ~ N(z, diag(lik_var))`.
pub fn conjugate_posterior_diag(xs: &[Vec<f64>], lik_var: &[f64]) -> Result<GaussianDist> {
    let d = lik_var.len();
    if let Some(bad) = xs.iter().find(|x| x.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, found: bad.len() });
    }
    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..d {
        let prec = 1.0 + n / lik_var[i];
        var[i] = 1.0 / prec;
        mean[i] = var[i] * xs.iter().map(|x| x[i]).sum::<f64>() / lik_var[i];
    }
    GaussianDist::diagonal(&mean, &var)
}

/// Exact posterior of the Gaussian/Gaussian task.
pub fn gg_posterior(xs: &[Vec<f64>]) -> Result<GaussianDist> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("posterior needs at least one observation".into()));
    }
    conjugate_posterior_diag(xs, &gg_sigma_diag())
}

/// Tasks with a finite-mixture likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixtureTask {
    Multimodal,
    Gmog,
}

/// One branch of a likelihood mixture: `x ~ N(sign * z, diag(var))` with weight `exp(log_w)`.
#[derive(Debug, Clone)]
struct Branch {
    log_w: f64,
    sign: f64,
    var: Vec<f64>,
}

fn branches(task: MixtureTask) -> [Branch; 2] {
    let half = 0.5f64.ln();
    match task {
        MixtureTask::Multimodal => {
            let var = vec![Multimodal::NOISE_VAR; 2];
            [Branch { log_w: half, sign: 1.0, var: var.clone() }, Branch { log_w: half, sign: -1.0, var }]
        }
        MixtureTask::Gmog => {
            let s = gg_sigma_diag();
            let scaled = |c: f64| s.iter().map(|v| c * v).collect::<Vec<_>>();
            [
                Branch { log_w: half, sign: 1.0, var: scaled(GaussianMixtureTask::WIDE) },
                Branch { log_w: half, sign: 1.0, var: scaled(GaussianMixtureTask::NARROW) },
            ]
        }
    }
}

fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + (2.0 * PI * var).ln())
}

/// Exact posterior of a mixture-likelihood task by expanding every branch
/// assignment into a conjugate component weighted by its evidence.
pub fn mixture_posterior(task: MixtureTask, xs: &[Vec<f64>]) -> Result<GaussianMixture> {
    let n = xs.len();
    if n > MAX_EXPANSION {
        return Err(Error::TooManyObservations { n, max: MAX_EXPANSION });
    }
    let br = branches(task);
    let d = br[0].var.len();
    if let Some(bad) = xs.iter().find(|x| x.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, found: bad.len() });
    }
    let mut log_weights = Vec::with_capacity(1 << n);
    let mut components = Vec::with_capacity(1 << n);
    for assignment in 0..(1usize << n) {
        let chosen: Vec<&Branch> = (0..n).map(|i| &br[(assignment >> i) & 1]).collect();
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        let mut log_ev: f64 = chosen.iter().map(|b| b.log_w).sum();
        for k in 0..d {
            let prec = 1.0 + chosen.iter().map(|b| 1.0 / b.var[k]).sum::<f64>();
            var[k] = 1.0 / prec;
            mean[k] = var[k] * chosen.iter().zip(xs).map(|(b, x)| b.sign * x[k] / b.var[k]).sum::<f64>();
            // evidence = prior * likelihood / posterior, evaluated at the posterior mean
            let m = mean[k];
            log_ev += normal_log_pdf(m, 0.0, 1.0)
                + chosen.iter().zip(xs).map(|(b, x)| normal_log_pdf(x[k], b.sign * m, b.var[k])).sum::<f64>()
                - normal_log_pdf(m, m, var[k]);
        }
        log_weights.push(log_ev);
        components.push(GaussianDist::diagonal(&mean, &var)?);
    }
    GaussianMixture::new(log_weights, components)
}

/// Tasks whose posterior log-density is available in closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TractableTask {
    Gg,
    Mixture(MixtureTask),
}

impl TractableTask {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "gg" => Some(TractableTask::Gg),
            "multimodal" => Some(TractableTask::Mixture(MixtureTask::Multimodal)),
            "gmog" => Some(TractableTask::Mixture(MixtureTask::Gmog)),
            _ => None,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TractableTask::Mixture(MixtureTask::Multimodal) => 2,
            _ => 10,
        }
    }
}

/// Exact posterior of a tractable task, as a mixture (a single component for gg).
pub fn exact_posterior(task: TractableTask, xs: &[Vec<f64>]) -> Result<GaussianMixture> {
    match task {
        TractableTask::Gg => GaussianMixture::new(vec![0.0], vec![gg_posterior(xs)?]),
        TractableTask::Mixture(m) => mixture_posterior(m, xs),
    }
}

/// Largest deviation, over random probes, of
/// `log p(z | x_1..n) - (1 - n) log p(z) - sum_i log p(z | x_i)` from its probe mean.
pub fn factorization_check(task: TractableTask, xs: &[Vec<f64>], probes: usize, seed: u64) -> Result<f64> {
    let n = xs.len();
    let joint = exact_posterior(task, xs)?;
    let singles: Vec<GaussianMixture> =
        xs.iter().map(|x| exact_posterior(task, std::slice::from_ref(x))).collect::<Result<_>>()?;
    let prior = GaussianDist::standard(task.dim());
    let mut r = rng::substream(seed, Purpose::Probe, 0);
    let devs: Vec<f64> = (0..probes)
        .map(|_| {
            let z = prior.sample(&mut r);
            let z = z.as_slice();
            joint.log_density(z)
                - (1.0 - n as f64) * prior.log_density(z)
                - singles.iter().map(|s| s.log_density(z)).sum::<f64>()
        })
        .collect();
    let mean = devs.iter().sum::<f64>() / devs.len() as f64;
    Ok(devs.iter().map(|d| (d - mean).abs()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RwmConfig {
    pub n_steps: usize,
    /// Initial proposal scale; tuned during burn-in.
    pub step_scale: f64,
    pub burn_in_fraction: f64,
    pub target_acceptance: f64,
    pub retained: usize,
    pub chains: usize,
}

impl Default for RwmConfig {
    fn default() -> Self {
        RwmConfig {
            n_steps: 1_000_000,
            step_scale: 0.5,
            burn_in_fraction: 0.2,
            target_acceptance: 0.3,
            retained: 10_000,
            chains: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RwmResult {
    pub samples: Vec<Vec<f64>>,
    /// Post-burn-in acceptance rate pooled over chains.
    pub acceptance: f64,
    /// Final tuned scales, one per chain.
    pub step_scales: Vec<f64>,
}

struct Chain<'a> {
    task: &'a dyn TaskModel,
    xs: &'a [Vec<f64>],
}

impl Chain<'_> {
    fn log_post(&self, z: &[f64]) -> f64 {
        let prior = -0.5 * z.iter().map(|v| v * v).sum::<f64>();
        let lik = self.task.log_likelihood_sum(z, self.xs);
        if lik.is_nan() {
            f64::NEG_INFINITY
        } else {
            prior + lik
        }
    }
}

fn empirical_cholesky(draws: &[Vec<f64>], d: usize) -> DMatrix<f64> {
    let n = draws.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| draws.iter().map(|x| x[i]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for x in draws {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    let jitter = 1e-10 * (cov.trace() / d as f64).max(1e-12);
    for i in 0..d {
        cov[(i, i)] += jitter;
    }
    match Cholesky::new(cov) {
        Some(c) => c.l(),
        None => DMatrix::identity(d, d),
    }
}

fn run_chain(chain: &Chain, d: usize, cfg: &RwmConfig, init: Option<&[f64]>, rng: &mut impl Rng) -> (Vec<Vec<f64>>, usize, usize, f64) {
    let mut z: Vec<f64> = match init {
        Some(z0) => z0.to_vec(),
        None => {
            // best of a batch of prior draws
            let mut best = (vec![0.0; d], f64::NEG_INFINITY);
            for _ in 0..200 {
                let cand: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let lp = chain.log_post(&cand);
                if lp > best.1 {
                    best = (cand, lp);
                }
            }
            best.0
        }
    };
    let mut lp = chain.log_post(&z);
    let burn = (cfg.n_steps as f64 * cfg.burn_in_fraction) as usize;
    let half_burn = burn / 2;
    let mut log_scale = cfg.step_scale.ln();
    let mut chol = DMatrix::<f64>::identity(d, d);
    let mut window_acc = 0usize;
    let mut phase_a = Vec::new();
    let post = cfg.n_steps - burn;
    let keep = cfg.retained.min(post).max(1);
    let stride = (post / keep).max(1);
    let mut kept = Vec::with_capacity(keep);
    let mut post_acc = 0usize;
    let mut eta = DVector::zeros(d);

    for step in 0..cfg.n_steps {
        if step == half_burn && half_burn > 0 {
            chol = empirical_cholesky(&phase_a[phase_a.len() / 2..], d);
            log_scale = (2.38 / (d as f64).sqrt()).ln();
        }
        for v in eta.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let delta = &chol * &eta;
        let scale = log_scale.exp();
        let prop: Vec<f64> = z.iter().zip(delta.iter()).map(|(a, b)| a + scale * b).collect();
        let lp_prop = chain.log_post(&prop);
        let accept = lp_prop - lp >= 0.0 || rng.random::<f64>().ln() < lp_prop - lp;
        if accept {
            z = prop;
            lp = lp_prop;
        }
        if step < burn {
            window_acc += accept as usize;
            if step < half_burn {
                phase_a.push(z.clone());
            }
            if (step + 1) % 100 == 0 {
                let rate = window_acc as f64 / 100.0;
                let k = ((step + 1) / 100) as f64;
                log_scale += (rate - cfg.target_acceptance) * 3.0 / k.sqrt().clamp(1.0, 10.0);
                window_acc = 0;
            }
        } else {
            post_acc += accept as usize;
            let i = step - burn;
            if i % stride == stride - 1 && kept.len() < keep {
                kept.push(z.clone());
            }
        }
    }
    (kept, post_acc, post, log_scale.exp())
}

/// Random-walk Metropolis on the working-space posterior with the task's exact
/// likelihood. Burn-in adapts the proposal scale toward the target acceptance
/// and, halfway through, switches to the empirical covariance.
pub fn rwm_posterior(
    task: &dyn TaskModel,
    xs: &[Vec<f64>],
    cfg: &RwmConfig,
    init: Option<&[f64]>,
    seed: u64,
) -> Result<RwmResult> {
    if cfg.n_steps < 10_000 {
        return Err(Error::InvalidArgument(format!("n_steps = {} is below 10^4", cfg.n_steps)));
    }
    if !(cfg.step_scale > 0.0) || cfg.chains == 0 || !(0.0..1.0).contains(&cfg.burn_in_fraction) {
        return Err(Error::InvalidArgument("invalid random-walk configuration".into()));
    }
    let d = task.theta_dim();
    if let Some(z0) = init {
        if z0.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: z0.len() });
        }
    }
    let chain = Chain { task, xs };
    let per_chain = RwmConfig { retained: cfg.retained.div_ceil(cfg.chains), ..cfg.clone() };
    let outputs: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.chains)
            .map(|c| {
                let chain = &chain;
                let per_chain = &per_chain;
                s.spawn(move || {
                    let mut r = rng::substream(seed, Purpose::Oracle, c as u64);
                    run_chain(chain, d, per_chain, init, &mut r)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    let mut samples = Vec::new();
    let (mut acc, mut total) = (0, 0);
    let mut step_scales = Vec::new();
    for (kept, a, t, scale) in outputs {
        samples.extend(kept);
        acc += a;
        total += t;
        step_scales.push(scale);
    }
    samples.truncate(cfg.retained);
    let acceptance = acc as f64 / total.max(1) as f64;
    if acceptance < 0.01 {
        return Err(Error::StepScale { acceptance });
    }
    Ok(RwmResult { samples, acceptance, step_scales })
}

/// Posterior draws used as the reference in evaluations.
#[derive(Debug, Clone)]
pub struct ReferenceSamples {
    pub samples: Vec<Vec<f64>>,
    /// `"exact"` or `"rwm"`.
    pub method: &'static str,
    pub acceptance: Option<f64>,
}

/// `n` reference draws: exact for the tractable tasks, otherwise evenly
/// thinned random-walk Metropolis output (`cfg.retained >= n`).
pub fn reference_posterior(task: &dyn TaskModel, xs: &[Vec<f64>], n: usize, cfg: &RwmConfig, seed: u64) -> Result<ReferenceSamples> {
    if let Some(tt) = TractableTask::from_name(task.name()) {
        if xs.len() <= MAX_EXPANSION || tt == TractableTask::Gg {
            let post = exact_posterior(tt, xs)?;
            let mut r = rng::substream(seed, Purpose::Oracle, 0);
            let samples = (0..n).map(|_| post.sample(&mut r).as_slice().to_vec()).collect();
            return Ok(ReferenceSamples { samples, method: "exact", acceptance: None });
        }
    }
    if cfg.retained < n {
        return Err(Error::InvalidArgument(format!("{} retained draws cannot supply {n} samples", cfg.retained)));
    }
    let run = rwm_posterior(task, xs, cfg, None, seed)?;
    let stride = run.samples.len() as f64 / n as f64;
    let samples = (0..n).map(|i| run.samples[(i as f64 * stride) as usize].clone()).collect();
    Ok(ReferenceSamples { samples, method: "rwm", acceptance: Some(run.acceptance) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{task_by_name, task_gg, TASK_NAMES};

    fn randn(r: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.sample(StandardNormal)).collect()
    }

    fn moments(s: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
        let d = s[0].len();
        let n = s.len() as f64;
        let mean: Vec<f64> = (0..d).map(|i| s.iter().map(|x| x[i]).sum::<f64>() / n).collect();
        let mut cov = DMatrix::zeros(d, d);
        for x in s {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        (mean, cov)
    }

    #[test]
    fn rejects_bad_covariances() {
        let m = DVector::zeros(2);
        assert!(GaussianDist::new(m.clone(), DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])).is_err());
        assert!(GaussianDist::new(m.clone(), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
        assert!(GaussianDist::new(m, DMatrix::identity(3, 3)).is_err());
    }

    #[test]
    fn log_density_and_score_of_a_correlated_gaussian() {
        let g = GaussianDist::new(DVector::from_vec(vec![1.0, -1.0]), DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]))
            .unwrap();
        let x = [0.3, 0.2];
        // det = 1.64, inverse = [[1, -0.6], [-0.6, 2]] / 1.64
        let (a, b) = (x[0] - 1.0, x[1] + 1.0);
        let quad = (a * a - 1.2 * a * b + 2.0 * b * b) / 1.64;
        let expected = -0.5 * (quad + 1.64f64.ln() + 2.0 * (2.0 * PI).ln());
        assert!((g.log_density(&x) - expected).abs() < 1e-12);
        let h = 1e-6;
        let s = g.score(&x);
        for i in 0..2 {
            let mut p = x;
            let mut m = x;
            p[i] += h;
            m[i] -= h;
            let fd = (g.log_density(&p) - g.log_density(&m)) / (2.0 * h);
            assert!((fd - s[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn gg_symmetric_conjugate_case() {
        let post = conjugate_posterior_diag(&[vec![0.0; 3]], &[1.0; 3]).unwrap();
        assert!(post.mean().norm() == 0.0);
        assert!((post.cov() - DMatrix::identity(3, 3) * 0.5).abs().max() < 1e-15);
    }

    #[test]
    fn gg_posterior_concentrates() {
        let xbar = vec![0.4; 10];
        let xs = vec![xbar.clone(); 10_000];
        let post = gg_posterior(&xs).unwrap();
        assert!((post.mean() - DVector::from_vec(xbar)).norm() < 1e-2);
        assert!(post.cov().max() < 1e-3);
        assert!(gg_posterior(&[]).is_err());
    }

    #[test]
    fn gg_posterior_precision_formula() {
        let mut r = rng::from_seed(1);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| randn(&mut r, 10)).collect();
        let post = gg_posterior(&xs).unwrap();
        let s = gg_sigma_diag();
        for i in 0..10 {
            let prec = 1.0 + 4.0 / s[i];
            assert!((1.0 / post.cov()[(i, i)] - prec).abs() < 1e-12);
            let sum: f64 = xs.iter().map(|x| x[i]).sum();
            assert!((post.mean()[i] - sum / s[i] / prec).abs() < 1e-12);
        }
    }

    #[test]
    fn multimodal_expansion_is_symmetric() {
        let one = mixture_posterior(MixtureTask::Multimodal, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(one.components().len(), 2);
        assert!((one.log_weights()[0] - one.log_weights()[1]).abs() < 1e-15);
        assert!(one.mean().norm() < 1e-15);

        let mut r = rng::from_seed(2);
        for n in [1, 3, 6] {
            let xs: Vec<Vec<f64>> = (0..n).map(|_| randn(&mut r, 2)).collect();
            let mix = mixture_posterior(MixtureTask::Multimodal, &xs).unwrap();
            assert_eq!(mix.components().len(), 1 << n);
            let total = log_sum_exp(mix.log_weights());
            assert!(total.abs() < 1e-12);
            for _ in 0..20 {
                let z = randn(&mut r, 2);
                let neg = [-z[0], -z[1]];
                assert!((mix.log_density(&z) - mix.log_density(&neg)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn expansion_is_capped() {
        let xs = vec![vec![0.0; 2]; 13];
        assert!(matches!(
            mixture_posterior(MixtureTask::Multimodal, &xs),
            Err(Error::TooManyObservations { n: 13, max: 12 })
        ));
    }

    #[test]
    fn gmog_weights_match_quadrature_evidence() {
        // the evidence factorizes over coordinates; integrate each on a fine grid
        let mut r = rng::from_seed(3);
        let x = randn(&mut r, 10);
        let mix = mixture_posterior(MixtureTask::Gmog, std::slice::from_ref(&x)).unwrap();
        let s = gg_sigma_diag();
        let grid = |c: f64| -> f64 {
            (0..10)
                .map(|k| {
                    let (lo, hi, m) = (-12.0, 12.0, 24_001);
                    let h = (hi - lo) / (m - 1) as f64;
                    let mut acc = 0.0;
                    for j in 0..m {
                        let z = lo + j as f64 * h;
                        let w = if j == 0 || j == m - 1 { 0.5 } else { 1.0 };
                        acc += w * (normal_log_pdf(z, 0.0, 1.0) + normal_log_pdf(x[k], z, c * s[k])).exp();
                    }
                    (acc * h).ln()
                })
                .sum()
        };
        let (ew, en) = (grid(GaussianMixtureTask::WIDE), grid(GaussianMixtureTask::NARROW));
        let norm = log_sum_exp(&[ew, en]);
        let expected = [(ew - norm).exp(), (en - norm).exp()];
        for (w, e) in mix.log_weights().iter().zip(expected) {
            assert!((w.exp() - e).abs() / e < 1e-4, "{} vs {}", w.exp(), e);
        }
    }

    #[test]
    fn mixture_sampling_matches_component_moments() {
        let mut r = rng::from_seed(4);
        let xs: Vec<Vec<f64>> = (0..3).map(|_| randn(&mut r, 2)).collect();
        let mix = mixture_posterior(MixtureTask::Multimodal, &xs).unwrap();
        let n = 50_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| mix.sample(&mut r).as_slice().to_vec()).collect();
        let (mean, _) = moments(&draws);
        let exact = mix.mean();
        let second: Vec<f64> = (0..2)
            .map(|i| {
                mix.log_weights()
                    .iter()
                    .zip(mix.components())
                    .map(|(w, c)| w.exp() * (c.cov()[(i, i)] + c.mean()[i].powi(2)))
                    .sum::<f64>()
            })
            .collect();
        for i in 0..2 {
            let var = second[i] - exact[i].powi(2);
            assert!((mean[i] - exact[i]).abs() < 3.0 * (var / n as f64).sqrt());
        }
    }

    #[test]
    fn factorization_identity_holds() {
        let mut r = rng::from_seed(5);
        for task in [TractableTask::Gg, TractableTask::Mixture(MixtureTask::Multimodal), TractableTask::Mixture(MixtureTask::Gmog)] {
            for n in [1usize, 2, 3, 5, 8] {
                let xs: Vec<Vec<f64>> = (0..n).map(|_| randn(&mut r, task.dim())).collect();
                let dev = factorization_check(task, &xs, 100, 9).unwrap();
                let tol = if n == 1 { 1e-12 } else { 1e-8 };
                assert!(dev < tol, "{task:?} n={n}: {dev}");
            }
        }
    }

    #[test]
    fn rwm_matches_the_gg_posterior() {
        let task = task_gg();
        let mut r = rng::from_seed(6);
        let z: Vec<f64> = randn(&mut r, 10);
        let xs: Vec<Vec<f64>> = (0..3).map(|_| task.simulate(&z, &mut r).unwrap()).collect();
        let exact = gg_posterior(&xs).unwrap();
        let cfg = RwmConfig { n_steps: 1_000_000, ..RwmConfig::default() };
        let res = rwm_posterior(&task, &xs, &cfg, None, 11).unwrap();
        assert!((0.1..0.6).contains(&res.acceptance));
        let (mean, cov) = moments(&res.samples);
        // thinned draws are close to independent; inflate the standard error for residual autocorrelation
        let n_eff = res.samples.len() as f64 / 4.0;
        for i in 0..10 {
            let se = (exact.cov()[(i, i)] / n_eff).sqrt();
            assert!((mean[i] - exact.mean()[i]).abs() < 3.0 * se, "coord {i}");
        }
        let rel = (&cov - exact.cov()).norm() / exact.cov().norm();
        assert!(rel < 0.1, "relative Frobenius error {rel}");
    }

    #[test]
    fn rwm_split_chain_agrees() {
        let task = task_by_name("multimodal").unwrap();
        let xs = vec![vec![0.3, 0.4], vec![-0.1, 0.6]];
        let init = mixture_posterior(MixtureTask::Multimodal, &xs).unwrap().components()[0].mean().as_slice().to_vec();
        let cfg = RwmConfig { n_steps: 200_000, ..RwmConfig::default() };
        let res = rwm_posterior(task.as_ref(), &xs, &cfg, Some(&init), 12).unwrap();
        let half = res.samples.len() / 2;
        let (m1, c1) = moments(&res.samples[..half]);
        let (m2, _) = moments(&res.samples[half..]);
        for i in 0..2 {
            let se = (2.0 * c1[(i, i)] * 4.0 / half as f64).sqrt();
            assert!((m1[i] - m2[i]).abs() < 3.0 * se);
        }
    }

    #[test]
    fn rwm_tunes_acceptance_on_every_task() {
        for name in TASK_NAMES {
            let task = task_by_name(name).unwrap();
            let mut r = rng::substream(13, Purpose::Observations, 0);
            let z = randn(&mut r, task.theta_dim());
            let xs: Vec<Vec<f64>> = (0..3).map(|_| task.simulate(&z, &mut r).unwrap()).collect();
            let cfg = RwmConfig { n_steps: 20_000, retained: 1000, ..RwmConfig::default() };
            let res = rwm_posterior(task.as_ref(), &xs, &cfg, None, 14).unwrap();
            assert!((0.1..0.6).contains(&res.acceptance), "{name}: {}", res.acceptance);
        }
    }

    #[test]
    fn rwm_reports_a_stuck_chain() {
        let task = task_gg();
        let xs = vec![vec![0.0; 10]];
        let cfg = RwmConfig { n_steps: 10_000, step_scale: 1e6, burn_in_fraction: 0.0, ..RwmConfig::default() };
        assert!(matches!(rwm_posterior(&task, &xs, &cfg, None, 1), Err(Error::StepScale { .. })));
        let short = RwmConfig { n_steps: 100, ..RwmConfig::default() };
        assert!(rwm_posterior(&task, &xs, &short, None, 1).is_err());
    }
}
