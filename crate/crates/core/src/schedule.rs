//! Noise ladder for the Gaussian diffusion kernels.
//!
//! Levels are indexed `t = 1..=T`. Level 0 denotes the undiffused target and
//! never appears as an array index. `gamma(t)` is the cumulative signal
//! retention, `alpha(t) = gamma(t) / gamma(t - 1)` with `alpha(1) = gamma(1)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::GaussianDist;

/// Largest admissible terminal retention `gamma_T`.
pub const TERMINAL_GAMMA_MAX: f64 = 1e-3;

/// Serialized form of a schedule. `gamma` is always recomputed from these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 400, beta_min: 1e-4, beta_max: 0.04 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    gamma: Vec<f64>,
    alpha: Vec<f64>,
}

/// Linear-beta (variance preserving) schedule with `alpha_t = 1 - beta_t`.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    let sch = make_schedule_relaxed(steps, beta_min, beta_max)?;
    let last = sch.gamma(steps);
    if last >= TERMINAL_GAMMA_MAX {
        return Err(Error::ScheduleDegenerate { gamma_last: last });
    }
    Ok(sch)
}

/// Same as [`make_schedule`] without the `gamma_T < 1e-3` requirement.
///
/// Short ladders are useful in tests; they do not bridge to the reference.
pub fn make_schedule_relaxed(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("T must be at least 2, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let span = beta_max - beta_min;
    let alpha: Vec<f64> = (0..steps)
        .map(|i| 1.0 - (beta_min + span * i as f64 / (steps - 1) as f64))
        .collect();
    let gamma = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { spec: ScheduleSpec { steps, beta_min, beta_max }, gamma, alpha })
}

impl NoiseSchedule {
    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// Number of levels `T`.
    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    pub fn check_level(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::IndexOutOfRange { t, steps: self.steps() })
        } else {
            Ok(())
        }
    }

    /// Panics if `t` is outside `1..=T`.
    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t - 1]
    }

    /// Panics if `t` is outside `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }
}

/// Forward kernel draw: `theta_t = sqrt(gamma_t) theta0 + sqrt(1 - gamma_t) eps`.
pub fn diffuse<R: Rng + ?Sized>(
    theta0: &[f64],
    t: usize,
    sch: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    sch.check_level(t)?;
    let eps: Vec<f64> = (0..theta0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let theta_t = diffuse_with_noise(theta0, &eps, t, sch)?;
    Ok((theta_t, eps))
}

/// Deterministic variant of [`diffuse`] with caller-supplied noise.
pub fn diffuse_with_noise(theta0: &[f64], eps: &[f64], t: usize, sch: &NoiseSchedule) -> Result<Vec<f64>> {
    sch.check_level(t)?;
    if eps.len() != theta0.len() {
        return Err(Error::DimensionMismatch { expected: theta0.len(), found: eps.len() });
    }
    let g = sch.gamma(t);
    let (signal, noise) = (g.sqrt(), (1.0 - g).sqrt());
    Ok(theta0.iter().zip(eps).map(|(x, e)| signal * x + noise * e).collect())
}

/// Score of the diffusion kernel with respect to the noisy argument.
pub fn kernel_score(theta_t: &[f64], theta0: &[f64], t: usize, sch: &NoiseSchedule) -> Result<Vec<f64>> {
    sch.check_level(t)?;
    if theta_t.len() != theta0.len() {
        return Err(Error::DimensionMismatch { expected: theta0.len(), found: theta_t.len() });
    }
    let g = sch.gamma(t);
    let (signal, var) = (g.sqrt(), 1.0 - g);
    Ok(theta_t.iter().zip(theta0).map(|(x, x0)| -(x - signal * x0) / var).collect())
}

/// Diffuses a Gaussian target: `N(mu, C)` becomes `N(sqrt(g) mu, g C + (1 - g) I)`.
pub fn gaussian_diffused(mu: &DVector<f64>, cov: &DMatrix<f64>, t: usize, sch: &NoiseSchedule) -> Result<GaussianDist> {
    sch.check_level(t)?;
    let dist = GaussianDist::new(mu.clone(), cov.clone())?;
    Ok(dist.diffused(sch.gamma(t)))
}
