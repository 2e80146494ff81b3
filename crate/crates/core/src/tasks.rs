//! Benchmark simulators in working space.
//!
//! Every model is reparameterized so that its prior is a standard normal on
//! `z`; `transport` maps `z` to the native parameters. Each task also exposes
//! its exact likelihood, which only the oracles use.

use std::f64::consts::PI;
use std::fmt::Debug;

use rand::{Rng, RngCore};
use rand_distr::{Binomial, Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const TASK_NAMES: [&str; 5] = ["multimodal", "gg", "gmog", "sir", "lv"];

pub trait TaskModel: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn theta_dim(&self) -> usize;
    fn x_dim(&self) -> usize;

    /// One simulator call at working-space parameters `z`.
    fn simulate(&self, z: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>>;

    /// Exact `log p(x | z)`; `-inf` outside the support.
    fn log_likelihood(&self, z: &[f64], x: &[f64]) -> f64;

    /// `sum_i log p(x_i | z)`. ODE tasks solve the dynamics once for all observations.
    fn log_likelihood_sum(&self, z: &[f64], xs: &[Vec<f64>]) -> f64 {
        xs.iter().map(|x| self.log_likelihood(z, x)).sum()
    }

    /// Working space to native parameters.
    fn transport(&self, z: &[f64]) -> Vec<f64>;

    /// CDF of the native prior's `i`-th marginal.
    fn native_prior_cdf(&self, _i: usize, value: f64) -> f64 {
        std_normal_cdf(value)
    }
}

fn std_normal_cdf(v: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(v)
}

pub fn task_by_name(name: &str) -> Result<Box<dyn TaskModel>> {
    Ok(match name {
        "multimodal" => Box::new(task_multimodal()),
        "gg" => Box::new(task_gg()),
        "gmog" => Box::new(task_gmog()),
        "sir" => Box::new(task_sir()),
        "lv" => Box::new(task_lv()),
        other => return Err(Error::UnknownTask(other.to_string())),
    })
}

fn gaussian_log_density_diag(x: &[f64], mean: impl Iterator<Item = f64>, var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((xi, mi), v)| -0.5 * ((xi - mi).powi(2) / v + (2.0 * PI * v).ln()))
        .sum()
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Diagonal of the shared likelihood covariance, linearly spaced from 0.6 to 1.4.
pub fn gg_sigma_diag() -> Vec<f64> {
    (0..10).map(|i| 0.6 + 0.8 * i as f64 / 9.0).collect()
}

/// `p(x|z) = N(x | z, I/2) / 2 + N(x | -z, I/2) / 2` in two dimensions.
#[derive(Debug, Clone, Copy, Default)]
pub struct Multimodal;

pub fn task_multimodal() -> Multimodal {
    Multimodal
}

impl Multimodal {
    pub const NOISE_VAR: f64 = 0.5;

    /// Simulation with the mixture branch and the noise supplied.
    pub fn simulate_with(&self, z: &[f64], positive: bool, noise: &[f64]) -> Vec<f64> {
        let sign = if positive { 1.0 } else { -1.0 };
        z.iter().zip(noise).map(|(zi, e)| sign * zi + Self::NOISE_VAR.sqrt() * e).collect()
    }
}

impl TaskModel for Multimodal {
    fn name(&self) -> &'static str {
        "multimodal"
    }
    fn theta_dim(&self) -> usize {
        2
    }
    fn x_dim(&self) -> usize {
        2
    }

    fn simulate(&self, z: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let positive = rng.random_bool(0.5);
        let noise: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        Ok(self.simulate_with(z, positive, &noise))
    }

    fn log_likelihood(&self, z: &[f64], x: &[f64]) -> f64 {
        let var = [Self::NOISE_VAR; 2];
        let plus = gaussian_log_density_diag(x, z.iter().copied(), &var);
        let minus = gaussian_log_density_diag(x, z.iter().map(|v| -v), &var);
        log_sum_exp2(0.5f64.ln() + plus, 0.5f64.ln() + minus)
    }

    fn transport(&self, z: &[f64]) -> Vec<f64> {
        z.to_vec()
    }
}

/// Ten-dimensional Gaussian likelihood `N(x | z, Sigma)`.
#[derive(Debug, Clone)]
pub struct GaussianGaussian {
    sigma: Vec<f64>,
}

pub fn task_gg() -> GaussianGaussian {
    GaussianGaussian { sigma: gg_sigma_diag() }
}

impl GaussianGaussian {
    pub fn sigma_diag(&self) -> &[f64] {
        &self.sigma
    }
}

impl TaskModel for GaussianGaussian {
    fn name(&self) -> &'static str {
        "gg"
    }
    fn theta_dim(&self) -> usize {
        10
    }
    fn x_dim(&self) -> usize {
        10
    }

    fn simulate(&self, z: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        Ok(z.iter().zip(&self.sigma).map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect())
    }

    fn log_likelihood(&self, z: &[f64], x: &[f64]) -> f64 {
        gaussian_log_density_diag(x, z.iter().copied(), &self.sigma)
    }

    fn transport(&self, z: &[f64]) -> Vec<f64> {
        z.to_vec()
    }
}

/// Shared-mean mixture `N(x | z, 2.25 Sigma) / 2 + N(x | z, Sigma / 9) / 2`.
#[derive(Debug, Clone)]
pub struct GaussianMixtureTask {
    sigma: Vec<f64>,
}

pub fn task_gmog() -> GaussianMixtureTask {
    GaussianMixtureTask { sigma: gg_sigma_diag() }
}

impl GaussianMixtureTask {
    pub const WIDE: f64 = 2.25;
    pub const NARROW: f64 = 1.0 / 9.0;

    pub fn sigma_diag(&self) -> &[f64] {
        &self.sigma
    }

    /// Simulation that also reports whether the wide component was used.
    pub fn simulate_labeled(&self, z: &[f64], rng: &mut dyn RngCore) -> (Vec<f64>, bool) {
        let wide = rng.random_bool(0.5);
        let c = if wide { Self::WIDE } else { Self::NARROW };
        let x = z.iter().zip(&self.sigma).map(|(m, v)| m + (c * v).sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        (x, wide)
    }

    pub fn component_log_densities(&self, z: &[f64], x: &[f64]) -> (f64, f64) {
        let wide: Vec<f64> = self.sigma.iter().map(|v| Self::WIDE * v).collect();
        let narrow: Vec<f64> = self.sigma.iter().map(|v| Self::NARROW * v).collect();
        (
            gaussian_log_density_diag(x, z.iter().copied(), &wide),
            gaussian_log_density_diag(x, z.iter().copied(), &narrow),
        )
    }
}

impl TaskModel for GaussianMixtureTask {
    fn name(&self) -> &'static str {
        "gmog"
    }
    fn theta_dim(&self) -> usize {
        10
    }
    fn x_dim(&self) -> usize {
        10
    }

    fn simulate(&self, z: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        Ok(self.simulate_labeled(z, rng).0)
    }

    fn log_likelihood(&self, z: &[f64], x: &[f64]) -> f64 {
        let (w, n) = self.component_log_densities(z, x);
        log_sum_exp2(0.5f64.ln() + w, 0.5f64.ln() + n)
    }

    fn transport(&self, z: &[f64]) -> Vec<f64> {
        z.to_vec()
    }
}

/// Trajectory on a uniform time grid, stored row-major `(steps + 1) x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeState {
    pub dim: usize,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
}

impl OdeState {
    pub fn state(&self, step: usize) -> &[f64] {
        &self.states[step * self.dim..(step + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.times.len() - 1)
    }
}

/// Classical fixed-step fourth-order Runge-Kutta from `t = 0` to `t_end`.
pub fn rk4_integrate<F>(mut derivative: F, state0: &[f64], t_end: f64, steps: usize) -> Result<OdeState>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if steps == 0 {
        return Err(Error::InvalidArgument("rk4 needs at least one step".into()));
    }
    let dim = state0.len();
    let h = t_end / steps as f64;
    let mut states = Vec::with_capacity((steps + 1) * dim);
    states.extend_from_slice(state0);
    let mut y = state0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    for step in 0..steps {
        let t = step as f64 * h;
        derivative(t, &y, &mut k1);
        for i in 0..dim {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        derivative(t + 0.5 * h, &tmp, &mut k2);
        for i in 0..dim {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        derivative(t + 0.5 * h, &tmp, &mut k3);
        for i in 0..dim {
            tmp[i] = y[i] + h * k3[i];
        }
        derivative(t + h, &tmp, &mut k4);
        for i in 0..dim {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegratorInstability { step: step + 1 });
        }
        states.extend_from_slice(&y);
    }
    let times = (0..=steps).map(|i| i as f64 * h).collect();
    Ok(OdeState { dim, times, states })
}

const NEG_UNDERSHOOT: f64 = -1e-9;

/// Clamps tiny negative undershoots to zero; returns false on larger ones.
fn clamp_populations(states: &mut [f64]) -> bool {
    for v in states.iter_mut() {
        if *v < 0.0 {
            if *v < NEG_UNDERSHOOT {
                return false;
            }
            *v = 0.0;
        }
    }
    true
}

/// Susceptible-infected-recovered dynamics observed through binomial counts.
#[derive(Debug, Clone)]
pub struct Sir {
    pub population: f64,
    pub t_end: f64,
    pub ode_steps: usize,
    pub n_obs_times: usize,
    pub trials: u64,
}

pub fn task_sir() -> Sir {
    Sir { population: 1e6, t_end: 160.0, ode_steps: 1000, n_obs_times: 10, trials: 1000 }
}

impl Sir {
    const BETA_LOC: f64 = 0.4;
    const BETA_SCALE: f64 = 0.5;
    const GAMMA_LOC: f64 = 0.125;
    const GAMMA_SCALE: f64 = 0.2;

    /// Integrates `(S, I, R)` for native rates.
    pub fn trajectory(&self, beta: f64, gamma: f64) -> Result<OdeState> {
        let n = self.population;
        let mut traj = rk4_integrate(
            |_, y, dy| {
                let flow = beta * y[0] * y[1] / n;
                dy[0] = -flow;
                dy[1] = flow - gamma * y[1];
                dy[2] = gamma * y[1];
            },
            &[n - 1.0, 1.0, 0.0],
            self.t_end,
            self.ode_steps,
        )?;
        if !clamp_populations(&mut traj.states) {
            return Err(Error::SimulationRejected("negative population".into()));
        }
        Ok(traj)
    }

    fn obs_steps(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.n_obs_times).map(move |i| i * self.ode_steps / self.n_obs_times)
    }

    /// Infected fraction at each observation time.
    pub fn infected_fractions(&self, z: &[f64]) -> Result<Vec<f64>> {
        let p = self.transport(z);
        let traj = self.trajectory(p[0], p[1])?;
        Ok(self.obs_steps().map(|s| (traj.state(s)[1] / self.population).clamp(0.0, 1.0)).collect())
    }

    fn binomial_log_pmf(&self, k: f64, p: f64) -> f64 {
        let n = self.trials as f64;
        if !(0.0..=n).contains(&k) || k.fract() != 0.0 {
            return f64::NEG_INFINITY;
        }
        let log_choose = ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0);
        let term = |count: f64, prob: f64| if count == 0.0 { 0.0 } else { count * prob.ln() };
        log_choose + term(k, p) + term(n - k, 1.0 - p)
    }

    fn log_likelihood_given(&self, fractions: &[f64], x: &[f64]) -> f64 {
        fractions.iter().zip(x).map(|(p, k)| self.binomial_log_pmf(*k, *p)).sum()
    }
}

impl TaskModel for Sir {
    fn name(&self) -> &'static str {
        "sir"
    }
    fn theta_dim(&self) -> usize {
        2
    }
    fn x_dim(&self) -> usize {
        self.n_obs_times
    }

    fn simulate(&self, z: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let fractions = self.infected_fractions(z)?;
        fractions
            .iter()
            .map(|p| {
                let dist = Binomial::new(self.trials, *p).map_err(|e| Error::SimulationRejected(e.to_string()))?;
                Ok(dist.sample(rng) as f64)
            })
            .collect()
    }

    fn log_likelihood(&self, z: &[f64], x: &[f64]) -> f64 {
        match self.infected_fractions(z) {
            Ok(f) => self.log_likelihood_given(&f, x),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn log_likelihood_sum(&self, z: &[f64], xs: &[Vec<f64>]) -> f64 {
        match self.infected_fractions(z) {
            Ok(f) => xs.iter().map(|x| self.log_likelihood_given(&f, x)).sum(),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn transport(&self, z: &[f64]) -> Vec<f64> {
        vec![
            (Self::BETA_LOC.ln() + Self::BETA_SCALE * z[0]).exp(),
            (Self::GAMMA_LOC.ln() + Self::GAMMA_SCALE * z[1]).exp(),
        ]
    }

    fn native_prior_cdf(&self, i: usize, value: f64) -> f64 {
        let (loc, scale) = [(Self::BETA_LOC, Self::BETA_SCALE), (Self::GAMMA_LOC, Self::GAMMA_SCALE)][i];
        if value <= 0.0 {
            return 0.0;
        }
        std_normal_cdf((value.ln() - loc.ln()) / scale)
    }
}

/// Predator-prey dynamics observed through log-normal noise.
#[derive(Debug, Clone)]
pub struct LotkaVolterra {
    pub initial: [f64; 2],
    pub t_end: f64,
    pub ode_steps: usize,
    pub n_obs_times: usize,
    pub noise_sd: f64,
}

pub fn task_lv() -> LotkaVolterra {
    LotkaVolterra { initial: [30.0, 1.0], t_end: 20.0, ode_steps: 1000, n_obs_times: 10, noise_sd: 0.1 }
}

impl LotkaVolterra {
    /// Log-normal prior locations and scales of `(alpha, beta, gamma, delta)`.
    const PRIOR: [(f64, f64); 4] = [(-0.125, 0.5), (-3.0, 0.5), (-0.125, 0.5), (-3.0, 0.5)];

    pub fn trajectory(&self, p: &[f64]) -> Result<OdeState> {
        let (a, b, c, d) = (p[0], p[1], p[2], p[3]);
        let mut traj = rk4_integrate(
            |_, y, dy| {
                dy[0] = a * y[0] - b * y[0] * y[1];
                dy[1] = -c * y[1] + d * y[0] * y[1];
            },
            &self.initial,
            self.t_end,
            self.ode_steps,
        )?;
        if !clamp_populations(&mut traj.states) {
            return Err(Error::SimulationRejected("negative population".into()));
        }
        Ok(traj)
    }

    /// Populations `[X(t_1..t_k), Y(t_1..t_k)]` at the observation times.
    pub fn observed_means(&self, z: &[f64]) -> Result<Vec<f64>> {
        let traj = self.trajectory(&self.transport(z))?;
        let steps: Vec<usize> = (1..=self.n_obs_times).map(|i| i * self.ode_steps / self.n_obs_times).collect();
        let mut out: Vec<f64> = steps.iter().map(|&s| traj.state(s)[0]).collect();
        out.extend(steps.iter().map(|&s| traj.state(s)[1]));
        if out.iter().any(|v| *v <= 0.0) {
            return Err(Error::SimulationRejected("non-positive population at an observation time".into()));
        }
        Ok(out)
    }

    fn log_likelihood_given(&self, means: &[f64], x: &[f64]) -> f64 {
        let s = self.noise_sd;
        means
            .iter()
            .zip(x)
            .map(|(m, xi)| {
                if *xi <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let l = xi.ln();
                -l - (s * (2.0 * PI).sqrt()).ln() - (l - m.ln()).powi(2) / (2.0 * s * s)
            })
            .sum()
    }
}

impl TaskModel for LotkaVolterra {
    fn name(&self) -> &'static str {
        "lv"
    }
    fn theta_dim(&self) -> usize {
        4
    }
    fn x_dim(&self) -> usize {
        2 * self.n_obs_times
    }

    fn simulate(&self, z: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let means = self.observed_means(z)?;
        Ok(means.iter().map(|m| (m.ln() + self.noise_sd * rng.sample::<f64, _>(StandardNormal)).exp()).collect())
    }

    fn log_likelihood(&self, z: &[f64], x: &[f64]) -> f64 {
        match self.observed_means(z) {
            Ok(m) => self.log_likelihood_given(&m, x),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn log_likelihood_sum(&self, z: &[f64], xs: &[Vec<f64>]) -> f64 {
        match self.observed_means(z) {
            Ok(m) => xs.iter().map(|x| self.log_likelihood_given(&m, x)).sum(),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn transport(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(Self::PRIOR).map(|(zi, (loc, scale))| (loc + scale * zi).exp()).collect()
    }

    fn native_prior_cdf(&self, i: usize, value: f64) -> f64 {
        let (loc, scale) = Self::PRIOR[i];
        if value <= 0.0 {
            return 0.0;
        }
        std_normal_cdf((value.ln() - loc) / scale)
    }
}

/// Ground-truth parameters `z ~ N(0, I)` and `n` observations simulated at
/// them, from the observation stream of `seed`. Rejected parameters are redrawn.
pub fn draw_observations(task: &dyn TaskModel, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one observation".into()));
    }
    let mut r = crate::rng::substream(seed, crate::rng::Purpose::Observations, 0);
    for _ in 0..1000 {
        let z: Vec<f64> = (0..task.theta_dim()).map(|_| r.sample(StandardNormal)).collect();
        match (0..n).map(|_| task.simulate(&z, &mut r)).collect::<Result<Vec<_>>>() {
            Ok(xs) => return Ok((z, xs)),
            Err(Error::SimulationRejected(_) | Error::IntegratorInstability { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::SimulationRejected(format!("no accepted parameter for {} in 1000 draws", task.name())))
}
