//! Denoising score matching: variable-cardinality data generation, the
//! noise-prediction loss, Adam and early stopping.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose, Stream};
use crate::schedule::{diffuse_with_noise, NoiseSchedule};
use crate::score_net::{ForwardTape, NetworkConfig, NoisedBatch, ObsScaling, ScoreNetwork, SetInput};
use crate::tasks::TaskModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Simulator-call budget.
    pub budget: usize,
    pub m_max: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            budget: 10_000,
            m_max: 1,
            batch_size: 256,
            lr: 1e-4,
            max_epochs: 20_000,
            patience: 100,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.m_max == 0 || self.budget < self.m_max {
            return bad(format!("budget {} must be at least m_max {} >= 1", self.budget, self.m_max));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub theta: Vec<f64>,
    pub xs: SetInput,
}

impl TrainingExample {
    pub fn n_set(&self) -> usize {
        self.xs.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<TrainingExample>,
    /// Every simulator invocation, including rejected ones.
    pub simulator_calls: usize,
    pub rejected_calls: usize,
}

/// Draws `(n, z, x_1..x_n)` tuples with `n ~ U{1..m_max}` until the next
/// tuple could exceed the budget. A rejected simulation costs one call and
/// triggers a fresh parameter draw.
pub fn generate_dataset(task: &dyn TaskModel, budget: usize, m_max: usize, seed: u64) -> Result<Dataset> {
    if m_max == 0 || budget < m_max {
        return Err(Error::InvalidArgument(format!("budget {budget} must be at least m_max {m_max} >= 1")));
    }
    let mut r = rng::substream(seed, Purpose::Dataset, 0);
    let mut examples = Vec::new();
    let (mut calls, mut rejected) = (0usize, 0usize);
    'outer: loop {
        let n = r.random_range(1..=m_max);
        loop {
            if calls + n > budget {
                break 'outer;
            }
            let theta: Vec<f64> = (0..task.theta_dim()).map(|_| r.sample(StandardNormal)).collect();
            let mut xs = Vec::with_capacity(n);
            let mut ok = true;
            for _ in 0..n {
                calls += 1;
                match task.simulate(&theta, &mut r) {
                    Ok(x) => xs.push(x),
                    Err(Error::SimulationRejected(_) | Error::IntegratorInstability { .. }) => {
                        rejected += 1;
                        ok = false;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if ok {
                examples.push(TrainingExample { theta, xs: SetInput::new(&xs)? });
                break;
            }
        }
    }
    Ok(Dataset { examples, simulator_calls: calls, rejected_calls: rejected })
}

/// Anything that predicts noise for a batch and can back-propagate through it.
pub trait EpsModel {
    type Tape;
    fn forward(&self, batch: &NoisedBatch<'_>) -> Result<(Vec<f64>, Self::Tape)>;
    fn backward(&self, tape: &Self::Tape, upstream: &[f64]) -> Vec<f64>;
}

impl EpsModel for ScoreNetwork {
    type Tape = ForwardTape;

    fn forward(&self, batch: &NoisedBatch<'_>) -> Result<(Vec<f64>, ForwardTape)> {
        self.forward_batch(batch)
    }

    fn backward(&self, tape: &ForwardTape, upstream: &[f64]) -> Vec<f64> {
        self.backward_batch(tape, upstream)
    }
}

/// Level and injected noise for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Vec<f64>,
}

/// `t ~ U{1..T-1}`, `eps ~ N(0, I)`.
pub fn draw_noise<R: Rng + ?Sized>(dim: usize, sch: &NoiseSchedule, rng: &mut R) -> NoiseDraw {
    let t = rng.random_range(1..sch.steps());
    NoiseDraw { t, eps: (0..dim).map(|_| rng.sample(StandardNormal)).collect() }
}

/// Mean squared noise-prediction error and its parameter gradient for fixed draws.
pub fn dsm_loss_with_noise<M: EpsModel>(
    model: &M,
    batch: &[&TrainingExample],
    draws: &[NoiseDraw],
    sch: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    let (loss, residual, tape) = dsm_forward(model, batch, draws, sch)?;
    let b = batch.len() as f64;
    let upstream: Vec<f64> = residual.iter().map(|r| 2.0 * r / b).collect();
    Ok((loss, model.backward(&tape, &upstream)))
}

fn dsm_forward<M: EpsModel>(
    model: &M,
    batch: &[&TrainingExample],
    draws: &[NoiseDraw],
    sch: &NoiseSchedule,
) -> Result<(f64, Vec<f64>, M::Tape)> {
    if batch.is_empty() || draws.len() != batch.len() {
        return Err(Error::InvalidArgument("loss needs a nonempty batch with one noise draw per example".into()));
    }
    let mut theta = Vec::new();
    for (ex, d) in batch.iter().zip(draws) {
        theta.extend(diffuse_with_noise(&ex.theta, &d.eps, d.t, sch)?);
    }
    let nb = NoisedBatch { theta, levels: draws.iter().map(|d| d.t).collect(), sets: batch.iter().map(|e| &e.xs).collect() };
    let (pred, tape) = model.forward(&nb)?;
    let residual: Vec<f64> = pred.iter().zip(draws.iter().flat_map(|d| &d.eps)).map(|(p, e)| p - e).collect();
    let loss = residual.iter().map(|r| r * r).sum::<f64>() / batch.len() as f64;
    Ok((loss, residual, tape))
}

/// Loss only, without the reverse pass.
pub fn dsm_value<M: EpsModel>(model: &M, batch: &[&TrainingExample], draws: &[NoiseDraw], sch: &NoiseSchedule) -> Result<f64> {
    Ok(dsm_forward(model, batch, draws, sch)?.0)
}

/// Loss and gradient with fresh noise draws from `rng`.
pub fn dsm_loss<M: EpsModel, R: Rng + ?Sized>(
    model: &M,
    batch: &[&TrainingExample],
    sch: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let draws: Vec<NoiseDraw> = batch.iter().map(|e| draw_noise(e.theta.len(), sch, rng)).collect();
    dsm_loss_with_noise(model, batch, &draws, sch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        AdamState { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), found: grads.len() });
    }
    state.step += 1;
    let (b1, b2) = (AdamState::BETA1, AdamState::BETA2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + AdamState::EPS);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: ScoreNetwork,
    pub log: Vec<EpochRecord>,
    pub best_val_loss: f64,
    pub initial_val_loss: f64,
    pub best_epoch: usize,
    pub lr: f64,
}

/// Shuffled split: the last `val_fraction` of the permutation is held out.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("dataset of {n} examples cannot be split")));
    }
    let n_val = (((n as f64) * val_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::substream(seed, Purpose::Shuffle, 0));
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

fn batched_value(net: &ScoreNetwork, examples: &[&TrainingExample], draws: &[NoiseDraw], sch: &NoiseSchedule, bs: usize) -> Result<f64> {
    let mut total = 0.0;
    for (chunk, d) in examples.chunks(bs).zip(draws.chunks(bs)) {
        total += dsm_value(net, chunk, d, sch)? * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Minibatch Adam with early stopping on a held-out split. Returns the
/// snapshot with the lowest validation loss.
pub fn train_on_dataset(
    examples: &[TrainingExample],
    net_cfg: NetworkConfig,
    cfg: &TrainingConfig,
    sch: &NoiseSchedule,
) -> Result<TrainOutcome> {
    train_with_observer(examples, net_cfg, cfg, sch, |_| {})
}

pub fn train_with_observer(
    examples: &[TrainingExample],
    net_cfg: NetworkConfig,
    cfg: &TrainingConfig,
    sch: &NoiseSchedule,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if net_cfg.m_max != cfg.m_max {
        return Err(Error::InvalidArgument(format!("network m_max {} differs from training m_max {}", net_cfg.m_max, cfg.m_max)));
    }
    let (train_idx, val_idx) = split_indices(examples.len(), cfg.val_fraction, cfg.seed)?;
    let train: Vec<&TrainingExample> = train_idx.iter().map(|&i| &examples[i]).collect();
    let val: Vec<&TrainingExample> = val_idx.iter().map(|&i| &examples[i]).collect();

    let mut net = ScoreNetwork::init(net_cfg, &mut rng::substream(cfg.seed, Purpose::Init, 0))?;
    net.set_scaling(ObsScaling::fit(train.iter().flat_map(|e| e.xs.rows()), net_cfg.x_dim))?;

    let mut vr = rng::substream(cfg.seed, Purpose::ValidationNoise, 0);
    let val_draws: Vec<NoiseDraw> = val.iter().map(|e| draw_noise(e.theta.len(), sch, &mut vr)).collect();

    let initial_val_loss = batched_value(&net, &val, &val_draws, sch, cfg.batch_size)?;
    let mut best = (initial_val_loss, net.params().to_vec(), 0usize);
    let mut adam = AdamState::new(net.num_params());
    let mut noise: Stream = rng::substream(cfg.seed, Purpose::TrainNoise, 0);
    let mut order = train.clone();
    let mut log = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng::substream(cfg.seed, Purpose::Shuffle, epoch as u64));
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grads) = dsm_loss(&net, chunk, sch, &mut noise)?;
            if !loss.is_finite() {
                return Err(Error::InvalidArgument(format!("training loss became non-finite in epoch {epoch}")));
            }
            adam_step(net.params_mut(), &grads, &mut adam, cfg.lr)?;
            sum += loss * chunk.len() as f64;
        }
        let val_loss = batched_value(&net, &val, &val_draws, sch, cfg.batch_size)?;
        let rec = EpochRecord { epoch, train_loss: sum / order.len() as f64, val_loss, lr: cfg.lr };
        on_epoch(&rec);
        log.push(rec);
        if val_loss < best.0 {
            best = (val_loss, net.params().to_vec(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    let (best_val_loss, params, best_epoch) = best;
    net.params_mut().copy_from_slice(&params);
    Ok(TrainOutcome { network: net, log, best_val_loss, initial_val_loss, best_epoch, lr: cfg.lr })
}

/// Index of the run with the strictly lowest validation loss (first on ties).
pub fn select_best(outcomes: &[TrainOutcome]) -> Option<usize> {
    outcomes
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, o)| match acc {
            Some((_, v)) if v <= o.best_val_loss => acc,
            _ => Some((i, o.best_val_loss)),
        })
        .map(|(i, _)| i)
}

/// Trains once per learning rate and keeps the run with the best validation loss.
pub fn train_lr_grid(
    examples: &[TrainingExample],
    net_cfg: NetworkConfig,
    cfg: &TrainingConfig,
    lrs: &[f64],
    sch: &NoiseSchedule,
) -> Result<(TrainOutcome, Vec<TrainOutcome>)> {
    if lrs.is_empty() {
        return Err(Error::InvalidArgument("learning-rate grid is empty".into()));
    }
    let runs: Vec<TrainOutcome> = lrs
        .iter()
        .map(|&lr| train_on_dataset(examples, net_cfg, &TrainingConfig { lr, ..cfg.clone() }, sch))
        .collect::<Result<_>>()?;
    let best = runs[select_best(&runs).unwrap()].clone();
    Ok((best, runs))
}

/// Generates a dataset from the task and trains on it.
pub fn train(task: &dyn TaskModel, net_cfg: NetworkConfig, cfg: &TrainingConfig, sch: &NoiseSchedule) -> Result<(TrainOutcome, Dataset)> {
    cfg.validate()?;
    let data = generate_dataset(task, cfg.budget, cfg.m_max, cfg.seed)?;
    let out = train_on_dataset(&data.examples, net_cfg, cfg, sch)?;
    Ok((out, data))
}
