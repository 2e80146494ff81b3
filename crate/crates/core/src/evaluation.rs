//! Two-sample metrics: squared MMD with a median-heuristic Gaussian kernel,
//! and a classifier two-sample test.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{act, act_grad, Linear, ParamLayout};
use crate::rng::{self, Purpose};
use crate::training::{adam_step, AdamState};

/// Pooled points beyond this count are subsampled for the bandwidth.
pub const BANDWIDTH_SUBSAMPLE: usize = 2000;

fn check_dims(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().or(y.first()).map(|r| r.len()).ok_or_else(|| Error::InvalidArgument("empty sample sets".into()))?;
    if let Some(bad) = x.iter().chain(y).find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, found: bad.len() });
    }
    Ok(d)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Median pairwise Euclidean distance of the pooled sets. Pools larger than
/// 2000 points are subsampled without replacement using `seed`.
pub fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>], seed: u64) -> Result<f64> {
    check_dims(x, y)?;
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    if pooled.len() < 2 {
        return Err(Error::InvalidArgument("bandwidth needs at least two points".into()));
    }
    let pts: Vec<&Vec<f64>> = if pooled.len() > BANDWIDTH_SUBSAMPLE {
        let mut r = rng::substream(seed, Purpose::Bandwidth, 0);
        let mut idx = index::sample(&mut r, pooled.len(), BANDWIDTH_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pooled[i]).collect()
    } else {
        pooled
    };
    let mut d = Vec::with_capacity(pts.len() * (pts.len() - 1) / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push(sq_dist(pts[i], pts[j]).sqrt());
        }
    }
    let mid = d.len() / 2;
    let (_, &mut upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let bw = if d.len() % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if !(bw > 0.0) {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(bw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MmdEstimator {
    Biased,
    Unbiased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    pub mmd2: f64,
    pub bandwidth: f64,
    pub estimator: MmdEstimator,
    pub n_x: usize,
    pub n_y: usize,
}

/// Sum of `exp(-|a-b|^2 / (2 bw^2))` over pairs; `skip_diag` drops `i == j`
/// when both sides are the same set.
fn kernel_sum(a: &[Vec<f64>], b: &[Vec<f64>], inv: f64, same: bool, skip_diag: bool) -> f64 {
    let mut total = 0.0;
    for (i, p) in a.iter().enumerate() {
        if same {
            // symmetric: off-diagonal pairs counted twice
            let mut row = 0.0;
            for q in &b[i + 1..] {
                row += (-sq_dist(p, q) * inv).exp();
            }
            total += 2.0 * row;
            if !skip_diag {
                total += 1.0;
            }
        } else {
            for q in b {
                total += (-sq_dist(p, q) * inv).exp();
            }
        }
    }
    total
}

/// Squared MMD with the Gaussian kernel `exp(-d^2 / (2 bandwidth^2))`.
pub fn mmd2(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64, estimator: MmdEstimator) -> Result<MmdReport> {
    check_dims(x, y)?;
    let (n_x, n_y) = (x.len(), y.len());
    // evaluate on a canonical argument order so the result is exactly symmetric
    let swap = x.len().cmp(&y.len()).then_with(|| {
        x.iter().flatten().zip(y.iter().flatten()).map(|(a, b)| a.total_cmp(b)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let (x, y) = if swap.is_gt() { (y, x) } else { (x, y) };
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth {bandwidth} must be positive")));
    }
    let (n, m) = (x.len() as f64, y.len() as f64);
    let min = if estimator == MmdEstimator::Unbiased { 2.0 } else { 1.0 };
    if n < min || m < min {
        return Err(Error::InvalidArgument(format!("sample sets too small for the {estimator:?} estimator")));
    }
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let cross = kernel_sum(x, y, inv, false, false) / (n * m);
    let (xx, yy) = match estimator {
        MmdEstimator::Biased => (kernel_sum(x, x, inv, true, false) / (n * n), kernel_sum(y, y, inv, true, false) / (m * m)),
        MmdEstimator::Unbiased => {
            (kernel_sum(x, x, inv, true, true) / (n * (n - 1.0)), kernel_sum(y, y, inv, true, true) / (m * (m - 1.0)))
        }
    };
    Ok(MmdReport { mmd2: xx + yy - 2.0 * cross, bandwidth, estimator, n_x, n_y })
}

/// Bandwidth from the median heuristic, then the requested estimator.
pub fn mmd2_median(x: &[Vec<f64>], y: &[Vec<f64>], estimator: MmdEstimator, seed: u64) -> Result<MmdReport> {
    mmd2(x, y, median_bandwidth(x, y, seed)?, estimator)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct C2stConfig {
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of the training split held out for early stopping.
    pub holdout: f64,
    pub train_fraction: f64,
}

impl Default for C2stConfig {
    fn default() -> Self {
        C2stConfig { hidden: 64, layers: 3, lr: 1e-3, batch_size: 128, max_epochs: 200, patience: 10, holdout: 0.1, train_fraction: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C2stReport {
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub classifier: String,
    pub epochs: usize,
}

struct Classifier {
    layers: Vec<Linear>,
    params: Vec<f64>,
}

impl Classifier {
    fn new(d: usize, cfg: &C2stConfig, seed: u64) -> Self {
        let mut layout = ParamLayout::default();
        let mut layers = Vec::new();
        let mut width = d;
        for i in 0..cfg.layers {
            layers.push(Linear::new(&mut layout, &format!("hidden{i}"), width, cfg.hidden));
            width = cfg.hidden;
        }
        layers.push(Linear::new(&mut layout, "logit", width, 1));
        let params = layout.init(&mut rng::substream(seed, Purpose::Classifier, 0));
        Classifier { layers, params }
    }

    /// Logits plus the pre-activations of every hidden layer.
    fn forward(&self, x: &[f64], rows: usize) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut inputs = vec![x.to_vec()];
        let mut pre = Vec::new();
        let (last, hidden) = self.layers.split_last().unwrap();
        for l in hidden {
            let z = l.forward(&self.params, inputs.last().unwrap(), rows);
            inputs.push(z.iter().map(|&v| act(v)).collect());
            pre.push(z);
        }
        let logits = last.forward(&self.params, inputs.last().unwrap(), rows);
        (logits, inputs, pre)
    }

    /// Mean binary cross-entropy gradient.
    fn gradient(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let rows = y.len();
        let (logits, inputs, pre) = self.forward(x, rows);
        let mut grads = vec![0.0; self.params.len()];
        let mut d: Vec<f64> = logits.iter().zip(y).map(|(z, t)| (sigmoid(*z) - t) / rows as f64).collect();
        let n = self.layers.len();
        for li in (0..n).rev() {
            let dx = self.layers[li].backward(&self.params, &inputs[li], &d, rows, &mut grads);
            if li > 0 {
                d = dx.iter().zip(&pre[li - 1]).map(|(g, z)| g * act_grad(*z)).collect();
            }
        }
        grads
    }

    fn accuracy(&self, x: &[f64], y: &[f64]) -> f64 {
        let (logits, _, _) = self.forward(x, y.len());
        let hits = logits.iter().zip(y).filter(|(z, t)| ((**z > 0.0) as u8 as f64) == **t).count();
        hits as f64 / y.len() as f64
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn flatten(rows: &[&[f64]], shift: &[f64], scale: &[f64]) -> Vec<f64> {
    rows.iter().flat_map(|r| r.iter().zip(shift).zip(scale).map(|((v, s), c)| (v - s) / c)).collect()
}

/// Classifier two-sample test: test accuracy of a feed-forward classifier
/// separating `x` (label 0) from `y` (label 1) on a stratified split.
pub fn c2st(x: &[Vec<f64>], y: &[Vec<f64>], split_seed: u64, train_seed: u64, cfg: &C2stConfig) -> Result<C2stReport> {
    let d = check_dims(x, y)?;
    if x.len() != y.len() || x.len() < 200 {
        return Err(Error::DegenerateSplit(format!("need equal sets of at least 200 points, got {} and {}", x.len(), y.len())));
    }
    let mut r = rng::substream(split_seed, Purpose::Shuffle, 0);
    let mut fit: Vec<(&[f64], f64)> = Vec::new();
    let mut test: Vec<(&[f64], f64)> = Vec::new();
    for (set, label) in [(x, 0.0), (y, 1.0)] {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(&mut r);
        let n_train = (set.len() as f64 * cfg.train_fraction).round() as usize;
        if n_train == 0 || n_train >= set.len() {
            return Err(Error::DegenerateSplit("train fraction leaves an empty side".into()));
        }
        fit.extend(idx[..n_train].iter().map(|&i| (set[i].as_slice(), label)));
        test.extend(idx[n_train..].iter().map(|&i| (set[i].as_slice(), label)));
    }
    fit.shuffle(&mut r);
    let n_hold = ((fit.len() as f64) * cfg.holdout).round().max(1.0) as usize;
    let hold = fit.split_off(fit.len() - n_hold);
    let n_train_total = fit.len() + hold.len();

    // standardize with training-split statistics
    let rows: Vec<&[f64]> = fit.iter().map(|p| p.0).collect();
    let n = rows.len() as f64;
    let shift: Vec<f64> = (0..d).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|i| {
            let sd = (rows.iter().map(|r| (r[i] - shift[i]).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let prep = |set: &[(&[f64], f64)]| {
        let rows: Vec<&[f64]> = set.iter().map(|p| p.0).collect();
        (flatten(&rows, &shift, &scale), set.iter().map(|p| p.1).collect::<Vec<f64>>())
    };
    let (hx, hy) = prep(&hold);
    let (tx, ty) = prep(&test);

    let mut clf = Classifier::new(d, cfg, train_seed);
    let mut adam = AdamState::new(clf.params.len());
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut br = rng::substream(train_seed, Purpose::Classifier, 1);
    let mut best = (clf.accuracy(&hx, &hy), clf.params.clone(), 0usize);
    let mut epochs = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        order.shuffle(&mut br);
        for chunk in order.chunks(cfg.batch_size) {
            let sub: Vec<(&[f64], f64)> = chunk.iter().map(|&i| fit[i]).collect();
            let (bx, by) = prep(&sub);
            let g = clf.gradient(&bx, &by);
            adam_step(&mut clf.params, &g, &mut adam, cfg.lr)?;
        }
        let acc = clf.accuracy(&hx, &hy);
        if acc > best.0 {
            best = (acc, clf.params.clone(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    clf.params = best.1;
    let accuracy = clf.accuracy(&tx, &ty);
    Ok(C2stReport {
        accuracy,
        n_train: n_train_total,
        n_test: test.len(),
        classifier: format!("mlp {}x{} adam lr={} early-stopped at epoch {}", cfg.layers, cfg.hidden, cfg.lr, best.2),
        epochs,
    })
}

/// Random draws used by tests and the acceptance harness.
pub fn gaussian_cloud<R: Rng + ?Sized>(n: usize, mean: &[f64], sd: f64, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n).map(|_| mean.iter().map(|m| m + sd * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()).collect()
}
