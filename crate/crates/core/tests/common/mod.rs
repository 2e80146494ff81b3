#![allow(dead_code)]

use npse_core::rng;
use npse_core::schedule::{make_schedule_relaxed, NoiseSchedule};
use npse_core::score_net::{NetworkConfig, ObsScaling, ScoreNetwork, SetInput};
use npse_core::training::{draw_noise, dsm_loss_with_noise, dsm_value, NoiseDraw, TrainingExample};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

/// Architectures exercised by the gradient checks: (theta_dim, x_dim, m_max, hidden, emb, time_emb, depth).
pub const GRAD_ARCHS: [(usize, usize, usize, usize, usize, usize, usize); 3] =
    [(2, 2, 1, 8, 4, 4, 1), (3, 4, 3, 16, 8, 8, 2), (10, 10, 5, 32, 16, 16, 3)];

#[derive(Debug)]
pub struct GradCheck {
    pub coords: usize,
    pub max_rel: f64,
    pub params: usize,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Fourth-order central differences of the noise-prediction loss on a mixed-cardinality
/// batch against the reverse pass, on `coords` random parameters.
pub fn gradient_check(arch: usize, coords: usize, seed: u64) -> GradCheck {
    let (td, xd, m, h, e, te, depth) = GRAD_ARCHS[arch];
    let cfg = NetworkConfig { theta_dim: td, x_dim: xd, m_max: m, hidden_dim: h, emb_dim: e, depth, time_emb_dim: te };
    let mut r = rng::from_seed(seed);
    let mut net = ScoreNetwork::init(cfg, &mut r).unwrap();
    // perturb away from the initialization so no block is exactly zero
    for p in net.params_mut() {
        *p += 0.05 * r.sample::<f64, _>(StandardNormal);
    }
    net.set_scaling(ObsScaling { shift: vec![0.3; xd], scale: vec![1.7; xd] }).unwrap();
    let sch: NoiseSchedule = make_schedule_relaxed(50, 1e-3, 0.2).unwrap();
    let examples: Vec<TrainingExample> = (0..6)
        .map(|i| {
            let n = 1 + i % m;
            let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..xd).map(|_| r.sample(StandardNormal)).collect()).collect();
            TrainingExample { theta: (0..td).map(|_| r.sample(StandardNormal)).collect(), xs: SetInput::new(&xs).unwrap() }
        })
        .collect();
    let batch: Vec<&TrainingExample> = examples.iter().collect();
    let draws: Vec<NoiseDraw> = batch.iter().map(|_| draw_noise(td, &sch, &mut r)).collect();
    let (_, grads) = dsm_loss_with_noise(&net, &batch, &draws, &sch).unwrap();
    let n = net.num_params();
    let picks = index::sample(&mut r, n, coords.min(n)).into_vec();
    let h = 1e-4;
    let mut max_rel: f64 = 0.0;
    for &i in &picks {
        let orig = net.params()[i];
        let mut at = |d: f64| {
            net.params_mut()[i] = orig + d;
            dsm_value(&net, &batch, &draws, &sch).unwrap()
        };
        let fd = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
        net.params_mut()[i] = orig;
        max_rel = max_rel.max(rel(fd, grads[i]));
    }
    GradCheck { coords: picks.len(), max_rel, params: n }
}
