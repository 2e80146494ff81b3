use npse_core::evaluation::{mmd2, MmdEstimator};
use npse_core::rng;
use npse_core::samplers::{partition_observations, run_sampler, DiagGaussianScores, NetworkScores, SamplerConfig, SamplerKind};
use npse_core::schedule::{kernel_score, make_schedule_relaxed};
use npse_core::score_net::{NetworkConfig, ScoreNetwork, SetInput};
use npse_core::tasks::task_gg;
use npse_core::training::generate_dataset;
use proptest::prelude::*;

fn points(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn retention_strictly_decreases(steps in 2usize..600, lo in 1e-5..0.05f64, span in 0.0..0.5f64) {
        let sch = make_schedule_relaxed(steps, lo, lo + span).unwrap();
        let g = sch.gammas();
        prop_assert!(g[0] < 1.0 && g[0] > 0.0);
        prop_assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn kernel_score_is_the_log_density_gradient(t in 1usize..=400, x in prop::collection::vec(-4.0..4.0f64, 3), x0 in prop::collection::vec(-2.0..2.0f64, 3)) {
        let sch = make_schedule_relaxed(400, 1e-4, 0.04).unwrap();
        let g = sch.gamma(t);
        let logp = |y: &[f64]| -> f64 { y.iter().zip(&x0).map(|(a, b)| -(a - g.sqrt() * b).powi(2) / (2.0 * (1.0 - g))).sum() };
        let s = kernel_score(&x, &x0, t, &sch).unwrap();
        for i in 0..3 {
            let h = 1e-5 * (1.0 - g).sqrt();
            let (mut up, mut down) = (x.clone(), x.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (logp(&up) - logp(&down)) / (2.0 * h);
            prop_assert!((fd - s[i]).abs() <= 1e-6 * s[i].abs().max(1.0));
        }
    }

    #[test]
    fn partitions_are_contiguous_and_cover(n in 1usize..80, m in 1usize..40) {
        let p = partition_observations(n, m).unwrap();
        prop_assert_eq!(p.k(), n.div_ceil(m));
        let flat: Vec<usize> = p.subsets().iter().flatten().copied().collect();
        prop_assert_eq!(flat, (0..n).collect::<Vec<_>>());
        prop_assert!(p.subsets().iter().all(|s| !s.is_empty() && s.len() <= m));
    }

    #[test]
    fn mmd_is_symmetric_and_biased_is_nonnegative(x in points(12, 3), y in points(9, 3), bw in 0.1..5.0f64) {
        for est in [MmdEstimator::Biased, MmdEstimator::Unbiased] {
            let a = mmd2(&x, &y, bw, est).unwrap().mmd2;
            let b = mmd2(&y, &x, bw, est).unwrap().mmd2;
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert!(mmd2(&x, &y, bw, MmdEstimator::Biased).unwrap().mmd2 >= -1e-12);
    }

    #[test]
    fn simulator_calls_are_counted_exactly(budget in 1usize..400, m in 1usize..8, seed in 0u64..1000) {
        prop_assume!(budget >= m);
        let data = generate_dataset(&task_gg(), budget, m, seed).unwrap();
        let used: usize = data.examples.iter().map(|e| e.n_set()).sum();
        prop_assert_eq!(data.simulator_calls, used);
        prop_assert!(used <= budget);
        prop_assert!(data.examples.iter().all(|e| (1..=m).contains(&e.n_set())));
    }

    #[test]
    fn network_output_is_invariant_to_set_order(seed in 0u64..500, n in 1usize..5, t in 1usize..50) {
        let cfg = NetworkConfig { depth: 1, ..NetworkConfig::new(2, 3, 4).with_widths(8, 4, 4) };
        let mut r = rng::from_seed(seed);
        let net = ScoreNetwork::init(cfg, &mut r).unwrap();
        let sch = make_schedule_relaxed(50, 1e-3, 0.2).unwrap();
        let xs: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 * 0.37 - 0.5, (seed % 7) as f64 * 0.1, -(i as f64)]).collect();
        let mut rev = xs.clone();
        rev.reverse();
        rev.rotate_left(n / 2);
        let theta = [0.3, -1.1];
        let a = net.predict_eps(&theta, t, &SetInput::new(&xs).unwrap(), &sch).unwrap();
        let b = net.predict_eps(&theta, t, &SetInput::new(&rev).unwrap(), &sch).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn samplers_are_reproducible(seed in 0u64..1000, ancestral in any::<bool>()) {
        let sch = make_schedule_relaxed(60, 1e-3, 0.2).unwrap();
        let scores = DiagGaussianScores::new(&sch, vec![(vec![0.5, -0.2], vec![0.4, 0.9]), (vec![0.1, 0.3], vec![0.5, 0.5])]).unwrap();
        let kind = if ancestral { SamplerKind::ComposedAncestral } else { SamplerKind::AnnealedLangevin };
        let cfg = SamplerConfig { kind, n_samples: 40, seed, ..Default::default() };
        prop_assert_eq!(run_sampler(&scores, &sch, &cfg).unwrap(), run_sampler(&scores, &sch, &cfg).unwrap());
    }

    #[test]
    fn permuting_within_subsets_leaves_samples_unchanged(seed in 0u64..1000) {
        let cfg = NetworkConfig { depth: 1, ..NetworkConfig::new(2, 2, 3).with_widths(8, 4, 4) };
        let net = ScoreNetwork::init(cfg, &mut rng::from_seed(seed)).unwrap();
        let sch = make_schedule_relaxed(40, 1e-3, 0.25).unwrap();
        let obs: Vec<Vec<f64>> = (0..6).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos()]).collect();
        let sets_a = partition_observations(6, 3).unwrap().apply(&obs).unwrap();
        let sets_b: Vec<SetInput> = [[2usize, 0, 1], [5, 4, 3]]
            .iter()
            .rev()
            .map(|idx| SetInput::new(&idx.iter().map(|&i| obs[i].clone()).collect::<Vec<_>>()).unwrap())
            .collect();
        let s = SamplerConfig { kind: SamplerKind::ComposedAncestral, n_samples: 30, seed, ..Default::default() };
        let a = run_sampler(&NetworkScores::new(&net, &sch, &sets_a).unwrap(), &sch, &s).unwrap();
        let b = run_sampler(&NetworkScores::new(&net, &sch, &sets_b).unwrap(), &sch, &s).unwrap();
        prop_assert_eq!(a, b);
    }
}
