use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use usnprune::network::{LayerSpec, Network, NetworkSpec, Shape};
use usnprune::perturbation::PerturbationSpec;
use usnprune::pipeline::{kept_count, prune_step, random_prune_baseline, PruneOrder, PruningSchedule};
use usnprune::usn::UsnStats;
use usnprune::wasserstein::{percentile, w2_discrete, DiscreteDistribution};

fn distribution() -> impl Strategy<Value = DiscreteDistribution> {
    prop::collection::vec((-5.0f64..5.0, 0.01f64..1.0), 1..7).prop_map(|atoms| {
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        let (p, w): (Vec<f64>, Vec<f64>) = atoms.into_iter().map(|(p, w)| (p, w / total)).unzip();
        DiscreteDistribution::new(p, w).unwrap()
    })
}

fn shifted(d: &DiscreteDistribution, c: f64) -> DiscreteDistribution {
    DiscreteDistribution::new(d.points().iter().map(|p| p + c).collect(), d.weights().to_vec()).unwrap()
}

fn conv_net(seed: u64) -> Network {
    Network::seeded(
        NetworkSpec {
            input: Shape::new(1, 6, 6),
            layers: vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 10, kernel_size: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_channels: 10, out_channels: 7, kernel_size: 3, stride: 2, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_dim: 63, out_dim: 4 },
            ],
        },
        seed,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn w2_is_a_metric(a in distribution(), b in distribution(), c in distribution()) {
        prop_assert!(w2_discrete(&a, &a).abs() < 1e-9);
        prop_assert!((w2_discrete(&a, &b) - w2_discrete(&b, &a)).abs() < 1e-9);
        prop_assert!(w2_discrete(&a, &c) <= w2_discrete(&a, &b) + w2_discrete(&b, &c) + 1e-9);
    }

    #[test]
    fn w2_of_a_translation_is_the_shift(a in distribution(), c in -3.0f64..3.0) {
        prop_assert!((w2_discrete(&a, &shifted(&a, c)) - c.abs()).abs() < 1e-9);
    }

    #[test]
    fn w2_between_point_masses(x in -10.0f64..10.0, y in -10.0f64..10.0) {
        let d = w2_discrete(&DiscreteDistribution::point_mass(x), &DiscreteDistribution::point_mass(y));
        prop_assert!((d - (x - y).abs()).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_a_clamped_staircase(
        rho in 0.0f64..0.9,
        n_steps in 1usize..20,
        t_start in 0usize..10,
        span in 0usize..30,
        t_interval in 1usize..5,
    ) {
        let s = PruningSchedule { rho, n_steps, t_start, t_end: t_start + span, t_interval };
        prop_assume!(s.validate().is_ok());
        let mut prev = 0.0;
        for t in 0..80 {
            let r = s.rho_at(t);
            prop_assert!(r >= prev && r <= rho);
            prop_assert_eq!(s.is_pruning_epoch(t), t > 0 && r > s.rho_at(t - 1));
            prev = r;
        }
        prop_assert_eq!(s.rho_at(s.saturation_epoch().max(t_start + n_steps * t_interval)), rho);
    }

    #[test]
    fn cumulative_pruning_only_removes(seed in 0u64..1000, r1 in 0.0f64..0.5, extra in 0.0f64..0.4) {
        let mut net = conv_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = |net: &Network, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            use rand::Rng;
            [1usize, 2].iter().map(|&i| (0..net.channels(i).unwrap()).map(|_| rng.random::<f64>()).collect()).collect()
        };
        let s1 = scores(&net, &mut rng);
        prune_step(&mut net, &[1, 2], &s1, r1, PruneOrder::MostUnstableFirst).unwrap();
        let before: Vec<Vec<bool>> = (1..=2).map(|i| net.params(i).unwrap().mask.clone()).collect();
        let r2 = r1 + extra;
        if extra < 0.2 {
            let s2 = scores(&net, &mut rng);
            prune_step(&mut net, &[1, 2], &s2, r2, PruneOrder::MostUnstableFirst).unwrap();
        } else {
            random_prune_baseline(&mut net, &[1, 2], r2, &mut rng).unwrap();
        }
        for (k, i) in (1..=2).enumerate() {
            let after = &net.params(i).unwrap().mask;
            prop_assert!(after.iter().zip(&before[k]).all(|(a, b)| !a || *b), "revived a channel");
            let c = net.channels(i).unwrap();
            prop_assert_eq!(after.iter().filter(|m| **m).count(), kept_count(c, r2));
        }
    }

    #[test]
    fn compaction_preserves_predictions(seed in 0u64..1000, rho in 0.0f64..0.8, x in prop::collection::vec(0.0f64..1.0, 36)) {
        let mut net = conv_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        random_prune_baseline(&mut net, &[1, 2], rho, &mut rng).unwrap();
        let small = net.compact().unwrap();
        prop_assert!(small.num_parameters() <= net.num_parameters());
        let (a, b) = (net.predict(&x).unwrap(), small.predict(&x).unwrap());
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-10 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn usn_stats_merge_like_a_single_pass(
        devs in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 5), 2..40),
        split in 1usize..39,
    ) {
        let split = split.min(devs.len() - 1);
        let whole = UsnStats::from_deviations(1, &devs).unwrap();
        let merged = UsnStats::from_deviations(1, &devs[..split]).unwrap()
            .merge(&UsnStats::from_deviations(1, &devs[split..]).unwrap()).unwrap();
        prop_assert_eq!(merged.count, whole.count);
        prop_assert!((merged.unbiased() - whole.unbiased()).abs() < 1e-12);
        prop_assert!((merged.smooth() - whole.smooth()).abs() < 1e-12);
        for (a, b) in merged.per_neuron_variance().iter().zip(whole.per_neuron_variance()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        // Smooth metric decomposes into variance plus squared bias per neuron.
        let decomposed: f64 = whole.per_neuron_variance().iter().zip(whole.mean_deviation())
            .map(|(v, m)| v + m * m).sum();
        prop_assert!((decomposed - whole.smooth()).abs() < 1e-9 * (1.0 + whole.smooth()));
    }

    #[test]
    fn grid_cells_partition_the_parameter_interval(
        eps in 0.0001f64..0.3,
        n in 1usize..50,
        contrast in any::<bool>(),
        x in prop::collection::vec(0.0f64..1.0, 4),
    ) {
        let spec = if contrast { PerturbationSpec::contrast(eps) } else { PerturbationSpec::brightness(eps) };
        let cells = spec.grid(&x, n).unwrap();
        let mut edge = spec.center() - eps;
        for c in &cells {
            prop_assert!((c.s_center - c.half_width - edge).abs() < 1e-12);
            edge = c.s_center + c.half_width;
            prop_assert!(c.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        prop_assert!((edge - (spec.center() + eps)).abs() < 1e-12);
    }

    #[test]
    fn percentile_is_monotone_and_bounded(v in prop::collection::vec(-100.0f64..100.0, 1..30), q1 in 0.0f64..100.0, q2 in 0.0f64..100.0) {
        let (lo, hi) = (q1.min(q2), q1.max(q2));
        let (a, b) = (percentile(&v, lo), percentile(&v, hi));
        prop_assert!(a <= b);
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= min && b <= max);
    }
}
