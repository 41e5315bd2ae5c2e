mod common;

use proptest::prelude::*;

use tricon_core::contribution::{self, Coalition, TabulatedUtility};
use tricon_core::model::Activation;

use common::*;

fn cases() -> ProptestConfig {
    ProptestConfig::with_cases(500)
}

fn table(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 1usize << n)
}

proptest! {
    #![proptest_config(cases())]

    #[test]
    fn clip_bound_holds(z in prop::collection::vec(-100.0f64..100.0, 1..32), clip in 0.01f64..10.0,
                        perm_seed in any::<u64>(), stream in any::<u64>()) {
        clip_bound(z, clip, perm_seed, stream)?;
    }

    #[test]
    fn permutation_is_bijective(len in 0usize..200, perm_seed in any::<u64>(), client in 0usize..50) {
        permutation_bijective(len, perm_seed, client)?;
    }

    #[test]
    fn segments_partition_the_shard(len in 0usize..300, k in 1usize..8, s_min in 1usize..20, seed in any::<u64>()) {
        segment_laws(len, k, s_min, seed)?;
    }

    #[test]
    fn perturbation_applied_once(seed in 0u64..10_000, sigma in 0.0f64..0.5, rounds in 0usize..3) {
        single_initialization(seed, sigma, rounds)?;
    }

    #[test]
    fn frozen_layers_never_change(seed in 0u64..10_000, rounds in 1usize..3, fedavg in any::<bool>()) {
        frozen_layers_immutable(seed, rounds, fedavg)?;
    }

    #[test]
    fn runs_are_bit_identical(seed in 0u64..10_000, beta in 0.3f64..5.0) {
        bit_determinism(seed, beta)?;
    }

    #[test]
    fn analytic_gradient_matches_finite_differences(seed in any::<u64>(), tanh in any::<bool>(),
                                                     rows in 1usize..5) {
        let act = if tanh { Activation::Tanh } else { Activation::Relu };
        let p = tricon_core::model::init_params(&mlp(5, vec![7], 3, act), seed).unwrap();
        let (x, y) = random_batch(rows, 5, 3, seed);
        let err = gradient_check(&p, &x, &y, 1e-5);
        prop_assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn shapley_efficiency(values in table(4)) {
        let phi = contribution::shapley_exact(4, &TabulatedUtility { values: values.clone() }).unwrap();
        let total: f64 = phi.iter().sum();
        prop_assert!((total - (values[15] - values[0])).abs() <= 1e-9);
    }

    #[test]
    fn shapley_dummy_player(values in table(3), dummy in 0usize..4) {
        // extend a 3-player game with a player that never changes the value
        let lift = |mask: u64| {
            let low = mask & ((1 << dummy) - 1);
            let high = (mask >> (dummy + 1)) << dummy;
            values[(low | high) as usize]
        };
        let u = move |c: Coalition| lift(c.mask());
        let phi = contribution::shapley_exact(4, &u).unwrap();
        prop_assert_eq!(phi[dummy], 0.0);
        let est = contribution::shapley_mc(4, &u, 50, dummy as u64).unwrap();
        prop_assert!(est.phi[dummy].abs() <= 3.0 * est.std_err[dummy]);
    }

    #[test]
    fn shapley_symmetry(by_size in prop::collection::vec(-1.0f64..1.0, 5)) {
        let u = move |c: Coalition| by_size[c.len()];
        let phi = contribution::shapley_exact(4, &u).unwrap();
        for p in &phi {
            prop_assert!((p - phi[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn constant_utility_gives_zero(c in -5.0f64..5.0, m in 1usize..40, seed in any::<u64>()) {
        let u = move |_: Coalition| c;
        let est = contribution::shapley_mc(5, &u, m, seed).unwrap();
        prop_assert!(est.phi.iter().all(|p| *p == 0.0));
    }

    #[test]
    fn classification_is_scale_invariant(phi in prop::collection::vec(-1.0f64..1.0, 1..10),
                                         t in -1.0f64..1.0, scale in 1e-3f64..1e3) {
        let a = contribution::classify(&phi, t);
        let scaled: Vec<f64> = phi.iter().map(|p| p * scale).collect();
        let b = contribution::classify(&scaled, t * scale);
        prop_assert_eq!(a.status, b.status);
    }
}
