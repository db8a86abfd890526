//! Cross-module invariants checked over randomized inputs.

use fova_core::data::{collect_dataset, Dataset};
use fova_core::federation::aggregate;
use fova_core::learner::d_vcql;
use fova_core::mdp::{
    divergence, make_random_mdp, occupancy_measure, DivergenceKind, QTable, TabularPolicy,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_keeps_rows_on_the_simplex(
        seed in 0u64..1000,
        k in 1usize..6,
        n_states in 1usize..5,
        n_actions in 1usize..5,
    ) {
        let policies: Vec<TabularPolicy> = (0..k)
            .map(|i| TabularPolicy::random(n_states, n_actions, seed + i as u64))
            .collect();
        let qtables: Vec<QTable> = (0..k).map(|_| QTable::zeros(n_states, n_actions)).collect();
        let (mean, _) = aggregate(&policies, &qtables).unwrap();
        for s in 0..n_states {
            let sum: f64 = mean.probs.row(s).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(mean.probs.row(s).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn density_ratio_discrepancy_is_nonnegative(seed in 0u64..1000, n_actions in 2usize..6) {
        let p = TabularPolicy::random(1, n_actions, seed);
        let q = TabularPolicy::random(1, n_actions, seed + 7919).with_floor(1e-5);
        let d = d_vcql(&p, &q, 0).unwrap();
        prop_assert!(d >= -1e-15);
    }

    #[test]
    fn pinsker_holds_under_any_occupancy(seed in 0u64..500) {
        let mdp = make_random_mdp(4, 3, 0.9, 1.0, seed).unwrap();
        let p = TabularPolicy::random(4, 3, seed + 1);
        let q = TabularPolicy::random(4, 3, seed + 2).with_floor(1e-5);
        let occ = occupancy_measure(&mdp, &p).unwrap();
        let tv = divergence(&p, &q, &occ, DivergenceKind::Tv).unwrap();
        let kl = divergence(&p, &q, &occ, DivergenceKind::Kl).unwrap();
        prop_assert!(tv <= (kl / 2.0).sqrt() + 1e-12);
    }

    #[test]
    fn dataset_counts_are_exact_tallies(seed in 0u64..300, n in 1usize..400) {
        let mdp = make_random_mdp(3, 2, 0.9, 1.0, seed).unwrap();
        let pi = TabularPolicy::random(3, 2, seed + 13);
        let data = collect_dataset(&mdp, &pi, n, 50, seed).unwrap();
        prop_assert_eq!(data.counts_sa.sum() as usize, n);
        let rebuilt =
            Dataset::from_transitions(3, 2, data.transitions.clone(), data.quality_label, data.seed)
                .unwrap();
        prop_assert_eq!(&rebuilt.counts_sa, &data.counts_sa);
        prop_assert_eq!(&rebuilt.counts_sas, &data.counts_sas);
    }
}
