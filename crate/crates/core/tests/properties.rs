mod common;

use bnca_core::dataset::{self, flip_count, inject_label_noise};
use bnca_core::eigenbasis::EigenBasis;
use bnca_core::eval::{modified_map, paired_one_tail_test};
use bnca_core::linalg::min_eigenvalue;
use bnca_core::posterior::map_metric;
use bnca_core::variational::{bohning_h, bound_value, fit_bnca, lse, BncaConfig, GaussianBelief};
use bnca_core::{gamma_distance, Dataset, GammaVector, NeighborGraph, NoiseSpec, PairFeature, PredictiveDistribution};
use nalgebra::{DMatrix, DVector};
use proptest::collection::vec;
use proptest::prelude::*;

fn vector(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    vec(lo..hi, len)
}

fn bound_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=10).prop_flat_map(|k| (vector(k, -8.0, 8.0), vector(k, -8.0, 8.0)))
}

fn probability_rows(classes: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    vec(vector(classes, 0.001, 1.0), n).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let z: f64 = r.iter().sum();
                r.into_iter().map(|v| v / z).collect()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bound_lies_below_and_touches((eta, psi) in bound_case()) {
        let (eta, psi) = (DVector::from_vec(eta), DVector::from_vec(psi));
        let h = bohning_h(eta.len()).unwrap();
        prop_assert!(bound_value(&eta, &psi, &h).unwrap() <= -lse(&eta) + 1e-9);
        prop_assert!((bound_value(&psi, &psi, &h).unwrap() + lse(&psi)).abs() < 1e-9);
    }

    #[test]
    fn distance_is_linear_in_gamma(
        g1 in vector(4, 0.0, 5.0),
        g2 in vector(4, 0.0, 5.0),
        w in vector(4, 0.0, 3.0),
        a in 0.0f64..3.0,
        b in 0.0f64..3.0,
    ) {
        let (g1, g2) = (DVector::from_vec(g1), DVector::from_vec(g2));
        let w = PairFeature(DVector::from_vec(w));
        let combo = GammaVector::new(&g1 * a + &g2 * b).unwrap();
        let lhs = gamma_distance(&combo, &w).unwrap();
        let rhs = a * gamma_distance(&GammaVector::new(g1).unwrap(), &w).unwrap()
            + b * gamma_distance(&GammaVector::new(g2).unwrap(), &w).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn map_metric_is_psd(mean in vector(3, -1.0, 1.0), seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let x = common::uniform_matrix(&mut r, 8, 4);
        let basis = EigenBasis::top_eigenvectors(&x, 3).unwrap();
        let belief = GaussianBelief::new(DVector::from_vec(mean), DMatrix::identity(3, 3) * 0.01).unwrap();
        let map = map_metric(&belief, &basis).unwrap();
        prop_assert!(min_eigenvalue(map.metric.matrix()).unwrap() > -1e-10);
    }

    #[test]
    fn noise_flips_the_rounded_count(n in 2usize..60, level in 0.0f64..=1.0, seed in any::<u64>()) {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let ds = Dataset::from_rows(&rows, (0..n).map(|i| i % 2).collect(), 2).unwrap();
        let noisy = inject_label_noise(&ds, NoiseSpec { level, seed }).unwrap();
        let flipped = noisy.labels().iter().zip(ds.labels()).filter(|(a, b)| a != b).count();
        prop_assert_eq!(flipped, flip_count(level, n));
    }

    #[test]
    fn raising_tau_never_raises_map(
        rows in probability_rows(4, 12),
        truths in vec(0usize..4, 12),
        t1 in 0.0f64..0.5,
        t2 in 0.0f64..0.5,
    ) {
        let preds: Vec<PredictiveDistribution> =
            rows.into_iter().map(|r| PredictiveDistribution::new(r).unwrap()).collect();
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        prop_assert!(modified_map(&preds, &truths, hi).unwrap() <= modified_map(&preds, &truths, lo).unwrap() + 1e-15);
    }

    #[test]
    fn paired_test_is_antisymmetric(a in vector(8, 0.0, 1.0), b in vector(8, 0.0, 1.0)) {
        let ab = paired_one_tail_test(&a, &b).unwrap();
        let ba = paired_one_tail_test(&b, &a).unwrap();
        prop_assume!(!ab.degenerate);
        prop_assert!((ab.p_value + ba.p_value - 1.0).abs() < 1e-9);
        prop_assert!((ab.t_statistic + ba.t_statistic).abs() < 1e-9);
    }

    #[test]
    fn csv_round_trip(n in 2usize..20, dim in 1usize..5, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let ds = common::random_dataset(&mut r, n, dim, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        dataset::save_csv(&ds, &path).unwrap();
        prop_assert_eq!(dataset::load_csv(&path, false).unwrap(), ds);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn posterior_is_tighter_than_prior(seed in any::<u64>(), k in 2usize..6, sigma in 0.0005f64..0.5) {
        let ds = dataset::make_blobs(3, 8, 4, 1.0, seed).unwrap();
        let graph = NeighborGraph::build(&ds, k, None).unwrap();
        let basis = EigenBasis::top_eigenvectors(ds.points(), 3).unwrap();
        let prior = GaussianBelief::isotropic(3, 0.1, sigma).unwrap();
        let fit = fit_bnca(&ds, &graph, &basis, &prior, &BncaConfig::default()).unwrap();
        let v_t = fit.posterior.cov();
        prop_assert!((v_t - v_t.transpose()).amax() < 1e-12);
        prop_assert!(min_eigenvalue(v_t).unwrap() > 0.0);
        prop_assert!(min_eigenvalue(&(prior.cov() - v_t)).unwrap() > -1e-10);
    }
}
