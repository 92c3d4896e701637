//! Property tests for the structural invariants of the grid, basis and
//! probability model.

use grouped_density::basis::build_basis;
use grouped_density::grid::build_fine_grid;
use grouped_density::model::{
    bin_probabilities, class_probabilities, normalize_identification, SplineCoefficients,
};
use grouped_density::penalty::build_penalty;
use nalgebra::DVector;
use proptest::prelude::*;

fn theta_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-4.0f64..4.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_is_normalised_and_shift_invariant(
        raw in theta_strategy(12),
        shift in -10.0f64..10.0,
    ) {
        let grid = build_fine_grid(&[-1.0, 1.0, 3.5, 6.0], 140).unwrap();
        let basis = build_basis(&grid, 12).unwrap();
        let theta = SplineCoefficients::new(DVector::from_vec(raw.clone())).unwrap();
        let pi = bin_probabilities(&theta, &basis);
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(pi.iter().all(|p| *p > 0.0));
        let gamma = class_probabilities(&pi, &grid);
        prop_assert!((gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let shifted = SplineCoefficients::new(DVector::from_vec(
            raw.iter().map(|t| t + shift).collect(),
        ))
        .unwrap();
        let pi_shifted = bin_probabilities(&shifted, &basis);
        for (a, b) in pi.iter().zip(pi_shifted.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }

        let (normalized, pivot) = normalize_identification(&theta);
        prop_assert_eq!(normalized.as_vector()[pivot], 0.0);
        prop_assert!(normalized.as_vector().iter().all(|t| *t <= 0.0));
    }

    #[test]
    fn partition_of_unity_at_random_points(
        x in -1.0f64..6.0,
        size in 6usize..20,
    ) {
        let grid = build_fine_grid(&[-1.0, 1.0, 3.5, 6.0], 140).unwrap();
        let basis = build_basis(&grid, size).unwrap();
        let sum: f64 = basis.eval_all(x).iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-10, "sum {} at x {}", sum, x);
    }

    #[test]
    fn grid_classes_partition_the_bins(
        start in -50.0f64..50.0,
        gaps in proptest::collection::vec(0.05f64..30.0, 1..6),
        bins_per_class in 10usize..40,
    ) {
        let mut cuts = vec![start];
        for gap in &gaps {
            cuts.push(cuts.last().unwrap() + gap);
        }
        let target = bins_per_class * (cuts.len() - 1);
        let grid = match build_fine_grid(&cuts, target) {
            Ok(g) => g,
            Err(_) => return Ok(()), // cuts too close for this resolution
        };
        let total: usize = (0..grid.class_count())
            .map(|j| grid.class_width_in_bins(j))
            .sum();
        prop_assert_eq!(total, grid.bin_count());
        // every snapped interior cut coincides with a bin edge
        for j in 1..grid.class_count() {
            let cut = grid.class_cuts()[j];
            let edge = grid.edges()[grid.bins_of_class(j).start];
            prop_assert_eq!(cut, edge);
        }
    }

    #[test]
    fn difference_operator_annihilates_low_polynomials(
        size in 5usize..20,
        order in 1usize..4,
        scale in -3.0f64..3.0,
    ) {
        let penalty = build_penalty(size, order).unwrap();
        for power in 0..order {
            let poly = DVector::from_fn(size, |k, _| scale * ((k + 1) as f64).powi(power as i32));
            prop_assert!((penalty.difference() * &poly).amax() < 1e-9);
        }
    }
}
