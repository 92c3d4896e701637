//! Fit-level behaviour on reference problems: recovering a known density
//! from its own tabulation, and the sample-size scaling of the delta-method
//! uncertainty.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, Continuous};

use grouped_density::eval::kl_divergence;
use grouped_density::fit::{fit, FitConfig, GroupedDataset};
use grouped_density::model::{ClassSummary, MomentOrder, ObservedClassMoments};
use grouped_density::risk::quantile_credible_interval;
use grouped_density::sim::tabulate;

#[test]
fn beta_shaped_truth_is_recovered_from_eight_classes() {
    let beta = Beta::new(2.0, 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let samples: Vec<f64> = (0..100_000)
        .map(|_| {
            // Rejection-free: Beta(2,2) support is already (0, 1).
            beta.sample(&mut rng)
        })
        .collect();
    let cuts: Vec<f64> = (0..=8).map(|k| k as f64 / 8.0).collect();
    let dataset = tabulate(&samples, &cuts, 4).unwrap();
    let result = fit(&dataset, &FitConfig::default()).unwrap();
    assert!(result.converged);
    let fitted = result.fitted_density();
    let kl = kl_divergence(|x| beta.pdf(x), |x| fitted.density_at(x), (0.0, 1.0));
    assert!(kl < 0.005, "KL divergence {kl} too large");
}

fn claim_dataset(scale: u64) -> GroupedDataset {
    let summaries = vec![
        Some(ClassSummary { mean: 2.462, sd: 0.580, skewness: -1.793, kurtosis_excess: 2.401 }),
        Some(ClassSummary { mean: 3.529, sd: 0.336, skewness: 0.375, kurtosis_excess: -0.836 }),
        Some(ClassSummary { mean: 4.556, sd: 0.275, skewness: 2.603, kurtosis_excess: 9.416 }),
    ];
    GroupedDataset::new(
        vec![0.0, 3.0, 4.3, 6.18],
        vec![1168 / scale, 2234 / scale, 116 / scale],
        ObservedClassMoments::new(MomentOrder::R4, summaries).unwrap(),
    )
    .unwrap()
}

#[test]
fn halving_frequencies_scales_uncertainty_by_sqrt_two() {
    let config = FitConfig::default();
    let full = fit(&claim_dataset(1), &config).unwrap();
    let half = fit(&claim_dataset(2), &config).unwrap();
    let s_full = quantile_credible_interval(
        0.95,
        0.05,
        &full.fitted_density(),
        &full.information,
    )
    .unwrap()
    .s_q;
    let s_half = quantile_credible_interval(
        0.95,
        0.05,
        &half.fitted_density(),
        &half.information,
    )
    .unwrap()
    .s_q;
    let ratio = s_half / s_full;
    assert!(
        (ratio - std::f64::consts::SQRT_2).abs() / std::f64::consts::SQRT_2 < 0.10,
        "s_Q ratio {ratio} not close to sqrt(2)"
    );
}

#[test]
fn quantile_uncertainty_is_continuous_in_p() {
    let result = fit(&claim_dataset(1), &FitConfig::default()).unwrap();
    let fitted = result.fitted_density();
    let mut previous: Option<f64> = None;
    for k in 1..100 {
        let p = k as f64 / 100.0;
        let s_q = quantile_credible_interval(p, 0.05, &fitted, &result.information)
            .unwrap()
            .s_q;
        assert!(s_q >= 0.0);
        if let Some(last) = previous {
            let ratio = (s_q / last).max(last / s_q);
            assert!(ratio < 10.0, "s_Q jump at p = {p}: {last} -> {s_q}");
        }
        previous = Some(s_q);
    }
}

#[test]
fn empty_class_dataset_fits_cleanly() {
    // A class with zero observations carries no moments; the fit must push
    // density away from it without tripping any moment machinery.
    let samples: Vec<f64> = (0..400)
        .map(|k| 0.002 + 0.996 * (k as f64 / 399.0))
        .map(|u| if u < 0.5 { u } else { u + 2.0 }) // hole in (0.5, 2.5)
        .collect();
    let cuts = vec![0.0, 0.5, 2.5, 3.0];
    let dataset = tabulate(&samples, &cuts, 4).unwrap();
    assert_eq!(dataset.freqs()[1], 0);
    let config = FitConfig {
        spline_count: 12,
        target_bins: 150,
        ..FitConfig::default()
    };
    let result = fit(&dataset, &config).unwrap();
    // Mass in the empty class should be far below its uniform share.
    assert!(result.fitted_gamma[1] < 0.05, "gamma {}", result.fitted_gamma[1]);
}
