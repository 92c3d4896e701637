//! Density and quantile comparison metrics, the uniform-within-class
//! baseline estimator, and fitted-versus-observed moment diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fit::{FitResult, GroupedDataset};
use crate::model;

/// Number of probability points for the quantile distance.
pub const QUANTILE_GRID: usize = 999;
/// Number of abscissas for the density metrics.
pub const DENSITY_GRID: usize = 2000;

/// Bundle of global comparison metrics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DensityComparison {
    pub l1_quantile: f64,
    pub rimse: f64,
    pub kl: f64,
    pub p_points: usize,
    pub x_points: usize,
}

/// `l1(Q, Qhat) = integral over (0,1) of |Qhat(p) - Q(p)| dp` by the midpoint
/// rule on `points` equispaced levels.
pub fn l1_quantile_distance_on(
    q_true: impl Fn(f64) -> f64,
    q_fit: impl Fn(f64) -> f64,
    points: usize,
) -> f64 {
    let mut total = 0.0;
    for k in 0..points {
        let p = (k as f64 + 0.5) / points as f64;
        total += (q_fit(p) - q_true(p)).abs();
    }
    total / points as f64
}

pub fn l1_quantile_distance(q_true: impl Fn(f64) -> f64, q_fit: impl Fn(f64) -> f64) -> f64 {
    l1_quantile_distance_on(q_true, q_fit, QUANTILE_GRID)
}

/// `RIMSE(f, fhat) = integral of (fhat - f)^2 f dx` on a midpoint grid over
/// the common support. The display it implements carries no square root.
pub fn rimse_on(
    f_true: impl Fn(f64) -> f64,
    f_fit: impl Fn(f64) -> f64,
    support: (f64, f64),
    points: usize,
) -> f64 {
    let step = (support.1 - support.0) / points as f64;
    let mut total = 0.0;
    for i in 0..points {
        let x = support.0 + (i as f64 + 0.5) * step;
        let diff = f_fit(x) - f_true(x);
        total += diff * diff * f_true(x) * step;
    }
    total
}

pub fn rimse(f_true: impl Fn(f64) -> f64, f_fit: impl Fn(f64) -> f64, support: (f64, f64)) -> f64 {
    rimse_on(f_true, f_fit, support, DENSITY_GRID)
}

/// `KL(f, fhat) = integral of f log(f / fhat) dx`, integrating where
/// `f > 1e-12`; infinite when the fitted density vanishes on that region.
pub fn kl_divergence_on(
    f_true: impl Fn(f64) -> f64,
    f_fit: impl Fn(f64) -> f64,
    support: (f64, f64),
    points: usize,
) -> f64 {
    let step = (support.1 - support.0) / points as f64;
    let mut total = 0.0;
    for i in 0..points {
        let x = support.0 + (i as f64 + 0.5) * step;
        let f = f_true(x);
        if f <= 1e-12 {
            continue;
        }
        let g = f_fit(x);
        if g <= 0.0 {
            return f64::INFINITY;
        }
        total += f * (f / g).ln() * step;
    }
    total
}

pub fn kl_divergence(
    f_true: impl Fn(f64) -> f64,
    f_fit: impl Fn(f64) -> f64,
    support: (f64, f64),
) -> f64 {
    kl_divergence_on(f_true, f_fit, support, DENSITY_GRID)
}

/// All three metrics at the standard grids.
pub fn compare_densities(
    f_true: impl Fn(f64) -> f64,
    f_fit: impl Fn(f64) -> f64,
    q_true: impl Fn(f64) -> f64,
    q_fit: impl Fn(f64) -> f64,
    support: (f64, f64),
) -> DensityComparison {
    DensityComparison {
        l1_quantile: l1_quantile_distance(&q_true, &q_fit),
        rimse: rimse(&f_true, &f_fit, support),
        kl: kl_divergence(&f_true, &f_fit, support),
        p_points: QUANTILE_GRID,
        x_points: DENSITY_GRID,
    }
}

/// `E[g(X)]` under the uniform-within-class reading of the histogram:
/// `sum_j n_j / (n (a_j - a_{j-1})) integral of g over the class`.
pub fn uniform_baseline_expectation(g: impl Fn(f64) -> f64, dataset: &GroupedDataset) -> f64 {
    let n = dataset.total() as f64;
    let cuts = dataset.class_cuts();
    let mut total = 0.0;
    for j in 0..dataset.class_count() {
        let freq = dataset.freqs()[j] as f64;
        if freq == 0.0 {
            continue;
        }
        let (lo, hi) = (cuts[j], cuts[j + 1]);
        let points = 512;
        let step = (hi - lo) / points as f64;
        let integral: f64 = (0..points)
            .map(|i| g(lo + (i as f64 + 0.5) * step) * step)
            .sum();
        total += freq / (n * (hi - lo)) * integral;
    }
    total
}

/// One row of the fitted-versus-observed moment table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MomentDiagnostic {
    pub class: usize,
    pub order: usize,
    pub observed: f64,
    pub fitted: f64,
    /// `(observed - fitted) / sqrt(Sigma_j[r][r])`.
    pub z_score: f64,
}

/// Compare observed class moments with their fitted counterparts, scaled by
/// the sampling standard deviation from the moment covariance.
pub fn moment_diagnostics(
    fit: &FitResult,
    dataset: &GroupedDataset,
) -> Result<Vec<MomentDiagnostic>> {
    let order = dataset.order().count();
    let covariance = model::moment_covariance(&fit.fitted_moments, dataset.freqs())?;
    let mut out = Vec::new();
    for class in 0..dataset.class_count() {
        let Some(observed) = dataset.observed().moment_vector(class)? else {
            continue;
        };
        for r in 1..=order {
            let fitted = fit.fitted_moments.moment(class, r);
            let variance = covariance.class(class)[(r - 1, r - 1)];
            let z_score = if variance > 0.0 {
                (observed[r - 1] - fitted) / variance.sqrt()
            } else {
                0.0
            };
            out.push(MomentDiagnostic {
                class,
                order: r,
                observed: observed[r - 1],
                fitted,
                z_score,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use statrs::distribution::{Continuous, Normal};

    #[test]
    fn identical_inputs_give_zero_metrics() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let f = |x: f64| normal.pdf(x);
        let q = |p: f64| {
            statrs::distribution::ContinuousCDF::inverse_cdf(&normal, p)
        };
        assert_eq!(l1_quantile_distance(q, q), 0.0);
        assert_eq!(rimse(f, f, (-5.0, 5.0)), 0.0);
        assert_abs_diff_eq!(kl_divergence(f, f, (-5.0, 5.0)), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn constant_quantile_shift() {
        let q = |p: f64| p;
        let shifted = |p: f64| p + 0.1;
        assert_abs_diff_eq!(l1_quantile_distance(q, shifted), 0.1, epsilon = 1e-6);
    }

    #[test]
    fn kl_is_nonnegative_and_infinite_off_support() {
        let a = Normal::new(0.0, 1.0).unwrap();
        for k in 0..50 {
            let shift = -1.0 + 0.04 * k as f64;
            let scale = 0.6 + 0.02 * k as f64;
            let b = Normal::new(shift, scale).unwrap();
            let kl = kl_divergence(|x| a.pdf(x), |x| b.pdf(x), (-8.0, 8.0));
            assert!(kl >= -1e-10, "KL negative: {kl}");
        }
        let kl = kl_divergence(
            |x| a.pdf(x),
            |x| if x > 0.0 { a.pdf(x) } else { 0.0 },
            (-8.0, 8.0),
        );
        assert!(kl.is_infinite());
    }

    #[test]
    fn quadrature_refinement_is_stable() {
        let a = Normal::new(0.0, 1.0).unwrap();
        let b = Normal::new(0.3, 1.2).unwrap();
        let coarse = kl_divergence_on(|x| a.pdf(x), |x| b.pdf(x), (-8.0, 8.0), DENSITY_GRID);
        let fine = kl_divergence_on(|x| a.pdf(x), |x| b.pdf(x), (-8.0, 8.0), 2 * DENSITY_GRID);
        assert!((coarse - fine).abs() / fine.abs() < 1e-4);
        let coarse = rimse_on(|x| a.pdf(x), |x| b.pdf(x), (-8.0, 8.0), DENSITY_GRID);
        let fine = rimse_on(|x| a.pdf(x), |x| b.pdf(x), (-8.0, 8.0), 2 * DENSITY_GRID);
        assert!((coarse - fine).abs() / fine.abs() < 1e-4);
    }

    #[test]
    fn baseline_expectation_examples() {
        let dataset =
            crate::fit::GroupedDataset::from_frequencies(vec![0.0, 1.0], vec![10]).unwrap();
        assert_abs_diff_eq!(uniform_baseline_expectation(|_| 1.0, &dataset), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(uniform_baseline_expectation(|t| t, &dataset), 0.5, epsilon = 1e-12);

        let dataset =
            crate::fit::GroupedDataset::from_frequencies(vec![0.0, 1.0, 3.0], vec![10, 10])
                .unwrap();
        assert_abs_diff_eq!(uniform_baseline_expectation(|t| t, &dataset), 1.25, epsilon = 1e-10);
        // Linearity in g.
        let a = uniform_baseline_expectation(|t| t, &dataset);
        let b = uniform_baseline_expectation(|t| t * t, &dataset);
        let combined = uniform_baseline_expectation(|t| 2.0 * t + 3.0 * t * t, &dataset);
        assert_abs_diff_eq!(combined, 2.0 * a + 3.0 * b, epsilon = 1e-10);
    }
}
