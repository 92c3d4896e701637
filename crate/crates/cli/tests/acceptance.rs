//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line. Run with `cargo test -p grouped-density-cli --test
//! acceptance` (add `-- --nocapture` to see the lines on success).

use std::process::Command;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use grouped_density::diagnostics;
use grouped_density::fit::{fit, FitConfig, GroupedDataset};
use grouped_density::grid::build_fine_grid;
use grouped_density::model::{
    class_central_moments, moment_covariance, ClassSummary, MomentOrder, ObservedClassMoments,
};
use grouped_density::risk::{value_at_risk, BackTransform};
use grouped_density::sim::{run_study, study_class_cuts, true_quantile, StudyConfig};

fn car_insurance() -> GroupedDataset {
    let summaries = vec![
        Some(ClassSummary {
            mean: 2.462,
            sd: 0.580,
            skewness: -1.793,
            kurtosis_excess: 2.401,
        }),
        Some(ClassSummary {
            mean: 3.529,
            sd: 0.336,
            skewness: 0.375,
            kurtosis_excess: -0.836,
        }),
        Some(ClassSummary {
            mean: 4.556,
            sd: 0.275,
            skewness: 2.603,
            kurtosis_excess: 9.416,
        }),
    ];
    GroupedDataset::new(
        vec![0.0, 3.0, 4.3, 6.18],
        vec![1168, 2234, 116],
        ObservedClassMoments::new(MomentOrder::R4, summaries).unwrap(),
    )
    .unwrap()
}

fn verdict(name: &str, passed: bool, detail: &str) {
    println!(
        "{} criterion {name}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {name} failed: {detail}");
}

/// Criterion 1: reproduce the claim-size application with the default
/// configuration: Value-at-Risk levels, fitted class moments and model
/// complexity, in under five seconds.
#[test]
fn criterion_1_claim_size_reproduction() {
    let started = Instant::now();
    let result = fit(&car_insurance(), &FitConfig::default()).unwrap();
    let fitted = result.fitted_density();
    let var5 = value_at_risk(0.05, &fitted, &result.information, 0.05, BackTransform::Exp10)
        .unwrap()
        .q_hat;
    let var1 = value_at_risk(0.01, &fitted, &result.information, 0.05, BackTransform::Exp10)
        .unwrap()
        .q_hat;
    let elapsed = started.elapsed();

    let var5_ok = (var5 - 16_106.0).abs() <= 0.02 * 16_106.0;
    let var1_ok = (var1 - 38_988.0).abs() <= 0.05 * 38_988.0;
    verdict(
        "1a (Value-at-Risk)",
        var5_ok && var1_ok,
        &format!("VaR5% = {var5:.0} (16106 +/- 2%), VaR1% = {var1:.0} (38988 +/- 5%)"),
    );

    let reference = [
        [2.472, 0.336, -0.351, 0.619],
        [3.532, 0.111, 0.013, 0.026],
        [4.549, 0.073, 0.051, 0.064],
    ];
    let mut worst: f64 = 0.0;
    for (class, row) in reference.iter().enumerate() {
        for (order, target) in row.iter().enumerate() {
            let fitted_moment = result.fitted_moments.moment(class, order + 1);
            worst = worst.max((fitted_moment - target).abs());
        }
    }
    verdict(
        "1b (fitted moments)",
        worst <= 0.03,
        &format!("max |fitted - reference| = {worst:.4} (tol 0.03)"),
    );

    let edf_ok = (result.edf - 11.7).abs() <= 1.5;
    verdict(
        "1c (effective dof)",
        edf_ok,
        &format!("edf = {:.3} (11.7 +/- 1.5)", result.edf),
    );

    verdict(
        "1 (runtime)",
        elapsed.as_secs_f64() < 5.0,
        &format!("fit took {:.2} s (< 5 s)", elapsed.as_secs_f64()),
    );
}

/// Criterion 2: desk-scale replication, 100 replicates of n = 1000 in three
/// classes with four moments: small bias and nominal-ish coverage for the
/// central quantiles, in under ten minutes. The 20% quantile is exempt.
#[test]
fn criterion_2_simulation_bias_and_coverage() {
    let started = Instant::now();
    let config = StudyConfig::new(100, 1000, study_class_cuts(3).unwrap(), 4, 20260808);
    let report = run_study(&config).unwrap();
    let elapsed = started.elapsed();

    let mut detail = String::new();
    let mut ok = true;
    for q in &report.quantiles {
        let gated = (0.295..=0.905).contains(&q.p);
        if !gated {
            continue;
        }
        let bias_ok = q.bias.abs() <= 0.02;
        let coverage_ok = (0.88..=1.0).contains(&q.coverage_95);
        ok &= bias_ok && coverage_ok;
        detail.push_str(&format!(
            "p={:.1}: bias {:+.4}, cov95 {:.2}; ",
            q.p, q.bias, q.coverage_95
        ));
    }
    verdict("2 (bias and coverage)", ok, detail.trim_end());
    verdict(
        "2 (runtime)",
        elapsed.as_secs_f64() < 600.0,
        &format!(
            "study took {:.1} s (< 600 s), {} of {} replicates converged",
            elapsed.as_secs_f64(),
            report.converged_replicates,
            report.replicates
        ),
    );
}

/// Criterion 3: four reported moments halve the median divergence relative
/// to means alone, and the divergence decreases monotonically in the number
/// of reported moments (up to 20% Monte Carlo slack).
#[test]
fn criterion_3_moment_information_ordering() {
    let cuts = study_class_cuts(3).unwrap();
    let report4 = run_study(&StudyConfig::new(100, 1000, cuts.clone(), 4, 20260808)).unwrap();
    let kl4 = report4.median_kl;
    let kl2 = run_study(&StudyConfig::new(100, 1000, cuts.clone(), 2, 20260808))
        .unwrap()
        .median_kl;
    let kl1 = run_study(&StudyConfig::new(100, 1000, cuts, 1, 20260808))
        .unwrap()
        .median_kl;
    let ratio = kl4 / kl1;
    verdict(
        "3 (information ordering)",
        kl4 < kl1 && ratio < 0.5,
        &format!("median KL: four moments {kl4:.4}, means only {kl1:.4}, ratio {ratio:.3} (< 0.5)"),
    );
    verdict(
        "3 (monotone in moment order)",
        kl4 <= 1.2 * kl2 && kl2 <= 1.2 * kl1,
        &format!("median KL ordering {kl4:.4} <= {kl2:.4} <= {kl1:.4} within 20% slack"),
    );
    // The companion quantile-distance metric should sit near its reference
    // level for the four-moment fits.
    let l1 = report4.median_l1_quantile;
    verdict(
        "3 (quantile distance level)",
        (0.02..=0.05).contains(&l1),
        &format!("median quantile distance {l1:.4} (expected near 0.034)"),
    );
}

/// Criterion 4: the quadrature quantiles of the mixture truth match the
/// reference row to +/- 0.002.
#[test]
fn criterion_4_truth_quantiles() {
    let reference = [
        (0.1, 1.000),
        (0.2, 1.793),
        (0.3, 3.122),
        (0.4, 3.430),
        (0.5, 3.643),
        (0.6, 3.822),
        (0.7, 3.989),
        (0.8, 4.163),
        (0.9, 4.375),
        (0.95, 4.530),
        (0.99, 4.778),
    ];
    let mut worst: f64 = 0.0;
    for (p, expected) in reference {
        worst = worst.max((true_quantile(p) - expected).abs());
    }
    verdict(
        "4 (truth quantiles)",
        worst <= 0.002,
        &format!("max |Q(p) - reference| = {worst:.5} (tol 0.002)"),
    );
}

/// Criterion 5: every analytic gradient matches central finite differences,
/// in under thirty seconds.
#[test]
fn criterion_5_gradient_oracles() {
    let started = Instant::now();
    let outcomes = diagnostics::gradient_checks(7);
    let elapsed = started.elapsed();
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{}: {}", o.name, o.detail))
        .collect();
    verdict(
        "5 (gradient oracles)",
        failed.is_empty(),
        &if failed.is_empty() {
            format!("{} checks passed", outcomes.len())
        } else {
            failed.join("; ")
        },
    );
    verdict(
        "5 (runtime)",
        elapsed.as_secs_f64() < 30.0,
        &format!("suite took {:.1} s (< 30 s)", elapsed.as_secs_f64()),
    );
}

/// Criterion 6: the moment covariance matches the Monte Carlo covariance of
/// sample central moments of a standard Normal with n = 100, entrywise
/// within three Monte Carlo standard errors.
#[test]
fn criterion_6_covariance_monte_carlo_oracle() {
    // Implementation side: standard Normal discretised on a fine grid.
    let grid = build_fine_grid(&[-8.0, 8.0], 8000).unwrap();
    let weights: Vec<f64> = grid
        .midpoints()
        .iter()
        .map(|u| (-0.5 * u * u).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let pi =
        grouped_density::nalgebra::DVector::from_iterator(8000, weights.iter().map(|w| w / total));
    let moments = class_central_moments(&pi, &grid, 8).unwrap();
    let sigma = moment_covariance(&moments, &[100]).unwrap();
    let sigma = sigma.class(0);

    // Oracle side: 1e5 replicates of n = 100 draws.
    let replicates = 100_000usize;
    let n = 100usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0x51_6c_a0);
    let mut vectors: Vec<[f64; 4]> = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        let draws: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let mut m = [mean, 0.0, 0.0, 0.0];
        for &x in &draws {
            let d = x - mean;
            m[1] += d * d;
            m[2] += d * d * d;
            m[3] += d * d * d * d;
        }
        for entry in m.iter_mut().skip(1) {
            *entry /= n as f64;
        }
        vectors.push(m);
    }
    let mut means = [0.0f64; 4];
    for v in &vectors {
        for (target, value) in means.iter_mut().zip(v.iter()) {
            *target += value;
        }
    }
    for target in means.iter_mut() {
        *target /= replicates as f64;
    }

    let mut worst_ratio: f64 = 0.0;
    let mut detail = String::new();
    for r in 0..4 {
        for s in r..4 {
            // Empirical covariance and its Monte Carlo standard error from
            // the spread of the per-replicate products.
            let products: Vec<f64> = vectors
                .iter()
                .map(|v| (v[r] - means[r]) * (v[s] - means[s]))
                .collect();
            let cov = products.iter().sum::<f64>() / replicates as f64;
            let spread = products
                .iter()
                .map(|u| (u - cov) * (u - cov))
                .sum::<f64>()
                / (replicates - 1) as f64;
            let se = (spread / replicates as f64).sqrt();
            let gap = (sigma[(r, s)] - cov).abs();
            let ratio = gap / (3.0 * se);
            if ratio > worst_ratio {
                worst_ratio = ratio;
                detail = format!(
                    "worst entry ({},{}): asymptotic {:.5}, empirical {:.5}, gap {:.2} of 3 SE",
                    r + 1,
                    s + 1,
                    sigma[(r, s)],
                    cov,
                    ratio
                );
            }
        }
    }
    // Known deterministic shortfall: the covariance model is asymptotic in
    // n_j, while the oracle samples at n_j = 100. For the third central
    // moment of a Normal the exact sampling variance is
    // 6 (n-1)(n-2) / n^3 = 0.058212, 3.0% below the asymptotic 0.06000 —
    // roughly twice the 3-SE noise floor of 1e5 replicates, so this entry
    // cannot come within tolerance at any seed.
    if worst_ratio > 1.0 {
        detail.push_str(
            "; the asymptotic entry differs from the exact n = 100 sampling moment by more \
             than the Monte Carlo noise floor (e.g. exact Var(m3) = 6*99*98/100^3 = 0.058212 \
             vs asymptotic 0.06000)",
        );
    }
    verdict("6 (covariance oracle)", worst_ratio <= 1.0, &detail);
}

/// Criterion 7: the whole self-check suite is green through the CLI.
#[test]
fn criterion_7_check_command_green() {
    let output = Command::new(env!("CARGO_BIN_EXE_grouped-density"))
        .args(["check", "--seed", "7"])
        .output()
        .expect("run check");
    let stdout = String::from_utf8_lossy(&output.stdout);
    let all_pass = output.status.success() && !stdout.contains("FAIL");
    verdict(
        "7 (self-check suite)",
        all_pass,
        &format!(
            "exit {:?}; {}",
            output.status.code(),
            stdout.lines().last().unwrap_or("")
        ),
    );
}
