//! Simulation harness: sample the mixture truth, tabulate into classes with
//! sample moments, fit, and aggregate bias / SD / RMSE / coverage together
//! with global density metrics over replicates.

use rand::distributions::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, Gamma, Normal};

use crate::error::{validation, Error, Result};
use crate::eval;
use crate::fit::{fit, FitConfig, GroupedDataset};
use crate::model::{ClassSummary, MomentOrder, ObservedClassMoments};
use crate::risk::quantile_credible_interval;

/// Two-component mixture used as ground truth: a Normal bump and a reflected
/// Gamma body, truncated to `(-1, 6)` for tabulation.
#[derive(Debug, Clone)]
pub struct MixtureTruth {
    normal_weight: f64,
    normal: Normal,
    gamma: Gamma,
    reflection: f64,
    support: (f64, f64),
}

impl Default for MixtureTruth {
    fn default() -> Self {
        Self {
            normal_weight: 0.20,
            normal: Normal::new(1.0, 1.0 / 3.0).expect("normal component"),
            gamma: Gamma::new(11.0, 6.0).expect("gamma component"),
            reflection: 5.6,
            support: (-1.0, 6.0),
        }
    }
}

impl MixtureTruth {
    /// Mixture density `w1 f1(x) + w2 f2(reflection - x)`.
    pub fn pdf(&self, x: f64) -> f64 {
        let reflected = self.reflection - x;
        let gamma_part = if reflected > 0.0 {
            self.gamma.pdf(reflected)
        } else {
            0.0
        };
        self.normal_weight * self.normal.pdf(x) + (1.0 - self.normal_weight) * gamma_part
    }

    /// Sampling support after the rejection step.
    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    /// Draw `n` values, redrawing anything outside the open support interval.
    /// Deterministic for a given seed.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(&mut rng, n)
    }

    /// Same but with caller-provided generator state (used for replicate
    /// streams).
    pub fn sample_with(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let (lo, hi) = self.support;
        (0..n)
            .map(|_| loop {
                let value = if rng.gen::<f64>() < self.normal_weight {
                    self.normal.sample(rng)
                } else {
                    self.reflection - self.gamma.sample(rng)
                };
                if value > lo && value < hi {
                    break value;
                }
            })
            .collect()
    }
}

/// CDF table for the untruncated mixture, used to invert quantiles.
struct TruthCdf {
    lower: f64,
    step: f64,
    values: Vec<f64>,
}

impl TruthCdf {
    fn build(truth: &MixtureTruth) -> Self {
        // Quadrature window comfortably containing all but ~1e-12 of mass.
        let lower = -4.0;
        let upper = 6.5;
        let cells = 1 << 17;
        let step = (upper - lower) / cells as f64;
        let mut values = Vec::with_capacity(cells + 1);
        values.push(0.0);
        let mut acc = 0.0;
        for i in 0..cells {
            let mid = lower + (i as f64 + 0.5) * step;
            acc += truth.pdf(mid) * step;
            values.push(acc);
        }
        TruthCdf {
            lower,
            step,
            values,
        }
    }

    fn quantile(&self, p: f64) -> f64 {
        let target = p * self.values.last().unwrap();
        let idx = match self
            .values
            .binary_search_by(|v| v.partial_cmp(&target).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.max(1) - 1,
        };
        let idx = idx.min(self.values.len() - 2);
        let run = self.values[idx + 1] - self.values[idx];
        let frac = if run > 0.0 {
            (target - self.values[idx]) / run
        } else {
            0.5
        };
        self.lower + (idx as f64 + frac) * self.step
    }
}

/// Quantile of the mixture truth by quadrature CDF inversion.
pub fn true_quantile(p: f64) -> f64 {
    use std::sync::OnceLock;
    static TABLE: OnceLock<TruthCdf> = OnceLock::new();
    assert!(p > 0.0 && p < 1.0, "quantile level must be in (0, 1)");
    TABLE
        .get_or_init(|| TruthCdf::build(&MixtureTruth::default()))
        .quantile(p)
}

/// Group raw samples into classes `(a_{j-1}, a_j]` with per-class central
/// moments up to `max_order`. Empty classes keep their zero frequency and
/// carry no moments.
pub fn tabulate(samples: &[f64], class_cuts: &[f64], max_order: usize) -> Result<GroupedDataset> {
    let order = MomentOrder::from_count(max_order)?;
    let class_count = class_cuts.len().saturating_sub(1);
    if class_count == 0 {
        return Err(validation("need at least two class cut points"));
    }
    let lower = class_cuts[0];
    let upper = class_cuts[class_count];
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); class_count];
    for &x in samples {
        if x <= lower || x > upper {
            return Err(Error::SampleOutsideSupport {
                value: x,
                lower,
                upper,
            });
        }
        // Class with a_{j-1} < x <= a_j.
        let j = class_cuts[1..class_count].partition_point(|cut| *cut < x);
        members[j].push(x);
    }

    let freqs: Vec<u64> = members.iter().map(|m| m.len() as u64).collect();
    let mut summaries: Vec<Option<ClassSummary>> = Vec::with_capacity(class_count);
    for class in &members {
        if class.is_empty() || order == MomentOrder::R0 {
            summaries.push(None);
            continue;
        }
        let n = class.len() as f64;
        let mean = class.iter().sum::<f64>() / n;
        let mut central = [mean, 0.0, 0.0, 0.0];
        for &x in class {
            let d = x - mean;
            central[1] += d * d;
            central[2] += d * d * d;
            central[3] += d * d * d * d;
        }
        for c in central.iter_mut().skip(1) {
            *c /= n;
        }
        // Canonicalise through the summary form so that emitted files parse
        // back to bit-identical datasets.
        summaries.push(Some(ClassSummary::from_central_moments(central)?));
    }
    GroupedDataset::new(
        class_cuts.to_vec(),
        freqs,
        ObservedClassMoments::new(order, summaries)?,
    )
}

/// Cut points used in the replication study.
pub fn study_class_cuts(classes: usize) -> Result<Vec<f64>> {
    match classes {
        3 => Ok(vec![-1.0, 1.0, 3.5, 6.0]),
        5 => Ok(vec![-1.0, 1.0, 2.2, 3.5, 4.8, 6.0]),
        other => Err(validation(format!(
            "study supports 3 or 5 classes, got {other}"
        ))),
    }
}

/// Configuration of one replication study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub replicates: usize,
    pub sample_size: usize,
    pub class_cuts: Vec<f64>,
    pub moment_order: usize,
    pub seed: u64,
    pub fit: FitConfig,
    pub quantile_levels: Vec<f64>,
}

impl StudyConfig {
    pub fn new(
        replicates: usize,
        sample_size: usize,
        class_cuts: Vec<f64>,
        moment_order: usize,
        seed: u64,
    ) -> Self {
        // Mean-only fits are exact EM and converge slowly; give study fits
        // enough sweeps that the strict stopping rule can fire.
        let fit = FitConfig {
            em_max_iters: 3000,
            ..FitConfig::default()
        };
        Self {
            replicates,
            sample_size,
            class_cuts,
            moment_order,
            seed,
            fit,
            quantile_levels: default_quantile_levels(),
        }
    }
}

/// The levels reported in the study tables.
pub fn default_quantile_levels() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99]
}

/// Per-quantile aggregate over replicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub p: f64,
    pub q_true: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub coverage_95: f64,
    pub coverage_90: f64,
}

/// Aggregated study output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub replicates: usize,
    pub sample_size: usize,
    pub class_cuts: Vec<f64>,
    pub moment_order: usize,
    pub seed: u64,
    pub quantiles: Vec<QuantileSummary>,
    pub median_l1_quantile: f64,
    pub median_rimse: f64,
    pub median_kl: f64,
    pub converged_replicates: usize,
    pub excluded_replicates: usize,
}

struct ReplicateOutcome {
    converged: bool,
    estimates: Vec<f64>,
    covered_95: Vec<bool>,
    covered_90: Vec<bool>,
    l1: f64,
    rimse: f64,
    kl: f64,
}

/// Run the replication study. Replicates draw from per-replicate generator
/// streams (same seed, stream = replicate index), so runs are reproducible
/// and parallelisable; set `RAYON_NUM_THREADS` to bound the worker count.
/// Replicates whose fit fails or is flagged non-converged are counted and
/// excluded from the aggregates.
pub fn run_study(config: &StudyConfig) -> Result<SimulationReport> {
    if config.replicates == 0 {
        return Err(validation("need at least one replicate"));
    }
    let truth = MixtureTruth::default();
    // Tabulate against the snapped cuts so observed moments refer to the
    // same intervals the fitted model uses.
    let snapped = crate::grid::build_fine_grid(&config.class_cuts, config.fit.target_bins)?
        .class_cuts()
        .to_vec();

    let outcomes: Vec<Result<ReplicateOutcome>> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|replicate| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(replicate);
            let samples = truth.sample_with(&mut rng, config.sample_size);
            let dataset = tabulate(&samples, &snapped, config.moment_order)?;
            let result = fit(&dataset, &config.fit)?;
            let fitted = result.fitted_density();

            let mut estimates = Vec::with_capacity(config.quantile_levels.len());
            let mut covered_95 = Vec::with_capacity(config.quantile_levels.len());
            let mut covered_90 = Vec::with_capacity(config.quantile_levels.len());
            for &p in &config.quantile_levels {
                let wide = quantile_credible_interval(p, 0.05, &fitted, &result.information)?;
                let narrow = quantile_credible_interval(p, 0.10, &fitted, &result.information)?;
                let target = true_quantile(p);
                estimates.push(wide.q_hat);
                covered_95.push(wide.ci_lower <= target && target <= wide.ci_upper);
                covered_90.push(narrow.ci_lower <= target && target <= narrow.ci_upper);
            }

            let (lo, hi) = truth.support();
            let metrics = eval::compare_densities(
                |x| truth.pdf(x),
                |x| fitted.density_at(x),
                true_quantile,
                |p| fitted.quantile(p).unwrap_or(f64::NAN),
                (lo, hi),
            );

            Ok(ReplicateOutcome {
                converged: result.converged,
                estimates,
                covered_95,
                covered_90,
                l1: metrics.l1_quantile,
                rimse: metrics.rimse,
                kl: metrics.kl,
            })
        })
        .collect();

    let mut usable: Vec<ReplicateOutcome> = Vec::new();
    let mut excluded = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok(o) if o.converged => usable.push(o),
            Ok(_) => excluded += 1,
            Err(_) => excluded += 1,
        }
    }
    if usable.is_empty() {
        return Err(Error::OptimizerFailure {
            message: "no replicate produced a converged fit".into(),
            trace: vec![],
        });
    }

    let converged_replicates = usable.len();
    let mut quantiles = Vec::with_capacity(config.quantile_levels.len());
    for (idx, &p) in config.quantile_levels.iter().enumerate() {
        let q_true = true_quantile(p);
        let values: Vec<f64> = usable.iter().map(|o| o.estimates[idx]).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let bias = mean - q_true;
        let variance =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        let sd = variance.sqrt();
        let rmse = (bias * bias + variance).sqrt();
        let coverage_95 = usable.iter().filter(|o| o.covered_95[idx]).count() as f64
            / converged_replicates as f64;
        let coverage_90 = usable.iter().filter(|o| o.covered_90[idx]).count() as f64
            / converged_replicates as f64;
        quantiles.push(QuantileSummary {
            p,
            q_true,
            mean_estimate: mean,
            bias,
            sd,
            rmse,
            coverage_95,
            coverage_90,
        });
    }

    Ok(SimulationReport {
        replicates: config.replicates,
        sample_size: config.sample_size,
        class_cuts: config.class_cuts.clone(),
        moment_order: config.moment_order,
        seed: config.seed,
        quantiles,
        median_l1_quantile: median(usable.iter().map(|o| o.l1)),
        median_rimse: median(usable.iter().map(|o| o.rimse)),
        median_kl: median(usable.iter().map(|o| o.kl)),
        converged_replicates,
        excluded_replicates: excluded,
    })
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.is_empty() {
        return f64::NAN;
    }
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}
