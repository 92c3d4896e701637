//! Continuous density, CDF, quantiles and Value-at-Risk from a fitted model,
//! with delta-method credible intervals based on the observed-data
//! information matrix.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::basis::SplineBasis;
use crate::error::{validation, Error, Result};
use crate::fit::{FrozenScales, GroupedDataset};
use crate::grid::FineGrid;
use crate::model::{self, SplineCoefficients, MAX_MOMENT_ORDER};

/// Continuous fitted density `f(x | theta) = exp(eta(x)) / Z` on the grid
/// support, with its CDF accumulated on the fine grid (linear within bins).
#[derive(Debug, Clone)]
pub struct FittedDensity {
    theta: SplineCoefficients,
    pivot: usize,
    basis: SplineBasis,
    grid: FineGrid,
    log_norm: f64,
    pi: DVector<f64>,
    cdf_edges: Vec<f64>,
}

impl FittedDensity {
    pub fn new(
        theta: SplineCoefficients,
        pivot: usize,
        basis: SplineBasis,
        grid: FineGrid,
    ) -> Self {
        let eta = basis.matrix() * theta.as_vector();
        let max = eta.max();
        let total: f64 = eta.iter().map(|e| (e - max).exp()).sum();
        // Z = integral of exp(eta) by the midpoint rule.
        let log_norm = max + total.ln() + grid.delta().ln();
        let pi = eta.map(|e| (e - max).exp() / total);
        let mut cdf_edges = Vec::with_capacity(grid.bin_count() + 1);
        let mut acc = 0.0;
        cdf_edges.push(0.0);
        for i in 0..grid.bin_count() {
            acc += pi[i];
            cdf_edges.push(acc);
        }
        cdf_edges[grid.bin_count()] = 1.0;
        Self {
            theta,
            pivot,
            basis,
            grid,
            log_norm,
            pi,
            cdf_edges,
        }
    }

    pub fn theta(&self) -> &SplineCoefficients {
        &self.theta
    }

    pub fn pivot(&self) -> usize {
        self.pivot
    }

    pub fn grid(&self) -> &FineGrid {
        &self.grid
    }

    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    /// Fitted bin probabilities.
    pub fn bin_probabilities(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn support(&self) -> (f64, f64) {
        (self.grid.lower(), self.grid.upper())
    }

    pub fn in_support(&self, x: f64) -> bool {
        x >= self.grid.lower() && x <= self.grid.upper()
    }

    /// Density at `x`, clamped to the support boundary value outside it.
    pub fn density_at(&self, x: f64) -> f64 {
        let x = x.clamp(self.grid.lower(), self.grid.upper());
        let (first, values) = self.basis.eval_nonzero(x);
        let mut eta = 0.0;
        for (offset, v) in values.iter().enumerate() {
            eta += v * self.theta.as_vector()[first + offset];
        }
        (eta - self.log_norm).exp()
    }

    /// CDF at `x`: 0 below the support, 1 above it, linear within bins.
    pub fn cdf_at(&self, x: f64) -> f64 {
        if x <= self.grid.lower() {
            return 0.0;
        }
        if x >= self.grid.upper() {
            return 1.0;
        }
        let bin = self.bin_of(x);
        let frac = (x - self.grid.edges()[bin]) / self.grid.delta();
        self.cdf_edges[bin] + self.pi[bin] * frac
    }

    fn bin_of(&self, x: f64) -> usize {
        (((x - self.grid.lower()) / self.grid.delta()) as usize).min(self.grid.bin_count() - 1)
    }

    /// Quantile by Newton iteration from the largest bin edge whose CDF does
    /// not exceed `p`, with a bisection fallback when the density degenerates
    /// or an iterate leaves its bracket.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(validation(format!("quantile level must be in (0, 1), got {p}")));
        }
        // Largest edge with F(edge) <= p, giving the bracket [edge_i, edge_hi].
        let idx = match self
            .cdf_edges
            .binary_search_by(|f| f.partial_cmp(&p).unwrap())
        {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let mut lo = self.grid.edges()[idx];
        let mut hi = self.grid.upper();
        for e in idx + 1..self.cdf_edges.len() {
            if self.cdf_edges[e] >= p {
                hi = self.grid.edges()[e];
                break;
            }
        }
        let mut x = lo;
        for _ in 0..100 {
            let gap = p - self.cdf_at(x);
            if gap.abs() < 1e-10 {
                return Ok(x.clamp(self.grid.lower(), self.grid.upper()));
            }
            if gap > 0.0 {
                lo = lo.max(x);
            } else {
                hi = hi.min(x);
            }
            let f = self.density_at(x);
            let next = x + gap / f;
            x = if f < 1e-300 || next <= lo || next >= hi {
                0.5 * (lo + hi)
            } else {
                next
            };
        }
        Ok(x.clamp(self.grid.lower(), self.grid.upper()))
    }

    /// Gradient of the quantile with respect to theta:
    /// `dQ/dtheta_k = (p T_k - I_k(Q)) / f(Q)` by fine-grid quadrature, where
    /// `T_k` integrates `b_k f` over the support and `I_k` up to the
    /// quantile. This is the exact derivative of the implemented
    /// piecewise-linear CDF inverse, so it matches finite differences of
    /// `quantile`.
    pub fn quantile_gradient(&self, p: f64) -> Result<DVector<f64>> {
        let q = self.quantile(p)?;
        let k_dim = self.basis.size();
        let b = self.basis.matrix();
        let full = b.transpose() * &self.pi;
        let bin = self.bin_of(q);
        let mut partial = DVector::zeros(k_dim);
        for i in 0..bin {
            let row = b.row(i);
            for (col, v) in row.iter().enumerate() {
                if *v != 0.0 {
                    partial[col] += v * self.pi[i];
                }
            }
        }
        let mass = p - self.cdf_edges[bin];
        let (first, values) = self.basis.eval_nonzero(self.grid.midpoints()[bin]);
        for (offset, v) in values.iter().enumerate() {
            partial[first + offset] += v * mass;
        }
        // Slope of the piecewise-linear CDF inside the quantile's bin.
        let slope = self.pi[bin] / self.grid.delta();
        Ok((full * p - partial) / slope)
    }
}

/// Observed-data information matrix with the identification pivot removed.
#[derive(Debug, Clone)]
pub struct InformationMatrix {
    full: DMatrix<f64>,
    pivot: usize,
    reduced: DMatrix<f64>,
    reduced_inverse: DMatrix<f64>,
    ridged: bool,
}

impl InformationMatrix {
    pub fn full(&self) -> &DMatrix<f64> {
        &self.full
    }

    pub fn pivot(&self) -> usize {
        self.pivot
    }

    pub fn reduced(&self) -> &DMatrix<f64> {
        &self.reduced
    }

    /// Covariance of theta with the pivot component removed.
    pub fn reduced_inverse(&self) -> &DMatrix<f64> {
        &self.reduced_inverse
    }

    /// Whether a stabilising ridge had to be added before inversion.
    pub fn ridged(&self) -> bool {
        self.ridged
    }

    /// Delta-method variance of a scalar with full-length gradient `g`.
    pub fn delta_variance(&self, gradient: &DVector<f64>) -> f64 {
        let reduced = remove_index(gradient, self.pivot);
        (&self.reduced_inverse * &reduced).dot(&reduced)
    }
}

fn remove_index(v: &DVector<f64>, index: usize) -> DVector<f64> {
    DVector::from_fn(v.len() - 1, |i, _| if i < index { v[i] } else { v[i + 1] })
}

/// Negated Hessian of the observed penalized log-likelihood based on
/// frequencies alone: `B^T W B + lambda P` minus the tabulation-loss term.
pub fn frequency_information(
    theta: &DVector<f64>,
    dataset: &GroupedDataset,
    grid: &FineGrid,
    basis: &SplineBasis,
    penalty: &crate::penalty::PenaltyMatrix,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let coeffs = SplineCoefficients::new(theta.clone())?;
    let dist = model::softmax_probabilities(&coeffs, basis, grid);
    let n = dataset.total() as f64;
    let b = basis.matrix();
    let k_dim = basis.size();

    let mut info = penalty.penalty() * lambda;
    let mut weighted_mean = DVector::zeros(k_dim);
    for i in 0..grid.bin_count() {
        let w = dist.pi[i];
        let row = b.row(i);
        for (a_idx, a_val) in row.iter().enumerate() {
            if *a_val == 0.0 {
                continue;
            }
            weighted_mean[a_idx] += w * a_val;
            for (b_idx, b_val) in row.iter().enumerate() {
                if *b_val != 0.0 {
                    info[(a_idx, b_idx)] += n * w * a_val * b_val;
                }
            }
        }
    }
    info.ger(-n, &weighted_mean, &weighted_mean, 1.0);

    // Information lost to tabulation:
    // sum_j n_j [ S2_j / gamma_j - beta_j beta_j^T ].
    for j in 0..grid.class_count() {
        let freq = dataset.freqs()[j] as f64;
        if freq == 0.0 {
            continue;
        }
        let gamma = dist.gamma[j];
        let mut second = DMatrix::zeros(k_dim, k_dim);
        let mut beta = DVector::zeros(k_dim);
        for i in grid.bins_of_class(j) {
            let w = dist.pi[i];
            let row = b.row(i);
            for (a_idx, a_val) in row.iter().enumerate() {
                if *a_val == 0.0 {
                    continue;
                }
                beta[a_idx] += w * a_val;
                for (b_idx, b_val) in row.iter().enumerate() {
                    if *b_val != 0.0 {
                        second[(a_idx, b_idx)] += w * a_val * b_val;
                    }
                }
            }
        }
        beta /= gamma;
        info -= second * (freq / gamma);
        info.ger(freq, &beta, &beta, 1.0);
    }
    Ok((&info + info.transpose()) * 0.5)
}

/// Observed-data information matrix
/// `J = -grad^2 l_p(theta | D_0, lambda) + sum_j dmu_j^T Sigma_j^{-1} dmu_j`,
/// reduced by the pivot row/column and inverted.
#[allow(clippy::too_many_arguments)]
pub fn information_matrix(
    theta: &DVector<f64>,
    pivot: usize,
    dataset: &GroupedDataset,
    grid: &FineGrid,
    basis: &SplineBasis,
    penalty: &crate::penalty::PenaltyMatrix,
    lambda: f64,
    frozen: &FrozenScales,
) -> Result<InformationMatrix> {
    let mut full = frequency_information(theta, dataset, grid, basis, penalty, lambda)?;

    if frozen.order() > 0 {
        let coeffs = SplineCoefficients::new(theta.clone())?;
        let pi = model::bin_probabilities(&coeffs, basis);
        let moments = model::class_central_moments(&pi, grid, MAX_MOMENT_ORDER)?;
        let derivs = model::moment_derivatives(&pi, grid, basis, &moments, frozen.order());
        for j in 0..grid.class_count() {
            let Some(inv) = frozen.inverse(j) else {
                continue;
            };
            let d = &derivs[j];
            full += d.transpose() * inv * d;
        }
        full = (&full + full.transpose()) * 0.5;
    }

    let k_dim = full.nrows();
    let reduced = DMatrix::from_fn(k_dim - 1, k_dim - 1, |r, c| {
        let rr = if r < pivot { r } else { r + 1 };
        let cc = if c < pivot { c } else { c + 1 };
        full[(rr, cc)]
    });

    let mut ridged = false;
    let mut attempt = reduced.clone();
    let mean_diag = reduced.diagonal().mean();
    let mut bump = 1e-8 * mean_diag;
    let reduced_inverse = loop {
        if let Some(chol) = Cholesky::new(attempt.clone()) {
            break chol.inverse();
        }
        if bump > 1e4 * mean_diag.abs().max(1.0) {
            return Err(Error::OptimizerFailure {
                message: "information matrix is not positive definite".into(),
                trace: vec![],
            });
        }
        ridged = true;
        attempt = reduced.clone();
        for d in 0..attempt.nrows() {
            attempt[(d, d)] += bump;
        }
        bump *= 10.0;
    };

    Ok(InformationMatrix {
        full,
        pivot,
        reduced,
        reduced_inverse,
        ridged,
    })
}

/// Effective degrees of freedom measured on the observed-data information:
/// `Tr((J + eps I)^{-1} (J - lambda P))`. This is the model-complexity
/// figure reported alongside a fit; the penalty-update step inside the EM
/// uses its complete-data counterpart instead.
pub fn observed_edf(
    info: &InformationMatrix,
    penalty: &crate::penalty::PenaltyMatrix,
    lambda: f64,
    ridge: f64,
) -> f64 {
    let unpenalized = info.full() - penalty.penalty() * lambda;
    let mut a = info.full().clone();
    for d in 0..a.nrows() {
        a[(d, d)] += ridge;
    }
    match Cholesky::new(a.clone()) {
        Some(chol) => chol.solve(&unpenalized).trace(),
        None => a
            .lu()
            .solve(&unpenalized)
            .map(|x| x.trace())
            .unwrap_or(f64::NAN),
    }
}

/// Optional monotone rescaling applied to reported quantiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackTransform {
    None,
    /// `q -> 10^q`, for fits performed on a log10 scale.
    Exp10,
}

impl BackTransform {
    pub fn apply(self, value: f64) -> f64 {
        match self {
            BackTransform::None => value,
            BackTransform::Exp10 => 10f64.powf(value),
        }
    }
}

/// Quantile point estimate with delta-method uncertainty. When a back
/// transform was applied, `q_hat` and the interval are on the reporting
/// scale while `s_q` stays on the fitting scale.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuantileEstimate {
    pub p: f64,
    pub q_hat: f64,
    pub s_q: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub alpha: f64,
}

/// Standard normal quantile.
pub fn standard_normal_quantile(p: f64) -> f64 {
    let normal = statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal");
    normal.inverse_cdf(p)
}

/// Credible interval `Q(p) +/- z_{1 - alpha/2} s_Q(p)`.
pub fn quantile_credible_interval(
    p: f64,
    alpha: f64,
    fitted: &FittedDensity,
    info: &InformationMatrix,
) -> Result<QuantileEstimate> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(validation(format!("alpha must be in (0, 1], got {alpha}")));
    }
    let q_hat = fitted.quantile(p)?;
    let gradient = fitted.quantile_gradient(p)?;
    let variance = info.delta_variance(&gradient).max(0.0);
    let s_q = variance.sqrt();
    let z = if alpha >= 1.0 {
        0.0
    } else {
        standard_normal_quantile(1.0 - alpha / 2.0)
    };
    Ok(QuantileEstimate {
        p,
        q_hat,
        s_q,
        ci_lower: q_hat - z * s_q,
        ci_upper: q_hat + z * s_q,
        alpha,
    })
}

/// Value-at-Risk at level `epsilon`: the `(1 - epsilon)`-quantile, optionally
/// mapped through a back transform together with its interval.
pub fn value_at_risk(
    epsilon: f64,
    fitted: &FittedDensity,
    info: &InformationMatrix,
    alpha: f64,
    transform: BackTransform,
) -> Result<QuantileEstimate> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(validation(format!("epsilon must be in (0, 1), got {epsilon}")));
    }
    let mut estimate = quantile_credible_interval(1.0 - epsilon, alpha, fitted, info)?;
    estimate.q_hat = transform.apply(estimate.q_hat);
    estimate.ci_lower = transform.apply(estimate.ci_lower);
    estimate.ci_upper = transform.apply(estimate.ci_upper);
    Ok(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::build_basis;
    use crate::grid::build_fine_grid;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn uniform_density() -> FittedDensity {
        let grid = build_fine_grid(&[0.0, 1.0], 200).unwrap();
        let basis = build_basis(&grid, 10).unwrap();
        FittedDensity::new(SplineCoefficients::zeros(10), 0, basis, grid)
    }

    fn random_density(seed: u64, scale: f64) -> FittedDensity {
        let grid = build_fine_grid(&[-1.0, 1.0, 3.5, 6.0], 350).unwrap();
        let basis = build_basis(&grid, 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = SplineCoefficients::new(nalgebra::DVector::from_fn(14, |_, _| {
            scale * (rng.gen::<f64>() - 0.5)
        }))
        .unwrap();
        let (theta, pivot) = model::normalize_identification(&theta);
        FittedDensity::new(theta, pivot, basis, grid)
    }

    #[test]
    fn cdf_boundary_values() {
        let fitted = uniform_density();
        assert_eq!(fitted.cdf_at(0.0), 0.0);
        assert_eq!(fitted.cdf_at(1.0), 1.0);
        assert_eq!(fitted.cdf_at(-3.0), 0.0);
        assert_eq!(fitted.cdf_at(42.0), 1.0);
        assert_abs_diff_eq!(fitted.cdf_at(0.5), 0.5, epsilon = 1e-8);
    }

    #[test]
    fn density_integrates_to_one() {
        for seed in 0..50u64 {
            let fitted = random_density(seed, 2.0);
            let grid = fitted.grid();
            let integral: f64 = grid
                .midpoints()
                .iter()
                .map(|u| fitted.density_at(*u) * grid.delta())
                .sum();
            assert_abs_diff_eq!(integral, 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn uniform_quantiles_are_linear() {
        let fitted = uniform_density();
        assert_abs_diff_eq!(fitted.quantile(0.25).unwrap(), 0.25, epsilon = 1e-8);
        assert_abs_diff_eq!(fitted.quantile(0.9).unwrap(), 0.9, epsilon = 1e-8);
    }

    #[test]
    fn quantile_cdf_round_trip() {
        let fitted = random_density(3, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let x = -1.0 + 7.0 * rng.gen::<f64>();
            let p = fitted.cdf_at(x);
            if p <= 1e-12 || p >= 1.0 - 1e-12 {
                continue;
            }
            let back = fitted.quantile(p).unwrap();
            assert_abs_diff_eq!(back, x, epsilon = 1e-6);
        }
        for k in 1..100 {
            let p = k as f64 / 100.0;
            let q = fitted.quantile(p).unwrap();
            assert_abs_diff_eq!(fitted.cdf_at(q), p, epsilon = 1e-8);
        }
    }

    #[test]
    fn quantiles_strictly_increase() {
        let fitted = random_density(9, 3.0);
        let mut previous = f64::NEG_INFINITY;
        for k in 1..100 {
            let q = fitted.quantile(k as f64 / 100.0).unwrap();
            assert!(q > previous, "quantile not increasing at p = {}", k);
            previous = q;
        }
    }

    #[test]
    fn quantile_gradient_matches_finite_differences() {
        let fitted = random_density(21, 1.5);
        let k_dim = fitted.basis().size();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 20 {
            let p = 0.05 + 0.9 * rng.gen::<f64>();
            let col = rng.gen_range(0..k_dim);
            let analytic = fitted.quantile_gradient(p).unwrap()[col];
            let h = 1e-6;
            let perturbed = |sign: f64| {
                let mut v = fitted.theta().as_vector().clone();
                v[col] += sign * h;
                FittedDensity::new(
                    SplineCoefficients::new(v).unwrap(),
                    fitted.pivot(),
                    fitted.basis().clone(),
                    fitted.grid().clone(),
                )
                .quantile(p)
                .unwrap()
            };
            let fd = (perturbed(1.0) - perturbed(-1.0)) / (2.0 * h);
            let scale = fitted.quantile_gradient(p).unwrap().amax().max(1e-10);
            if analytic.abs() < 1e-3 * scale {
                continue;
            }
            let rel = (fd - analytic).abs() / analytic.abs();
            assert!(rel < 1e-4, "p = {p}, k = {col}: rel err {rel}");
            checked += 1;
        }
    }

    #[test]
    fn quantile_gradient_sums_to_zero() {
        // Shift invariance of the quantile in theta.
        let fitted = random_density(33, 2.0);
        for p in [1e-4, 0.25, 0.5, 0.9] {
            let g = fitted.quantile_gradient(p).unwrap();
            assert!(g.iter().sum::<f64>().abs() < 1e-8);
        }
        let small = fitted.quantile_gradient(1e-4).unwrap().norm();
        let mid = fitted.quantile_gradient(0.5).unwrap().norm();
        assert!(small < mid);
    }

    #[test]
    fn zero_alpha_width_and_ordering() {
        let fitted = random_density(2, 1.0);
        let k_dim = fitted.basis().size();
        let info = InformationMatrix {
            full: DMatrix::identity(k_dim, k_dim),
            pivot: fitted.pivot(),
            reduced: DMatrix::identity(k_dim - 1, k_dim - 1),
            reduced_inverse: DMatrix::identity(k_dim - 1, k_dim - 1),
            ridged: false,
        };
        let estimate = quantile_credible_interval(0.5, 1.0, &fitted, &info).unwrap();
        assert_eq!(estimate.ci_lower, estimate.q_hat);
        assert_eq!(estimate.ci_upper, estimate.q_hat);
        let wide = quantile_credible_interval(0.5, 0.05, &fitted, &info).unwrap();
        let narrow = quantile_credible_interval(0.5, 0.10, &fitted, &info).unwrap();
        assert!(wide.ci_lower <= narrow.ci_lower && wide.ci_upper >= narrow.ci_upper);
        assert!(wide.ci_lower <= wide.q_hat && wide.q_hat <= wide.ci_upper);
    }

    #[test]
    fn var_delegates_to_quantile() {
        let fitted = random_density(8, 1.0);
        let k_dim = fitted.basis().size();
        let info = InformationMatrix {
            full: DMatrix::identity(k_dim, k_dim),
            pivot: fitted.pivot(),
            reduced: DMatrix::identity(k_dim - 1, k_dim - 1),
            reduced_inverse: DMatrix::identity(k_dim - 1, k_dim - 1),
            ridged: false,
        };
        let median = value_at_risk(0.5, &fitted, &info, 0.05, BackTransform::None).unwrap();
        assert_abs_diff_eq!(median.q_hat, fitted.quantile(0.5).unwrap(), epsilon = 1e-12);
        let log_scale = value_at_risk(0.05, &fitted, &info, 0.05, BackTransform::Exp10).unwrap();
        let plain = value_at_risk(0.05, &fitted, &info, 0.05, BackTransform::None).unwrap();
        assert_abs_diff_eq!(log_scale.q_hat, 10f64.powf(plain.q_hat), epsilon = 1e-9);
        assert_abs_diff_eq!(log_scale.ci_lower, 10f64.powf(plain.ci_lower), epsilon = 1e-9);
    }
}
