//! Penalized maximum likelihood from grouped summaries: EM with
//! Newton-Raphson M-steps, ridge-stabilised Hessians and optional automatic
//! penalty selection through the effective degrees of freedom.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{build_basis, SplineBasis};
use crate::error::{validation, Error, Result};
use crate::grid::{build_fine_grid, FineGrid};
use crate::model::{
    self, ClassMoments, LatentDistribution, MomentOrder, ObservedClassMoments,
    SplineCoefficients, MAX_MOMENT_ORDER,
};
use crate::penalty::{build_penalty, PenaltyMatrix};
use crate::risk::{self, InformationMatrix};

/// Grouped observations: class cut points, frequencies and observed central
/// moments up to the dataset's order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedDataset {
    class_cuts: Vec<f64>,
    freqs: Vec<u64>,
    observed: ObservedClassMoments,
    total: u64,
}

impl GroupedDataset {
    pub fn new(
        class_cuts: Vec<f64>,
        freqs: Vec<u64>,
        observed: ObservedClassMoments,
    ) -> Result<Self> {
        if class_cuts.len() < 2 {
            return Err(validation("need at least two class cut points"));
        }
        for w in class_cuts.windows(2) {
            if w[1] <= w[0] {
                return Err(validation(format!(
                    "class cut points must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let class_count = class_cuts.len() - 1;
        if freqs.len() != class_count {
            return Err(validation(format!(
                "{} classes but {} frequencies",
                class_count,
                freqs.len()
            )));
        }
        if observed.class_count() != class_count {
            return Err(validation(format!(
                "{} classes but {} moment records",
                class_count,
                observed.class_count()
            )));
        }
        let total: u64 = freqs.iter().sum();
        if total == 0 {
            return Err(validation("total frequency must be at least one"));
        }
        if observed.order() != MomentOrder::R0 {
            for j in 0..class_count {
                if let Some(summary) = observed.class(j) {
                    let (lo, hi) = (class_cuts[j], class_cuts[j + 1]);
                    if !(summary.mean > lo && summary.mean <= hi) {
                        return Err(validation(format!(
                            "class {} mean {} outside its interval ({lo}, {hi}]",
                            j + 1,
                            summary.mean
                        )));
                    }
                }
            }
        }
        Ok(Self {
            class_cuts,
            freqs,
            observed,
            total,
        })
    }

    /// Frequencies-only dataset.
    pub fn from_frequencies(class_cuts: Vec<f64>, freqs: Vec<u64>) -> Result<Self> {
        let count = class_cuts.len().saturating_sub(1);
        Self::new(
            class_cuts,
            freqs,
            ObservedClassMoments::frequencies_only(count),
        )
    }

    pub fn class_cuts(&self) -> &[f64] {
        &self.class_cuts
    }

    pub fn freqs(&self) -> &[u64] {
        &self.freqs
    }

    pub fn observed(&self) -> &ObservedClassMoments {
        &self.observed
    }

    pub fn order(&self) -> MomentOrder {
        self.observed.order()
    }

    pub fn class_count(&self) -> usize {
        self.freqs.len()
    }

    /// Total number of observations `n`.
    pub fn total(&self) -> u64 {
        self.total
    }

    /// The same data truncated to a lower moment order (for example to fit
    /// with means only even though variances were reported).
    pub fn with_order(&self, order: MomentOrder) -> Result<Self> {
        if order.count() > self.order().count() {
            return Err(validation(format!(
                "requested moment order {} but the data only carries {}",
                order.count(),
                self.order().count()
            )));
        }
        let observed = if order == MomentOrder::R0 {
            ObservedClassMoments::frequencies_only(self.class_count())
        } else {
            let classes = (0..self.class_count())
                .map(|j| self.observed.class(j).copied())
                .collect();
            ObservedClassMoments::new(order, classes)?
        };
        Self::new(self.class_cuts.clone(), self.freqs.clone(), observed)
    }
}

/// Penalty selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaRule {
    /// Keep the given value fixed.
    Fixed(f64),
    /// Update each EM sweep from the effective degrees of freedom, starting
    /// from the given value.
    Auto { initial: f64 },
}

impl LambdaRule {
    fn initial(&self) -> f64 {
        match self {
            LambdaRule::Fixed(v) => *v,
            LambdaRule::Auto { initial } => *initial,
        }
    }
}

pub const LAMBDA_FLOOR: f64 = 1e-6;
pub const LAMBDA_CAP: f64 = 1e12;

/// Fit configuration. Defaults mirror the reference application: 25 cubic
/// B-splines, 300 fine bins, second-order penalty, automatic lambda.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub spline_count: usize,
    pub target_bins: usize,
    pub penalty_order: usize,
    pub ridge: f64,
    pub lambda: LambdaRule,
    pub em_max_iters: usize,
    pub newton_max_iters: usize,
    pub theta_tol: f64,
    pub loglik_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            spline_count: 25,
            target_bins: 300,
            penalty_order: 2,
            ridge: 1e-6,
            lambda: LambdaRule::Auto { initial: 1.0 },
            em_max_iters: 200,
            newton_max_iters: 50,
            theta_tol: 1e-6,
            loglik_tol: 1e-8,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spline_count < self.penalty_order + 2 {
            return Err(validation(format!(
                "need at least penalty_order + 2 = {} splines, got {}",
                self.penalty_order + 2,
                self.spline_count
            )));
        }
        if self.ridge <= 0.0 || self.theta_tol <= 0.0 || self.loglik_tol <= 0.0 {
            return Err(validation("ridge and tolerances must be positive"));
        }
        if self.lambda.initial() <= 0.0 {
            return Err(validation("lambda must be positive"));
        }
        if self.em_max_iters == 0 || self.newton_max_iters == 0 {
            return Err(validation("iteration limits must be positive"));
        }
        Ok(())
    }
}

/// Per-class scale terms frozen at the start of an M-step: the inverse of the
/// leading `R x R` block of the moment covariance, evaluated at the entry
/// theta, together with the observed moment vectors.
#[derive(Debug, Clone)]
pub struct FrozenScales {
    order: usize,
    inverses: Vec<Option<DMatrix<f64>>>,
    observed: Vec<Option<DVector<f64>>>,
}

impl FrozenScales {
    /// Frequencies-only: no moment terms.
    pub fn none(class_count: usize) -> Self {
        Self {
            order: 0,
            inverses: vec![None; class_count],
            observed: vec![None; class_count],
        }
    }

    /// Freeze the covariance blocks at the given theta.
    pub fn at_theta(
        theta: &DVector<f64>,
        dataset: &GroupedDataset,
        grid: &FineGrid,
        basis: &SplineBasis,
    ) -> Result<Self> {
        let order = dataset.order().count();
        let class_count = dataset.class_count();
        if order == 0 {
            return Ok(Self::none(class_count));
        }
        let coeffs = SplineCoefficients::new(theta.clone())?;
        let pi = model::bin_probabilities(&coeffs, basis);
        let moments = model::class_central_moments(&pi, grid, MAX_MOMENT_ORDER)?;
        let covariance = model::moment_covariance(&moments, dataset.freqs())?;
        let mut inverses = Vec::with_capacity(class_count);
        let mut observed = Vec::with_capacity(class_count);
        for j in 0..class_count {
            let m = dataset.observed().moment_vector(j)?;
            if m.is_none() || dataset.freqs()[j] == 0 {
                inverses.push(None);
                observed.push(None);
                continue;
            }
            let block = covariance.leading_block(j, order);
            inverses.push(Some(invert_with_jitter(&block, j)?.0));
            observed.push(m);
        }
        Ok(Self {
            order,
            inverses,
            observed,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn inverse(&self, class: usize) -> Option<&DMatrix<f64>> {
        self.inverses[class].as_ref()
    }

    pub fn observed_vector(&self, class: usize) -> Option<&DVector<f64>> {
        self.observed[class].as_ref()
    }
}

/// Invert a symmetric covariance block, adding the documented jitter when the
/// condition number exceeds 1e12. Returns the inverse and the log-determinant
/// of the (possibly jittered) matrix.
fn invert_with_jitter(block: &DMatrix<f64>, class: usize) -> Result<(DMatrix<f64>, f64)> {
    let dim = block.nrows();
    let mut work = block.clone();
    let eig = work.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let min_eig = eig
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, b| a.min(b.abs()));
    if min_eig <= 0.0 || max_eig / min_eig > 1e12 {
        let jitter = 1e-10 * work.trace() / dim as f64;
        for d in 0..dim {
            work[(d, d)] += jitter;
        }
    }
    match Cholesky::new(work.clone()) {
        Some(chol) => {
            let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            Ok((chol.inverse(), logdet))
        }
        None => Err(Error::CovarianceInversion { class }),
    }
}

/// Solve `(m + ridge I) x = rhs` for a symmetric positive semidefinite `m`.
fn solve_ridged(m: &DMatrix<f64>, ridge: f64, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let mut a = m.clone();
    for d in 0..a.nrows() {
        a[(d, d)] += ridge;
    }
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Some(chol.solve(rhs));
    }
    a.lu().solve(rhs)
}

/// Expected latent bin frequencies given theta:
/// `k_i = n_j(i) pi_i / gamma_j(i)`.
pub fn e_step(
    theta: &SplineCoefficients,
    dataset: &GroupedDataset,
    grid: &FineGrid,
    basis: &SplineBasis,
) -> Result<DVector<f64>> {
    let dist = model::softmax_probabilities(theta, basis, grid);
    e_step_from_distribution(&dist, dataset, grid)
}

fn e_step_from_distribution(
    dist: &LatentDistribution,
    dataset: &GroupedDataset,
    grid: &FineGrid,
) -> Result<DVector<f64>> {
    let mut latent = DVector::zeros(grid.bin_count());
    for j in 0..grid.class_count() {
        let freq = dataset.freqs()[j];
        if freq == 0 {
            continue;
        }
        let gamma = dist.gamma[j];
        if gamma < 1e-300 {
            return Err(Error::NumericalDegeneracy {
                class: j,
                freq,
                gamma,
            });
        }
        let scale = freq as f64 / gamma;
        for i in grid.bins_of_class(j) {
            latent[i] = scale * dist.pi[i];
        }
    }
    Ok(latent)
}

/// Gradient of the complete penalized log-likelihood and the negated Hessian
/// `-H_p^c`, with the moment blocks using the frozen scales.
#[allow(clippy::too_many_arguments)]
pub fn mstep_gradient_hessian(
    theta: &DVector<f64>,
    latent: &DVector<f64>,
    dataset: &GroupedDataset,
    basis: &SplineBasis,
    grid: &FineGrid,
    penalty: &PenaltyMatrix,
    lambda: f64,
    frozen: &FrozenScales,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let coeffs = SplineCoefficients::new(theta.clone())?;
    let dist = model::softmax_probabilities(&coeffs, basis, grid);
    let n = dataset.total() as f64;
    let b = basis.matrix();
    let k_dim = basis.size();

    // Multinomial part: grad = B^T (k - n pi) - lambda P theta,
    // -H = B^T W B + lambda P with W = n (diag(pi) - pi pi^T).
    let residual = latent - &dist.pi * n;
    let mut gradient = b.transpose() * residual;
    gradient -= penalty.penalty() * theta * lambda;

    let mut neg_hessian = penalty.penalty() * lambda;
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
                    neg_hessian[(a_idx, b_idx)] += n * w * a_val * b_val;
                }
            }
        }
    }
    neg_hessian.ger(-n, &weighted_mean, &weighted_mean, 1.0);

    // Moment blocks.
    if frozen.order() > 0 {
        let moments = model::class_central_moments(&dist.pi, grid, MAX_MOMENT_ORDER)?;
        let derivs = model::moment_derivatives(&dist.pi, grid, basis, &moments, frozen.order());
        for j in 0..grid.class_count() {
            let (Some(inv), Some(m_obs)) = (frozen.inverse(j), frozen.observed_vector(j)) else {
                continue;
            };
            let mu = moments.vector(j, frozen.order());
            let diff = m_obs - &mu;
            let d = &derivs[j]; // order x K
            gradient += d.transpose() * (inv * &diff);
            neg_hessian += d.transpose() * inv * d;
        }
    }

    // The construction is symmetric; tidy up rounding noise.
    let symmetrized = (&neg_hessian + neg_hessian.transpose()) * 0.5;
    Ok((gradient, symmetrized))
}

/// Complete penalized log-likelihood at theta, with moment terms evaluated
/// against the frozen scales (their log-determinants are constants within an
/// M-step and are omitted).
pub fn complete_penalized_loglik(
    theta: &DVector<f64>,
    latent: &DVector<f64>,
    basis: &SplineBasis,
    grid: &FineGrid,
    penalty: &PenaltyMatrix,
    lambda: f64,
    frozen: &FrozenScales,
) -> Result<f64> {
    let eta = basis.matrix() * theta;
    let max = eta.max();
    let log_norm = eta.iter().map(|e| (e - max).exp()).sum::<f64>().ln() + max;
    let total: f64 = latent.iter().sum();
    let mut value = eta.dot(latent) - total * log_norm;
    value -= 0.5 * lambda * penalty.roughness(theta);

    if frozen.order() > 0 {
        let coeffs = SplineCoefficients::new(theta.clone())?;
        let pi = model::bin_probabilities(&coeffs, basis);
        let moments = model::class_central_moments(&pi, grid, MAX_MOMENT_ORDER)?;
        for j in 0..grid.class_count() {
            let (Some(inv), Some(m_obs)) = (frozen.inverse(j), frozen.observed_vector(j)) else {
                continue;
            };
            let diff = m_obs - moments.vector(j, frozen.order());
            value -= 0.5 * (inv * &diff).dot(&diff);
        }
    }
    Ok(value)
}

/// Observed penalized log-likelihood at theta (moment covariance evaluated at
/// the current theta, not frozen).
pub fn observed_penalized_loglik(
    theta: &DVector<f64>,
    dataset: &GroupedDataset,
    basis: &SplineBasis,
    grid: &FineGrid,
    penalty: &PenaltyMatrix,
    lambda: f64,
) -> Result<f64> {
    let coeffs = SplineCoefficients::new(theta.clone())?;
    let dist = model::softmax_probabilities(&coeffs, basis, grid);
    let mut value = 0.0;
    for j in 0..grid.class_count() {
        let freq = dataset.freqs()[j];
        if freq > 0 {
            value += freq as f64 * dist.gamma[j].ln();
        }
    }
    value -= 0.5 * lambda * penalty.roughness(theta);

    let order = dataset.order().count();
    if order > 0 {
        let moments = model::class_central_moments(&dist.pi, grid, MAX_MOMENT_ORDER)?;
        let covariance = model::moment_covariance(&moments, dataset.freqs())?;
        for j in 0..grid.class_count() {
            let Some(m_obs) = dataset.observed().moment_vector(j)? else {
                continue;
            };
            if dataset.freqs()[j] == 0 {
                continue;
            }
            let block = covariance.leading_block(j, order);
            let (inv, logdet) = invert_with_jitter(&block, j)?;
            let diff = &m_obs - moments.vector(j, order);
            value -= 0.5 * (logdet + (inv * &diff).dot(&diff));
        }
    }
    Ok(value)
}

/// Outcome of one M-step.
pub struct MStepOutcome {
    pub theta: DVector<f64>,
    pub neg_hessian: DMatrix<f64>,
    pub newton_iterations: usize,
}

const MAX_HALVINGS: usize = 20;

/// Newton-Raphson maximisation of the complete penalized log-likelihood with
/// ridge `epsilon I` and step halving. The per-class scales are conditioned
/// on the theta at the start of each Newton substitution; every substitution
/// therefore maximises a freshly frozen objective. (Freezing them for the
/// whole M-step targets the same fixed point but limit-cycles on reference
/// data for small penalties.)
#[allow(clippy::too_many_arguments)]
pub fn mstep(
    theta0: &DVector<f64>,
    latent: &DVector<f64>,
    dataset: &GroupedDataset,
    basis: &SplineBasis,
    grid: &FineGrid,
    penalty: &PenaltyMatrix,
    lambda: f64,
    config: &FitConfig,
    trace: &[f64],
) -> Result<MStepOutcome> {
    let mut theta = theta0.clone();
    let mut iterations = 0;
    // Solve the inner problem well below the EM tolerance: stopping the
    // Newton loop exactly at theta_tol makes the outer iteration chatter at
    // the tolerance boundary and the EM stopping rule then never fires.
    let inner_tol = 1e-3 * config.theta_tol;

    for _ in 0..config.newton_max_iters {
        let frozen = FrozenScales::at_theta(&theta, dataset, grid, basis)?;
        let objective =
            complete_penalized_loglik(&theta, latent, basis, grid, penalty, lambda, &frozen)?;
        let (gradient, neg_hessian) = mstep_gradient_hessian(
            &theta, latent, dataset, basis, grid, penalty, lambda, &frozen,
        )?;
        let Some(step) = solve_ridged(&neg_hessian, config.ridge, &gradient) else {
            return Err(Error::OptimizerFailure {
                message: "Newton system could not be solved".into(),
                trace: trace.to_vec(),
            });
        };

        let mut alpha = 1.0;
        let mut accepted = false;
        let mut candidate_obj = f64::NEG_INFINITY;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &theta + &step * alpha;
            candidate_obj = complete_penalized_loglik(
                &candidate, latent, basis, grid, penalty, lambda, &frozen,
            )
            .unwrap_or(f64::NEG_INFINITY);
            if candidate_obj.is_finite() && candidate_obj >= objective - 1e-12 * objective.abs() {
                theta = candidate;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        iterations += 1;
        if !accepted {
            if !candidate_obj.is_finite() {
                return Err(Error::OptimizerFailure {
                    message: "log-likelihood not finite after 20 step halvings".into(),
                    trace: trace.to_vec(),
                });
            }
            // No ascent even with a tiny step: numerically converged.
            break;
        }
        let moved = step.norm() * alpha;
        if moved / (1.0 + theta.norm()) < inner_tol {
            break;
        }
    }

    // Refresh the Hessian at the accepted point for the penalty update.
    let frozen = FrozenScales::at_theta(&theta, dataset, grid, basis)?;
    let (_, neg_hessian) = mstep_gradient_hessian(
        &theta, latent, dataset, basis, grid, penalty, lambda, &frozen,
    )?;
    Ok(MStepOutcome {
        theta,
        neg_hessian,
        newton_iterations: iterations,
    })
}

/// Effective degrees of freedom
/// `edf = Tr((-H_p^c + eps I)^{-1} (-H_p^c - lambda P))`.
pub fn effective_dof(
    neg_hessian: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    lambda: f64,
    ridge: f64,
) -> f64 {
    let unpenalized = neg_hessian - penalty.penalty() * lambda;
    let mut a = neg_hessian.clone();
    for d in 0..a.nrows() {
        a[(d, d)] += ridge;
    }
    let solved = match Cholesky::new(a.clone()) {
        Some(chol) => chol.solve(&unpenalized),
        None => match a.lu().solve(&unpenalized) {
            Some(x) => x,
            None => return f64::NAN,
        },
    };
    solved.trace()
}

/// One penalty update `lambda <- (edf - r) / ||D theta||^2`, with the
/// numerator clamped at 0.1 and lambda kept inside `[1e-6, 1e12]`.
/// Returns `(new_lambda, edf, flat_fit_warning)`; a flat fit
/// (`||D theta||^2 < 1e-14`) leaves lambda unchanged.
pub fn update_lambda(
    theta: &DVector<f64>,
    neg_hessian: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    lambda: f64,
    ridge: f64,
) -> (f64, f64, bool) {
    let edf = effective_dof(neg_hessian, penalty, lambda, ridge);
    let roughness = penalty.roughness(theta);
    if roughness < 1e-14 {
        return (lambda, edf, true);
    }
    let numerator = (edf - penalty.order() as f64).max(0.1);
    let updated = (numerator / roughness).clamp(LAMBDA_FLOOR, LAMBDA_CAP);
    (updated, edf, false)
}

/// Result of a penalized EM fit.
///
/// `loglik_trace` records the observed penalized log-likelihood after each
/// EM sweep, evaluated at that sweep's penalty weight; with an automatic
/// penalty the early entries therefore move with lambda, and the ascent
/// guarantees apply once lambda is held fixed.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: SplineCoefficients,
    pub pivot: usize,
    pub lambda_hat: f64,
    pub edf: f64,
    pub latent_freqs: DVector<f64>,
    pub loglik_trace: Vec<f64>,
    pub information: InformationMatrix,
    pub fitted_moments: ClassMoments,
    pub fitted_gamma: DVector<f64>,
    pub fitted_pi: DVector<f64>,
    pub converged: bool,
    pub flat_fit_warning: bool,
    pub em_iterations: usize,
    pub newton_iterations: usize,
    pub grid: FineGrid,
    pub basis: SplineBasis,
    pub penalty: PenaltyMatrix,
    pub config: FitConfig,
}

impl FitResult {
    /// Continuous fitted density for quantile work.
    pub fn fitted_density(&self) -> risk::FittedDensity {
        risk::FittedDensity::new(
            self.theta_hat.clone(),
            self.pivot,
            self.basis.clone(),
            self.grid.clone(),
        )
    }

    /// Snapped class cut points actually used by the model.
    pub fn class_cuts(&self) -> &[f64] {
        self.grid.class_cuts()
    }
}

/// Relative lambda movement below which the penalty is considered selected,
/// once sustained over `LAMBDA_SETTLE_SWEEPS` consecutive sweeps.
const LAMBDA_SETTLE_TOL: f64 = 1e-4;
const LAMBDA_SETTLE_SWEEPS: usize = 3;

/// Run the EM algorithm matching the dataset's moment order.
///
/// With an automatic penalty the fit has two phases sharing the iteration
/// budget: first the EM alternates theta and lambda updates until lambda
/// settles, then lambda is held at the selected value and the EM runs to
/// convergence of the observed penalized log-likelihood. (Updating lambda on
/// every sweep forever keeps the likelihood jittering at the size of the
/// lambda wobble and the stopping rule never fires.)
pub fn fit(dataset: &GroupedDataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let grid = build_fine_grid(dataset.class_cuts(), config.target_bins)?;
    let basis = build_basis(&grid, config.spline_count)?;
    let penalty = build_penalty(config.spline_count, config.penalty_order)?;
    let auto = matches!(config.lambda, LambdaRule::Auto { .. });

    let mut theta: DVector<f64> = DVector::zeros(config.spline_count);
    let mut lambda = config.lambda.initial();
    let mut updating_lambda = auto;
    let mut settled_streak = 0usize;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut flat_fit_warning = false;
    let mut em_iterations = 0;
    let mut newton_iterations = 0;
    let mut previous_ll = f64::NEG_INFINITY;

    for _ in 0..config.em_max_iters {
        em_iterations += 1;
        let coeffs = SplineCoefficients::new(theta.clone())?;
        let dist = model::softmax_probabilities(&coeffs, &basis, &grid);
        let latent = e_step_from_distribution(&dist, dataset, &grid)?;
        let outcome = mstep(
            &theta, &latent, dataset, &basis, &grid, &penalty, lambda, config, &trace,
        )?;
        newton_iterations += outcome.newton_iterations;

        let ll = observed_penalized_loglik(&outcome.theta, dataset, &basis, &grid, &penalty, lambda)?;
        trace.push(ll);
        let theta_change = (&outcome.theta - &theta).norm() / (1.0 + outcome.theta.norm());
        theta = outcome.theta;

        if updating_lambda {
            let (new_lambda, _, flat) = update_lambda(
                &theta,
                &outcome.neg_hessian,
                &penalty,
                lambda,
                config.ridge,
            );
            flat_fit_warning |= flat;
            let settled = (new_lambda - lambda).abs() / lambda.max(LAMBDA_FLOOR) < LAMBDA_SETTLE_TOL;
            lambda = new_lambda;
            settled_streak = if settled { settled_streak + 1 } else { 0 };
            if settled_streak >= LAMBDA_SETTLE_SWEEPS {
                updating_lambda = false;
            }
            previous_ll = ll;
            continue;
        }

        if (ll - previous_ll).abs() < config.loglik_tol && theta_change < config.theta_tol {
            converged = true;
            break;
        }
        previous_ll = ll;
    }

    // Final quantities at the converged theta and the selected lambda.
    let lambda_hat = lambda;
    let coeffs = SplineCoefficients::new(theta.clone())?;
    let dist = model::softmax_probabilities(&coeffs, &basis, &grid);
    let latent = e_step_from_distribution(&dist, dataset, &grid)?;
    let frozen = FrozenScales::at_theta(&theta, dataset, &grid, &basis)?;
    let fitted_moments = model::class_central_moments(&dist.pi, &grid, MAX_MOMENT_ORDER)?;

    let (theta_hat, pivot) = model::normalize_identification(&coeffs);
    let information = risk::information_matrix(
        theta_hat.as_vector(),
        pivot,
        dataset,
        &grid,
        &basis,
        &penalty,
        lambda_hat,
        &frozen,
    )?;
    // Reported complexity comes from the observed-data information; the
    // complete-data edf only drives the penalty updates above.
    let edf = risk::observed_edf(&information, &penalty, lambda_hat, config.ridge);

    Ok(FitResult {
        theta_hat,
        pivot,
        lambda_hat,
        edf,
        latent_freqs: latent,
        loglik_trace: trace,
        information,
        fitted_moments,
        fitted_gamma: dist.gamma,
        fitted_pi: dist.pi,
        converged,
        flat_fit_warning,
        em_iterations,
        newton_iterations,
        grid,
        basis,
        penalty,
        config: config.clone(),
    })
}
