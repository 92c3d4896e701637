//! Map from spline coefficients to bin/class probabilities, class-conditional
//! central moments, the covariance of sample central moments, and moment
//! derivatives with respect to the coefficients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::SplineBasis;
use crate::error::{validation, Error, Result};
use crate::grid::FineGrid;

/// Highest central-moment order ever computed (what the moment covariance
/// needs and nothing more).
pub const MAX_MOMENT_ORDER: usize = 8;

/// Probability floor below which a class is treated as empty.
pub const EMPTY_CLASS_FLOOR: f64 = 1e-12;

/// Spline coefficient vector `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineCoefficients {
    theta: DVector<f64>,
}

impl SplineCoefficients {
    pub fn new(theta: DVector<f64>) -> Result<Self> {
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(validation("spline coefficients must be finite"));
        }
        Ok(Self { theta })
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            theta: DVector::zeros(size),
        }
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.len() == 0
    }
}

/// Bin probabilities `pi` and class probabilities `gamma = C pi`.
#[derive(Debug, Clone)]
pub struct LatentDistribution {
    pub pi: DVector<f64>,
    pub gamma: DVector<f64>,
}

/// Class-conditional central moments `mu[j][r - 1] = mu_rj`. Order 1 is the
/// conditional mean; orders >= 2 are centered at it.
#[derive(Debug, Clone)]
pub struct ClassMoments {
    mu: Vec<[f64; MAX_MOMENT_ORDER]>,
    max_order: usize,
}

impl ClassMoments {
    pub fn class_count(&self) -> usize {
        self.mu.len()
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    /// `mu_rj` for `r` in `1..=max_order`.
    pub fn moment(&self, class: usize, order: usize) -> f64 {
        assert!(order >= 1 && order <= self.max_order);
        self.mu[class][order - 1]
    }

    /// Conditional variance of class `j`.
    pub fn variance(&self, class: usize) -> f64 {
        self.moment(class, 2)
    }

    /// First `len` moments of class `j` as a vector `(mu_1j, ..., mu_len,j)`.
    pub fn vector(&self, class: usize, len: usize) -> DVector<f64> {
        DVector::from_fn(len, |r, _| self.mu[class][r])
    }
}

/// Per-class covariance matrices of the vector of sample central moments.
#[derive(Debug, Clone)]
pub struct MomentCovariance {
    sigma: Vec<DMatrix<f64>>,
}

impl MomentCovariance {
    pub fn class_count(&self) -> usize {
        self.sigma.len()
    }

    /// 4x4 covariance of `(M_1j, ..., M_4j)` for class `j`.
    pub fn class(&self, class: usize) -> &DMatrix<f64> {
        &self.sigma[class]
    }

    /// Leading `len x len` block (used for the lower-order data settings).
    pub fn leading_block(&self, class: usize, len: usize) -> DMatrix<f64> {
        self.sigma[class].view((0, 0), (len, len)).into_owned()
    }
}

/// How many observed moment orders accompany the frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MomentOrder {
    /// Frequencies only.
    R0,
    /// Frequencies and class means.
    R1,
    /// Frequencies, means and variances.
    R2,
    /// Frequencies and central moments up to order four.
    R4,
}

impl MomentOrder {
    pub fn from_count(r: usize) -> Result<Self> {
        match r {
            0 => Ok(MomentOrder::R0),
            1 => Ok(MomentOrder::R1),
            2 => Ok(MomentOrder::R2),
            4 => Ok(MomentOrder::R4),
            _ => Err(validation(format!(
                "moment order must be one of 0, 1, 2, 4; got {r}"
            ))),
        }
    }

    pub fn count(self) -> usize {
        match self {
            MomentOrder::R0 => 0,
            MomentOrder::R1 => 1,
            MomentOrder::R2 => 2,
            MomentOrder::R4 => 4,
        }
    }
}

/// Observed summary statistics of one class, stored both as reported
/// (mean, sd, skewness, excess kurtosis) and as derived central moments.
/// The reported form is canonical so that files round-trip bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub mean: f64,
    pub sd: f64,
    pub skewness: f64,
    pub kurtosis_excess: f64,
}

impl ClassSummary {
    /// Central moments `(m1, m2, m3, m4)` implied by the summary.
    pub fn central_moments(&self) -> Result<[f64; 4]> {
        convert_summary_to_central_moments(self.mean, self.sd, self.skewness, self.kurtosis_excess)
    }

    /// Recover the summary from central moments. Degenerate classes
    /// (`m2 = 0`) report zero skewness and excess kurtosis.
    pub fn from_central_moments(m: [f64; 4]) -> Result<Self> {
        if m[1] < 0.0 {
            return Err(validation(format!("negative second moment {}", m[1])));
        }
        let sd = m[1].sqrt();
        let (skewness, kurtosis_excess) = if m[1] > 0.0 {
            (m[2] / (sd * sd * sd), m[3] / (m[1] * m[1]) - 3.0)
        } else {
            (0.0, 0.0)
        };
        Ok(Self {
            mean: m[0],
            sd,
            skewness,
            kurtosis_excess,
        })
    }
}

/// Observed per-class sample central moments up to the dataset's order.
/// Classes without observations carry `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedClassMoments {
    order: MomentOrder,
    classes: Vec<Option<ClassSummary>>,
}

impl ObservedClassMoments {
    pub fn new(order: MomentOrder, classes: Vec<Option<ClassSummary>>) -> Result<Self> {
        for (j, summary) in classes.iter().enumerate() {
            if let Some(s) = summary {
                if order.count() >= 2 && s.sd < 0.0 {
                    return Err(validation(format!(
                        "class {} has negative standard deviation {}",
                        j + 1,
                        s.sd
                    )));
                }
            }
        }
        Ok(Self { order, classes })
    }

    pub fn frequencies_only(class_count: usize) -> Self {
        Self {
            order: MomentOrder::R0,
            classes: vec![None; class_count],
        }
    }

    pub fn order(&self) -> MomentOrder {
        self.order
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, class: usize) -> Option<&ClassSummary> {
        self.classes[class].as_ref()
    }

    /// Observed moment vector `(m_1j, ..., m_Rj)` for class `j`, `None` when
    /// the class has no observations or the dataset is frequencies-only.
    pub fn moment_vector(&self, class: usize) -> Result<Option<DVector<f64>>> {
        let r = self.order.count();
        if r == 0 {
            return Ok(None);
        }
        match &self.classes[class] {
            None => Ok(None),
            Some(summary) => {
                let m = summary.central_moments()?;
                Ok(Some(DVector::from_fn(r, |i, _| m[i])))
            }
        }
    }
}

/// Softmax map from coefficients to bin probabilities, computed with
/// max-subtraction so large scores cannot overflow.
pub fn bin_probabilities(theta: &SplineCoefficients, basis: &SplineBasis) -> DVector<f64> {
    let eta = basis.matrix() * theta.as_vector();
    let max = eta.max();
    let mut pi = eta.map(|e| (e - max).exp());
    let total: f64 = pi.iter().sum();
    pi /= total;
    pi
}

/// Class probabilities `gamma = C pi`.
pub fn class_probabilities(pi: &DVector<f64>, grid: &FineGrid) -> DVector<f64> {
    DVector::from_fn(grid.class_count(), |j, _| {
        grid.bins_of_class(j).map(|i| pi[i]).sum()
    })
}

/// Bin and class probabilities in one call.
pub fn softmax_probabilities(
    theta: &SplineCoefficients,
    basis: &SplineBasis,
    grid: &FineGrid,
) -> LatentDistribution {
    let pi = bin_probabilities(theta, basis);
    let gamma = class_probabilities(&pi, grid);
    LatentDistribution { pi, gamma }
}

/// Class-conditional central moments of the latent distribution, by the
/// midpoint rule on the fine grid.
pub fn class_central_moments(
    pi: &DVector<f64>,
    grid: &FineGrid,
    max_order: usize,
) -> Result<ClassMoments> {
    assert!((2..=MAX_MOMENT_ORDER).contains(&max_order));
    let mut mu = Vec::with_capacity(grid.class_count());
    for j in 0..grid.class_count() {
        let range = grid.bins_of_class(j);
        let gamma: f64 = range.clone().map(|i| pi[i]).sum();
        if gamma < EMPTY_CLASS_FLOOR {
            return Err(Error::EmptyClass {
                class: j,
                floor: EMPTY_CLASS_FLOOR,
            });
        }
        let mean: f64 = range
            .clone()
            .map(|i| grid.midpoints()[i] * pi[i])
            .sum::<f64>()
            / gamma;
        let mut row = [0.0f64; MAX_MOMENT_ORDER];
        row[0] = mean;
        for i in range {
            let d = grid.midpoints()[i] - mean;
            let w = pi[i] / gamma;
            let mut power = d;
            for entry in row.iter_mut().take(max_order).skip(1) {
                power *= d;
                *entry += w * power;
            }
        }
        mu.push(row);
    }
    Ok(ClassMoments { mu, max_order })
}

/// Covariance of the vector of sample central moments `(M_1j, .., M_4j)`.
///
/// Entries come from the influence functions of the central moments: with
/// `y = x - mu_1j`, the order-`r` sample central moment has influence
/// `y^r - mu_rj - r mu_{r-1,j} y` (the last term accounts for estimating the
/// class mean; it vanishes for `r = 1` and, because the centered first moment
/// is zero, for `r = 2`). The covariance of orders `(r, s)` is then
/// `(mu_{r+s} - mu_r mu_s - c_s mu_{r+1} - c_r mu_{s+1} + c_r c_s mu_2) / n_j`
/// with `c_1 = 0` and `c_r = r mu_{r-1,j}` otherwise.
pub fn moment_covariance(moments: &ClassMoments, freqs: &[u64]) -> Result<MomentCovariance> {
    assert_eq!(moments.class_count(), freqs.len());
    assert!(moments.max_order() >= MAX_MOMENT_ORDER);
    let mut sigma = Vec::with_capacity(freqs.len());
    for (j, freq) in freqs.iter().enumerate() {
        let n = (*freq).max(1) as f64;
        // Centered moments with mu_0 = 1, mu_1 = 0.
        let mut mu = [0.0f64; MAX_MOMENT_ORDER + 1];
        mu[0] = 1.0;
        for r in 2..=MAX_MOMENT_ORDER {
            mu[r] = moments.moment(j, r);
        }
        let coeff = |r: usize| if r >= 2 { r as f64 * mu[r - 1] } else { 0.0 };
        let mut m = DMatrix::zeros(4, 4);
        for r in 1..=4usize {
            for s in r..=4usize {
                let value = mu[r + s] - mu[r] * mu[s] - coeff(s) * mu[r + 1]
                    - coeff(r) * mu[s + 1]
                    + coeff(r) * coeff(s) * mu[2];
                m[(r - 1, s - 1)] = value / n;
                m[(s - 1, r - 1)] = value / n;
            }
        }
        for r in 0..4 {
            if m[(r, r)] < -1e-10 {
                return Err(Error::InconsistentMoments {
                    class: j,
                    detail: format!("covariance diagonal entry {} is {}", r + 1, m[(r, r)]),
                });
            }
        }
        sigma.push(m);
    }
    Ok(MomentCovariance { sigma })
}

/// Derivatives of the class-conditional moments with respect to theta, one
/// `max_order x K` matrix per class.
///
/// Row 1 is `(1/gamma_j) sum_i c_ji pi_i (u_i - mu_1j) b_ik`; rows `r >= 2`
/// use `(1/gamma_j) sum_i c_ji pi_i b_ik {(u_i - mu_1j)^r - mu_rj -
/// r m_{r-1} (u_i - mu_1j)}` where `m_q` is the centered moment of order `q`
/// (zero for `q = 1`). Using the centered value at `r = 2` is what matches
/// finite differences of the moments — see the module tests.
pub fn moment_derivatives(
    pi: &DVector<f64>,
    grid: &FineGrid,
    basis: &SplineBasis,
    moments: &ClassMoments,
    max_order: usize,
) -> Vec<DMatrix<f64>> {
    assert!(max_order >= 1 && max_order <= moments.max_order());
    let k = basis.size();
    let b = basis.matrix();
    let mut out = Vec::with_capacity(grid.class_count());
    for j in 0..grid.class_count() {
        let range = grid.bins_of_class(j);
        let gamma: f64 = range.clone().map(|i| pi[i]).sum();
        let mean = moments.moment(j, 1);
        let centered = |q: usize| if q >= 2 { moments.moment(j, q) } else { 0.0 };
        let mut deriv = DMatrix::zeros(max_order, k);
        for i in range {
            let w = pi[i] / gamma;
            let d = grid.midpoints()[i] - mean;
            let mut powers = [0.0f64; MAX_MOMENT_ORDER + 1];
            powers[0] = 1.0;
            for p in 1..=max_order {
                powers[p] = powers[p - 1] * d;
            }
            let row = b.row(i);
            for (col, b_ik) in row.iter().enumerate() {
                if *b_ik == 0.0 {
                    continue;
                }
                let wb = w * b_ik;
                deriv[(0, col)] += wb * d;
                for r in 2..=max_order {
                    let brace = powers[r] - centered(r) - r as f64 * centered(r - 1) * d;
                    deriv[(r - 1, col)] += wb * brace;
                }
            }
        }
        out.push(deriv);
    }
    out
}

/// Convert a reported (mean, sd, skewness, excess kurtosis) tuple into
/// central moments `(m1, m2, m3, m4)`.
pub fn convert_summary_to_central_moments(
    mean: f64,
    sd: f64,
    skewness: f64,
    kurtosis_excess: f64,
) -> Result<[f64; 4]> {
    if sd < 0.0 {
        return Err(validation(format!("standard deviation must be >= 0, got {sd}")));
    }
    let m2 = sd * sd;
    let m3 = skewness * sd * sd * sd;
    let m4 = (kurtosis_excess + 3.0) * m2 * m2;
    Ok([mean, m2, m3, m4])
}

/// Shift theta so its largest component is zero (softmax identification).
/// Returns the shifted vector and the pivot index (lowest index on ties).
pub fn normalize_identification(theta: &SplineCoefficients) -> (SplineCoefficients, usize) {
    let v = theta.as_vector();
    let mut pivot = 0;
    for (k, value) in v.iter().enumerate() {
        if *value > v[pivot] {
            pivot = k;
        }
    }
    let max = v[pivot];
    let shifted = SplineCoefficients {
        theta: v.map(|t| t - max),
    };
    (shifted, pivot)
}
