//! Discrete difference penalty on spline coefficients.

use nalgebra::DMatrix;

use crate::error::{validation, Result};

/// `r`-th order difference operator `D` ((K - r) x K) and penalty `P = D^T D`.
#[derive(Debug, Clone)]
pub struct PenaltyMatrix {
    order: usize,
    difference: DMatrix<f64>,
    penalty: DMatrix<f64>,
}

impl PenaltyMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn difference(&self) -> &DMatrix<f64> {
        &self.difference
    }

    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    /// `||D theta||^2`.
    pub fn roughness(&self, theta: &nalgebra::DVector<f64>) -> f64 {
        (&self.difference * theta).norm_squared()
    }
}

/// Build the banded `r`-th difference operator and its Gram matrix.
///
/// Row `i` of `D` carries the coefficients of the forward difference
/// `(-1)^(r-m) C(r, m)` at columns `i..=i+r`, so `D = [[-1, 1, ...]]` for
/// `r = 1` and `[[1, -2, 1, ...]]` for `r = 2`.
pub fn build_penalty(size: usize, order: usize) -> Result<PenaltyMatrix> {
    if !(1..=3).contains(&order) {
        return Err(validation(format!(
            "difference order must be in 1..=3, got {order}"
        )));
    }
    if order >= size {
        return Err(validation(format!(
            "difference order {order} must be below the basis size {size}"
        )));
    }

    let mut coeffs = vec![0.0f64; order + 1];
    let mut binom = 1.0f64;
    for (m, c) in coeffs.iter_mut().enumerate() {
        *c = if (order - m).is_multiple_of(2) { binom } else { -binom };
        binom *= (order - m) as f64 / (m + 1) as f64;
    }

    let rows = size - order;
    let mut difference = DMatrix::zeros(rows, size);
    for i in 0..rows {
        for (m, c) in coeffs.iter().enumerate() {
            difference[(i, i + m)] = *c;
        }
    }
    let penalty = difference.transpose() * &difference;
    Ok(PenaltyMatrix {
        order,
        difference,
        penalty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn second_order_row() {
        let pen = build_penalty(6, 2).unwrap();
        let first: Vec<f64> = pen.difference().row(0).iter().copied().collect();
        assert_eq!(first, vec![1.0, -2.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn first_order_matrix() {
        let pen = build_penalty(4, 1).unwrap();
        let expected = [
            [-1.0, 1.0, 0.0, 0.0],
            [0.0, -1.0, 1.0, 0.0],
            [0.0, 0.0, -1.0, 1.0],
        ];
        for (i, row) in expected.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(pen.difference()[(i, j)], *v);
            }
        }
    }

    #[test]
    fn annihilates_low_degree_polynomials() {
        for order in 1..=3usize {
            let size = 11;
            let pen = build_penalty(size, order).unwrap();
            for power in 0..order {
                let poly = DVector::from_fn(size, |k, _| ((k + 1) as f64).powi(power as i32));
                let image = pen.difference() * &poly;
                assert!(
                    image.amax() < 1e-12,
                    "order {order} should annihilate degree {power}"
                );
            }
        }
    }

    #[test]
    fn penalty_is_psd_with_rank_deficit() {
        let pen = build_penalty(9, 2).unwrap();
        let p = pen.penalty().clone();
        assert!((p.clone() - p.transpose()).amax() < 1e-14);
        let eig = p.symmetric_eigen();
        let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(values[0] > -1e-12 && values[1] > -1e-12);
        // rank K - r: exactly r eigenvalues vanish
        assert!(values[1] < 1e-10);
        assert!(values[2] > 1e-8);
    }

    #[test]
    fn rejects_invalid_orders() {
        assert!(build_penalty(5, 0).is_err());
        assert!(build_penalty(5, 4).is_err());
        assert!(build_penalty(3, 3).is_err());
    }
}
