//! Cubic B-spline basis on equidistant knots spanning the grid support.

use nalgebra::{DMatrix, DVector};

use crate::error::{validation, Result};
use crate::grid::FineGrid;

/// Spline degree used throughout (cubic).
pub const DEGREE: usize = 3;

/// Cubic B-spline basis with clamped equidistant knots, pre-evaluated at the
/// fine-grid midpoints.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    size: usize,
    knots: Vec<f64>,
    lower: f64,
    upper: f64,
    segment_width: f64,
    matrix: DMatrix<f64>,
}

impl SplineBasis {
    /// Number of basis functions `K`.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Full knot vector (length `K + 4`), boundary knots repeated 4 times.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// `I x K` matrix with `B[i][k] = b_k(u_i)`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// The at most `DEGREE + 1` basis functions that do not vanish at `x`,
    /// returned as `(first_index, values)`. `x` must lie in `[a0, aJ]`.
    pub fn eval_nonzero(&self, x: f64) -> (usize, [f64; DEGREE + 1]) {
        let segments = self.size - DEGREE;
        let s = if x >= self.upper {
            segments - 1
        } else {
            (((x - self.lower) / self.segment_width) as usize).min(segments - 1)
        };
        let span = DEGREE + s;

        // Iterative Cox-de Boor triangle over the active window.
        let mut values = [0.0f64; DEGREE + 1];
        let mut left = [0.0f64; DEGREE + 1];
        let mut right = [0.0f64; DEGREE + 1];
        values[0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        (span - DEGREE, values)
    }

    /// Dense evaluation of all `K` basis functions at `x`. Zero outside the
    /// support `[a0, aJ]`.
    pub fn eval_all(&self, x: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.size);
        if x < self.lower || x > self.upper {
            return out;
        }
        let (first, values) = self.eval_nonzero(x);
        for (offset, v) in values.iter().enumerate() {
            out[first + offset] = *v;
        }
        out
    }

    /// Single basis function `b_k(x)`.
    pub fn eval_one(&self, k: usize, x: f64) -> f64 {
        if x < self.lower || x > self.upper {
            return 0.0;
        }
        let (first, values) = self.eval_nonzero(x);
        if k < first || k > first + DEGREE {
            0.0
        } else {
            values[k - first]
        }
    }
}

/// Build the cubic basis for a grid: `K` B-splines on equidistant knots over
/// `(a0, aJ)` with standard boundary-knot repetition, evaluated at the bin
/// midpoints.
pub fn build_basis(grid: &FineGrid, size: usize) -> Result<SplineBasis> {
    if size < DEGREE + 1 {
        return Err(validation(format!(
            "need at least {} cubic B-splines, got {size}",
            DEGREE + 1
        )));
    }
    if size > grid.bin_count() {
        return Err(validation(format!(
            "basis size {size} exceeds bin count {}",
            grid.bin_count()
        )));
    }

    let lower = grid.lower();
    let upper = grid.upper();
    let segments = size - DEGREE;
    let segment_width = (upper - lower) / segments as f64;

    let mut knots = Vec::with_capacity(size + DEGREE + 1);
    for _ in 0..DEGREE {
        knots.push(lower);
    }
    for m in 0..=segments {
        knots.push(lower + m as f64 * segment_width);
    }
    knots[DEGREE + segments] = upper;
    for _ in 0..DEGREE {
        knots.push(upper);
    }

    let mut basis = SplineBasis {
        size,
        knots,
        lower,
        upper,
        segment_width,
        matrix: DMatrix::zeros(0, 0),
    };
    let mut matrix = DMatrix::zeros(grid.bin_count(), size);
    for (i, u) in grid.midpoints().iter().enumerate() {
        let (first, values) = basis.eval_nonzero(*u);
        for (offset, v) in values.iter().enumerate() {
            matrix[(i, first + offset)] = *v;
        }
    }
    basis.matrix = matrix;
    Ok(basis)
}
