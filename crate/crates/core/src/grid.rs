//! Fine latent grid refining the reporting classes.
//!
//! The support `[a0, aJ]` is split into `I` equal-width bins. Every class cut
//! point is snapped to the nearest bin edge, so the classes partition the bins
//! exactly and the class-to-bin map is a contiguous run of bins per class.

use crate::error::{validation, Error, Result};

/// Equal-width latent grid together with the class-to-bin composition.
///
/// The composition matrix `C` (J x I, `c_ji = 1` iff bin `i` lies in class
/// `j`) is stored in run form: bin `i` belongs to class `j` iff
/// `class_start[j] <= i < class_start[j + 1]`.
#[derive(Debug, Clone)]
pub struct FineGrid {
    lower: f64,
    upper: f64,
    bin_count: usize,
    delta: f64,
    edges: Vec<f64>,
    midpoints: Vec<f64>,
    class_cuts: Vec<f64>,
    class_start: Vec<usize>,
}

impl FineGrid {
    /// Support lower bound `a0`.
    pub fn lower(&self) -> f64 {
        self.lower
    }

    /// Support upper bound `aJ`.
    pub fn upper(&self) -> f64 {
        self.upper
    }

    /// Number of fine bins `I`.
    pub fn bin_count(&self) -> usize {
        self.bin_count
    }

    /// Number of classes `J`.
    pub fn class_count(&self) -> usize {
        self.class_start.len() - 1
    }

    /// Bin width.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Bin edges `b_0..b_I` (length `I + 1`).
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Bin midpoints `u_i` (length `I`).
    pub fn midpoints(&self) -> &[f64] {
        &self.midpoints
    }

    /// Class cut points after snapping (length `J + 1`). These are the
    /// boundaries the model actually uses; callers tabulating data should use
    /// them so observed moments refer to the same intervals.
    pub fn class_cuts(&self) -> &[f64] {
        &self.class_cuts
    }

    /// Bins belonging to class `j`.
    pub fn bins_of_class(&self, class: usize) -> std::ops::Range<usize> {
        self.class_start[class]..self.class_start[class + 1]
    }

    /// Class containing bin `i`.
    pub fn class_of_bin(&self, bin: usize) -> usize {
        debug_assert!(bin < self.bin_count);
        match self.class_start.binary_search(&bin) {
            Ok(j) => j.min(self.class_count() - 1),
            Err(j) => j - 1,
        }
    }

    /// Composition entry `c_ji`.
    pub fn composition(&self, class: usize, bin: usize) -> f64 {
        if self.bins_of_class(class).contains(&bin) {
            1.0
        } else {
            0.0
        }
    }

    /// Row sum of the composition matrix: bins inside class `j`.
    pub fn class_width_in_bins(&self, class: usize) -> usize {
        self.bins_of_class(class).len()
    }

    /// Grid in which every bin is its own class (`J = I`, identity
    /// composition). This is the no-tabulation limit used by the
    /// information-matrix checks; it bypasses the bins-per-class floor of
    /// [`build_fine_grid`].
    pub fn untabulated(lower: f64, upper: f64, bins: usize) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && upper > lower) {
            return Err(validation("support bounds must be finite and increasing"));
        }
        if bins == 0 {
            return Err(validation("need at least one bin"));
        }
        let delta = (upper - lower) / bins as f64;
        let mut edges: Vec<f64> = (0..=bins).map(|i| lower + i as f64 * delta).collect();
        edges[bins] = upper;
        let midpoints = (0..bins)
            .map(|i| lower + (i as f64 + 0.5) * delta)
            .collect();
        Ok(FineGrid {
            lower,
            upper,
            bin_count: bins,
            delta,
            edges: edges.clone(),
            midpoints,
            class_cuts: edges,
            class_start: (0..=bins).collect(),
        })
    }
}

/// Build the fine grid for the given class cut points.
///
/// `target_bins` fixes `I`; interior cuts are moved to the nearest bin edge.
pub fn build_fine_grid(class_cuts: &[f64], target_bins: usize) -> Result<FineGrid> {
    if class_cuts.len() < 2 {
        return Err(validation("need at least two class cut points"));
    }
    if class_cuts.iter().any(|c| !c.is_finite()) {
        return Err(validation("class cut points must be finite"));
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
    if target_bins < 10 * class_count {
        return Err(validation(format!(
            "target_bins = {target_bins} is below 10 bins per class ({class_count} classes)"
        )));
    }

    let lower = class_cuts[0];
    let upper = *class_cuts.last().unwrap();
    let bin_count = target_bins;
    let delta = (upper - lower) / bin_count as f64;

    let mut edges = Vec::with_capacity(bin_count + 1);
    for i in 0..=bin_count {
        edges.push(lower + i as f64 * delta);
    }
    edges[bin_count] = upper;
    let midpoints: Vec<f64> = (0..bin_count)
        .map(|i| lower + (i as f64 + 0.5) * delta)
        .collect();

    // Snap interior cuts to the nearest edge.
    let mut class_start = Vec::with_capacity(class_count + 1);
    let mut snapped = Vec::with_capacity(class_cuts.len());
    class_start.push(0usize);
    snapped.push(lower);
    for cut in &class_cuts[1..class_cuts.len() - 1] {
        let idx = ((cut - lower) / delta).round() as usize;
        let idx = idx.clamp(1, bin_count - 1);
        if idx <= *class_start.last().unwrap() {
            return Err(Error::GridTooCoarse {
                first: *snapped.last().unwrap(),
                second: *cut,
            });
        }
        class_start.push(idx);
        snapped.push(edges[idx]);
    }
    class_start.push(bin_count);
    snapped.push(upper);

    Ok(FineGrid {
        lower,
        upper,
        bin_count,
        delta,
        edges,
        midpoints,
        class_cuts: snapped,
        class_start,
    })
}
