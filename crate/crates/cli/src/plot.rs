//! Plot-ready data files: histogram rectangles, density curve samples, and
//! an optional static SVG combining both.

use std::fmt::Write as _;

use grouped_density::fit::GroupedDataset;

use crate::formats::FitReport;

/// Histogram rectangles `(class, lower, upper, height)` with
/// `height = n_j / (n * width)`, so the bars integrate to one.
pub fn histogram_rows(dataset: &GroupedDataset) -> Vec<(usize, f64, f64, f64)> {
    let n = dataset.total() as f64;
    let cuts = dataset.class_cuts();
    (0..dataset.class_count())
        .map(|j| {
            let width = cuts[j + 1] - cuts[j];
            let height = dataset.freqs()[j] as f64 / (n * width);
            (j + 1, cuts[j], cuts[j + 1], height)
        })
        .collect()
}

pub fn histogram_csv(dataset: &GroupedDataset) -> String {
    let mut out = String::from("class,lower,upper,height\n");
    for (class, lower, upper, height) in histogram_rows(dataset) {
        let _ = writeln!(out, "{class},{lower},{upper},{height}");
    }
    out
}

pub fn curve_csv(report: &FitReport) -> String {
    let mut out = String::from("x,density\n");
    for (x, f) in &report.density_curve {
        let _ = writeln!(out, "{x},{f}");
    }
    out
}

/// Minimal static SVG with the histogram blocks and the fitted curve.
pub fn svg(dataset: &GroupedDataset, report: &FitReport) -> String {
    let width = 720.0;
    let height = 480.0;
    let margin = 50.0;
    let cuts = dataset.class_cuts();
    let (x_min, x_max) = (cuts[0], *cuts.last().unwrap());
    let y_max = report
        .density_curve
        .iter()
        .map(|(_, f)| *f)
        .chain(histogram_rows(dataset).iter().map(|(_, _, _, h)| *h))
        .fold(0.0f64, f64::max)
        * 1.05;
    let sx = |x: f64| margin + (x - x_min) / (x_max - x_min) * (width - 2.0 * margin);
    let sy = |y: f64| height - margin - y / y_max * (height - 2.0 * margin);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
    for (_, lower, upper, bar) in histogram_rows(dataset) {
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#c8c8c8" stroke="#888888"/>"##,
            sx(lower),
            sy(bar),
            sx(upper) - sx(lower),
            sy(0.0) - sy(bar)
        );
    }
    let path: Vec<String> = report
        .density_curve
        .iter()
        .enumerate()
        .map(|(i, (x, f))| {
            format!(
                "{}{:.2},{:.2}",
                if i == 0 { "M" } else { "L" },
                sx(*x),
                sy(*f)
            )
        })
        .collect();
    let _ = writeln!(
        out,
        r##"<path d="{}" fill="none" stroke="#c03030" stroke-width="1.5"/>"##,
        path.join(" ")
    );
    let _ = writeln!(
        out,
        r#"<line x1="{m}" y1="{y0}" x2="{xr}" y2="{y0}" stroke="black"/>"#,
        m = margin,
        y0 = height - margin,
        xr = width - margin
    );
    let _ = writeln!(
        out,
        r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{y0}" stroke="black"/>"#,
        m = margin,
        y0 = height - margin
    );
    let _ = writeln!(out, "</svg>");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_integrates_to_one() {
        let dataset = GroupedDataset::from_frequencies(
            vec![0.0, 1.0, 3.0, 6.0],
            vec![10, 60, 30],
        )
        .unwrap();
        let total: f64 = histogram_rows(&dataset)
            .iter()
            .map(|(_, lo, hi, h)| (hi - lo) * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
