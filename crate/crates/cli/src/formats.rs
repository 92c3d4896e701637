//! Input and report file formats.
//!
//! Summary tables come in two equivalent encodings sharing one schema: a
//! delimited text form (canonical) and a JSON object form, auto-detected on
//! parse. Reports are JSON.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use grouped_density::eval::MomentDiagnostic;
use grouped_density::fit::{FitConfig, GroupedDataset};
use grouped_density::model::{ClassSummary, MomentOrder, ObservedClassMoments};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
pub const FIT_REPORT_SCHEMA: &str = "grouped-density/fit-report/v1";
pub const SIMULATION_REPORT_SCHEMA: &str = "grouped-density/simulation-report/v1";

/// Scale the tabulated values live on. Purely descriptive metadata, except
/// that `Log10` selects the exp10 back-transform by default when fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TransformTag {
    #[default]
    None,
    Log10,
}

impl TransformTag {
    fn parse(text: &str) -> Result<Self, String> {
        match text.trim() {
            "none" => Ok(TransformTag::None),
            "log10" => Ok(TransformTag::Log10),
            other => Err(format!("unknown transform tag {other:?}")),
        }
    }

    fn label(self) -> &'static str {
        match self {
            TransformTag::None => "none",
            TransformTag::Log10 => "log10",
        }
    }
}

/// A parsed summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub dataset: GroupedDataset,
    pub transform: TransformTag,
    pub version: u32,
}

/// Line-numbered parse failure.
#[derive(Debug)]
pub struct ParseError {
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ParseError {}

fn err(line: Option<usize>, message: impl Into<String>) -> ParseError {
    ParseError {
        line,
        message: message.into(),
    }
}

/// One record of the JSON object form.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassRecord {
    lower: f64,
    upper: f64,
    freq: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    skewness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kurtosis_excess: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryObject {
    version: u32,
    #[serde(default)]
    transform: TransformTag,
    classes: Vec<ClassRecord>,
}

/// Parse a summary table from either encoding, auto-detected.
pub fn parse_summary_table(text: &str) -> Result<SummaryTable, ParseError> {
    if text.trim_start().starts_with('{') {
        parse_json(text)
    } else {
        parse_delimited(text)
    }
}

fn parse_json(text: &str) -> Result<SummaryTable, ParseError> {
    let object: SummaryObject =
        serde_json::from_str(text).map_err(|e| err(Some(e.line()), e.to_string()))?;
    build_table(object.version, object.transform, &object.classes, None)
}

fn parse_delimited(text: &str) -> Result<SummaryTable, ParseError> {
    let mut version = SUMMARY_SCHEMA_VERSION;
    let mut transform = TransformTag::None;
    let mut header: Option<(Vec<String>, usize)> = None;
    let mut records: Vec<(ClassRecord, usize)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(directive) = line.strip_prefix('#') {
            let directive = directive.trim();
            if let Some(value) = directive.strip_prefix("version:") {
                version = value
                    .trim()
                    .parse()
                    .map_err(|_| err(Some(line_no), format!("bad version {:?}", value.trim())))?;
            } else if let Some(value) = directive.strip_prefix("transform:") {
                transform = TransformTag::parse(value).map_err(|m| err(Some(line_no), m))?;
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        match &header {
            None => {
                let names: Vec<String> = fields.iter().map(|f| f.to_string()).collect();
                validate_header(&names).map_err(|m| err(Some(line_no), m))?;
                header = Some((names, line_no));
            }
            Some((names, _)) => {
                if fields.len() != names.len() {
                    return Err(err(
                        Some(line_no),
                        format!("expected {} fields, found {}", names.len(), fields.len()),
                    ));
                }
                let mut record = ClassRecord {
                    lower: f64::NAN,
                    upper: f64::NAN,
                    freq: 0,
                    mean: None,
                    sd: None,
                    skewness: None,
                    kurtosis_excess: None,
                };
                for (name, field) in names.iter().zip(&fields) {
                    let missing = field.is_empty();
                    let number = |target: &str| -> Result<f64, ParseError> {
                        field.parse::<f64>().map_err(|_| {
                            err(Some(line_no), format!("bad {target} value {field:?}"))
                        })
                    };
                    match name.as_str() {
                        "lower" => record.lower = number("lower")?,
                        "upper" => record.upper = number("upper")?,
                        "freq" => {
                            record.freq = field.parse::<u64>().map_err(|_| {
                                err(
                                    Some(line_no),
                                    format!("frequency must be a nonnegative integer, got {field:?}"),
                                )
                            })?
                        }
                        "mean" if !missing => record.mean = Some(number("mean")?),
                        "sd" if !missing => record.sd = Some(number("sd")?),
                        "skewness" if !missing => record.skewness = Some(number("skewness")?),
                        "kurtosis_excess" if !missing => {
                            record.kurtosis_excess = Some(number("kurtosis_excess")?)
                        }
                        _ => {}
                    }
                }
                records.push((record, line_no));
            }
        }
    }

    if header.is_none() {
        return Err(err(None, "missing header line"));
    }
    let lines: Vec<usize> = records.iter().map(|(_, l)| *l).collect();
    let rows: Vec<ClassRecord> = records.into_iter().map(|(r, _)| r).collect();
    build_table(version, transform, &rows, Some(&lines))
}

fn validate_header(names: &[String]) -> Result<(), String> {
    let expected = ["lower", "upper", "freq", "mean", "sd", "skewness", "kurtosis_excess"];
    if names.len() < 3 || names.len() > expected.len() {
        return Err(format!(
            "header must list lower,upper,freq and a moment-column prefix, got {names:?}"
        ));
    }
    for (name, want) in names.iter().zip(expected.iter()) {
        if name != want {
            return Err(format!("unexpected column {name:?}, expected {want:?}"));
        }
    }
    if names.len() == 6 {
        return Err("skewness requires the kurtosis_excess column as well".into());
    }
    Ok(())
}

fn build_table(
    version: u32,
    transform: TransformTag,
    records: &[ClassRecord],
    lines: Option<&[usize]>,
) -> Result<SummaryTable, ParseError> {
    let line_of = |idx: usize| lines.map(|l| l[idx]);
    if records.is_empty() {
        return Err(err(None, "no class records"));
    }

    // Intervals must chain without gaps or overlaps.
    let mut cuts = Vec::with_capacity(records.len() + 1);
    cuts.push(records[0].lower);
    for (idx, record) in records.iter().enumerate() {
        if record.upper <= record.lower {
            return Err(err(
                line_of(idx),
                format!(
                    "interval ({}, {}] is empty or reversed",
                    record.lower, record.upper
                ),
            ));
        }
        if idx > 0 && records[idx - 1].upper != record.lower {
            return Err(err(
                line_of(idx),
                format!(
                    "interval gap or overlap at boundary: previous upper {} vs lower {}",
                    records[idx - 1].upper,
                    record.lower
                ),
            ));
        }
        cuts.push(record.upper);
    }

    // A uniform moment-order prefix across all populated classes.
    let order_of = |r: &ClassRecord| -> Result<usize, String> {
        match (
            r.mean.is_some(),
            r.sd.is_some(),
            r.skewness.is_some(),
            r.kurtosis_excess.is_some(),
        ) {
            (false, false, false, false) => Ok(0),
            (true, false, false, false) => Ok(1),
            (true, true, false, false) => Ok(2),
            (true, true, true, true) => Ok(4),
            _ => Err("moment columns must form a prefix: mean; mean,sd; or mean,sd,skewness,kurtosis_excess".into()),
        }
    };
    let mut order: Option<usize> = None;
    for (idx, record) in records.iter().enumerate() {
        if record.freq == 0 {
            if record.mean.is_some() || record.sd.is_some() {
                return Err(err(line_of(idx), "empty class cannot carry moments"));
            }
            continue;
        }
        let this = order_of(record).map_err(|m| err(line_of(idx), m))?;
        match order {
            None => order = Some(this),
            Some(o) if o == this => {}
            Some(o) => {
                return Err(err(
                    line_of(idx),
                    format!("mixed moment orders: saw {o} columns earlier, {this} here"),
                ))
            }
        }
        if let Some(sd) = record.sd {
            if sd < 0.0 {
                return Err(err(line_of(idx), format!("negative sd {sd}")));
            }
        }
    }
    let order = MomentOrder::from_count(order.unwrap_or(0))
        .map_err(|e| err(None, e.to_string()))?;

    let freqs: Vec<u64> = records.iter().map(|r| r.freq).collect();
    let summaries: Vec<Option<ClassSummary>> = records
        .iter()
        .map(|r| {
            if r.freq == 0 || order == MomentOrder::R0 {
                None
            } else {
                Some(ClassSummary {
                    mean: r.mean.unwrap_or(0.0),
                    sd: r.sd.unwrap_or(0.0),
                    skewness: r.skewness.unwrap_or(0.0),
                    kurtosis_excess: r.kurtosis_excess.unwrap_or(0.0),
                })
            }
        })
        .collect();

    let observed = ObservedClassMoments::new(order, summaries)
        .map_err(|e| err(None, e.to_string()))?;
    let dataset = GroupedDataset::new(cuts, freqs, observed)
        .map_err(|e| err(None, e.to_string()))?;
    Ok(SummaryTable {
        dataset,
        transform,
        version,
    })
}

fn records_of(dataset: &GroupedDataset) -> Vec<ClassRecord> {
    let order = dataset.order().count();
    let cuts = dataset.class_cuts();
    (0..dataset.class_count())
        .map(|j| {
            let summary = dataset.observed().class(j);
            ClassRecord {
                lower: cuts[j],
                upper: cuts[j + 1],
                freq: dataset.freqs()[j],
                mean: summary.filter(|_| order >= 1).map(|s| s.mean),
                sd: summary.filter(|_| order >= 2).map(|s| s.sd),
                skewness: summary.filter(|_| order >= 4).map(|s| s.skewness),
                kurtosis_excess: summary.filter(|_| order >= 4).map(|s| s.kurtosis_excess),
            }
        })
        .collect()
}

/// Canonical delimited encoding. Floating point values print in shortest
/// round-trip form, so `parse(emit(d)) == d` exactly.
pub fn emit_summary_table(dataset: &GroupedDataset, transform: TransformTag) -> String {
    let order = dataset.order().count();
    let mut out = String::new();
    let _ = writeln!(out, "# version: {SUMMARY_SCHEMA_VERSION}");
    let _ = writeln!(out, "# transform: {}", transform.label());
    let mut columns = vec!["lower", "upper", "freq"];
    if order >= 1 {
        columns.push("mean");
    }
    if order >= 2 {
        columns.push("sd");
    }
    if order >= 4 {
        columns.push("skewness");
        columns.push("kurtosis_excess");
    }
    let _ = writeln!(out, "{}", columns.join(","));
    for record in records_of(dataset) {
        let mut fields = vec![
            format!("{}", record.lower),
            format!("{}", record.upper),
            format!("{}", record.freq),
        ];
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        if order >= 1 {
            fields.push(opt(record.mean));
        }
        if order >= 2 {
            fields.push(opt(record.sd));
        }
        if order >= 4 {
            fields.push(opt(record.skewness));
            fields.push(opt(record.kurtosis_excess));
        }
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

/// JSON object encoding of the same schema.
pub fn emit_summary_json(dataset: &GroupedDataset, transform: TransformTag) -> String {
    let object = SummaryObject {
        version: SUMMARY_SCHEMA_VERSION,
        transform,
        classes: records_of(dataset),
    };
    serde_json::to_string_pretty(&object).expect("summary serialization")
}

/// Echo of the effective fit invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitInvocation {
    pub data_path: String,
    pub moment_order: usize,
    pub fit: FitConfig,
    pub quantile_levels: Vec<f64>,
    pub alpha: f64,
    pub back_transform: String,
    pub seed: u64,
}

/// One quantile row of the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileRow {
    pub p: f64,
    pub estimate: f64,
    pub sd: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub alpha: f64,
}

/// Fit report: everything needed to regenerate any figure or table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub schema: String,
    pub invocation: FitInvocation,
    pub transform: TransformTag,
    pub class_cuts: Vec<f64>,
    pub snapped_cuts: Vec<f64>,
    pub frequencies: Vec<u64>,
    pub converged: bool,
    pub em_iterations: usize,
    pub newton_iterations: usize,
    pub lambda_hat: f64,
    pub edf: f64,
    pub pivot: usize,
    pub theta_hat: Vec<f64>,
    pub loglik_trace: Vec<f64>,
    /// `(x, density)` samples whose trapezoid integral is one.
    pub density_curve: Vec<(f64, f64)>,
    pub quantiles: Vec<QuantileRow>,
    pub moment_diagnostics: Vec<MomentDiagnostic>,
    /// Wall-clock timings; excluded from determinism comparisons.
    pub timings: Timings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timings {
    pub total_ms: u128,
}

/// Simulation report wrapper.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReportFile {
    pub schema: String,
    pub report: grouped_density::sim::SimulationReport,
    pub timings: Timings,
}

/// Serialize a report, dropping the stated fields is left to consumers; the
/// body layout is deterministic for fixed inputs.
pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serialization")
}
