mod formats;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use formats::{
    emit_summary_json, emit_summary_table, parse_summary_table, to_json_pretty, FitInvocation,
    FitReport, QuantileRow, SimulationReportFile, SummaryTable, Timings, TransformTag,
    FIT_REPORT_SCHEMA, SIMULATION_REPORT_SCHEMA,
};
use grouped_density::diagnostics;
use grouped_density::eval;
use grouped_density::fit::{fit, FitConfig, FitResult, GroupedDataset, LambdaRule};
use grouped_density::model::MomentOrder;
use grouped_density::risk::{quantile_credible_interval, BackTransform};
use grouped_density::sim::{run_study, study_class_cuts, StudyConfig};

/// Smooth density, quantile and Value-at-Risk estimation from grouped
/// frequencies and per-class sample moments.
#[derive(Parser)]
#[command(name = "grouped-density", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a density to a summary table and report quantiles.
    Fit(FitArgs),
    /// Run the replication study against the built-in mixture truth.
    Simulate(SimulateArgs),
    /// Run the gradient and invariant self-check suites.
    Check(CheckArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Summary table (delimited text or JSON, auto-detected).
    #[arg(long)]
    data: PathBuf,
    /// Moment order to use: 0, 1, 2, 4, or "auto" for all reported columns.
    #[arg(long, default_value = "auto")]
    moments: String,
    /// Number of B-splines.
    #[arg(long, default_value_t = 25)]
    splines: usize,
    /// Number of fine bins.
    #[arg(long, default_value_t = 300)]
    bins: usize,
    /// Difference-penalty order (1-3).
    #[arg(long, default_value_t = 2)]
    penalty_order: usize,
    /// Penalty weight: "auto" or a fixed positive value.
    #[arg(long, default_value = "auto", allow_hyphen_values = true)]
    lambda: String,
    /// Comma-separated quantile levels for the report table.
    #[arg(long, default_value = "0.5,0.9,0.95,0.99")]
    quantiles: String,
    /// Credible-interval level alpha.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Back-transform for reported quantiles: auto, none or exp10.
    /// "auto" uses exp10 when the data file is tagged log10.
    #[arg(long, default_value = "auto")]
    back_transform: String,
    /// Report destination (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed echoed into the report (the fit itself is deterministic).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for plot-ready histogram and curve files.
    #[arg(long)]
    plot_dir: Option<PathBuf>,
    /// Also write a static SVG next to the plot data.
    #[arg(long, default_value_t = false)]
    svg: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of replicates per cell.
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Sample size per replicate.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// 3, 5, or explicit comma-separated cut points.
    #[arg(long, default_value = "3")]
    classes: String,
    /// Moment order (1, 2 or 4).
    #[arg(long, default_value_t = 4)]
    moments: usize,
    /// Base seed; replicates use per-replicate generator streams.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Report destination (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the full grid n x classes x order instead of a single cell.
    #[arg(long, default_value_t = false)]
    full_grid: bool,
}

#[derive(Args)]
struct CheckArgs {
    /// Run the finite-difference gradient suite.
    #[arg(long, default_value_t = false)]
    gradients: bool,
    /// Run the structural invariant suite.
    #[arg(long, default_value_t = false)]
    invariants: bool,
    /// Seed for the randomized check points.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

const EXIT_OK: u8 = 0;
const EXIT_VALIDATION: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;

fn fail(code: &str, message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error[{code}]: {message}");
    ExitCode::from(EXIT_VALIDATION)
}

fn main() -> ExitCode {
    // Map usage errors onto the validation exit code; clap's default (2)
    // is reserved for non-convergence and failed checks.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::from(EXIT_OK);
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    match cli.command {
        Command::Fit(args) => run_fit(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Check(args) => run_check(args),
    }
}

/// Write atomically: temp file in the target directory, then rename.
fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut temp = path.as_os_str().to_owned();
    temp.push(".tmp");
    let temp = PathBuf::from(temp);
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&temp, contents)?;
    std::fs::rename(&temp, path)
}

fn emit_output(out: Option<&Path>, contents: &str) -> std::io::Result<()> {
    match out {
        Some(path) => write_atomic(path, contents),
        None => {
            println!("{contents}");
            Ok(())
        }
    }
}

fn parse_levels(text: &str) -> Result<Vec<f64>, String> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|piece| {
            piece
                .trim()
                .parse::<f64>()
                .map_err(|_| format!("bad quantile level {piece:?}"))
                .and_then(|p| {
                    if p > 0.0 && p < 1.0 {
                        Ok(p)
                    } else {
                        Err(format!("quantile level {p} outside (0, 1)"))
                    }
                })
        })
        .collect()
}

fn run_fit(args: FitArgs) -> ExitCode {
    let started = Instant::now();
    let text = match std::fs::read_to_string(&args.data) {
        Ok(t) => t,
        Err(e) => return fail("io", format!("{}: {e}", args.data.display())),
    };
    let table: SummaryTable = match parse_summary_table(&text) {
        Ok(t) => t,
        Err(e) => return fail("format", e),
    };

    let dataset = match args.moments.as_str() {
        "auto" => table.dataset.clone(),
        other => {
            let requested = match other.parse::<usize>().map(MomentOrder::from_count) {
                Ok(Ok(order)) => order,
                _ => return fail("validation", format!("bad --moments value {other:?}")),
            };
            match table.dataset.with_order(requested) {
                Ok(d) => d,
                Err(e) => return fail(e.code(), e),
            }
        }
    };

    let lambda = match args.lambda.as_str() {
        "auto" => LambdaRule::Auto { initial: 1.0 },
        other => match other.parse::<f64>() {
            Ok(v) if v > 0.0 => LambdaRule::Fixed(v),
            _ => return fail("validation", format!("bad --lambda value {other:?}")),
        },
    };
    let config = FitConfig {
        spline_count: args.splines,
        target_bins: args.bins,
        penalty_order: args.penalty_order,
        lambda,
        ..FitConfig::default()
    };

    let levels = match parse_levels(&args.quantiles) {
        Ok(l) => l,
        Err(m) => return fail("validation", m),
    };
    if !(args.alpha > 0.0 && args.alpha <= 1.0) {
        return fail("validation", format!("alpha {} outside (0, 1]", args.alpha));
    }
    let back_transform = match args.back_transform.as_str() {
        "none" => BackTransform::None,
        "exp10" => BackTransform::Exp10,
        "auto" => match table.transform {
            TransformTag::Log10 => BackTransform::Exp10,
            TransformTag::None => BackTransform::None,
        },
        other => return fail("validation", format!("bad --back-transform value {other:?}")),
    };

    let result = match fit(&dataset, &config) {
        Ok(r) => r,
        Err(e) => return fail(e.code(), e),
    };

    let report = match build_report(
        &args, &table, &dataset, &result, &levels, back_transform, started,
    ) {
        Ok(r) => r,
        Err(e) => return fail(e.code(), e),
    };

    if let Some(dir) = &args.plot_dir {
        let hist = plot::histogram_csv(&dataset);
        let curve = plot::curve_csv(&report);
        let outcome = write_atomic(&dir.join("histogram.csv"), &hist)
            .and_then(|_| write_atomic(&dir.join("density_curve.csv"), &curve))
            .and_then(|_| {
                if args.svg {
                    write_atomic(&dir.join("figure.svg"), &plot::svg(&dataset, &report))
                } else {
                    Ok(())
                }
            });
        if let Err(e) = outcome {
            return fail("io", format!("{}: {e}", dir.display()));
        }
    }

    if let Err(e) = emit_output(args.out.as_deref(), &to_json_pretty(&report)) {
        return fail("io", e);
    }
    if report.converged {
        ExitCode::from(EXIT_OK)
    } else {
        ExitCode::from(EXIT_NOT_CONVERGED)
    }
}

fn build_report(
    args: &FitArgs,
    table: &SummaryTable,
    dataset: &GroupedDataset,
    result: &FitResult,
    levels: &[f64],
    back_transform: BackTransform,
    started: Instant,
) -> grouped_density::Result<FitReport> {
    let fitted = result.fitted_density();

    let mut quantiles = Vec::with_capacity(levels.len());
    for &p in levels {
        let estimate = quantile_credible_interval(p, args.alpha, &fitted, &result.information)?;
        quantiles.push(QuantileRow {
            p,
            estimate: back_transform.apply(estimate.q_hat),
            sd: estimate.s_q,
            ci_lower: back_transform.apply(estimate.ci_lower),
            ci_upper: back_transform.apply(estimate.ci_upper),
            alpha: args.alpha,
        });
    }

    // Density curve on a uniform grid, renormalised so its own trapezoid
    // integral is exactly one.
    let points = 801usize;
    let (lo, hi) = fitted.support();
    let step = (hi - lo) / (points - 1) as f64;
    let mut curve: Vec<(f64, f64)> = (0..points)
        .map(|i| {
            let x = lo + i as f64 * step;
            (x, fitted.density_at(x))
        })
        .collect();
    let trapezoid: f64 = curve
        .windows(2)
        .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
        .sum();
    for (_, f) in curve.iter_mut() {
        *f /= trapezoid;
    }

    let moment_diagnostics = if dataset.order().count() >= 1 {
        eval::moment_diagnostics(result, dataset)?
    } else {
        Vec::new()
    };

    Ok(FitReport {
        schema: FIT_REPORT_SCHEMA.to_string(),
        invocation: FitInvocation {
            data_path: args.data.display().to_string(),
            moment_order: dataset.order().count(),
            fit: result.config.clone(),
            quantile_levels: levels.to_vec(),
            alpha: args.alpha,
            back_transform: match back_transform {
                BackTransform::None => "none".into(),
                BackTransform::Exp10 => "exp10".into(),
            },
            seed: args.seed,
        },
        transform: table.transform,
        class_cuts: dataset.class_cuts().to_vec(),
        snapped_cuts: result.class_cuts().to_vec(),
        frequencies: dataset.freqs().to_vec(),
        converged: result.converged,
        em_iterations: result.em_iterations,
        newton_iterations: result.newton_iterations,
        lambda_hat: result.lambda_hat,
        edf: result.edf,
        pivot: result.pivot,
        theta_hat: result.theta_hat.as_vector().iter().copied().collect(),
        loglik_trace: result.loglik_trace.clone(),
        density_curve: curve,
        quantiles,
        moment_diagnostics,
        timings: Timings {
            total_ms: started.elapsed().as_millis(),
        },
    })
}

fn run_simulate(args: SimulateArgs) -> ExitCode {
    let started = Instant::now();
    let single_cuts = match parse_classes(&args.classes) {
        Ok(c) => c,
        Err(m) => return fail("validation", m),
    };
    if args.reps == 0 {
        return fail("validation", "--reps must be at least 1");
    }

    let contents = if args.full_grid {
        let mut cells = Vec::new();
        for n in [250usize, 1000, 3000] {
            for classes in [3usize, 5] {
                for order in [1usize, 2, 4] {
                    let cuts = study_class_cuts(classes).expect("preset cuts");
                    let config = StudyConfig::new(args.reps, n, cuts, order, args.seed);
                    match run_study(&config) {
                        Ok(report) => cells.push(report),
                        Err(e) => return fail(e.code(), e),
                    }
                }
            }
        }
        let wrapper = serde_json::json!({
            "schema": SIMULATION_REPORT_SCHEMA,
            "cells": cells,
            "timings": { "total_ms": started.elapsed().as_millis() },
        });
        serde_json::to_string_pretty(&wrapper).expect("report serialization")
    } else {
        if !matches!(MomentOrder::from_count(args.moments), Ok(order) if order != MomentOrder::R0) {
            return fail(
                "validation",
                format!("--moments must be 1, 2 or 4, got {}", args.moments),
            );
        }
        let config = StudyConfig::new(args.reps, args.n, single_cuts, args.moments, args.seed);
        let report = match run_study(&config) {
            Ok(r) => r,
            Err(e) => return fail(e.code(), e),
        };
        to_json_pretty(&SimulationReportFile {
            schema: SIMULATION_REPORT_SCHEMA.to_string(),
            report,
            timings: Timings {
                total_ms: started.elapsed().as_millis(),
            },
        })
    };

    if let Err(e) = emit_output(args.out.as_deref(), &contents) {
        return fail("io", e);
    }
    ExitCode::from(EXIT_OK)
}

fn parse_classes(text: &str) -> Result<Vec<f64>, String> {
    match text {
        "3" => Ok(study_class_cuts(3).expect("preset cuts")),
        "5" => Ok(study_class_cuts(5).expect("preset cuts")),
        custom => {
            let cuts: Result<Vec<f64>, _> = custom
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect();
            match cuts {
                Ok(c) if c.len() >= 2 => Ok(c),
                _ => Err(format!(
                    "--classes must be 3, 5 or comma-separated cut points, got {custom:?}"
                )),
            }
        }
    }
}

fn run_check(args: CheckArgs) -> ExitCode {
    let run_both = !args.gradients && !args.invariants;
    let mut outcomes = Vec::new();
    if args.gradients || run_both {
        outcomes.extend(diagnostics::gradient_checks(args.seed));
    }
    if args.invariants || run_both {
        outcomes.extend(diagnostics::invariant_checks(args.seed));
        outcomes.push(report_round_trip_check());
    }
    let mut all_passed = true;
    for outcome in &outcomes {
        let status = if outcome.passed { "PASS" } else { "FAIL" };
        all_passed &= outcome.passed;
        println!("{status} {} — {}", outcome.name, outcome.detail);
    }
    println!(
        "{} of {} checks passed",
        outcomes.iter().filter(|o| o.passed).count(),
        outcomes.len()
    );
    if all_passed {
        ExitCode::from(EXIT_OK)
    } else {
        ExitCode::from(EXIT_NOT_CONVERGED)
    }
}

/// Summary tables must survive an emit/parse cycle bit-exactly, in both
/// encodings.
fn report_round_trip_check() -> diagnostics::CheckOutcome {
    let dataset = diagnostics::reference_dataset();
    let delimited = emit_summary_table(&dataset, TransformTag::Log10);
    let json = emit_summary_json(&dataset, TransformTag::Log10);
    let survives = |text: &str| match parse_summary_table(text) {
        Ok(parsed) => parsed.dataset == dataset && parsed.transform == TransformTag::Log10,
        Err(_) => false,
    };
    diagnostics::CheckOutcome {
        name: "report-round-trip".into(),
        passed: survives(&delimited) && survives(&json),
        detail: "parse(emit(dataset)) reproduces the dataset exactly in both encodings".into(),
    }
}
