use std::io::Write;
use std::path::Path;

use clearnet::clearing::{clear, payments_unchecked};
use clearnet::extremal::{society_from_operator, worst_case_from_operator};
use clearnet::model::{load_system, matrix_from_rows, matrix_to_rows, Issue};
use clearnet::perturb::{h_star_star_directional, Direction};
use clearnet::stochastic::{confidence_bands, deviation_distribution, society_distribution, BandRow};
use clearnet::{
    basis_jacobian, deviation_bounds, directional_derivative, h_star, orthonormal_basis,
    society_bounds, taylor_clearing, BasisMode, Error,
    FinancialSystem, Normalization, PerturbationMatrix, Result, SupportMode,
};
use log::{info, warn};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::{sink, Cli, Command, Format, Global};

/// Run the selected command; the value is the process exit code.
pub fn run(cli: &Cli) -> Result<u8> {
    let g = &cli.global;
    if matches!(cli.command, Command::Validate) {
        return validate(g);
    }
    let system = load(g)?;
    match &cli.command {
        Command::Clear => cmd_clear(g, &system),
        Command::Sens(a) => cmd_sens(g, &system, &a.delta, a.h, a.rewiring),
        Command::Worst => cmd_worst(g, &system),
        Command::Bounds => cmd_bounds(g, &system),
        Command::Basis { dump } => cmd_basis(g, &system, *dump),
        Command::Dist(a) => cmd_dist(g, &system, a.law.into(), a.samples, a.samples_out.as_deref()),
        Command::Bands(a) => cmd_bands(g, &system, a.law.into(), &a.h_grid, &a.levels, a.samples),
        Command::Validate => unreachable!(),
    }?;
    Ok(0)
}

fn input(g: &Global) -> Result<&Path> {
    g.input
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--input is required".into()))
}

fn load(g: &Global) -> Result<FinancialSystem> {
    let system = load_system(input(g)?, g.side.as_deref())?;
    info!("loaded {} banks", system.n());
    Ok(system)
}

fn basis_mode(g: &Global) -> BasisMode {
    if g.complete {
        BasisMode::Complete
    } else {
        BasisMode::FixedSupport
    }
}

fn write_json<T: Serialize>(g: &Global, value: &T) -> Result<()> {
    let mut out = sink(g.output.as_ref())?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::Parse(e.to_string()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

fn write_csv<T: Serialize>(path: Option<&std::path::PathBuf>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink(path)?);
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn write_matrix_csv(g: &Global, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(sink(g.output.as_ref())?);
    for row in matrix_to_rows(m) {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// A possibly infinite value: JSON `null` plus a text sidecar.
fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn text(v: f64) -> String {
    if v.is_finite() {
        format!("{v:e}")
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Serialize)]
struct ClearReport {
    payments: Vec<f64>,
    defaults: Vec<bool>,
    society_payout: Option<f64>,
    iterations: usize,
}

#[derive(Serialize)]
struct ClearRow {
    bank: usize,
    payment: f64,
    default: bool,
}

fn cmd_clear(g: &Global, system: &FinancialSystem) -> Result<()> {
    let sol = clear(system)?;
    match g.format.unwrap_or(Format::Json) {
        Format::Json => write_json(
            g,
            &ClearReport {
                payments: sol.payments.iter().copied().collect(),
                defaults: sol.defaults.clone(),
                society_payout: sol.society_payout,
                iterations: sol.iterations,
            },
        ),
        Format::Csv => {
            let rows: Vec<ClearRow> = (0..system.n())
                .map(|i| ClearRow {
                    bank: i,
                    payment: sol.payments[i],
                    default: sol.defaults[i],
                })
                .collect();
            write_csv(g.output.as_ref(), &rows)
        }
    }
}

#[derive(Serialize)]
struct TaylorCheck {
    h: f64,
    clamped: bool,
    resolvent: Vec<f64>,
    resolved: Vec<f64>,
    max_abs_difference: f64,
}

#[derive(Serialize)]
struct SensReport {
    derivative: Vec<f64>,
    h_star: Option<f64>,
    h_star_text: String,
    h_star_star: Option<f64>,
    h_star_star_text: String,
    h_star_star_lower: Option<f64>,
    h_star_star_upper: Option<f64>,
    mode: SupportMode,
    taylor_check: Option<TaylorCheck>,
}

pub fn read_delta(path: &Path) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = serde_json::from_reader(std::fs::File::open(path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    matrix_from_rows(&rows)
}

fn cmd_sens(g: &Global, system: &FinancialSystem, delta: &Path, h: Option<f64>, rewiring: bool) -> Result<()> {
    let mode = if rewiring {
        SupportMode::Rewiring
    } else {
        SupportMode::FixedSupport
    };
    let delta = read_delta(delta)?;
    if delta.shape() != (system.n(), system.n()) {
        return Err(Error::Dimension(format!(
            "perturbation is {}x{}, system has {} banks",
            delta.nrows(),
            delta.ncols(),
            system.n()
        )));
    }
    let delta = PerturbationMatrix::new(delta, system, mode)?.into_inner();
    let sol = clear(system)?;
    let derivative = directional_derivative(system, &sol, &delta)?;
    let direction = if rewiring { Direction::Positive } else { Direction::Both };
    let bounds = h_star_star_directional(system, &delta, direction)?;
    let hs = h_star(system.relative_liabilities(), &delta, system.total_obligations());

    let taylor_check = match h {
        None => None,
        Some(requested) => {
            let hss = bounds.h_star_star;
            let (lo, hi) = if rewiring { (0.0, hss) } else { (-hss, hss) };
            let h = requested.clamp(lo, hi);
            let clamped = h != requested;
            if clamped {
                warn!("h = {requested} is outside [{lo}, {hi}]; clamped to {h}");
            }
            let resolvent = taylor_clearing(system, &sol, &delta, h, mode)?;
            let perturbed = system.with_relative_liabilities(&(system.relative_liabilities() + &delta * h))?;
            let resolved = payments_unchecked(&perturbed)?;
            Some(TaylorCheck {
                h,
                clamped,
                max_abs_difference: (&resolvent - &resolved).amax(),
                resolvent: resolvent.iter().copied().collect(),
                resolved: resolved.iter().copied().collect(),
            })
        }
    };

    write_json(
        g,
        &SensReport {
            derivative: derivative.iter().copied().collect(),
            h_star: finite(hs),
            h_star_text: text(hs),
            h_star_star: finite(bounds.h_star_star),
            h_star_star_text: text(bounds.h_star_star),
            h_star_star_lower: finite(bounds.lower),
            h_star_star_upper: finite(bounds.upper),
            mode,
            taylor_check,
        },
    )
}

#[derive(Serialize)]
struct BoundsReport {
    lower: f64,
    upper: f64,
}

#[derive(Serialize)]
struct WorstReport {
    quantity: &'static str,
    objective: f64,
    relative_objective: Option<f64>,
    optimizer: Option<Vec<Vec<f64>>>,
    coefficients: Option<Vec<f64>>,
    bounds: BoundsReport,
    degenerate: bool,
    sign_ambiguous: bool,
    normalization: &'static str,
    basis_mode: BasisMode,
    dimension: usize,
}

fn bounds_for(g: &Global, system: &FinancialSystem) -> Result<BoundsReport> {
    let b = if g.society {
        society_bounds(system)?
    } else {
        deviation_bounds(system, &Normalization::from(g.normalize))?
    };
    Ok(BoundsReport {
        lower: b.lower,
        upper: b.upper,
    })
}

fn cmd_worst(g: &Global, system: &FinancialSystem) -> Result<()> {
    let sol = clear(system)?;
    let mode = basis_mode(g);
    let basis = orthonormal_basis(system.relative_liabilities(), system.total_obligations(), mode);
    let op = basis_jacobian(system, &sol, &basis)?;
    let report = if g.society {
        society_from_operator(system, &op)?
    } else {
        worst_case_from_operator(system, &op, &Normalization::from(g.normalize))?
    };
    if g.format == Some(Format::Csv) {
        let m = report
            .optimizer
            .unwrap_or_else(|| DMatrix::zeros(system.n(), system.n()));
        return write_matrix_csv(g, &m);
    }
    write_json(
        g,
        &WorstReport {
            quantity: if g.society { "society-change" } else { "deviation-squared" },
            objective: report.objective,
            relative_objective: report.relative_objective,
            optimizer: report.optimizer.as_ref().map(matrix_to_rows),
            coefficients: report.coefficients.map(|z| z.iter().copied().collect()),
            bounds: bounds_for(g, system)?,
            degenerate: report.degenerate,
            sign_ambiguous: report.sign_ambiguous,
            normalization: report.normalization,
            basis_mode: mode,
            dimension: report.dimension,
        },
    )
}

fn cmd_bounds(g: &Global, system: &FinancialSystem) -> Result<()> {
    let b = bounds_for(g, system)?;
    match g.format.unwrap_or(Format::Json) {
        Format::Json => write_json(g, &b),
        Format::Csv => write_csv(g.output.as_ref(), &[b]),
    }
}

#[derive(Serialize)]
struct BasisReport {
    dimension: usize,
    mode: BasisMode,
    free_entries: usize,
    matrices: Option<Vec<Vec<Vec<f64>>>>,
}

fn cmd_basis(g: &Global, system: &FinancialSystem, dump: bool) -> Result<()> {
    let mode = basis_mode(g);
    let basis = orthonormal_basis(system.relative_liabilities(), system.total_obligations(), mode);
    write_json(
        g,
        &BasisReport {
            dimension: basis.dim(),
            mode,
            free_entries: basis.support().count(),
            matrices: dump.then(|| basis.matrices().iter().map(matrix_to_rows).collect()),
        },
    )
}

#[derive(Serialize)]
struct SampleRow {
    value: f64,
}

fn cmd_dist(
    g: &Global,
    system: &FinancialSystem,
    law: clearnet::Law,
    samples: usize,
    samples_out: Option<&Path>,
) -> Result<()> {
    if samples == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let sol = clear(system)?;
    let basis = orthonormal_basis(system.relative_liabilities(), system.total_obligations(), basis_mode(g));
    if basis.is_empty() {
        return Err(Error::InvalidArgument("the perturbation space is trivial (d = 0)".into()));
    }
    let op = basis_jacobian(system, &sol, &basis)?;
    let report = if g.society {
        let pi0 = system
            .society_weights()
            .ok_or_else(|| Error::InvalidArgument("system has no society node".into()))?;
        society_distribution(&op, pi0, law, samples, g.seed)
    } else {
        deviation_distribution(&op, law, samples, g.seed)
    };
    let rows: Vec<SampleRow> = report.samples.iter().map(|&value| SampleRow { value }).collect();
    if let Some(path) = samples_out {
        write_csv(Some(&path.to_path_buf()), &rows)?;
    }
    match g.format.unwrap_or(Format::Json) {
        Format::Json => write_json(g, &report),
        Format::Csv => write_csv(g.output.as_ref(), &rows),
    }
}

#[derive(Serialize)]
struct BandRecord {
    h: f64,
    level: f64,
    low: f64,
    high: f64,
    rejected_fraction: f64,
    first_order_low: f64,
    first_order_high: f64,
    seed: u64,
}

impl BandRecord {
    fn new(r: BandRow, seed: u64) -> Self {
        BandRecord {
            h: r.h,
            level: r.level,
            low: r.low,
            high: r.high,
            rejected_fraction: r.rejected_fraction,
            first_order_low: r.first_order_low,
            first_order_high: r.first_order_high,
            seed,
        }
    }
}

#[derive(Serialize)]
struct BandsReport {
    seed: u64,
    samples: usize,
    rows: Vec<BandRow>,
}

fn cmd_bands(
    g: &Global,
    system: &FinancialSystem,
    law: clearnet::Law,
    h_grid: &[f64],
    levels: &[f64],
    samples: usize,
) -> Result<()> {
    let basis = orthonormal_basis(system.relative_liabilities(), system.total_obligations(), basis_mode(g));
    let rows = confidence_bands(system, &basis, law, h_grid, levels, samples, g.seed)?;
    match g.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(sink(g.output.as_ref())?);
            for row in rows {
                w.serialize(BandRecord::new(row, g.seed)).map_err(csv_error)?;
            }
            w.flush()?;
            Ok(())
        }
        Format::Json => write_json(
            g,
            &BandsReport {
                seed: g.seed,
                samples,
                rows,
            },
        ),
    }
}

#[derive(Serialize)]
struct ValidateReport {
    valid: bool,
    issues: Vec<Issue>,
    regular: Option<bool>,
    witness: Option<Vec<usize>>,
}

/// Exit 0 when the system is valid and regular, 1 when an invariant is
/// violated, 2 when it is valid but not regular.
fn validate(g: &Global) -> Result<u8> {
    let (report, code) = match load_system(input(g)?, g.side.as_deref()) {
        Ok(system) => {
            let r = system.regularity();
            let code = if r.regular { 0 } else { 2 };
            (
                ValidateReport {
                    valid: true,
                    issues: Vec::new(),
                    regular: Some(r.regular),
                    witness: r.witness,
                },
                code,
            )
        }
        Err(Error::Invalid(v)) => (
            ValidateReport {
                valid: false,
                issues: v.issues,
                regular: None,
                witness: None,
            },
            1,
        ),
        Err(e) => return Err(e),
    };
    write_json(g, &report)?;
    Ok(code)
}
