//! Clearing vectors via the fictitious default algorithm.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{is_regular, FinancialSystem};

/// Relative width of the "brink of default" band around `p_bar_i`.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// Fixed-point residual allowed after clearing, relative to `max(1, |p_bar|_inf)`.
pub const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ClearingSolution {
    pub payments: DVector<f64>,
    /// `true` for banks whose incoming value falls strictly short of `p_bar`.
    pub defaults: Vec<bool>,
    pub society_payout: Option<f64>,
    /// Number of fictitious-default rounds that required a linear solve.
    pub iterations: usize,
}

impl ClearingSolution {
    /// The default indicator `d` as a 0/1 vector.
    pub fn default_indicator(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.defaults.len(),
            self.defaults.iter().map(|&b| if b { 1.0 } else { 0.0 }),
        )
    }

    pub fn default_set(&self) -> Vec<usize> {
        self.defaults
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn num_defaults(&self) -> usize {
        self.defaults.iter().filter(|&&b| b).count()
    }
}

/// `x + Pi^T p`: the value each bank has available.
pub fn incoming_value(system: &FinancialSystem, payments: &DVector<f64>) -> DVector<f64> {
    system.external_assets() + system.relative_liabilities().tr_mul(payments)
}

/// `I - diag(d) Pi^T`.
pub(crate) fn multiplier_system(pi: &DMatrix<f64>, defaults: &[bool]) -> DMatrix<f64> {
    let n = pi.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        if defaults[i] {
            id - pi[(j, i)]
        } else {
            id
        }
    })
}

fn solve_given_defaults(system: &FinancialSystem, defaults: &[bool]) -> Result<DVector<f64>> {
    let n = system.n();
    let a = multiplier_system(system.relative_liabilities(), defaults);
    let p_bar = system.total_obligations();
    let x = system.external_assets();
    let rhs = DVector::from_fn(n, |i, _| if defaults[i] { x[i] } else { p_bar[i] });
    a.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("singular system in fictitious default round".into()))
}

fn detect_defaults(system: &FinancialSystem, payments: &DVector<f64>) -> Vec<bool> {
    let v = incoming_value(system, payments);
    let p_bar = system.total_obligations();
    (0..system.n())
        .map(|i| p_bar[i] > 0.0 && v[i] < p_bar[i])
        .collect()
}

/// Run the fictitious default algorithm, returning the default set of each
/// round (starting from the all-solvent guess) and the final payments.
fn fictitious_default(system: &FinancialSystem) -> Result<(Vec<Vec<bool>>, DVector<f64>)> {
    let n = system.n();
    let mut payments = system.total_obligations().clone();
    let mut rounds = vec![vec![false; n]];
    for _ in 0..=n {
        let next = detect_defaults(system, &payments);
        if &next == rounds.last().unwrap() {
            return Ok((rounds, payments));
        }
        payments = solve_given_defaults(system, &next)?;
        rounds.push(next);
    }
    Err(Error::Numeric(
        "fictitious default did not stabilise within n rounds".into(),
    ))
}

/// Default sets visited by the fictitious default algorithm, beginning with
/// the empty set. Consecutive sets are nested.
pub fn default_sequence(system: &FinancialSystem) -> Result<Vec<Vec<bool>>> {
    ensure_regular(system)?;
    Ok(fictitious_default(system)?.0)
}

fn ensure_regular(system: &FinancialSystem) -> Result<()> {
    let reg = is_regular(system);
    if reg.regular {
        Ok(())
    } else {
        Err(Error::NonRegular {
            witness: reg.witness.unwrap_or_default(),
        })
    }
}

/// Default indicator of a regular system without the brink-of-default check.
/// Used when probing perturbed systems.
pub(crate) fn default_set_unchecked(system: &FinancialSystem) -> Result<Vec<bool>> {
    ensure_regular(system)?;
    let (rounds, _) = fictitious_default(system)?;
    Ok(rounds.into_iter().last().unwrap())
}

/// Payments of a regular system without the brink-of-default check.
pub fn payments_unchecked(system: &FinancialSystem) -> Result<DVector<f64>> {
    ensure_regular(system)?;
    Ok(fictitious_default(system)?.1)
}

/// First bank whose incoming value lies within the boundary band of `p_bar`.
pub(crate) fn find_boundary_bank(
    system: &FinancialSystem,
    payments: &DVector<f64>,
) -> Option<(usize, f64)> {
    let v = incoming_value(system, payments);
    let p_bar = system.total_obligations();
    (0..system.n()).find_map(|i| {
        if p_bar[i] <= 0.0 {
            return None;
        }
        let gap = v[i] - p_bar[i];
        (gap.abs() <= BOUNDARY_TOL * p_bar[i].max(1.0)).then_some((i, gap))
    })
}

/// The unique clearing vector `p = p_bar ∧ (x + Pi^T p)` of a regular system.
///
/// Starting from full payment, every round marks the banks whose incoming
/// value falls short of their obligations and re-solves the linear system
/// for the defaulting block. The default set only grows, so at most `n`
/// rounds are needed.
///
/// Fails on non-regular systems and when a bank sits on the brink of
/// default, where directional derivatives do not exist.
pub fn clear(system: &FinancialSystem) -> Result<ClearingSolution> {
    ensure_regular(system)?;
    let (rounds, payments) = fictitious_default(system)?;
    if let Some((bank, gap)) = find_boundary_bank(system, &payments) {
        return Err(Error::Boundary { bank, gap });
    }

    let p_bar = system.total_obligations();
    let v = incoming_value(system, &payments);
    let residual = (0..system.n())
        .map(|i| (payments[i] - p_bar[i].min(v[i])).abs())
        .fold(0.0, f64::max);
    let scale = p_bar.amax().max(1.0);
    if residual > RESIDUAL_TOL * scale {
        return Err(Error::Numeric(format!(
            "clearing residual {residual:e} exceeds tolerance"
        )));
    }

    let society_payout = system.society_weights().map(|w| w.dot(&payments));
    let iterations = rounds.len() - 1;
    Ok(ClearingSolution {
        payments,
        defaults: rounds.into_iter().last().unwrap(),
        society_payout,
        iterations,
    })
}

/// The network multiplier `(I - diag(d) Pi^T)^{-1}`.
///
/// Exposed for inspection; derivative computations solve against the
/// factorised matrix instead of forming this inverse.
pub fn network_multiplier(
    system: &FinancialSystem,
    solution: &ClearingSolution,
) -> Result<DMatrix<f64>> {
    let pi = system.relative_liabilities();
    let n = system.n();
    let dpt = DMatrix::from_fn(n, n, |i, j| {
        if solution.defaults[i] {
            pi[(j, i)]
        } else {
            0.0
        }
    });
    let rho = dpt
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if rho >= 1.0 {
        return Err(Error::Numeric(format!(
            "spectral radius of diag(d) Pi^T is {rho}, expected < 1"
        )));
    }
    multiplier_system(pi, &solution.defaults)
        .try_inverse()
        .ok_or_else(|| Error::Numeric("network multiplier is singular".into()))
}
