//! Worst-case first-order deviations of the clearing vector and of the
//! payout to society.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::clearing::clear;
use crate::error::{Error, Result};
use crate::model::FinancialSystem;
use crate::perturb::{orthonormal_basis, BasisMode, PerturbationBasis};
use crate::sensitivity::{basis_jacobian, gram_spectrum, SensitivityOperator};

/// Relative gap below which the two leading eigenvalues count as tied.
pub const DEGENERACY_TOL: f64 = 1e-9;

/// Weighting `A` applied to the derivative before taking norms.
#[derive(Debug, Clone, PartialEq)]
pub enum Normalization {
    None,
    /// `diag(p)^{-1}`: relative changes of each payment.
    Clearing,
    /// `diag(p_bar)^{-1}`: changes relative to total obligations.
    Liabilities,
    Custom(DMatrix<f64>),
}

impl Normalization {
    pub fn name(&self) -> &'static str {
        match self {
            Normalization::None => "none",
            Normalization::Clearing => "clearing",
            Normalization::Liabilities => "liabilities",
            Normalization::Custom(_) => "custom",
        }
    }

    /// The `n x n` matrix `A`, or `None` for the identity.
    pub fn matrix(
        &self,
        payments: &DVector<f64>,
        total_obligations: &DVector<f64>,
    ) -> Result<Option<DMatrix<f64>>> {
        let inverse_diag = |v: &DVector<f64>, what: &str| {
            if let Some(i) = v.iter().position(|&x| x == 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "cannot normalise by {what}: entry {i} is zero"
                )));
            }
            Ok(Some(DMatrix::from_diagonal(&v.map(|x| 1.0 / x))))
        };
        match self {
            Normalization::None => Ok(None),
            Normalization::Clearing => inverse_diag(payments, "clearing payments"),
            Normalization::Liabilities => inverse_diag(total_obligations, "total obligations"),
            Normalization::Custom(a) => {
                if a.ncols() != payments.len() {
                    return Err(Error::Dimension(format!(
                        "normalisation matrix has {} columns, expected {}",
                        a.ncols(),
                        payments.len()
                    )));
                }
                Ok(Some(a.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtremalReport {
    /// Largest squared (normalised) deviation, or the signed society change.
    pub objective: f64,
    /// Deviation: `sqrt(objective) / |A p|`. Society: `objective / (pi0^T p)`.
    pub relative_objective: Option<f64>,
    /// The optimal direction, unit Frobenius norm when present.
    pub optimizer: Option<DMatrix<f64>>,
    /// Basis coefficients of the optimizer.
    pub coefficients: Option<DVector<f64>>,
    /// Both `optimizer` and its negative are optimal.
    pub sign_ambiguous: bool,
    /// The leading eigenvalue is not simple.
    pub degenerate: bool,
    pub bounds: Option<Bounds>,
    pub normalization: &'static str,
    pub dimension: usize,
}

/// Flip `z` so that the largest-magnitude entry of `sum z_k E_k` is positive.
fn orient(basis: &PerturbationBasis, z: DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let m = basis.combine(&z);
    let largest = m
        .iter()
        .copied()
        .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        .unwrap_or(0.0);
    if largest < 0.0 {
        (-z, -m)
    } else {
        (z, m)
    }
}

/// Worst case from a prebuilt operator.
pub fn worst_case_from_operator(
    system: &FinancialSystem,
    op: &SensitivityOperator<'_>,
    normalization: &Normalization,
) -> Result<ExtremalReport> {
    let basis = op.basis();
    let d = basis.dim();
    let payments = &op.solution().payments;
    let a = normalization.matrix(payments, system.total_obligations())?;
    let reference = match &a {
        Some(a) => (a * payments).norm(),
        None => payments.norm(),
    };
    let mut report = ExtremalReport {
        objective: 0.0,
        relative_objective: None,
        optimizer: None,
        coefficients: None,
        sign_ambiguous: false,
        degenerate: false,
        bounds: None,
        normalization: normalization.name(),
        dimension: d,
    };
    if d == 0 {
        return Ok(report);
    }

    let spectrum;
    let (eigenvalues, eigenvectors) = match &a {
        None => (op.eigenvalues(), op.eigenvectors()),
        Some(a) => {
            spectrum = gram_spectrum(&(a * op.jacobian()));
            (&spectrum.0, &spectrum.1)
        }
    };
    let top = eigenvalues[0];
    report.objective = top;
    report.relative_objective = (reference > 0.0).then(|| top.sqrt() / reference);
    report.sign_ambiguous = true;
    report.degenerate = d > 1 && eigenvalues[1] >= top * (1.0 - DEGENERACY_TOL);
    let z = if top > 0.0 {
        eigenvectors.column(0).into_owned()
    } else {
        let mut e = DVector::zeros(d);
        e[0] = 1.0;
        e
    };
    let (z, m) = orient(basis, z);
    report.optimizer = Some(m);
    report.coefficients = Some(z);
    Ok(report)
}

/// Largest squared first-order deviation `|A D_Delta p|^2` over unit
/// directions in the span of `basis`, and the direction attaining it.
pub fn worst_case_deviation(
    system: &FinancialSystem,
    basis: &PerturbationBasis,
    normalization: &Normalization,
) -> Result<ExtremalReport> {
    let sol = clear(system)?;
    let op = basis_jacobian(system, &sol, basis)?;
    worst_case_from_operator(system, &op, normalization)
}

/// Worst case over the fixed-support space (lower) and over the space of a
/// completely connected network with the same obligations (upper).
pub fn deviation_bounds(system: &FinancialSystem, normalization: &Normalization) -> Result<Bounds> {
    let sol = clear(system)?;
    let pi = system.relative_liabilities();
    let p_bar = system.total_obligations();
    let objective = |mode| -> Result<f64> {
        let basis = orthonormal_basis(pi, p_bar, mode);
        let op = basis_jacobian(system, &sol, &basis)?;
        Ok(worst_case_from_operator(system, &op, normalization)?.objective)
    };
    Ok(Bounds {
        lower: objective(BasisMode::FixedSupport)?,
        upper: objective(BasisMode::Complete)?,
    })
}

fn society_weights(system: &FinancialSystem) -> Result<&DVector<f64>> {
    system
        .society_weights()
        .ok_or_else(|| Error::InvalidArgument("system has no society node".into()))
}

/// Society shortfall from a prebuilt operator.
pub fn society_from_operator(
    system: &FinancialSystem,
    op: &SensitivityOperator<'_>,
) -> Result<ExtremalReport> {
    let pi0 = society_weights(system)?;
    let basis = op.basis();
    let n = system.n();
    let d = basis.dim();
    let sol = op.solution();
    let payout = pi0.dot(&sol.payments);
    let mut report = ExtremalReport {
        objective: 0.0,
        relative_objective: Some(0.0),
        optimizer: Some(DMatrix::zeros(n, n)),
        coefficients: Some(DVector::zeros(d)),
        sign_ambiguous: false,
        degenerate: false,
        bounds: None,
        normalization: Normalization::None.name(),
        dimension: d,
    };
    let defaults = sol.num_defaults();
    if d == 0 || defaults == 0 || defaults == n {
        return Ok(report);
    }
    let g = op.society_gradient(pi0);
    let s = g.norm();
    if s == 0.0 {
        return Ok(report);
    }
    let z = -g / s;
    report.objective = -s;
    report.relative_objective = (payout > 0.0).then(|| -s / payout);
    report.optimizer = Some(basis.combine(&z));
    report.coefficients = Some(z);
    Ok(report)
}

/// Most negative first-order change `pi0^T D_Delta p` of the payout to
/// society over unit directions in the span of `basis`. Zero when no bank
/// or every bank defaults.
pub fn worst_society_shortfall(
    system: &FinancialSystem,
    basis: &PerturbationBasis,
) -> Result<ExtremalReport> {
    society_weights(system)?;
    let sol = clear(system)?;
    let op = basis_jacobian(system, &sol, basis)?;
    society_from_operator(system, &op)
}

/// Society shortfall over the complete space (lower) and the fixed-support
/// space (upper).
pub fn society_bounds(system: &FinancialSystem) -> Result<Bounds> {
    society_weights(system)?;
    let sol = clear(system)?;
    let pi = system.relative_liabilities();
    let p_bar = system.total_obligations();
    let objective = |mode| -> Result<f64> {
        let basis = orthonormal_basis(pi, p_bar, mode);
        let op = basis_jacobian(system, &sol, &basis)?;
        Ok(society_from_operator(system, &op)?.objective)
    };
    Ok(Bounds {
        lower: objective(BasisMode::Complete)?,
        upper: objective(BasisMode::FixedSupport)?,
    })
}
