//! Directional derivatives of the clearing vector with respect to the
//! relative liabilities matrix.
//!
//! With `d` the default indicator, every derivative is driven by the
//! operator `M = (I - diag(d) Pi^T)^{-1} diag(d) Delta^T`: the first
//! derivative is `M p`, the `k`-th is `k! M^k p` and, inside the range where
//! the default set does not change, `p(Pi + h Delta) = (I - h M)^{-1} p`.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::clearing::{find_boundary_bank, multiplier_system, ClearingSolution};
use crate::error::{Error, Result};
use crate::model::FinancialSystem;
use crate::perturb::{
    h_star_star, h_star_star_directional, is_admissible, Direction, PerturbationBasis,
    SupportMode,
};

/// A factorisation of `I - diag(d) Pi^T` at a clearing solution, shared by
/// all derivative computations at that point.
#[derive(Debug, Clone)]
pub struct Linearization {
    payments: DVector<f64>,
    defaults: Vec<bool>,
    lu: LU<f64, Dyn, Dyn>,
}

impl Linearization {
    /// Fails when some bank is at the brink of default.
    pub fn new(system: &FinancialSystem, solution: &ClearingSolution) -> Result<Self> {
        if solution.payments.len() != system.n() {
            return Err(Error::Dimension(format!(
                "solution has {} payments for {} banks",
                solution.payments.len(),
                system.n()
            )));
        }
        if let Some((bank, gap)) = find_boundary_bank(system, &solution.payments) {
            return Err(Error::Boundary { bank, gap });
        }
        let lu = multiplier_system(system.relative_liabilities(), &solution.defaults).lu();
        if !lu.is_invertible() {
            return Err(Error::Numeric("I - diag(d) Pi^T is singular".into()));
        }
        Ok(Self {
            payments: solution.payments.clone(),
            defaults: solution.defaults.clone(),
            lu,
        })
    }

    pub fn payments(&self) -> &DVector<f64> {
        &self.payments
    }

    fn mask(&self, v: &mut DVector<f64>) {
        for (x, &d) in v.iter_mut().zip(&self.defaults) {
            if !d {
                *x = 0.0;
            }
        }
    }

    /// `M v`.
    pub fn apply(&self, delta: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut w = delta.tr_mul(v);
        self.mask(&mut w);
        self.lu.solve(&w).expect("factorisation checked invertible")
    }

    /// `D_Delta p = M p`.
    pub fn derivative(&self, delta: &DMatrix<f64>) -> DVector<f64> {
        self.apply(delta, &self.payments)
    }

    /// `k! M^k p` by `k` applications of `M`.
    pub fn kth_derivative(&self, delta: &DMatrix<f64>, k: u32) -> DVector<f64> {
        let mut v = self.payments.clone();
        let mut factorial = 1.0;
        for j in 1..=k {
            v = self.apply(delta, &v);
            factorial *= j as f64;
        }
        v * factorial
    }

    /// The operator `M` as a dense matrix.
    pub fn operator(&self, delta: &DMatrix<f64>) -> DMatrix<f64> {
        let mut rhs = delta.transpose();
        for (i, &d) in self.defaults.iter().enumerate() {
            if !d {
                rhs.row_mut(i).fill(0.0);
            }
        }
        self.lu.solve(&rhs).expect("factorisation checked invertible")
    }

    /// Spectral radius of `M`.
    pub fn spectral_radius(&self, delta: &DMatrix<f64>) -> f64 {
        self.operator(delta)
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// `(I - h M)^{-1} p` without any range check.
    pub fn resolvent(&self, delta: &DMatrix<f64>, h: f64) -> Result<DVector<f64>> {
        if h == 0.0 {
            return Ok(self.payments.clone());
        }
        let n = self.payments.len();
        let a = DMatrix::identity(n, n) - self.operator(delta) * h;
        let y = a
            .lu()
            .solve(&self.payments)
            .ok_or_else(|| Error::Numeric(format!("I - h M is singular at h = {h}")))?;
        if y.iter().all(|v| v.is_finite()) {
            Ok(y)
        } else {
            Err(Error::Numeric(format!("I - h M is numerically singular at h = {h}")))
        }
    }
}

fn ensure_admissible(system: &FinancialSystem, delta: &DMatrix<f64>, mode: SupportMode) -> Result<()> {
    let check = is_admissible(
        delta,
        system.relative_liabilities(),
        system.total_obligations(),
        mode,
    );
    if check.admissible {
        Ok(())
    } else {
        Err(Error::Inadmissible(check.violations))
    }
}

/// `(I - diag(d) Pi^T)^{-1} diag(d) Delta^T p(Pi)`. Accepts perturbations
/// admissible in either support mode.
pub fn directional_derivative(
    system: &FinancialSystem,
    solution: &ClearingSolution,
    delta: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    ensure_admissible(system, delta, SupportMode::Rewiring)?;
    Ok(Linearization::new(system, solution)?.derivative(delta))
}

/// `k`-th directional derivative; `k = 0` gives `p(Pi)`.
pub fn kth_derivative(
    system: &FinancialSystem,
    solution: &ClearingSolution,
    delta: &DMatrix<f64>,
    k: u32,
) -> Result<DVector<f64>> {
    ensure_admissible(system, delta, SupportMode::Rewiring)?;
    Ok(Linearization::new(system, solution)?.kth_derivative(delta, k))
}

/// `p(Pi + h Delta)` through the resolvent `(I - h M)^{-1} p(Pi)`.
///
/// Fixed-support perturbations are accepted for `-h** <= h <= h**`
/// (bounds taken separately on each side). Rewiring perturbations only for
/// `0 <= h <= h**` on the positive side with `h rho(M) < 1`.
pub fn taylor_clearing(
    system: &FinancialSystem,
    solution: &ClearingSolution,
    delta: &DMatrix<f64>,
    h: f64,
    mode: SupportMode,
) -> Result<DVector<f64>> {
    ensure_admissible(system, delta, mode)?;
    let lin = Linearization::new(system, solution)?;
    match mode {
        SupportMode::FixedSupport => {
            let bounds = h_star_star(system, delta)?;
            if !bounds.contains(h) {
                return Err(Error::InvalidArgument(format!(
                    "h = {h} outside the range [-{}, {}] where the default set is unchanged",
                    bounds.lower, bounds.upper
                )));
            }
        }
        SupportMode::Rewiring => {
            let bounds = h_star_star_directional(system, delta, Direction::Positive)?;
            if h < 0.0 || h > bounds.upper {
                return Err(Error::InvalidArgument(format!(
                    "h = {h} outside the range [0, {}] for a rewiring perturbation",
                    bounds.upper
                )));
            }
            let rho = lin.spectral_radius(delta);
            if h * rho >= 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "h = {h} is not below 1 / rho(M) = {}",
                    1.0 / rho
                )));
            }
        }
    }
    lin.resolvent(delta, h)
}

/// Derivatives along every element of an orthonormal basis together with
/// the spectrum of their Gram matrix.
#[derive(Debug, Clone)]
pub struct SensitivityOperator<'b> {
    basis: &'b PerturbationBasis,
    solution: ClearingSolution,
    jacobian: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl<'b> SensitivityOperator<'b> {
    pub fn basis(&self) -> &'b PerturbationBasis {
        self.basis
    }

    pub fn solution(&self) -> &ClearingSolution {
        &self.solution
    }

    /// The `n x d` matrix with columns `D_{E_k} p`.
    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jacobian
    }

    pub fn dim(&self) -> usize {
        self.jacobian.ncols()
    }

    /// `J^T J`.
    pub fn gram(&self) -> DMatrix<f64> {
        self.jacobian.tr_mul(&self.jacobian)
    }

    /// All `d` eigenvalues of the Gram matrix, descending and nonnegative.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors in the order of `eigenvalues`, one per
    /// column. When `d > n` only those of the nonzero eigenvalues are kept;
    /// the rest span the kernel of `J`.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().next().unwrap_or(0.0)
    }

    pub fn spectral_norm(&self) -> f64 {
        self.max_eigenvalue().sqrt()
    }

    /// `J z = D_{sum z_k E_k} p`.
    pub fn derivative(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.jacobian * z
    }

    /// `J^T pi0`, the gradient of the society payout in basis coordinates.
    pub fn society_gradient(&self, society_weights: &DVector<f64>) -> DVector<f64> {
        self.jacobian.tr_mul(society_weights)
    }
}

/// Build the basis jacobian with one shared factorisation and
/// decompose its Gram matrix.
pub fn basis_jacobian<'b>(
    system: &FinancialSystem,
    solution: &ClearingSolution,
    basis: &'b PerturbationBasis,
) -> Result<SensitivityOperator<'b>> {
    if basis.n() != system.n() {
        return Err(Error::Dimension(format!(
            "basis is for {} banks, system has {}",
            basis.n(),
            system.n()
        )));
    }
    let lin = Linearization::new(system, solution)?;
    let mut rhs = basis.transpose_apply(&solution.payments);
    for (i, &d) in solution.defaults.iter().enumerate() {
        if !d {
            rhs.row_mut(i).fill(0.0);
        }
    }
    let mut jacobian = if basis.is_empty() {
        rhs
    } else {
        lin.lu.solve(&rhs).expect("factorisation checked invertible")
    };
    for (i, &d) in solution.defaults.iter().enumerate() {
        if !d {
            jacobian.row_mut(i).fill(0.0);
        }
    }
    let (eigenvalues, eigenvectors) = gram_spectrum(&jacobian);
    Ok(SensitivityOperator {
        basis,
        solution: solution.clone(),
        jacobian,
        eigenvalues,
        eigenvectors,
    })
}

/// Sweep limit for the one-sided Jacobi iteration; convergence is
/// quadratic and typically takes under ten sweeps.
const JACOBI_SWEEPS: usize = 80;

/// Rotate pairs of columns of `w` until they are mutually orthogonal,
/// applying the same rotations to the columns of `acc`. Returns the
/// squared column norms.
fn jacobi_orthogonalize(w: &mut DMatrix<f64>, mut acc: Option<&mut DMatrix<f64>>) -> Vec<f64> {
    let cols = w.ncols();
    let mut norms: Vec<f64> = (0..cols).map(|k| w.column(k).norm_squared()).collect();
    let rotate = |m: &mut DMatrix<f64>, p: usize, q: usize, cs: f64, sn: f64| {
        for i in 0..m.nrows() {
            let (x, y) = (m[(i, p)], m[(i, q)]);
            m[(i, p)] = cs * x - sn * y;
            m[(i, q)] = sn * x + cs * y;
        }
    };
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (a, b) = (norms[p], norms[q]);
                if a == 0.0 || b == 0.0 {
                    continue;
                }
                let c = w.column(p).dot(&w.column(q));
                if c.abs() <= f64::EPSILON * (a * b).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (b - a) / (2.0 * c);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate(w, p, q, cs, sn);
                if let Some(v) = acc.as_deref_mut() {
                    rotate(v, p, q, cs, sn);
                }
                norms[p] = w.column(p).norm_squared();
                norms[q] = w.column(q).norm_squared();
            }
        }
        if !rotated {
            break;
        }
    }
    norms
}

/// Spectrum of `J^T J` for an `n x d` matrix `J` by one-sided Jacobi
/// rotations: all `d` eigenvalues in descending order with orthonormal
/// eigenvectors. When `d > n` only the columns of `J^T` are rotated; they
/// converge to `sigma_k v_k`, which yields eigenvectors for the nonzero
/// eigenvalues only.
pub(crate) fn gram_spectrum(j: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = j.shape();
    if d == 0 || n == 0 {
        return (DVector::zeros(d), DMatrix::zeros(d, 0));
    }
    if d <= n {
        // J V = U Sigma
        let mut w = j.clone();
        let mut v = DMatrix::identity(d, d);
        let norms = jacobi_orthogonalize(&mut w, Some(&mut v));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
        let vals = DVector::from_fn(d, |k, _| norms[order[k]]);
        let vecs = DMatrix::from_fn(d, d, |i, k| v[(i, order[k])]);
        return (vals, vecs);
    }
    let mut w = j.transpose();
    let norms = jacobi_orthogonalize(&mut w, None);
    let mut order: Vec<usize> = (0..n).filter(|&k| norms[k] > 0.0).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let mut vals = DVector::zeros(d);
    for (k, &o) in order.iter().enumerate() {
        vals[k] = norms[o];
    }
    let vecs = DMatrix::from_fn(d, order.len(), |i, k| w[(i, order[k])] / norms[order[k]].sqrt());
    (vals, vecs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clearing::clear;
    use crate::perturb::{orthonormal_basis, BasisMode};

    fn example_2_2() -> FinancialSystem {
        let l = DMatrix::from_row_slice(
            4,
            4,
            &[0., 7., 1., 1., 3., 0., 3., 3., 1., 1., 0., 1., 1., 1., 1., 0.],
        );
        FinancialSystem::new(l, DVector::from_vec(vec![0., 2., 2., 2.]), None).unwrap()
    }

    fn some_direction(sys: &FinancialSystem) -> DMatrix<f64> {
        let basis = orthonormal_basis(
            sys.relative_liabilities(),
            sys.total_obligations(),
            BasisMode::FixedSupport,
        );
        basis.combine(&DVector::from_vec(vec![0.3, -0.5, 0.2, 0.7, -0.1]))
    }

    #[test]
    fn no_defaults_give_zero_derivative() {
        let sys = example_2_2();
        let rich = sys
            .with_external_assets(sys.total_obligations() * 2.0)
            .unwrap();
        let sol = clear(&rich).unwrap();
        let delta = some_direction(&rich);
        let d = directional_derivative(&rich, &sol, &delta).unwrap();
        assert_eq!(d, DVector::zeros(4));
    }

    #[test]
    fn derivative_matches_central_difference() {
        let sys = example_2_2();
        let sol = clear(&sys).unwrap();
        let delta = some_direction(&sys);
        let d = directional_derivative(&sys, &sol, &delta).unwrap();
        let h = 1e-6;
        let pi = sys.relative_liabilities();
        let up = clear(&sys.with_relative_liabilities(&(pi + &delta * h)).unwrap()).unwrap();
        let dn = clear(&sys.with_relative_liabilities(&(pi - &delta * h)).unwrap()).unwrap();
        let fd = (up.payments - dn.payments) / (2.0 * h);
        assert!((&fd - &d).norm() <= 1e-4 * d.norm());
    }

    #[test]
    fn kth_derivative_low_orders() {
        let sys = example_2_2();
        let sol = clear(&sys).unwrap();
        let delta = some_direction(&sys);
        assert_eq!(kth_derivative(&sys, &sol, &delta, 0).unwrap(), sol.payments);
        let d1 = kth_derivative(&sys, &sol, &delta, 1).unwrap();
        let d = directional_derivative(&sys, &sol, &delta).unwrap();
        assert!((d1 - d).amax() <= 1e-12);
    }

    #[test]
    fn resolvent_at_zero_is_clearing_vector() {
        let sys = example_2_2();
        let sol = clear(&sys).unwrap();
        let delta = some_direction(&sys);
        let p = taylor_clearing(&sys, &sol, &delta, 0.0, SupportMode::FixedSupport).unwrap();
        assert_eq!(p, sol.payments);
    }

    #[test]
    fn inadmissible_direction_rejected() {
        let sys = example_2_2();
        let sol = clear(&sys).unwrap();
        let mut delta = DMatrix::zeros(4, 4);
        delta[(0, 0)] = 1.0;
        assert!(matches!(
            directional_derivative(&sys, &sol, &delta),
            Err(Error::Inadmissible(_))
        ));
    }

    #[test]
    fn gram_spectrum_both_routes_agree() {
        let j = DMatrix::from_fn(3, 7, |i, k| ((i * 7 + k) as f64).sin());
        let (vals, vecs) = gram_spectrum(&j);
        let mut direct: Vec<f64> = nalgebra::SymmetricEigen::new(j.tr_mul(&j))
            .eigenvalues
            .iter()
            .map(|v| v.max(0.0))
            .collect();
        direct.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(vals.len(), 7);
        for k in 0..7 {
            assert!((vals[k] - direct[k]).abs() < 1e-10);
        }
        let g = j.tr_mul(&j);
        for k in 0..vecs.ncols() {
            let v = vecs.column(k).into_owned();
            assert!((&g * &v - &v * vals[k]).amax() < 1e-10);
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_spectrum_of_rank_one_matrix_with_zero_rows() {
        let row = [-0.074272, 0.106374, 0.003366, 0.012173, 0.0, -0.05];
        for d in [4, 6] {
            let mut j = DMatrix::zeros(5, d);
            for k in 0..d {
                j[(1, k)] = row[k];
            }
            let exact: f64 = row[..d].iter().map(|v| v * v).sum();
            let (vals, vecs) = gram_spectrum(&j);
            assert_eq!(vals.len(), d);
            assert!((vals[0] - exact).abs() <= 1e-14 * exact);
            assert!(vals.iter().skip(1).all(|&v| v.abs() <= 1e-30));
            let v = vecs.column(0);
            let sign = v[0].signum() * row[0].signum();
            for k in 0..d {
                assert!((sign * v[k] - row[k] / exact.sqrt()).abs() < 1e-14);
            }
            assert!((vecs.tr_mul(&vecs) - DMatrix::identity(vecs.ncols(), vecs.ncols())).amax() < 1e-14);
        }
    }

    #[test]
    fn jacobian_of_no_default_system_is_zero() {
        let sys = example_2_2();
        let rich = sys
            .with_external_assets(sys.total_obligations() * 2.0)
            .unwrap();
        let sol = clear(&rich).unwrap();
        let basis = orthonormal_basis(
            rich.relative_liabilities(),
            rich.total_obligations(),
            BasisMode::Complete,
        );
        let op = basis_jacobian(&rich, &sol, &basis).unwrap();
        assert_eq!(op.jacobian().amax(), 0.0);
        assert!(op.eigenvalues().iter().all(|&v| v == 0.0));
    }
}
