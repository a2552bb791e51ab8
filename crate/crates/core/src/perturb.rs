//! Admissible perturbations of the relative liability matrix.
//!
//! A perturbation `Delta` has zero diagonal, zero row sums and zero
//! `p_bar`-weighted column sums, so `Pi + h Delta` keeps every bank's total
//! assets and liabilities. In fixed-support mode it also vanishes wherever
//! `Pi` does; in rewiring mode it may only be nonnegative there.
//!
//! Matrices are vectorised column-major: entry `(i, j)` sits at `i + n j`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::clearing::{clear, default_set_unchecked};
use crate::error::{Error, Result};
use crate::model::FinancialSystem;

/// Tolerance of [`is_admissible`].
pub const ADMISSIBLE_TOL: f64 = 1e-8;

/// Entries of `Delta` below this (relative to its largest entry) are treated
/// as exact zeros when computing `h*`.
const STEP_ZERO_TOL: f64 = 1e-12;

/// Bisection budget for `h**`.
const BISECTION_STEPS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupportMode {
    /// Links may change size but never appear or vanish.
    FixedSupport,
    /// New links may appear where `Pi` is zero.
    Rewiring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisMode {
    /// Basis of the fixed-support space of `Pi`.
    FixedSupport,
    /// Basis of the fixed-support space of a completely connected network.
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    Shape { rows: usize, cols: usize, n: usize },
    Diagonal { bank: usize, value: f64 },
    RowSum { bank: usize, value: f64 },
    WeightedColumnSum { bank: usize, value: f64 },
    OffSupport { row: usize, col: usize, value: f64 },
    NegativeNewLink { row: usize, col: usize, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::Shape { rows, cols, n } => {
                write!(f, "matrix is {rows}x{cols}, expected {n}x{n}")
            }
            Violation::Diagonal { bank, value } => {
                write!(f, "nonzero diagonal delta[{bank}][{bank}] = {value:e}")
            }
            Violation::RowSum { bank, value } => write!(f, "row {bank} sums to {value:e}"),
            Violation::WeightedColumnSum { bank, value } => {
                write!(f, "weighted column {bank} sums to {value:e}")
            }
            Violation::OffSupport { row, col, value } => {
                write!(f, "delta[{row}][{col}] = {value:e} where pi is zero")
            }
            Violation::NegativeNewLink { row, col, value } => {
                write!(f, "delta[{row}][{col}] = {value:e} < 0 where pi is zero")
            }
        }
    }
}

/// Result of an admissibility check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Admissibility {
    pub admissible: bool,
    pub violations: Vec<Violation>,
}

/// Check `Delta` against the constraints of the chosen mode at
/// [`ADMISSIBLE_TOL`], listing every violated constraint.
pub fn is_admissible(
    delta: &DMatrix<f64>,
    pi: &DMatrix<f64>,
    p_bar: &DVector<f64>,
    mode: SupportMode,
) -> Admissibility {
    let n = pi.nrows();
    let mut violations = Vec::new();
    if delta.nrows() != n || delta.ncols() != n {
        violations.push(Violation::Shape {
            rows: delta.nrows(),
            cols: delta.ncols(),
            n,
        });
        return Admissibility {
            admissible: false,
            violations,
        };
    }
    for i in 0..n {
        let d = delta[(i, i)];
        if d.abs() > ADMISSIBLE_TOL {
            violations.push(Violation::Diagonal { bank: i, value: d });
        }
    }
    for i in 0..n {
        let s = delta.row(i).sum();
        if s.abs() > ADMISSIBLE_TOL {
            violations.push(Violation::RowSum { bank: i, value: s });
        }
    }
    let scale = p_bar.amax().max(1.0);
    for i in 0..n {
        let s: f64 = (0..n).map(|j| p_bar[j] * delta[(j, i)]).sum();
        if s.abs() > ADMISSIBLE_TOL * scale {
            violations.push(Violation::WeightedColumnSum { bank: i, value: s });
        }
    }
    for i in 0..n {
        for j in 0..n {
            if i == j || pi[(i, j)] != 0.0 {
                continue;
            }
            let v = delta[(i, j)];
            match mode {
                SupportMode::FixedSupport if v.abs() > ADMISSIBLE_TOL => {
                    violations.push(Violation::OffSupport {
                        row: i,
                        col: j,
                        value: v,
                    })
                }
                SupportMode::Rewiring if v < -ADMISSIBLE_TOL => {
                    violations.push(Violation::NegativeNewLink {
                        row: i,
                        col: j,
                        value: v,
                    })
                }
                _ => {}
            }
        }
    }
    Admissibility {
        admissible: violations.is_empty(),
        violations,
    }
}

/// A perturbation direction checked against a system at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationMatrix {
    matrix: DMatrix<f64>,
    mode: SupportMode,
}

impl PerturbationMatrix {
    pub fn new(matrix: DMatrix<f64>, system: &FinancialSystem, mode: SupportMode) -> Result<Self> {
        let check = is_admissible(
            &matrix,
            system.relative_liabilities(),
            system.total_obligations(),
            mode,
        );
        if check.admissible {
            Ok(Self { matrix, mode })
        } else {
            Err(Error::Inadmissible(check.violations))
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn mode(&self) -> SupportMode {
        self.mode
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.matrix
    }
}

/// What a row of the constraint matrix enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    Diagonal(usize),
    ZeroSupport(usize, usize),
    /// Placeholder row for a free entry; all zeros.
    Free(usize, usize),
    RowSum(usize),
    WeightedColumnSum(usize),
}

/// Sparse constraint matrix `A(Pi)` of shape `(n^2 + 2n) x n^2` whose null
/// space is the vectorised fixed-support perturbation space. Row `i + n j`
/// pins entry `(i, j)` to zero when it is diagonal or off the support of
/// `Pi` and is empty otherwise; the last `2n` rows hold the row sums and the
/// weighted column sums. Stored as row lists of `(column, value)` pairs.
#[derive(Debug, Clone)]
pub struct ConstraintMatrix {
    n: usize,
    rows: Vec<(ConstraintKind, Vec<(usize, f64)>)>,
}

impl ConstraintMatrix {
    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.n * self.n
    }

    pub fn kinds(&self) -> impl Iterator<Item = ConstraintKind> + '_ {
        self.rows.iter().map(|(k, _)| *k)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.nrows(), self.ncols());
        for (r, (_, entries)) in self.rows.iter().enumerate() {
            for &(c, v) in entries {
                a[(r, c)] = v;
            }
        }
        a
    }

    /// `A delta` for a vectorised matrix.
    pub fn apply(&self, delta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.nrows(),
            self.rows
                .iter()
                .map(|(_, e)| e.iter().map(|&(c, v)| v * delta[c]).sum::<f64>()),
        )
    }
}

pub fn constraint_matrix(pi: &DMatrix<f64>, p_bar: &DVector<f64>) -> ConstraintMatrix {
    let n = pi.nrows();
    let idx = |i: usize, j: usize| i + n * j;
    let mut rows = Vec::with_capacity(n * n + 2 * n);
    for j in 0..n {
        for i in 0..n {
            let row = if i == j {
                (ConstraintKind::Diagonal(i), vec![(idx(i, i), 1.0)])
            } else if pi[(i, j)] == 0.0 {
                (ConstraintKind::ZeroSupport(i, j), vec![(idx(i, j), 1.0)])
            } else {
                (ConstraintKind::Free(i, j), Vec::new())
            };
            rows.push(row);
        }
    }
    for i in 0..n {
        rows.push((
            ConstraintKind::RowSum(i),
            (0..n).map(|j| (idx(i, j), 1.0)).collect(),
        ));
    }
    for i in 0..n {
        rows.push((
            ConstraintKind::WeightedColumnSum(i),
            (0..n).map(|j| (idx(j, i), p_bar[j])).collect(),
        ));
    }
    ConstraintMatrix { n, rows }
}

/// An orthonormal basis `E_1..E_d` of a perturbation space.
///
/// Basis matrices vanish outside a fixed set of off-diagonal entries (the
/// support), so they are stored as columns of a `support.len() x d` matrix
/// of coordinates. Column `k` reshaped onto the support gives `E_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBasis {
    n: usize,
    mode: BasisMode,
    /// Column-major linear indices `i + n j` of the free entries, ascending.
    support: Vec<usize>,
    coords: DMatrix<f64>,
    total_obligations: DVector<f64>,
}

impl PerturbationBasis {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Dimension `d` of the spanned space.
    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.dim() == 0
    }

    pub fn mode(&self) -> BasisMode {
        self.mode
    }

    pub fn total_obligations(&self) -> &DVector<f64> {
        &self.total_obligations
    }

    /// Support entries as `(row, col)` pairs in coordinate order.
    pub fn support(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n;
        self.support.iter().map(move |&c| (c % n, c / n))
    }

    /// Basis coordinates on the support, one column per basis matrix.
    pub fn coordinates(&self) -> &DMatrix<f64> {
        &self.coords
    }

    fn scatter(&self, values: impl Iterator<Item = f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (&c, v) in self.support.iter().zip(values) {
            m[(c % self.n, c / self.n)] = v;
        }
        m
    }

    /// The basis matrix `E_k`.
    pub fn matrix(&self, k: usize) -> DMatrix<f64> {
        self.scatter(self.coords.column(k).iter().copied())
    }

    pub fn matrices(&self) -> Vec<DMatrix<f64>> {
        (0..self.dim()).map(|k| self.matrix(k)).collect()
    }

    /// `sum_k z_k E_k`.
    pub fn combine(&self, z: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(z.len(), self.dim(), "coefficient vector has wrong length");
        let v = &self.coords * z;
        self.scatter(v.iter().copied())
    }

    /// Coefficients `<E_k, Delta>` of the orthogonal projection of `Delta`.
    pub fn coefficients(&self, delta: &DMatrix<f64>) -> DVector<f64> {
        let gathered = DVector::from_iterator(
            self.support.len(),
            self.support.iter().map(|&c| delta[(c % self.n, c / self.n)]),
        );
        self.coords.tr_mul(&gathered)
    }

    /// Orthogonal projection of an arbitrary matrix onto the spanned space.
    pub fn project(&self, delta: &DMatrix<f64>) -> DMatrix<f64> {
        self.combine(&self.coefficients(delta))
    }

    /// The basis `F_l = sum_k r_kl E_k`; orthonormal whenever `r` is orthogonal.
    pub fn rotated(&self, rotation: &DMatrix<f64>) -> Self {
        assert_eq!(rotation.nrows(), self.dim());
        Self {
            coords: &self.coords * rotation,
            ..self.clone()
        }
    }

    /// For every basis matrix: `E_k^T c` for a vector `c`, i.e. the
    /// `n x d` matrix with columns `E_k^T c`.
    pub fn transpose_apply(&self, c: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n;
        let mut out = DMatrix::zeros(n, self.dim());
        for (r, &lin) in self.support.iter().enumerate() {
            let (i, j) = (lin % n, lin / n);
            // (E^T c)_j = sum_i E_ij c_i
            let w = c[i];
            if w == 0.0 {
                continue;
            }
            for k in 0..self.dim() {
                out[(j, k)] += w * self.coords[(r, k)];
            }
        }
        out
    }
}

/// Orthonormal basis of the perturbation space of `Pi` (or of the complete
/// network with the same `p_bar`).
///
/// Zero-forcing rows of `A(Pi)` simply remove coordinates, so the null space
/// is computed for the remaining `2n x m` block `B` of row and weighted
/// column sums. The rank comes from the singular values of `B` (tolerance
/// `(n^2 + 2n) * eps * max(sigma_max, 1)`); the null space is read off the
/// trailing columns of a pivoted Householder QR factor of `B^T`.
pub fn orthonormal_basis(pi: &DMatrix<f64>, p_bar: &DVector<f64>, mode: BasisMode) -> PerturbationBasis {
    let n = pi.nrows();
    let mut support = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let free = i != j && (mode == BasisMode::Complete || pi[(i, j)] != 0.0);
            if free {
                support.push(i + n * j);
            }
        }
    }
    let m = support.len();
    let empty = |support| PerturbationBasis {
        n,
        mode,
        support,
        coords: DMatrix::zeros(m, 0),
        total_obligations: p_bar.clone(),
    };
    if m == 0 {
        return empty(support);
    }

    let mut b = DMatrix::zeros(2 * n, m);
    for (r, &lin) in support.iter().enumerate() {
        let (i, j) = (lin % n, lin / n);
        b[(i, r)] = 1.0;
        b[(n + j, r)] = p_bar[i];
    }

    let singular_values = b.singular_values();
    let sigma_max = singular_values.max();
    let full_rows = (n * n + 2 * n) as f64;
    let tol = full_rows * f64::EPSILON * sigma_max.max(1.0);
    let r = singular_values.iter().filter(|&&s| s > tol).count();
    if r == m {
        return empty(support);
    }
    let coords = orthogonal_complement(b.transpose(), r);

    PerturbationBasis {
        n,
        mode,
        support,
        coords,
        total_obligations: p_bar.clone(),
    }
}

/// Orthonormal basis of the complement of `span(v)`, where `v` is `m x c`
/// of rank `r < m`: the last `m - r` columns of the full `Q` of a
/// column-pivoted Householder QR of `v` stopped after `r` steps, assembled
/// in compact WY form `Q = I - Y T Y^T`.
fn orthogonal_complement(mut v: DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let (m, c_total) = v.shape();
    let mut y = DMatrix::<f64>::zeros(m, r);
    let mut tau = vec![0.0; r];
    for k in 0..r {
        let pivot = (k..c_total)
            .max_by(|&a, &b| {
                let na = v.view((k, a), (m - k, 1)).norm_squared();
                let nb = v.view((k, b), (m - k, 1)).norm_squared();
                na.total_cmp(&nb)
            })
            .unwrap_or(k);
        v.swap_columns(k, pivot);
        let norm = v.view((k, k), (m - k, 1)).norm();
        let x0 = v[(k, k)];
        if norm == 0.0 {
            y[(k, k)] = 1.0;
            continue;
        }
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let scale = x0 - alpha;
        y[(k, k)] = 1.0;
        for i in k + 1..m {
            y[(i, k)] = v[(i, k)] / scale;
        }
        tau[k] = (alpha - x0) / alpha;
        // apply H_k = I - tau y y^T to the remaining columns
        for c in k + 1..c_total {
            let mut dot = 0.0;
            for i in k..m {
                dot += y[(i, k)] * v[(i, c)];
            }
            let f = tau[k] * dot;
            for i in k..m {
                v[(i, c)] -= f * y[(i, k)];
            }
        }
        v[(k, k)] = alpha;
        for i in k + 1..m {
            v[(i, k)] = 0.0;
        }
    }

    // T: upper triangular with H_1 ... H_r = I - Y T Y^T.
    let mut t = DMatrix::<f64>::zeros(r, r);
    for k in 0..r {
        t[(k, k)] = tau[k];
        if k > 0 {
            let w = y.columns(0, k).tr_mul(&y.column(k));
            let col = -tau[k] * (t.view((0, 0), (k, k)) * w);
            t.view_mut((0, k), (k, 1)).copy_from(&col);
        }
    }

    // Q[:, r..] = I[:, r..] - Y (T Y[r.., :]^T)
    let w = &t * y.rows(r, m - r).transpose();
    let mut q = DMatrix::<f64>::zeros(m, m - r);
    for c in 0..m - r {
        q[(r + c, c)] = 1.0;
    }
    q.gemm(-1.0, &y, &w, 1.0);
    q
}

/// Largest `h` with `Pi + h Delta` entrywise in `[0, 1]` for all
/// `0 <= h <= h*`, over banks with positive obligations. `+inf` for
/// `Delta = 0`. For the negative direction use `h_star(pi, -delta, p_bar)`.
pub fn h_star(pi: &DMatrix<f64>, delta: &DMatrix<f64>, p_bar: &DVector<f64>) -> f64 {
    let n = pi.nrows();
    let zero = STEP_ZERO_TOL * delta.amax();
    let mut best = f64::INFINITY;
    for i in 0..n {
        if p_bar[i] <= 0.0 {
            continue;
        }
        for j in 0..n {
            let d = delta[(i, j)];
            let cand = if d < -zero {
                -pi[(i, j)] / d
            } else if d > zero {
                (1.0 - pi[(i, j)]) / d
            } else {
                continue;
            };
            best = best.min(cand);
        }
    }
    best
}

/// Which side(s) of `h = 0` to bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Both,
    /// Only `h >= 0`, e.g. for rewiring perturbations that create links.
    Positive,
}

/// Support bounds and default-set bounds on both sides of `h = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepBounds {
    /// `h*` for `+Delta`.
    pub h_star_upper: f64,
    /// `h*` for `-Delta` (0 when only the positive side is considered).
    pub h_star_lower: f64,
    /// Largest `h <= h_star_upper` keeping the default set.
    pub upper: f64,
    /// Largest `h <= h_star_lower` such that `-h` keeps the default set.
    pub lower: f64,
    /// `min(lower, upper)` for two-sided bounds, `upper` otherwise.
    pub h_star_star: f64,
}

impl StepBounds {
    /// Whether the resolvent representation is valid at `h`.
    pub fn contains(&self, h: f64) -> bool {
        if h >= 0.0 {
            h <= self.upper
        } else {
            -h <= self.lower
        }
    }
}

/// `h**` for a two-sided interval: the largest `h` such that `Pi + s Delta`
/// has the same default set as `Pi` for all `|s| < h`.
pub fn h_star_star(system: &FinancialSystem, delta: &DMatrix<f64>) -> Result<StepBounds> {
    h_star_star_directional(system, delta, Direction::Both)
}

/// `h**` with an explicit direction. Each side is located by bisection on
/// the predicate "default set unchanged", every probe re-clearing the
/// perturbed system, to `1e-6 * h*` or the bisection budget.
pub fn h_star_star_directional(
    system: &FinancialSystem,
    delta: &DMatrix<f64>,
    direction: Direction,
) -> Result<StepBounds> {
    let base = clear(system)?;
    let pi = system.relative_liabilities();
    let p_bar = system.total_obligations();

    let side = |dir: &DMatrix<f64>| -> (f64, f64) {
        let hs = h_star(pi, dir, p_bar);
        if !hs.is_finite() {
            return (hs, hs);
        }
        let same = |h: f64| -> bool {
            let perturbed = pi + dir * h;
            system
                .with_relative_liabilities(&perturbed)
                .and_then(|s| default_set_unchecked(&s))
                .map(|d| d == base.defaults)
                .unwrap_or(false)
        };
        if same(hs) {
            return (hs, hs);
        }
        let (mut lo, mut hi) = (0.0, hs);
        let tol = 1e-6 * hs;
        for _ in 0..BISECTION_STEPS {
            if hi - lo <= tol {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if same(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (hs, lo)
    };

    let (h_star_upper, upper) = side(delta);
    let (h_star_lower, lower) = match direction {
        Direction::Both => side(&(-delta)),
        Direction::Positive => (0.0, 0.0),
    };
    let h_star_star = match direction {
        Direction::Both => upper.min(lower),
        Direction::Positive => upper,
    };
    Ok(StepBounds {
        h_star_upper,
        h_star_lower,
        upper,
        lower,
        h_star_star,
    })
}
