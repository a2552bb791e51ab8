//! Financial systems: nominal liabilities, external assets and the optional
//! society node, plus ingestion, validation and regularity checks.
//!
//! The society node is never materialised as an extra row/column. It lives
//! in two side vectors: the nominal society liabilities `l0` and the
//! relative weights `pi0 = l0 / p_bar`.

use std::collections::VecDeque;
use std::fmt;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance on row sums of the relative liability matrix.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Looser row-sum tolerance for systems rebuilt from a perturbed `Pi + h Delta`.
const PERTURBED_ROW_SUM_TOL: f64 = 1e-8;

/// Entries of a perturbed relative liability matrix within this distance of
/// `[0, 1]` are clamped back into the interval.
const CLAMP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IssueCode {
    NegativeEntry,
    NonzeroDiagonal,
    RowSumViolation,
    ZeroObligationBank,
    DisconnectedSociety,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub code: IssueCode,
    pub message: String,
}

/// Findings of [`validate`]. The report is clean (no errors) exactly when
/// the inputs satisfy every [`FinancialSystem`] invariant.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        !self.issues.iter().any(|i| i.severity == Severity::Error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    pub fn has_code(&self, code: IssueCode) -> bool {
        self.issues.iter().any(|i| i.code == code)
    }

    fn push(&mut self, severity: Severity, code: IssueCode, message: String) {
        self.issues.push(Issue {
            severity,
            code,
            message,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.issues {
            let sev = match issue.severity {
                Severity::Error => "error",
                Severity::Warning => "warning",
            };
            writeln!(f, "  {sev} [{:?}]: {}", issue.code, issue.message)?;
        }
        Ok(())
    }
}

/// An interbank network of `n` banks with optional society node.
///
/// All derived quantities (`p_bar`, `Pi`, `pi0`) are computed at
/// construction; the value is immutable afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct FinancialSystem {
    liabilities: DMatrix<f64>,
    external_assets: DVector<f64>,
    society_liabilities: Option<DVector<f64>>,
    total_obligations: DVector<f64>,
    relative_liabilities: DMatrix<f64>,
    society_weights: Option<DVector<f64>>,
    names: Option<Vec<String>>,
}

/// Check the raw inputs of a financial system.
pub fn validate(
    liabilities: &DMatrix<f64>,
    external_assets: &DVector<f64>,
    society_liabilities: Option<&DVector<f64>>,
) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = liabilities.nrows();

    for (i, j) in (0..n).flat_map(|i| (0..liabilities.ncols()).map(move |j| (i, j))) {
        let v = liabilities[(i, j)];
        if !v.is_finite() {
            report.push(
                Severity::Error,
                IssueCode::NonFinite,
                format!("liability L[{i}][{j}] is not finite"),
            );
        } else if v < 0.0 {
            report.push(
                Severity::Error,
                IssueCode::NegativeEntry,
                format!("liability L[{i}][{j}] = {v} is negative"),
            );
        }
        if i == j && v != 0.0 {
            report.push(
                Severity::Error,
                IssueCode::NonzeroDiagonal,
                format!("bank {i} owes itself L[{i}][{i}] = {v}"),
            );
        }
    }
    for (i, &v) in external_assets.iter().enumerate() {
        if !v.is_finite() {
            report.push(
                Severity::Error,
                IssueCode::NonFinite,
                format!("external asset x[{i}] is not finite"),
            );
        } else if v < 0.0 {
            report.push(
                Severity::Error,
                IssueCode::NegativeEntry,
                format!("external asset x[{i}] = {v} is negative"),
            );
        }
    }
    if let Some(l0) = society_liabilities {
        for (i, &v) in l0.iter().enumerate() {
            if !v.is_finite() {
                report.push(
                    Severity::Error,
                    IssueCode::NonFinite,
                    format!("society liability l0[{i}] is not finite"),
                );
            } else if v < 0.0 {
                report.push(
                    Severity::Error,
                    IssueCode::NegativeEntry,
                    format!("society liability l0[{i}] = {v} is negative"),
                );
            }
        }
        if !l0.iter().any(|&v| v > 0.0) {
            report.push(
                Severity::Error,
                IssueCode::DisconnectedSociety,
                "no bank has a positive obligation to society".into(),
            );
        }
    }

    for i in 0..n {
        let interbank: f64 = liabilities.row(i).sum();
        let society = society_liabilities.map_or(0.0, |l0| l0[i]);
        let p_bar = interbank + society;
        if p_bar <= 0.0 {
            // Banks without obligations are harmless in the plain model but
            // the society model requires everyone to owe someone.
            let severity = if society_liabilities.is_some() {
                Severity::Error
            } else {
                Severity::Warning
            };
            report.push(
                severity,
                IssueCode::ZeroObligationBank,
                format!("bank {i} has no obligations"),
            );
        }
    }
    report
}

fn check_row_sums(
    pi: &DMatrix<f64>,
    pi0: Option<&DVector<f64>>,
    p_bar: &DVector<f64>,
    tol: f64,
    report: &mut ValidationReport,
) {
    for i in 0..pi.nrows() {
        if p_bar[i] <= 0.0 {
            continue;
        }
        let s = pi.row(i).sum() + pi0.map_or(0.0, |w| w[i]);
        if (s - 1.0).abs() > tol {
            report.push(
                Severity::Error,
                IssueCode::RowSumViolation,
                format!("relative liabilities of bank {i} sum to {s}, expected 1"),
            );
        }
    }
}

impl FinancialSystem {
    /// Build a system from nominal liabilities, external assets and the
    /// optional society liabilities. Fails fast with the full
    /// [`ValidationReport`] when any invariant is violated.
    pub fn new(
        liabilities: DMatrix<f64>,
        external_assets: DVector<f64>,
        society_liabilities: Option<DVector<f64>>,
    ) -> Result<Self> {
        let n = liabilities.nrows();
        if liabilities.ncols() != n {
            return Err(Error::Dimension(format!(
                "liability matrix is {}x{}, expected square",
                n,
                liabilities.ncols()
            )));
        }
        if external_assets.len() != n {
            return Err(Error::Dimension(format!(
                "{} external assets for {} banks",
                external_assets.len(),
                n
            )));
        }
        if let Some(l0) = &society_liabilities {
            if l0.len() != n {
                return Err(Error::Dimension(format!(
                    "{} society liabilities for {} banks",
                    l0.len(),
                    n
                )));
            }
        }
        if n == 0 {
            return Err(Error::Dimension("system has no banks".into()));
        }

        let mut report = validate(&liabilities, &external_assets, society_liabilities.as_ref());
        if !report.is_valid() {
            return Err(Error::Invalid(report));
        }

        let mut total_obligations = DVector::from_iterator(n, liabilities.row_iter().map(|r| r.sum()));
        if let Some(l0) = &society_liabilities {
            total_obligations += l0;
        }
        let mut relative_liabilities = DMatrix::zeros(n, n);
        for i in 0..n {
            if total_obligations[i] > 0.0 {
                for j in 0..n {
                    relative_liabilities[(i, j)] = liabilities[(i, j)] / total_obligations[i];
                }
            }
        }
        let society_weights = society_liabilities.as_ref().map(|l0| {
            DVector::from_iterator(
                n,
                (0..n).map(|i| {
                    if total_obligations[i] > 0.0 {
                        l0[i] / total_obligations[i]
                    } else {
                        0.0
                    }
                }),
            )
        });

        check_row_sums(
            &relative_liabilities,
            society_weights.as_ref(),
            &total_obligations,
            ROW_SUM_TOL,
            &mut report,
        );
        if !report.is_valid() {
            return Err(Error::Invalid(report));
        }

        Ok(Self {
            liabilities,
            external_assets,
            society_liabilities,
            total_obligations,
            relative_liabilities,
            society_weights,
            names: None,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n() {
            return Err(Error::Dimension(format!(
                "{} names for {} banks",
                names.len(),
                self.n()
            )));
        }
        self.names = Some(names);
        Ok(self)
    }

    /// The same banks with the relative liability matrix replaced by `pi`
    /// (typically `Pi + h Delta`). External assets, total obligations and
    /// society weights are kept; nominal liabilities become `diag(p_bar) pi`.
    pub fn with_relative_liabilities(&self, pi: &DMatrix<f64>) -> Result<Self> {
        let n = self.n();
        if pi.nrows() != n || pi.ncols() != n {
            return Err(Error::Dimension(format!(
                "relative liability matrix is {}x{}, expected {n}x{n}",
                pi.nrows(),
                pi.ncols()
            )));
        }
        let mut report = ValidationReport::default();
        let mut rel = pi.clone();
        for i in 0..n {
            for j in 0..n {
                let v = rel[(i, j)];
                if self.total_obligations[i] <= 0.0 {
                    rel[(i, j)] = 0.0;
                } else if i == j {
                    if v.abs() > CLAMP_TOL {
                        report.push(
                            Severity::Error,
                            IssueCode::NonzeroDiagonal,
                            format!("relative liability pi[{i}][{i}] = {v}"),
                        );
                    }
                    rel[(i, j)] = 0.0;
                } else if !v.is_finite() {
                    report.push(
                        Severity::Error,
                        IssueCode::NonFinite,
                        format!("relative liability pi[{i}][{j}] is not finite"),
                    );
                } else if v < 0.0 {
                    if v < -CLAMP_TOL {
                        report.push(
                            Severity::Error,
                            IssueCode::NegativeEntry,
                            format!("relative liability pi[{i}][{j}] = {v} is negative"),
                        );
                    }
                    rel[(i, j)] = 0.0;
                } else if v > 1.0 {
                    if v > 1.0 + CLAMP_TOL {
                        report.push(
                            Severity::Error,
                            IssueCode::RowSumViolation,
                            format!("relative liability pi[{i}][{j}] = {v} exceeds 1"),
                        );
                    }
                    rel[(i, j)] = 1.0;
                }
            }
        }
        check_row_sums(
            &rel,
            self.society_weights.as_ref(),
            &self.total_obligations,
            PERTURBED_ROW_SUM_TOL,
            &mut report,
        );
        if !report.is_valid() {
            return Err(Error::Invalid(report));
        }
        let liabilities = DMatrix::from_fn(n, n, |i, j| self.total_obligations[i] * rel[(i, j)]);
        Ok(Self {
            liabilities,
            external_assets: self.external_assets.clone(),
            society_liabilities: self.society_liabilities.clone(),
            total_obligations: self.total_obligations.clone(),
            relative_liabilities: rel,
            society_weights: self.society_weights.clone(),
            names: self.names.clone(),
        })
    }

    /// Same system with every external asset replaced.
    pub fn with_external_assets(&self, x: DVector<f64>) -> Result<Self> {
        let sys = Self::new(self.liabilities.clone(), x, self.society_liabilities.clone())?;
        Ok(Self {
            names: self.names.clone(),
            ..sys
        })
    }

    pub fn n(&self) -> usize {
        self.liabilities.nrows()
    }

    pub fn liabilities(&self) -> &DMatrix<f64> {
        &self.liabilities
    }

    pub fn external_assets(&self) -> &DVector<f64> {
        &self.external_assets
    }

    pub fn society_liabilities(&self) -> Option<&DVector<f64>> {
        self.society_liabilities.as_ref()
    }

    /// `p_bar`: nominal total obligations including the society claim.
    pub fn total_obligations(&self) -> &DVector<f64> {
        &self.total_obligations
    }

    /// `Pi`: the interbank block of the relative liability matrix.
    pub fn relative_liabilities(&self) -> &DMatrix<f64> {
        &self.relative_liabilities
    }

    /// `pi0`: the fraction of each bank's obligations owed to society.
    pub fn society_weights(&self) -> Option<&DVector<f64>> {
        self.society_weights.as_ref()
    }

    pub fn has_society(&self) -> bool {
        self.society_weights.is_some()
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    /// Regularity test with a violating orbit as witness.
    pub fn regularity(&self) -> Regularity {
        is_regular(self)
    }

    pub fn to_network_file(&self) -> NetworkFile {
        NetworkFile {
            liabilities: self
                .liabilities
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            external_assets: self.external_assets.iter().copied().collect(),
            society_liabilities: self
                .society_liabilities
                .as_ref()
                .map(|l| l.iter().copied().collect()),
            names: self.names.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_network_file())?)
    }
}

/// On-disk JSON form of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub liabilities: Vec<Vec<f64>>,
    pub external_assets: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub society_liabilities: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

impl NetworkFile {
    pub fn into_system(self) -> Result<FinancialSystem> {
        let liabilities = matrix_from_rows(&self.liabilities)?;
        let sys = FinancialSystem::new(
            liabilities,
            DVector::from_vec(self.external_assets),
            self.society_liabilities.map(DVector::from_vec),
        )?;
        match self.names {
            Some(names) => sys.with_names(names),
            None => Ok(sys),
        }
    }
}

/// Dense matrix from a list of equally long rows.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
        return Err(Error::Dimension(format!(
            "row {i} has {} entries, expected {m}",
            r.len()
        )));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Parse a JSON network document.
pub fn load_json<R: Read>(reader: R) -> Result<FinancialSystem> {
    let file: NetworkFile = serde_json::from_reader(reader)?;
    file.into_system()
}

/// Parse a CSV network: a headerless `n x n` liability matrix plus a side
/// table with columns `external_assets[,society_liabilities]`.
pub fn load_csv<R1: Read, R2: Read>(matrix: R1, side: R2) -> Result<FinancialSystem> {
    let mut rows = Vec::new();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(matrix);
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("matrix entry '{s}': {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let liabilities = matrix_from_rows(&rows)?;

    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(side);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let x_col = col("external_assets")
        .ok_or_else(|| Error::Parse("side table lacks an external_assets column".into()))?;
    let l0_col = col("society_liabilities");
    let mut x = Vec::new();
    let mut l0 = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |k: usize| -> Result<f64> {
            let s = rec
                .get(k)
                .ok_or_else(|| Error::Parse("short side-table row".into()))?;
            s.parse::<f64>()
                .map_err(|e| Error::Parse(format!("side entry '{s}': {e}")))
        };
        x.push(parse(x_col)?);
        if let Some(k) = l0_col {
            l0.push(parse(k)?);
        }
    }
    FinancialSystem::new(
        liabilities,
        DVector::from_vec(x),
        l0_col.map(|_| DVector::from_vec(l0)),
    )
}

/// Load a network from disk. `.csv` inputs need the side table path.
pub fn load_system(path: &Path, side: Option<&Path>) -> Result<FinancialSystem> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let side = side.ok_or_else(|| {
            Error::InvalidArgument("CSV networks need a side table with external_assets".into())
        })?;
        load_csv(std::fs::File::open(path)?, std::fs::File::open(side)?)
    } else {
        load_json(std::fs::File::open(path)?)
    }
}

/// Model inputs derived from aggregate balance sheets (interbank
/// liabilities assumed equal to interbank assets; everything else external).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSheetScaffold {
    /// Row sums the bilateral matrix must reproduce.
    pub interbank_liabilities: Vec<f64>,
    pub society_liabilities: Vec<f64>,
    pub external_assets: Vec<f64>,
}

/// Map total assets, capital and interbank assets to `(l_IB, l0, x)`.
pub fn from_balance_sheet(
    total_assets: &[f64],
    capital: &[f64],
    interbank_assets: &[f64],
) -> Result<BalanceSheetScaffold> {
    let n = total_assets.len();
    if capital.len() != n || interbank_assets.len() != n {
        return Err(Error::Dimension(format!(
            "balance sheet columns have lengths {}, {}, {}",
            n,
            capital.len(),
            interbank_assets.len()
        )));
    }
    let mut out = BalanceSheetScaffold {
        interbank_liabilities: Vec::with_capacity(n),
        society_liabilities: Vec::with_capacity(n),
        external_assets: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (ta, c, aib) = (total_assets[i], capital[i], interbank_assets[i]);
        let lib = aib;
        let l0 = ta - lib - c;
        let x = ta - aib;
        if l0 < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bank {i}: implied society liability {l0} is negative"
            )));
        }
        if x < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bank {i}: implied external assets {x} are negative"
            )));
        }
        // Net worth must reproduce book equity.
        let net_worth = ta - (l0 + lib);
        debug_assert!((net_worth - c).abs() <= 1e-9 * ta.abs().max(1.0));
        out.interbank_liabilities.push(lib);
        out.society_liabilities.push(l0);
        out.external_assets.push(x);
    }
    Ok(out)
}

impl BalanceSheetScaffold {
    /// Combine with a bilateral matrix whose row sums match the interbank totals.
    pub fn into_system(self, liabilities: DMatrix<f64>) -> Result<FinancialSystem> {
        let n = self.external_assets.len();
        if liabilities.nrows() != n || liabilities.ncols() != n {
            return Err(Error::Dimension(format!(
                "bilateral matrix is {}x{}, expected {n}x{n}",
                liabilities.nrows(),
                liabilities.ncols()
            )));
        }
        for i in 0..n {
            let s = liabilities.row(i).sum();
            let target = self.interbank_liabilities[i];
            if (s - target).abs() > 1e-9 * target.abs().max(1.0) {
                return Err(Error::InvalidArgument(format!(
                    "bilateral row {i} sums to {s}, interbank liabilities are {target}"
                )));
            }
        }
        FinancialSystem::new(
            liabilities,
            DVector::from_vec(self.external_assets),
            Some(DVector::from_vec(self.society_liabilities)),
        )
    }
}

/// Read a balance-sheet CSV with columns `total_assets,capital,interbank_assets`.
pub fn load_balance_sheet_csv<R: Read>(reader: R) -> Result<BalanceSheetScaffold> {
    #[derive(Deserialize)]
    struct Row {
        total_assets: f64,
        capital: f64,
        interbank_assets: f64,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let (mut ta, mut c, mut a) = (Vec::new(), Vec::new(), Vec::new());
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        ta.push(row.total_assets);
        c.push(row.capital);
        a.push(row.interbank_assets);
    }
    from_balance_sheet(&ta, &c, &a)
}

/// Outcome of the regularity test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Regularity {
    pub regular: bool,
    /// A risk orbit (bank indices, sorted) without external assets.
    pub witness: Option<Vec<usize>>,
}

/// A system is regular when the risk orbit of every bank with obligations
/// (the bank itself plus everything reachable along `L_ij > 0`) holds
/// positive external assets. The society node is an absorbing sink with
/// no assets, so it never contributes to an orbit's surplus.
pub fn is_regular(system: &FinancialSystem) -> Regularity {
    let n = system.n();
    let l = system.liabilities();
    let x = system.external_assets();
    let p_bar = system.total_obligations();
    let adjacency: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| l[(i, j)] > 0.0).collect())
        .collect();

    let mut seen = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for root in 0..n {
        if p_bar[root] <= 0.0 {
            continue;
        }
        let mut orbit = vec![root];
        seen[root] = root;
        queue.push_back(root);
        while let Some(i) = queue.pop_front() {
            for &j in &adjacency[i] {
                if seen[j] != root {
                    seen[j] = root;
                    orbit.push(j);
                    queue.push_back(j);
                }
            }
        }
        let surplus: f64 = orbit.iter().map(|&j| x[j]).sum();
        if surplus <= 0.0 {
            orbit.sort_unstable();
            return Regularity {
                regular: false,
                witness: Some(orbit),
            };
        }
    }
    Regularity {
        regular: true,
        witness: None,
    }
}

/// A system with the same `x` and `p_bar` whose interbank block has every
/// off-diagonal entry positive (on rows with positive obligations). Only
/// the support pattern matters downstream, so the placeholders are uniform.
pub fn complete_support(system: &FinancialSystem) -> FinancialSystem {
    let n = system.n();
    let p_bar = system.total_obligations();
    if n < 2 {
        return system.clone();
    }
    let mut l0 = system.society_liabilities().cloned();
    let mut liabilities = DMatrix::zeros(n, n);
    for i in 0..n {
        if p_bar[i] <= 0.0 {
            continue;
        }
        let mut interbank = p_bar[i] - l0.as_ref().map_or(0.0, |v| v[i]);
        if interbank <= 0.0 {
            // Bank owes only society: move half of that claim onto the
            // interbank placeholders.
            let l = l0.as_mut().expect("positive p_bar without interbank needs society");
            interbank = 0.5 * l[i];
            l[i] -= interbank;
        }
        let each = interbank / (n - 1) as f64;
        for j in 0..n {
            if j != i {
                liabilities[(i, j)] = each;
            }
        }
    }
    // Row sums can drift by an ulp from p_bar; rebuild the relative matrix
    // directly so p_bar is preserved bit-for-bit.
    let rel = DMatrix::from_fn(n, n, |i, j| {
        if p_bar[i] > 0.0 {
            liabilities[(i, j)] / p_bar[i]
        } else {
            0.0
        }
    });
    let society_weights = l0.as_ref().map(|l| {
        DVector::from_fn(n, |i, _| if p_bar[i] > 0.0 { l[i] / p_bar[i] } else { 0.0 })
    });
    FinancialSystem {
        liabilities,
        external_assets: system.external_assets().clone(),
        society_liabilities: l0,
        total_obligations: p_bar.clone(),
        relative_liabilities: rel,
        society_weights,
        names: system.names.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_2_2() -> FinancialSystem {
        let l = DMatrix::from_row_slice(
            4,
            4,
            &[
                0., 7., 1., 1., //
                3., 0., 3., 3., //
                1., 1., 0., 1., //
                1., 1., 1., 0.,
            ],
        );
        FinancialSystem::new(l, DVector::from_vec(vec![0., 2., 2., 2.]), None).unwrap()
    }

    #[test]
    fn example_total_obligations() {
        let sys = example_2_2();
        assert_eq!(sys.total_obligations().as_slice(), &[9., 9., 3., 3.]);
        assert!((sys.relative_liabilities()[(0, 1)] - 7. / 9.).abs() < 1e-15);
        assert!(is_regular(&sys).regular);
    }

    #[test]
    fn single_bank_has_zero_row() {
        let sys =
            FinancialSystem::new(DMatrix::zeros(1, 1), DVector::from_vec(vec![5.]), None).unwrap();
        assert_eq!(sys.total_obligations()[0], 0.0);
        assert_eq!(sys.relative_liabilities()[(0, 0)], 0.0);
    }

    #[test]
    fn negative_entry_rejected() {
        let csv_m = "0,1\n-1,0\n";
        let side = "external_assets\n1\n1\n";
        match load_csv(csv_m.as_bytes(), side.as_bytes()) {
            Err(Error::Invalid(r)) => assert!(r.has_code(IssueCode::NegativeEntry)),
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn diagonal_rejected() {
        let l = DMatrix::from_row_slice(2, 2, &[1., 1., 1., 0.]);
        match FinancialSystem::new(l, DVector::from_vec(vec![1., 1.]), None) {
            Err(Error::Invalid(r)) => assert!(r.has_code(IssueCode::NonzeroDiagonal)),
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn society_needs_positive_claim_and_obligations() {
        let l = DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.]);
        let r = FinancialSystem::new(
            l.clone(),
            DVector::from_vec(vec![1., 1.]),
            Some(DVector::from_vec(vec![0., 0.])),
        );
        assert!(matches!(r, Err(Error::Invalid(ref rep)) if rep.has_code(IssueCode::DisconnectedSociety)));

        let l = DMatrix::from_row_slice(2, 2, &[0., 0., 1., 0.]);
        let r = FinancialSystem::new(
            l,
            DVector::from_vec(vec![1., 1.]),
            Some(DVector::from_vec(vec![0., 1.])),
        );
        assert!(matches!(r, Err(Error::Invalid(ref rep)) if rep.has_code(IssueCode::ZeroObligationBank)));
    }

    #[test]
    fn society_rows_sum_to_one() {
        let l = DMatrix::from_row_slice(3, 3, &[0., 2., 1., 1., 0., 1., 3., 0., 0.]);
        let sys = FinancialSystem::new(
            l,
            DVector::from_vec(vec![1., 0., 1.]),
            Some(DVector::from_vec(vec![1., 2., 0.5])),
        )
        .unwrap();
        let pi0 = sys.society_weights().unwrap();
        for i in 0..3 {
            let s = sys.relative_liabilities().row(i).sum() + pi0[i];
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn mutual_debtors_without_assets_are_irregular() {
        let l = DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.]);
        let sys = FinancialSystem::new(l, DVector::zeros(2), None).unwrap();
        let r = is_regular(&sys);
        assert!(!r.regular);
        assert_eq!(r.witness, Some(vec![0, 1]));
    }

    #[test]
    fn positive_assets_imply_regular() {
        let l = DMatrix::from_row_slice(3, 3, &[0., 1., 0., 0., 0., 1., 1., 0., 0.]);
        let sys = FinancialSystem::new(l, DVector::from_vec(vec![0.1, 0.2, 0.3]), None).unwrap();
        assert!(is_regular(&sys).regular);
    }

    #[test]
    fn balance_sheet_mapping() {
        let s = from_balance_sheet(&[10.], &[2.], &[3.]).unwrap();
        assert_eq!(s.interbank_liabilities, vec![3.]);
        assert_eq!(s.society_liabilities, vec![5.]);
        assert_eq!(s.external_assets, vec![7.]);
        assert!(from_balance_sheet(&[10.], &[8.], &[3.]).is_err());
    }

    #[test]
    fn balance_sheet_net_worth_is_capital() {
        let ta = [120.5, 80.25, 33.0];
        let c = [10.0, 4.5, 1.25];
        let a = [20.0, 15.5, 6.0];
        let s = from_balance_sheet(&ta, &c, &a).unwrap();
        for i in 0..3 {
            let p_bar = s.society_liabilities[i] + s.interbank_liabilities[i];
            assert!((ta[i] - p_bar - c[i]).abs() <= 1e-12 * ta[i]);
        }
        let csv = "total_assets,capital,interbank_assets\n120.5,10,20\n80.25,4.5,15.5\n33,1.25,6\n";
        assert_eq!(load_balance_sheet_csv(csv.as_bytes()).unwrap(), s);
    }

    #[test]
    fn complete_support_pattern() {
        let sys = example_2_2();
        let c = complete_support(&sys);
        assert_eq!(c.total_obligations(), sys.total_obligations());
        assert_eq!(c.external_assets(), sys.external_assets());
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(c.relative_liabilities()[(i, j)] > 0.0, i != j);
            }
        }
        let two = FinancialSystem::new(
            DMatrix::from_row_slice(2, 2, &[0., 1., 0., 0.]),
            DVector::from_vec(vec![1., 1.]),
            None,
        )
        .unwrap();
        let c2 = complete_support(&two);
        assert!(c2.relative_liabilities()[(0, 1)] > 0.0);
        // bank 1 owes nothing, so its row stays empty
        assert_eq!(c2.relative_liabilities()[(1, 0)], 0.0);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let l = DMatrix::from_row_slice(2, 2, &[0., 0.1 + 0.2, 1.0 / 3.0, 0.]);
        let sys = FinancialSystem::new(
            l,
            DVector::from_vec(vec![std::f64::consts::PI, 1e-300]),
            Some(DVector::from_vec(vec![2.0 / 7.0, 0.0])),
        )
        .unwrap();
        let back = load_json(sys.to_json().unwrap().as_bytes()).unwrap();
        assert_eq!(back, sys);
    }
}
