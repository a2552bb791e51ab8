//! Distributions of clearing-vector errors when the perturbation
//! coefficients are random.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::clearing::{clear, payments_unchecked};
use crate::error::{Error, Result};
use crate::model::FinancialSystem;
use crate::perturb::PerturbationBasis;
use crate::sensitivity::SensitivityOperator;

/// Samples drawn from one random stream.
pub const CHUNK: usize = 4096;

/// Rejection fraction above which `confidence_bands` logs a warning.
pub const REJECTION_WARN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Law {
    /// Uniform on the unit ball of `R^d`.
    UniformBall,
    /// Standard normal in `R^d`.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quantity {
    /// `|D_Delta p|^2`.
    DeviationSquared,
    /// `pi0^T D_Delta p`.
    SocietyChange,
}

pub fn sample_coefficients<R: Rng + ?Sized>(d: usize, law: Law, rng: &mut R) -> DVector<f64> {
    let mut z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    if law == Law::UniformBall && d > 0 {
        let norm = z.norm();
        let u: f64 = rng.random();
        let radius = u.powf(1.0 / d as f64);
        if norm > 0.0 {
            z *= radius / norm;
        }
    }
    z
}

/// The random stream for chunk `chunk` of a run seeded with `seed`.
pub fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Evaluate `f` on `count` coefficient vectors, in sample order. Samples
/// are split into chunks of [`CHUNK`] with independent streams, so the
/// result does not depend on the number of worker threads.
pub fn map_samples<T, F>(d: usize, law: Law, count: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&DVector<f64>) -> T + Sync,
{
    let chunks = count.div_ceil(CHUNK);
    let parts: Vec<Vec<T>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c);
            let len = CHUNK.min(count - c * CHUNK);
            (0..len)
                .map(|_| f(&sample_coefficients(d, law, &mut rng)))
                .collect()
        })
        .collect();
    parts.into_iter().flatten().collect()
}

/// A closed-form CDF value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticPoint {
    pub alpha: f64,
    pub cdf: f64,
    pub empirical: f64,
    pub form: &'static str,
}

/// A moment generating function value `E[exp(t X)]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MgfPoint {
    pub t: f64,
    pub analytic: f64,
    pub empirical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionReport {
    pub law: Law,
    pub quantity: Quantity,
    pub samples_drawn: usize,
    pub seed: u64,
    pub dimension: usize,
    /// Eigenvalues of the Gram matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// `|J^T pi0|` for society quantities.
    pub society_norm: Option<f64>,
    pub analytic_points: Vec<AnalyticPoint>,
    pub mgf_points: Vec<MgfPoint>,
    /// Sorted samples.
    #[serde(skip)]
    pub samples: Vec<f64>,
}

impl DistributionReport {
    /// Fraction of samples `<= alpha`.
    pub fn ecdf(&self, alpha: f64) -> f64 {
        ecdf(&self.samples, alpha)
    }

    /// Kolmogorov-Smirnov distance to a continuous CDF.
    pub fn ks_distance(&self, cdf: impl Fn(f64) -> f64) -> f64 {
        let n = self.samples.len() as f64;
        self.samples
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let n = self.samples.len() as f64;
        self.samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    }

    pub fn empirical_mgf(&self, t: f64) -> f64 {
        self.samples.iter().map(|x| (t * x).exp()).sum::<f64>() / self.samples.len() as f64
    }
}

fn ecdf(sorted: &[f64], alpha: f64) -> f64 {
    sorted.partition_point(|&x| x <= alpha) as f64 / sorted.len() as f64
}

fn sort(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Uniform-law CDF of `|D_Delta p|^2` where a closed form exists:
/// `1` for `alpha >= max lambda` and `alpha^{d/2} prod lambda_k^{-1/2}` for
/// `0 <= alpha <= min lambda` (when `min lambda > 0`).
pub fn uniform_tail_cdf(alpha: f64, eigenvalues: &[f64]) -> Option<f64> {
    tail_cdf(alpha, eigenvalues, eigenvalues.len() as f64 / 2.0)
}

/// The lower tail with exponent `d` on `alpha` instead of `d/2`, kept for
/// comparison with the sampled distribution.
pub fn uniform_tail_cdf_full_exponent(alpha: f64, eigenvalues: &[f64]) -> Option<f64> {
    tail_cdf(alpha, eigenvalues, eigenvalues.len() as f64)
}

fn tail_cdf(alpha: f64, eigenvalues: &[f64], exponent: f64) -> Option<f64> {
    let max = eigenvalues.iter().copied().fold(0.0, f64::max);
    let min = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if alpha < 0.0 {
        return Some(0.0);
    }
    if alpha >= max {
        return Some(1.0);
    }
    if min > 0.0 && alpha <= min {
        let log = exponent * alpha.ln() - 0.5 * eigenvalues.iter().map(|l| l.ln()).sum::<f64>();
        return Some(log.exp());
    }
    None
}

/// Gaussian-law MGF `prod (1 - 2 lambda_k t)^{-1/2}` of `|D_Delta p|^2`,
/// defined for `2 t max lambda < 1`.
pub fn gaussian_mgf(t: f64, eigenvalues: &[f64]) -> Option<f64> {
    let mut log = 0.0;
    for &l in eigenvalues {
        let a = 1.0 - 2.0 * l * t;
        if a <= 0.0 {
            return None;
        }
        log -= 0.5 * a.ln();
    }
    Some(log.exp())
}

/// CDF of `pi0^T J z` for `z` uniform on the unit ball of `R^d`, with
/// `s = |J^T pi0| > 0`, through the volume of a spherical cap.
pub fn society_uniform_cdf(alpha: f64, s: f64, d: usize) -> f64 {
    if alpha <= -s {
        return 0.0;
    }
    if alpha >= s {
        return 1.0;
    }
    if alpha == 0.0 {
        return 0.5;
    }
    let theta = 1.0 - (alpha / s).powi(2);
    let cap = 0.5 * beta_reg((d as f64 + 1.0) / 2.0, 0.5, theta);
    if alpha < 0.0 {
        cap
    } else {
        1.0 - cap
    }
}

/// CDF of `pi0^T J z` for standard normal `z`: `N(0, s^2)`.
pub fn society_gaussian_cdf(alpha: f64, s: f64) -> f64 {
    0.5 * libm::erfc(-alpha / (s * std::f64::consts::SQRT_2))
}

/// Distribution of `|D_Delta p|^2 = z^T (J^T J) z`.
pub fn deviation_distribution(
    op: &SensitivityOperator<'_>,
    law: Law,
    count: usize,
    seed: u64,
) -> DistributionReport {
    let d = op.dim();
    let j = op.jacobian();
    let samples = sort(map_samples(d, law, count, seed, |z| (j * z).norm_squared()));
    let eigenvalues: Vec<f64> = op.eigenvalues().iter().copied().collect();
    let max = eigenvalues.first().copied().unwrap_or(0.0);
    let min = eigenvalues.last().copied().unwrap_or(0.0);

    let mut analytic_points = Vec::new();
    let mut mgf_points = Vec::new();
    match law {
        Law::UniformBall => {
            analytic_points.push(AnalyticPoint {
                alpha: max,
                cdf: 1.0,
                empirical: ecdf(&samples, max),
                form: "upper-tail",
            });
            if min > 0.0 {
                for frac in [0.25, 0.5, 0.75, 1.0] {
                    let alpha = frac * min;
                    let empirical = ecdf(&samples, alpha);
                    if let Some(cdf) = uniform_tail_cdf(alpha, &eigenvalues) {
                        analytic_points.push(AnalyticPoint {
                            alpha,
                            cdf,
                            empirical,
                            form: "lower-tail",
                        });
                    }
                    if let Some(cdf) = uniform_tail_cdf_full_exponent(alpha, &eigenvalues) {
                        analytic_points.push(AnalyticPoint {
                            alpha,
                            cdf,
                            empirical,
                            form: "lower-tail-exponent-d",
                        });
                    }
                }
            }
        }
        Law::Gaussian => {
            if max > 0.0 {
                for frac in [0.05, 0.1, 0.2, 0.3, 0.4] {
                    let t = frac / max;
                    let analytic = gaussian_mgf(t, &eigenvalues).expect("t inside the strip");
                    let empirical =
                        samples.iter().map(|x| (t * x).exp()).sum::<f64>() / count as f64;
                    mgf_points.push(MgfPoint {
                        t,
                        analytic,
                        empirical,
                    });
                }
            }
        }
    }

    DistributionReport {
        law,
        quantity: Quantity::DeviationSquared,
        samples_drawn: count,
        seed,
        dimension: d,
        eigenvalues,
        society_norm: None,
        analytic_points,
        mgf_points,
        samples,
    }
}

/// Distribution of the first-order society payout change `pi0^T J z`.
/// When `|J^T pi0| = 0` the samples are a point mass at 0.
pub fn society_distribution(
    op: &SensitivityOperator<'_>,
    society_weights: &DVector<f64>,
    law: Law,
    count: usize,
    seed: u64,
) -> DistributionReport {
    let d = op.dim();
    let g = op.society_gradient(society_weights);
    let s = g.norm();
    let samples = if s == 0.0 {
        vec![0.0; count]
    } else {
        sort(map_samples(d, law, count, seed, |z| g.dot(z)))
    };

    let cdf = |alpha: f64| -> f64 {
        if s == 0.0 {
            return if alpha >= 0.0 { 1.0 } else { 0.0 };
        }
        match law {
            Law::UniformBall => society_uniform_cdf(alpha, s, d),
            Law::Gaussian => society_gaussian_cdf(alpha, s),
        }
    };
    let span = if s > 0.0 { s } else { 1.0 };
    let reach = match law {
        Law::UniformBall => 1.0,
        Law::Gaussian => 3.0,
    };
    let form = match law {
        Law::UniformBall => "spherical-cap",
        Law::Gaussian => "normal",
    };
    let analytic_points = (0..=8)
        .map(|k| {
            let alpha = reach * span * (k as f64 / 4.0 - 1.0);
            AnalyticPoint {
                alpha,
                cdf: cdf(alpha),
                empirical: ecdf(&samples, alpha),
                form,
            }
        })
        .collect();

    DistributionReport {
        law,
        quantity: Quantity::SocietyChange,
        samples_drawn: count,
        seed,
        dimension: d,
        eigenvalues: op.eigenvalues().iter().copied().collect(),
        society_norm: Some(s),
        analytic_points,
        mgf_points: Vec::new(),
        samples,
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// One row of a confidence band table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandRow {
    pub h: f64,
    /// Central coverage; 0 denotes the median.
    pub level: f64,
    pub low: f64,
    pub high: f64,
    pub rejected_fraction: f64,
    pub first_order_low: f64,
    pub first_order_high: f64,
}

/// Central quantile bands of the exact society payout change
/// `pi0^T (p(Pi + h Delta) - p(Pi))` with `Delta = sum z_k E_k`, per `h`.
///
/// Every `h` reuses the same coefficient draws. Draws for which
/// `Pi + h Delta` leaves `[0, 1]` or cannot be cleared are rejected.
/// First-order bands come from `h pi0^T J z` on the accepted draws.
pub fn confidence_bands(
    system: &FinancialSystem,
    basis: &PerturbationBasis,
    law: Law,
    h_grid: &[f64],
    levels: &[f64],
    count: usize,
    seed: u64,
) -> Result<Vec<BandRow>> {
    let pi0 = system
        .society_weights()
        .ok_or_else(|| Error::InvalidArgument("system has no society node".into()))?;
    if h_grid.is_empty() {
        return Err(Error::InvalidArgument("empty h grid".into()));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    if let Some(l) = levels.iter().find(|l| !(0.0..1.0).contains(*l)) {
        return Err(Error::InvalidArgument(format!("band level {l} not in [0, 1)")));
    }
    let base = clear(system)?;
    let op = crate::sensitivity::basis_jacobian(system, &base, basis)?;
    let g = op.society_gradient(pi0);
    let payout = pi0.dot(&base.payments);
    let pi = system.relative_liabilities();
    let d = basis.dim();

    let mut rows = Vec::new();
    for &h in h_grid {
        let outcomes: Vec<Option<(f64, f64)>> = map_samples(d, law, count, seed, |z| {
            let first = h * g.dot(z);
            if h == 0.0 || d == 0 {
                return Some((0.0, first));
            }
            let perturbed: DMatrix<f64> = pi + basis.combine(z) * h;
            let sys = system.with_relative_liabilities(&perturbed).ok()?;
            let p = payments_unchecked(&sys).ok()?;
            Some((pi0.dot(&p) - payout, first))
        });
        let accepted: Vec<(f64, f64)> = outcomes.into_iter().flatten().collect();
        let rejected_fraction = 1.0 - accepted.len() as f64 / count as f64;
        if accepted.is_empty() {
            return Err(Error::Numeric(format!("every sample was rejected at h = {h}")));
        }
        if rejected_fraction > REJECTION_WARN {
            warn!("h = {h}: {:.2}% of samples rejected", 100.0 * rejected_fraction);
        }
        let exact = sort(accepted.iter().map(|a| a.0).collect());
        let first = sort(accepted.iter().map(|a| a.1).collect());
        for &level in levels {
            let (ql, qh) = ((1.0 - level) / 2.0, (1.0 + level) / 2.0);
            rows.push(BandRow {
                h,
                level,
                low: quantile(&exact, ql),
                high: quantile(&exact, qh),
                rejected_fraction,
                first_order_low: quantile(&first, ql),
                first_order_high: quantile(&first, qh),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_samples_lie_in_ball() {
        let mut rng = chunk_rng(7, 0);
        for _ in 0..1000 {
            assert!(sample_coefficients(5, Law::UniformBall, &mut rng).norm() <= 1.0);
        }
    }

    #[test]
    fn sampling_independent_of_thread_count() {
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| map_samples(3, Law::Gaussian, 10_000, 42, |z| z[0]))
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn tail_cdf_regimes() {
        let lambda = [4.0, 1.0];
        assert_eq!(uniform_tail_cdf(5.0, &lambda), Some(1.0));
        assert_eq!(uniform_tail_cdf(2.0, &lambda), None);
        // alpha^{d/2} / sqrt(prod lambda) with d = 2
        assert!((uniform_tail_cdf(0.5, &lambda).unwrap() - 0.25).abs() < 1e-15);
        assert!((uniform_tail_cdf_full_exponent(0.5, &lambda).unwrap() - 0.125).abs() < 1e-15);
        assert_eq!(uniform_tail_cdf(0.5, &[1.0, 0.0]), None);
    }

    #[test]
    fn society_uniform_cdf_landmarks() {
        assert_eq!(society_uniform_cdf(0.0, 2.0, 5), 0.5);
        assert_eq!(society_uniform_cdf(2.0, 2.0, 5), 1.0);
        assert_eq!(society_uniform_cdf(-2.0, 2.0, 5), 0.0);
        let a = society_uniform_cdf(0.7, 2.0, 5);
        let b = society_uniform_cdf(-0.7, 2.0, 5);
        assert!((a + b - 1.0).abs() < 1e-14);
    }

    #[test]
    fn society_uniform_cdf_matches_quadrature() {
        // marginal density of one coordinate of the uniform d-ball is
        // proportional to (1 - t^2)^{(d - 1) / 2}
        let d = 5;
        let density = |t: f64| (1.0 - t * t).max(0.0).powf((d as f64 - 1.0) / 2.0);
        let simpson = |a: f64, b: f64| {
            let m = 20_000;
            let h = (b - a) / m as f64;
            let mut s = density(a) + density(b);
            for k in 1..m {
                let w = if k % 2 == 1 { 4.0 } else { 2.0 };
                s += w * density(a + k as f64 * h);
            }
            s * h / 3.0
        };
        let total = simpson(-1.0, 1.0);
        for alpha in [-0.9, -0.3, 0.1, 0.6] {
            let expected = simpson(-1.0, alpha) / total;
            let got = society_uniform_cdf(alpha * 3.0, 3.0, d);
            assert!((expected - got).abs() < 1e-10, "{alpha}: {expected} vs {got}");
        }
    }

    #[test]
    fn gaussian_mgf_strip() {
        assert!(gaussian_mgf(0.6, &[1.0]).is_none());
        assert!((gaussian_mgf(0.25, &[1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn normal_cdf_landmarks() {
        assert_eq!(society_gaussian_cdf(0.0, 3.0), 0.5);
        let v = society_gaussian_cdf(3.0, 3.0);
        assert!((v - 0.841_344_746_068_543).abs() < 1e-12, "{v}");
    }

    #[test]
    fn quantile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(quantile(&v, 0.5), 1.5);
        assert_eq!(quantile(&v, 0.0), 0.0);
        assert_eq!(quantile(&v, 1.0), 3.0);
    }
}
