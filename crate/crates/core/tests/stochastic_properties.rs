mod common;

use clearnet::clearing::clear;
use clearnet::stochastic::{
    confidence_bands, deviation_distribution, map_samples, society_distribution,
    society_gaussian_cdf, society_uniform_cdf, uniform_tail_cdf, uniform_tail_cdf_full_exponent,
};
use clearnet::{basis_jacobian, h_star, FinancialSystem, Law, PerturbationBasis};
use common::*;

const N: usize = 100_000;

/// Two-sample Kolmogorov-Smirnov distance of sorted samples.
fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (mut i, mut j, mut worst) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        worst = worst.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    worst
}

/// Monte Carlo standard error of an empirical probability.
fn mc_sigma(p: f64, count: usize) -> f64 {
    (p * (1.0 - p) / count as f64).sqrt()
}

/// A sparse system whose basis jacobian has full column rank, so that the
/// lower-tail regime `alpha <= min lambda` is not empty.
fn full_rank_case() -> (FinancialSystem, PerturbationBasis) {
    for seed in 0..10_000 {
        let sys = random_system(6, seed, 0.3, false);
        let basis = fixed_basis(&sys);
        if !(2..=4).contains(&basis.dim()) {
            continue;
        }
        let sol = clear(&sys).unwrap();
        let op = basis_jacobian(&sys, &sol, &basis).unwrap();
        let ev = op.eigenvalues();
        if ev[ev.len() - 1] > 0.05 * ev[0] {
            return (sys, basis);
        }
    }
    panic!("no full-rank case found");
}

#[test]
fn distributions_are_reproducible() {
    let sys = society_example();
    let basis = fixed_basis(&sys);
    let sol = clear(&sys).unwrap();
    let op = basis_jacobian(&sys, &sol, &basis).unwrap();
    for law in [Law::UniformBall, Law::Gaussian] {
        let a = deviation_distribution(&op, law, 20_000, 9);
        let b = deviation_distribution(&op, law, 20_000, 9);
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.samples.len(), 20_000);
        let c = deviation_distribution(&op, law, 20_000, 10);
        assert_ne!(a.samples, c.samples);
        let pi0 = sys.society_weights().unwrap();
        let s = society_distribution(&op, pi0, law, 20_000, 9);
        assert_eq!(s.samples, society_distribution(&op, pi0, law, 20_000, 9).samples);
    }
}

#[test]
fn empirical_cdf_is_monotone_in_unit_interval() {
    let sys = example();
    let basis = complete_basis(&sys);
    let op = basis_jacobian(&sys, &clear(&sys).unwrap(), &basis).unwrap();
    let report = deviation_distribution(&op, Law::UniformBall, 10_000, 1);
    let top = op.max_eigenvalue();
    let mut last = 0.0;
    for k in 0..=50 {
        let v = report.ecdf(top * k as f64 / 40.0);
        assert!((0.0..=1.0).contains(&v) && v >= last);
        last = v;
    }
    assert_eq!(last, 1.0);
}

#[test]
fn uniform_ball_second_moment() {
    let d = 5;
    let sq = map_samples(d, Law::UniformBall, N, 3, |z| z.norm_squared());
    let mean = sq.iter().sum::<f64>() / N as f64;
    let expected = d as f64 / (d as f64 + 2.0);
    assert!(rel_close(mean, expected, 0.01), "{mean} vs {expected}");
    assert!(sq.iter().all(|&r| r <= 1.0));
}

#[test]
fn gaussian_components_are_standard() {
    let d = 4;
    let draws = map_samples(d, Law::Gaussian, N, 5, |z| z.clone());
    for k in 0..d {
        let mean = draws.iter().map(|z| z[k]).sum::<f64>() / N as f64;
        let var = draws.iter().map(|z| (z[k] - mean).powi(2)).sum::<f64>() / (N - 1) as f64;
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((0.97..=1.03).contains(&var), "variance {var}");
    }
}

#[test]
fn equal_eigenvalues_fix_the_tail_exponent() {
    // with every eigenvalue equal to c the deviation is c |z|^2 and its law
    // follows from the radius law of the ball
    let (d, c, count) = (4, 2.0, 1_000_000);
    let mut samples = map_samples(d, Law::UniformBall, count, 11, |z| c * z.norm_squared());
    samples.sort_by(f64::total_cmp);
    let lambda = vec![c; d];
    for alpha in [0.3, 0.8, 1.4, 2.0] {
        let empirical = samples.partition_point(|&x| x <= alpha) as f64 / count as f64;
        let radius_law = (alpha / c).powf(d as f64 / 2.0);
        let half = uniform_tail_cdf(alpha, &lambda).unwrap();
        let full = uniform_tail_cdf_full_exponent(alpha, &lambda).unwrap();
        let sigma = mc_sigma(radius_law, count).max(1e-6);
        assert!((half - radius_law).abs() < 1e-14);
        assert!((empirical - radius_law).abs() <= 4.0 * sigma, "{alpha}: {empirical} vs {radius_law}");
        if alpha < c {
            assert!((empirical - full).abs() > 10.0 * sigma);
        }
    }
}

#[test]
fn uniform_tails_hold_when_the_spectrum_is_positive() {
    let (sys, basis) = full_rank_case();
    let op = basis_jacobian(&sys, &clear(&sys).unwrap(), &basis).unwrap();
    let report = deviation_distribution(&op, Law::UniformBall, N, 2);
    let upper: Vec<_> = report
        .analytic_points
        .iter()
        .filter(|p| p.form == "upper-tail")
        .collect();
    assert_eq!(upper.len(), 1);
    assert_eq!(upper[0].empirical, 1.0);
    let lower: Vec<_> = report
        .analytic_points
        .iter()
        .filter(|p| p.form == "lower-tail")
        .collect();
    assert_eq!(lower.len(), 4);
    for p in lower {
        let sigma = mc_sigma(p.cdf, N).max(1.0 / N as f64);
        assert!((p.empirical - p.cdf).abs() <= 3.0 * sigma, "{p:?}");
    }
}

#[test]
fn gaussian_society_law_is_normal() {
    let sys = society_example();
    let basis = fixed_basis(&sys);
    let op = basis_jacobian(&sys, &clear(&sys).unwrap(), &basis).unwrap();
    let pi0 = sys.society_weights().unwrap();
    let report = society_distribution(&op, pi0, Law::Gaussian, N, 4);
    let s = report.society_norm.unwrap();
    assert!(report.ks_distance(|a| society_gaussian_cdf(a, s)) <= 0.01);
    let uniform = society_distribution(&op, pi0, Law::UniformBall, N, 4);
    assert!(uniform.ks_distance(|a| society_uniform_cdf(a, s, op.dim())) <= 0.01);
}

#[test]
fn distributions_do_not_depend_on_the_basis() {
    let sys = society_example();
    let sol = clear(&sys).unwrap();
    let basis = fixed_basis(&sys);
    let rotated = basis.rotated(&random_orthogonal(basis.dim(), &mut rng(59)));
    let op = basis_jacobian(&sys, &sol, &basis).unwrap();
    let op_rot = basis_jacobian(&sys, &sol, &rotated).unwrap();
    let pi0 = sys.society_weights().unwrap();
    let tolerance = 1.36 * (2.0 / N as f64).sqrt();
    for law in [Law::UniformBall, Law::Gaussian] {
        let a = deviation_distribution(&op, law, N, 6);
        let b = deviation_distribution(&op_rot, law, N, 7);
        assert!(ks_two_sample(&a.samples, &b.samples) <= 2.0 * tolerance);
        let a = society_distribution(&op, pi0, law, N, 6);
        let b = society_distribution(&op_rot, pi0, law, N, 7);
        assert!(ks_two_sample(&a.samples, &b.samples) <= 2.0 * tolerance);
    }
}

#[test]
fn bands_vanish_at_zero_and_follow_first_order_for_small_steps() {
    let sys = society_example();
    let basis = fixed_basis(&sys);
    let scale = h_star(sys.relative_liabilities(), &basis.matrix(0), sys.total_obligations());
    let small = 1e-4 * scale;
    for law in [Law::UniformBall, Law::Gaussian] {
        let rows = confidence_bands(&sys, &basis, law, &[0.0, small], &[0.0, 0.5, 0.9], 20_000, 8)
            .unwrap();
        for row in rows.iter().filter(|r| r.h == 0.0) {
            assert_eq!((row.low, row.high), (0.0, 0.0));
        }
        for row in rows.iter().filter(|r| r.h == small && r.level > 0.0) {
            assert_eq!(row.rejected_fraction, 0.0);
            assert!(rel_close(row.low, row.first_order_low, 0.01), "{row:?}");
            assert!(rel_close(row.high, row.first_order_high, 0.01), "{row:?}");
        }
    }
}

#[test]
fn median_band_stays_near_zero() {
    let sys = society_example();
    let basis = fixed_basis(&sys);
    // beyond this range rejected draws, which are not sign-symmetric, bias the
    // accepted sample
    let grid = [0.01, 0.02, 0.05];
    for law in [Law::UniformBall, Law::Gaussian] {
        let rows = confidence_bands(&sys, &basis, law, &grid, &[0.0, 0.9], N, 12).unwrap();
        for &h in &grid {
            let median = rows.iter().find(|r| r.h == h && r.level == 0.0).unwrap();
            let wide = rows.iter().find(|r| r.h == h && r.level == 0.9).unwrap();
            let width = wide.high - wide.low;
            assert!(width > 0.0 && median.rejected_fraction <= 0.01);
            // the linear part is exactly symmetric; curvature of the exact
            // response shifts the median by a few percent of the band at most
            assert!(median.first_order_low.abs() <= 0.01 * width);
            assert!(median.low.abs() <= 0.05 * width, "h = {h}: median {} width {width}", median.low);
        }
    }
}
