#![allow(dead_code)]

use clearnet::clearing::clear;
use clearnet::{orthonormal_basis, BasisMode, FinancialSystem, PerturbationBasis};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn example_liabilities() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[0., 7., 1., 1., 3., 0., 3., 3., 1., 1., 0., 1., 1., 1., 1., 0.],
    )
}

pub fn example_assets() -> DVector<f64> {
    DVector::from_vec(vec![0., 2., 2., 2.])
}

pub fn example() -> FinancialSystem {
    FinancialSystem::new(example_liabilities(), example_assets(), None).unwrap()
}

/// The example interbank block with one unit owed to society by every bank.
pub fn society_example() -> FinancialSystem {
    FinancialSystem::new(
        example_liabilities(),
        example_assets(),
        Some(DVector::from_element(4, 1.0)),
    )
    .unwrap()
}

pub fn printed_worst_case() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            0., 0.3230, -0.1615, -0.1615, //
            -0.0381, 0., 0.0190, 0.0190, //
            0.0571, -0.4845, 0., 0.4274, //
            0.0571, -0.4845, 0.4274, 0.,
        ],
    )
}

pub fn printed_society_worst_case() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            0., 0.16, -0.46, 0.30, //
            0.11, 0., 0.16, -0.27, //
            0.06, 0.04, 0., -0.10, //
            -0.26, -0.34, 0.60, 0.,
        ],
    )
}

/// A random system with positive external assets (hence regular). Each
/// bank owes at least two others. Assets are scaled so that some banks
/// usually default.
pub fn random_system(n: usize, seed: u64, density: f64, society: bool) -> FinancialSystem {
    let mut r = rng(seed);
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && r.random::<f64>() < density {
                l[(i, j)] = r.random_range(0.5..5.0);
            }
        }
        while (0..n).filter(|&j| l[(i, j)] > 0.0).count() < 2.min(n - 1) {
            let j = r.random_range(0..n);
            if j != i {
                l[(i, j)] = r.random_range(0.5..5.0);
            }
        }
    }
    let l0 = society.then(|| DVector::from_fn(n, |_, _| r.random_range(0.5..3.0)));
    let p_bar: DVector<f64> = DVector::from_fn(n, |i, _| {
        l.row(i).sum() + l0.as_ref().map_or(0.0, |v| v[i])
    });
    let x = DVector::from_fn(n, |i, _| p_bar[i] * r.random_range(0.02..0.6));
    FinancialSystem::new(l, x, l0).unwrap()
}

pub fn fixed_basis(system: &FinancialSystem) -> PerturbationBasis {
    orthonormal_basis(
        system.relative_liabilities(),
        system.total_obligations(),
        BasisMode::FixedSupport,
    )
}

pub fn complete_basis(system: &FinancialSystem) -> PerturbationBasis {
    orthonormal_basis(
        system.relative_liabilities(),
        system.total_obligations(),
        BasisMode::Complete,
    )
}

pub fn gaussian_vector(d: usize, r: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| r.sample(StandardNormal))
}

/// A unit-norm direction with random coefficients.
pub fn random_direction(basis: &PerturbationBasis, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let z = gaussian_vector(basis.dim(), r);
    let z = &z / z.norm();
    basis.combine(&z)
}

/// A Haar-ish random orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn random_orthogonal(d: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| r.sample(StandardNormal));
    g.qr().q()
}

pub fn perturbed(system: &FinancialSystem, delta: &DMatrix<f64>, h: f64) -> FinancialSystem {
    system
        .with_relative_liabilities(&(system.relative_liabilities() + delta * h))
        .unwrap()
}

pub fn clearing_vector(system: &FinancialSystem) -> DVector<f64> {
    clear(system).unwrap().payments
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs())
}
