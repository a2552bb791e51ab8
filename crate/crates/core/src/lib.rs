//! Eisenberg–Noe clearing vectors and their sensitivity to estimation
//! errors in the relative liabilities matrix.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] – financial systems, file ingestion, validation, regularity.
//! * [`clearing`] – the fictitious default algorithm and the network multiplier.
//! * [`perturb`] – admissible perturbation spaces, their orthonormal bases and
//!   the admissible step bounds `h*` / `h**`.
//! * [`sensitivity`] – directional derivatives of every order, the exact
//!   resolvent (Taylor) representation and the basis jacobian.
//! * [`extremal`] – worst-case deviations and society shortfalls with bounds.
//! * [`stochastic`] – error distributions under uniform-ball and Gaussian laws.

pub mod clearing;
pub mod error;
pub mod extremal;
pub mod model;
pub mod perturb;
pub mod sensitivity;
pub mod stochastic;

pub use clearing::{clear, network_multiplier, ClearingSolution};
pub use error::{Error, Result};
pub use extremal::{
    deviation_bounds, society_bounds, worst_case_deviation, worst_society_shortfall, Bounds,
    ExtremalReport, Normalization,
};
pub use model::{FinancialSystem, ValidationReport};
pub use perturb::{
    h_star, h_star_star, is_admissible, orthonormal_basis, BasisMode, PerturbationBasis,
    PerturbationMatrix, StepBounds, SupportMode,
};
pub use sensitivity::{
    basis_jacobian, directional_derivative, kth_derivative, taylor_clearing, Linearization,
    SensitivityOperator,
};
pub use stochastic::{DistributionReport, Law, Quantity};
