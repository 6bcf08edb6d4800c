//! Cardinality-constrained optimization at desk scale.
//!
//! The library builds the regularized continuous reformulation R(c,eps) of a
//! cardinality-constrained problem and its Scholtes-type regularization S(t),
//! finds local Karush-Kuhn-Tucker points of S(t), tracks them as t -> 0, and
//! classifies stationary points of both problems by nondegeneracy and index.
//!
//! Module map:
//!
//! - [`expr`]: expression DSL with second-order forward AD
//! - [`model`]: CCOP, R(c,eps), S(t), feasibility, problem files
//! - [`activesets`]: index-set detection and structural checks
//! - [`stationarity`]: multipliers, LICQ, tangent spaces, classification
//! - [`nlpsolver`]: SQP solver and Newton polish for S(t)
//! - [`homotopy`]: the Scholtes path, multiplier limits, predictor-corrector
//! - [`atlas`]: exhaustive T-stationary point enumeration for small instances

pub mod activesets;
pub mod atlas;
pub mod expr;
pub mod homotopy;
pub mod model;
pub mod nlpsolver;
pub mod stationarity;

use serde::Serialize;

/// Tolerance bundle used across detection, verification and classification.
///
/// The theory is exact-arithmetic; all of these are artifact choices. The
/// two-tier split between `activity` (1e-8) and the solver tolerance (1e-10)
/// keeps set detection stable against solver noise.
#[derive(Debug, Clone, Serialize)]
pub struct Tolerances {
    /// Activity threshold for index-set detection.
    pub activity: f64,
    /// Acceptable stationarity residual for a verified point.
    pub stationarity: f64,
    /// Relative rank tolerance for LICQ (scaled by max singular value).
    pub rank_rel: f64,
    /// Strict-positivity threshold: multipliers in (0, strict] are
    /// borderline and fail strict complementarity.
    pub strict: f64,
    /// Relative eigenvalue zero-threshold for restricted-Hessian inertia.
    pub eig_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            activity: 1e-8,
            stationarity: 1e-8,
            rank_rel: 1e-10,
            strict: 1e-8,
            eig_rel: 1e-8,
        }
    }
}
