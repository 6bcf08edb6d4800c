//! Stationarity verification and classification.
//!
//! For a point of R the stationarity condition couples the objective gradient
//! and the regularization vector `c` to the active-constraint directions:
//!
//! ```text
//!   (grad f, c) =   sum_p  lambda_p (grad h_p, 0)
//!                 + sum_{Q0} mu1_q (grad g_q, 0)  -  sum_E mu2_i (0, e_i)
//!                 + mu3 (0, e)
//!                 + sum_{a01} sigma1_i (e_i, 0) + sum_{a10} sigma2_i (0, e_i)
//!                 + sum_{a00} ( rho1_i (e_i, 0) + rho2_i (0, e_i) )
//! ```
//!
//! with sign conditions `mu1, mu2, mu3 >= 0`, complementarity of `mu3` with
//! the summation slack, and `rho1_i = 0 or rho2_i <= 0` on biactive indices.
//! For S(t) the analogous KKT system uses the coupled band directions
//! `(y_i e_i, x_i e_i)` with `eta>= , eta<=, nu >= 0` (the `eta<=` column
//! enters with a minus sign, as does `mu2`).
//!
//! Classification projects the Lagrangian Hessian onto the tangent space of
//! the active constraints and reads off the inertia. On the R side the
//! T-index adds the biactive count: `TI = QI + BI`.

use nalgebra::{DMatrix, DVector};
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::activesets::{self, ActivePattern, ActiveSetError, Side};
use crate::expr::EvalError;
use crate::model::{PointXY, ReformR, ScholtesS};
use crate::Tolerances;

#[derive(Debug, Error)]
pub enum StationarityError {
    #[error(transparent)]
    ActiveSet(#[from] ActiveSetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("LICQ fails: min singular value {min_sv:.3e} <= threshold {threshold:.3e}; {what}")]
    LicqFailed {
        min_sv: f64,
        threshold: f64,
        what: String,
    },
    #[error("{0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Multipliers
// ---------------------------------------------------------------------------

fn ser_one_based<S: Serializer>(i: &usize, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u64((*i + 1) as u64)
}

/// A multiplier attached to a (0-based) constraint index; serialized 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Indexed {
    #[serde(serialize_with = "ser_one_based")]
    pub index: usize,
    pub value: f64,
}

fn lookup(list: &[Indexed], index: usize) -> Option<f64> {
    list.iter().find(|m| m.index == index).map(|m| m.value)
}

/// Multipliers of the T-stationarity condition of R.
#[derive(Debug, Clone, Serialize)]
pub struct MultiplierSetR {
    pub lambda: Vec<f64>,
    pub mu1: Vec<Indexed>,
    pub mu2: Vec<Indexed>,
    pub mu3: f64,
    pub sigma1: Vec<Indexed>,
    pub sigma2: Vec<Indexed>,
    pub rho1: Vec<Indexed>,
    pub rho2: Vec<Indexed>,
}

impl MultiplierSetR {
    pub fn mu1_for(&self, q: usize) -> Option<f64> {
        lookup(&self.mu1, q)
    }
    pub fn mu2_for(&self, i: usize) -> Option<f64> {
        lookup(&self.mu2, i)
    }
    pub fn sigma1_for(&self, i: usize) -> Option<f64> {
        lookup(&self.sigma1, i)
    }
    pub fn sigma2_for(&self, i: usize) -> Option<f64> {
        lookup(&self.sigma2, i)
    }
    pub fn rho1_for(&self, i: usize) -> Option<f64> {
        lookup(&self.rho1, i)
    }
    pub fn rho2_for(&self, i: usize) -> Option<f64> {
        lookup(&self.rho2, i)
    }
}

/// Multipliers of the KKT condition of S(t).
#[derive(Debug, Clone, Serialize)]
pub struct MultiplierSetS {
    pub lambda: Vec<f64>,
    pub mu1: Vec<Indexed>,
    pub mu2: Vec<Indexed>,
    pub mu3: f64,
    pub eta_ge: Vec<Indexed>,
    pub eta_le: Vec<Indexed>,
    pub nu: Vec<Indexed>,
}

impl MultiplierSetS {
    pub fn mu1_for(&self, q: usize) -> Option<f64> {
        lookup(&self.mu1, q)
    }
    pub fn eta_ge_for(&self, i: usize) -> Option<f64> {
        lookup(&self.eta_ge, i)
    }
    pub fn eta_le_for(&self, i: usize) -> Option<f64> {
        lookup(&self.eta_le, i)
    }
    pub fn nu_for(&self, i: usize) -> Option<f64> {
        lookup(&self.nu, i)
    }
}

// ---------------------------------------------------------------------------
// Active gradient columns
// ---------------------------------------------------------------------------

/// Which multiplier a gradient column belongs to, and its sign in the
/// stationarity equation (+1 everywhere except `mu2` and `eta<=`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRole {
    Lambda(usize),
    Mu1(usize),
    Mu2(usize),
    Mu3,
    Sigma1(usize),
    Sigma2(usize),
    Rho1(usize),
    Rho2(usize),
    EtaGe(usize),
    EtaLe(usize),
    Nu(usize),
}

impl ColumnRole {
    pub fn sign(self) -> f64 {
        match self {
            ColumnRole::Mu2(_) | ColumnRole::EtaLe(_) => -1.0,
            _ => 1.0,
        }
    }
}

/// Active-constraint gradients as columns of a `2n x alpha` matrix, in the
/// fixed order used throughout: h, g (Q0), y-upper (E), the summation
/// direction, then the orthogonality/band directions.
#[derive(Debug, Clone)]
pub struct GradientColumns {
    pub matrix: DMatrix<f64>,
    pub roles: Vec<ColumnRole>,
}

impl GradientColumns {
    pub fn alpha(&self) -> usize {
        self.roles.len()
    }

    /// Columns with the stationarity signs applied.
    pub fn signed(&self) -> DMatrix<f64> {
        let mut m = self.matrix.clone();
        for (j, role) in self.roles.iter().enumerate() {
            if role.sign() < 0.0 {
                m.column_mut(j).neg_mut();
            }
        }
        m
    }
}

fn shared_columns(
    reform: &ReformR,
    point: &PointXY,
    pattern: &ActivePattern,
    cols: &mut Vec<DVector<f64>>,
    roles: &mut Vec<ColumnRole>,
) -> Result<(), EvalError> {
    let n = reform.n();
    let dim = 2 * n;
    for (p, hexpr) in reform.problem().equalities().iter().enumerate() {
        let grad = hexpr.eval2(&point.x)?.gradient;
        let mut col = DVector::zeros(dim);
        col.rows_mut(0, n).copy_from(&grad);
        cols.push(col);
        roles.push(ColumnRole::Lambda(p));
    }
    for &q in &pattern.q0 {
        let grad = reform.problem().inequalities()[q].eval2(&point.x)?.gradient;
        let mut col = DVector::zeros(dim);
        col.rows_mut(0, n).copy_from(&grad);
        cols.push(col);
        roles.push(ColumnRole::Mu1(q));
    }
    for &i in &pattern.e_upper {
        let mut col = DVector::zeros(dim);
        col[n + i] = 1.0;
        cols.push(col);
        roles.push(ColumnRole::Mu2(i));
    }
    if pattern.sum_active {
        let mut col = DVector::zeros(dim);
        for i in 0..n {
            col[n + i] = 1.0;
        }
        cols.push(col);
        roles.push(ColumnRole::Mu3);
    }
    Ok(())
}

fn assemble(cols: Vec<DVector<f64>>, roles: Vec<ColumnRole>, dim: usize) -> GradientColumns {
    let matrix = if cols.is_empty() {
        DMatrix::zeros(dim, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    GradientColumns { matrix, roles }
}

/// Active gradients of R at `point` for the given pattern (MPOC-LICQ
/// directions): equalities, active inequalities, active y-bounds, the
/// summation direction, then `(e_i, 0)` for `a01 ∪ a00` and `(0, e_i)` for
/// `a10 ∪ a00`, each in increasing index order.
pub fn active_gradients_r(
    reform: &ReformR,
    point: &PointXY,
    pattern: &ActivePattern,
) -> Result<GradientColumns, EvalError> {
    let n = reform.n();
    let dim = 2 * n;
    let mut cols = Vec::new();
    let mut roles = Vec::new();
    shared_columns(reform, point, pattern, &mut cols, &mut roles)?;
    let mut x_zero: Vec<usize> = pattern
        .a01
        .iter()
        .chain(pattern.a00.iter())
        .copied()
        .collect();
    x_zero.sort_unstable();
    for i in x_zero {
        let mut col = DVector::zeros(dim);
        col[i] = 1.0;
        cols.push(col);
        roles.push(if pattern.a01.contains(&i) {
            ColumnRole::Sigma1(i)
        } else {
            ColumnRole::Rho1(i)
        });
    }
    let mut y_zero: Vec<usize> = pattern
        .a10
        .iter()
        .chain(pattern.a00.iter())
        .copied()
        .collect();
    y_zero.sort_unstable();
    for i in y_zero {
        let mut col = DVector::zeros(dim);
        col[n + i] = 1.0;
        cols.push(col);
        roles.push(if pattern.a10.contains(&i) {
            ColumnRole::Sigma2(i)
        } else {
            ColumnRole::Rho2(i)
        });
    }
    Ok(assemble(cols, roles, dim))
}

/// Active gradients of S(t) at `point` (LICQ directions), with the coupled
/// band columns `(y_i e_i, x_i e_i)` for active band indices.
pub fn active_gradients_s(
    scholtes: &ScholtesS<'_>,
    point: &PointXY,
    pattern: &ActivePattern,
) -> Result<GradientColumns, EvalError> {
    let reform = scholtes.reform();
    let n = reform.n();
    let dim = 2 * n;
    // A band index always has y_i != 0 when t > 0, so H and N are disjoint.
    debug_assert!(pattern
        .n_zero
        .iter()
        .all(|i| !pattern.h_ge.contains(i) && !pattern.h_le.contains(i)));
    let mut cols = Vec::new();
    let mut roles = Vec::new();
    shared_columns(reform, point, pattern, &mut cols, &mut roles)?;
    for i in pattern.h() {
        let mut col = DVector::zeros(dim);
        col[i] = point.y[i];
        col[n + i] = point.x[i];
        cols.push(col);
        roles.push(if pattern.h_ge.contains(&i) {
            ColumnRole::EtaGe(i)
        } else {
            ColumnRole::EtaLe(i)
        });
    }
    for &i in &pattern.n_zero {
        let mut col = DVector::zeros(dim);
        col[n + i] = 1.0;
        cols.push(col);
        roles.push(ColumnRole::Nu(i));
    }
    Ok(assemble(cols, roles, dim))
}

// ---------------------------------------------------------------------------
// LICQ and tangent space
// ---------------------------------------------------------------------------

/// LICQ verdict with the extreme singular values of the gradient matrix.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LicqReport {
    pub ok: bool,
    pub min_singular_value: f64,
    pub max_singular_value: f64,
    pub rank_tol: f64,
}

/// LICQ holds iff the smallest singular value exceeds
/// `rank_tol * max(largest singular value, 1)`. An empty matrix passes
/// vacuously.
pub fn check_licq(matrix: &DMatrix<f64>, rank_tol: f64) -> LicqReport {
    assert!(rank_tol > 0.0);
    if matrix.ncols() == 0 {
        return LicqReport {
            ok: true,
            min_singular_value: f64::INFINITY,
            max_singular_value: 0.0,
            rank_tol,
        };
    }
    let svs = matrix.clone().singular_values();
    let max_sv = svs.max();
    // columns may outnumber rows; then the rank is deficient by construction
    let min_sv = if matrix.ncols() > matrix.nrows() {
        0.0
    } else {
        svs.min()
    };
    LicqReport {
        ok: min_sv > rank_tol * max_sv.max(1.0),
        min_singular_value: min_sv,
        max_singular_value: max_sv,
        rank_tol,
    }
}

/// Orthonormal basis of the tangent space: the null space of the transposed
/// active-gradient matrix. Refuses when LICQ fails, since the dimension would
/// be ambiguous. Returns a `2n x (2n - alpha)` matrix with orthonormal
/// columns annihilated by every active gradient.
pub fn tangent_basis(
    matrix: &DMatrix<f64>,
    rank_tol: f64,
) -> Result<DMatrix<f64>, StationarityError> {
    let dim = matrix.nrows();
    let alpha = matrix.ncols();
    let licq = check_licq(matrix, rank_tol);
    if !licq.ok {
        return Err(StationarityError::LicqFailed {
            min_sv: licq.min_singular_value,
            threshold: rank_tol * licq.max_singular_value.max(1.0),
            what: "tangent space dimension is ambiguous".into(),
        });
    }
    if alpha == 0 {
        return Ok(DMatrix::identity(dim, dim));
    }
    // Project out the column span, then read the orthonormal complement off
    // the symmetric eigendecomposition of the projector.
    let qr = matrix.clone().qr();
    let q = qr.q();
    let proj = DMatrix::identity(dim, dim) - &q * q.transpose();
    let eig = nalgebra::SymmetricEigen::new(proj);
    let mut cols = Vec::new();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > 0.5 {
            cols.push(eig.eigenvectors.column(j).into_owned());
        }
    }
    if cols.len() != dim - alpha {
        return Err(StationarityError::Invalid(format!(
            "tangent basis dimension {} != expected {}",
            cols.len(),
            dim - alpha
        )));
    }
    Ok(if cols.is_empty() {
        DMatrix::zeros(dim, 0)
    } else {
        DMatrix::from_columns(&cols)
    })
}

// ---------------------------------------------------------------------------
// Multiplier estimation
// ---------------------------------------------------------------------------

fn stationarity_rhs(reform: &ReformR, point: &PointXY) -> Result<DVector<f64>, EvalError> {
    let n = reform.n();
    let grad_f = reform.problem().objective().eval2(&point.x)?.gradient;
    let mut b = DVector::zeros(2 * n);
    b.rows_mut(0, n).copy_from(&grad_f);
    b.rows_mut(n, n).copy_from(reform.c());
    Ok(b)
}

/// Least-squares solve of the stationarity equation for the columns in
/// `grads`. Returns the coefficient per column (stationarity sign
/// convention already applied) and the residual norm.
fn solve_multipliers(grads: &GradientColumns, b: &DVector<f64>) -> (DVector<f64>, f64) {
    if grads.alpha() == 0 {
        return (DVector::zeros(0), b.norm());
    }
    let a = grads.signed();
    let svd = a.clone().svd(true, true);
    let m = svd
        .solve(b, 1e-13)
        .expect("svd solve with computed factors");
    let residual = (&a * &m - b).norm();
    (m, residual)
}

fn split_r(grads: &GradientColumns, m: &DVector<f64>, n_eq: usize) -> MultiplierSetR {
    let mut out = MultiplierSetR {
        lambda: vec![0.0; n_eq],
        mu1: vec![],
        mu2: vec![],
        mu3: 0.0,
        sigma1: vec![],
        sigma2: vec![],
        rho1: vec![],
        rho2: vec![],
    };
    for (j, role) in grads.roles.iter().enumerate() {
        let value = m[j];
        match *role {
            ColumnRole::Lambda(p) => out.lambda[p] = value,
            ColumnRole::Mu1(q) => out.mu1.push(Indexed { index: q, value }),
            ColumnRole::Mu2(i) => out.mu2.push(Indexed { index: i, value }),
            ColumnRole::Mu3 => out.mu3 = value,
            ColumnRole::Sigma1(i) => out.sigma1.push(Indexed { index: i, value }),
            ColumnRole::Sigma2(i) => out.sigma2.push(Indexed { index: i, value }),
            ColumnRole::Rho1(i) => out.rho1.push(Indexed { index: i, value }),
            ColumnRole::Rho2(i) => out.rho2.push(Indexed { index: i, value }),
            _ => unreachable!("S-side role in R system"),
        }
    }
    out
}

fn split_s(grads: &GradientColumns, m: &DVector<f64>, n_eq: usize) -> MultiplierSetS {
    let mut out = MultiplierSetS {
        lambda: vec![0.0; n_eq],
        mu1: vec![],
        mu2: vec![],
        mu3: 0.0,
        eta_ge: vec![],
        eta_le: vec![],
        nu: vec![],
    };
    for (j, role) in grads.roles.iter().enumerate() {
        let value = m[j];
        match *role {
            ColumnRole::Lambda(p) => out.lambda[p] = value,
            ColumnRole::Mu1(q) => out.mu1.push(Indexed { index: q, value }),
            ColumnRole::Mu2(i) => out.mu2.push(Indexed { index: i, value }),
            ColumnRole::Mu3 => out.mu3 = value,
            ColumnRole::EtaGe(i) => out.eta_ge.push(Indexed { index: i, value }),
            ColumnRole::EtaLe(i) => out.eta_le.push(Indexed { index: i, value }),
            ColumnRole::Nu(i) => out.nu.push(Indexed { index: i, value }),
            _ => unreachable!("R-side role in S system"),
        }
    }
    out
}

/// Estimate the T-stationarity multipliers of R at `point` by least squares.
/// Under MPOC-LICQ the solution is unique; otherwise the least-norm solution
/// is returned (the caller sees the rank deficiency in the LICQ report).
pub fn estimate_multipliers_r(
    reform: &ReformR,
    point: &PointXY,
    pattern: &ActivePattern,
) -> Result<(MultiplierSetR, f64), StationarityError> {
    if pattern.side != Side::R {
        return Err(StationarityError::Invalid("pattern is not R-side".into()));
    }
    let grads = active_gradients_r(reform, point, pattern)?;
    let b = stationarity_rhs(reform, point)?;
    let (m, residual) = solve_multipliers(&grads, &b);
    Ok((
        split_r(&grads, &m, reform.problem().equalities().len()),
        residual,
    ))
}

/// Estimate the KKT multipliers of S(t) at `point` by least squares.
pub fn estimate_multipliers_s(
    scholtes: &ScholtesS<'_>,
    point: &PointXY,
    pattern: &ActivePattern,
) -> Result<(MultiplierSetS, f64), StationarityError> {
    if pattern.side != Side::S {
        return Err(StationarityError::Invalid("pattern is not S-side".into()));
    }
    let grads = active_gradients_s(scholtes, point, pattern)?;
    let b = stationarity_rhs(scholtes.reform(), point)?;
    let (m, residual) = solve_multipliers(&grads, &b);
    Ok((
        split_s(&grads, &m, scholtes.reform().problem().equalities().len()),
        residual,
    ))
}

// ---------------------------------------------------------------------------
// Sign verification
// ---------------------------------------------------------------------------

/// Outcome of the sign/complementarity verification.
#[derive(Debug, Clone, Serialize)]
pub struct SignVerdict {
    pub ok: bool,
    pub failures: Vec<String>,
}

/// Verify the T-stationarity sign conditions: `mu1, mu2, mu3 >= 0`,
/// complementarity of `mu3` with the summation slack, and for each biactive
/// index `rho1 = 0` (within tol) or `rho2 <= tol`.
pub fn verify_t_stationary(
    mults: &MultiplierSetR,
    pattern: &ActivePattern,
    tol: f64,
) -> SignVerdict {
    let mut failures = Vec::new();
    for m in &mults.mu1 {
        if m.value < -tol {
            failures.push(format!("mu1[g{}] = {} < 0", m.index + 1, m.value));
        }
    }
    for m in &mults.mu2 {
        if m.value < -tol {
            failures.push(format!("mu2[y{}] = {} < 0", m.index + 1, m.value));
        }
    }
    if mults.mu3 < -tol {
        failures.push(format!("mu3 = {} < 0", mults.mu3));
    }
    if !pattern.sum_active && mults.mu3.abs() > tol {
        failures.push(format!(
            "mu3 = {} nonzero while the summation constraint is inactive",
            mults.mu3
        ));
    }
    for i in &pattern.a00 {
        let r1 = mults.rho1_for(*i).unwrap_or(0.0);
        let r2 = mults.rho2_for(*i).unwrap_or(0.0);
        if r1.abs() > tol && r2 > tol {
            failures.push(format!(
                "biactive index {}: rho1 = {r1} != 0 and rho2 = {r2} > 0",
                i + 1
            ));
        }
    }
    SignVerdict {
        ok: failures.is_empty(),
        failures,
    }
}

/// Verify the KKT sign conditions of S: all listed multipliers nonnegative
/// and `mu3` complementarity.
pub fn verify_kkt(mults: &MultiplierSetS, pattern: &ActivePattern, tol: f64) -> SignVerdict {
    let mut failures = Vec::new();
    for m in &mults.mu1 {
        if m.value < -tol {
            failures.push(format!("mu1[g{}] = {} < 0", m.index + 1, m.value));
        }
    }
    for m in &mults.mu2 {
        if m.value < -tol {
            failures.push(format!("mu2[y{}] = {} < 0", m.index + 1, m.value));
        }
    }
    if mults.mu3 < -tol {
        failures.push(format!("mu3 = {} < 0", mults.mu3));
    }
    if !pattern.sum_active && mults.mu3.abs() > tol {
        failures.push(format!(
            "mu3 = {} nonzero while the summation constraint is inactive",
            mults.mu3
        ));
    }
    for m in &mults.eta_ge {
        if m.value < -tol {
            failures.push(format!("eta_ge[{}] = {} < 0", m.index + 1, m.value));
        }
    }
    for m in &mults.eta_le {
        if m.value < -tol {
            failures.push(format!("eta_le[{}] = {} < 0", m.index + 1, m.value));
        }
    }
    for m in &mults.nu {
        if m.value < -tol {
            failures.push(format!("nu[{}] = {} < 0", m.index + 1, m.value));
        }
    }
    SignVerdict {
        ok: failures.is_empty(),
        failures,
    }
}

// ---------------------------------------------------------------------------
// Lagrangian Hessians
// ---------------------------------------------------------------------------

fn weighted_x_block(
    reform: &ReformR,
    point: &PointXY,
    lambda: &[f64],
    mu1: &[Indexed],
) -> Result<DMatrix<f64>, EvalError> {
    let n = reform.n();
    let mut block = reform.problem().objective().eval2(&point.x)?.hessian;
    for (p, hexpr) in reform.problem().equalities().iter().enumerate() {
        let hess = hexpr.eval2(&point.x)?.hessian;
        block -= hess * lambda[p];
    }
    for m in mu1 {
        let hess = reform.problem().inequalities()[m.index]
            .eval2(&point.x)?
            .hessian;
        block -= hess * m.value;
    }
    debug_assert_eq!(block.nrows(), n);
    Ok(block)
}

fn embed_x_block(block: DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let mut full = DMatrix::zeros(2 * n, 2 * n);
    full.view_mut((0, 0), (n, n)).copy_from(&block);
    full
}

/// Hessian of the Lagrangian of R at `point`: only the x-block is nonzero
/// (every y-coupled term of the Lagrangian is linear).
pub fn lagrangian_hessian_r(
    reform: &ReformR,
    point: &PointXY,
    mults: &MultiplierSetR,
) -> Result<DMatrix<f64>, EvalError> {
    let n = reform.n();
    let block = weighted_x_block(reform, point, &mults.lambda, &mults.mu1)?;
    Ok(embed_x_block(block, n))
}

/// Hessian of the Lagrangian of S(t): the same x-block plus the band cross
/// terms `-eta_ge_i E(i) + eta_le_i E(i)` with
/// `E(i) = e_i e_{n+i}' + e_{n+i} e_i'`.
pub fn lagrangian_hessian_s(
    scholtes: &ScholtesS<'_>,
    point: &PointXY,
    mults: &MultiplierSetS,
) -> Result<DMatrix<f64>, EvalError> {
    let reform = scholtes.reform();
    let n = reform.n();
    let block = weighted_x_block(reform, point, &mults.lambda, &mults.mu1)?;
    let mut full = embed_x_block(block, n);
    for m in &mults.eta_ge {
        full[(m.index, n + m.index)] -= m.value;
        full[(n + m.index, m.index)] -= m.value;
    }
    for m in &mults.eta_le {
        full[(m.index, n + m.index)] += m.value;
        full[(n + m.index, m.index)] += m.value;
    }
    Ok(full)
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ReportKind {
    TStationaryR,
    KktS,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Inertia {
    pub negatives: usize,
    pub zeros: usize,
    pub positives: usize,
}

/// One nondegeneracy condition with its verdict and witness.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionCheck {
    pub name: &'static str,
    pub pass: bool,
    pub witness: String,
}

/// Full verification and classification record for one point.
#[derive(Debug, Clone, Serialize)]
pub struct StationarityReport {
    pub kind: ReportKind,
    /// Residual of the stationarity equation plus sign verification.
    pub stationary: bool,
    pub stationarity_residual: f64,
    pub sign_failures: Vec<String>,
    pub licq: LicqReport,
    /// Number of active gradient columns (alpha).
    pub num_active_gradients: usize,
    pub tangent_dim: Option<usize>,
    pub conditions: Vec<ConditionCheck>,
    pub nondegenerate: bool,
    pub inertia: Option<Inertia>,
    pub eigenvalues: Option<Vec<f64>>,
    pub quadratic_index: Option<usize>,
    pub biactive_index: Option<usize>,
    pub t_index: Option<usize>,
    pub multipliers_r: Option<MultiplierSetR>,
    pub multipliers_s: Option<MultiplierSetS>,
    pub pattern: ActivePattern,
    pub point: PointXY,
}

impl StationarityReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionCheck> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn condition_passes(&self, name: &str) -> bool {
        self.condition(name).map(|c| c.pass).unwrap_or(false)
    }
}

fn restricted_inertia(
    hessian: &DMatrix<f64>,
    basis: &DMatrix<f64>,
    eig_rel: f64,
) -> (Inertia, Vec<f64>) {
    let d = basis.ncols();
    if d == 0 {
        return (
            Inertia {
                negatives: 0,
                zeros: 0,
                positives: 0,
            },
            Vec::new(),
        );
    }
    let mut hr = basis.transpose() * hessian * basis;
    // symmetrize away the projection round-off
    let hr_t = hr.transpose();
    hr = (hr + hr_t) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(hr);
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let scale = eigenvalues
        .iter()
        .fold(0.0_f64, |acc, &v| acc.max(v.abs()))
        .max(1.0);
    let tau = eig_rel * scale;
    let negatives = eigenvalues.iter().filter(|&&v| v < -tau).count();
    let zeros = eigenvalues.iter().filter(|&&v| v.abs() <= tau).count();
    (
        Inertia {
            negatives,
            zeros,
            positives: d - negatives - zeros,
        },
        eigenvalues,
    )
}

struct StrictCheck {
    pass: bool,
    witness: Vec<String>,
}

fn strict_positive(label: &str, entries: &[(String, f64)], threshold: f64) -> StrictCheck {
    let mut witness = Vec::new();
    let mut pass = true;
    for (name, value) in entries {
        if *value <= threshold {
            pass = false;
            let tag = if *value > 0.0 { " (borderline)" } else { "" };
            witness.push(format!("{label} {name} = {value}{tag}"));
        }
    }
    StrictCheck { pass, witness }
}

/// Classify a point of R: verify T-stationarity, check NDT1-NDT4 and NDT6,
/// and compute the restricted-Hessian inertia and indices. When LICQ fails
/// the least-norm multipliers are still reported but every index field is
/// undefined.
pub fn classify_r(
    reform: &ReformR,
    point: &PointXY,
    tols: &Tolerances,
) -> Result<StationarityReport, StationarityError> {
    let pattern = activesets::detect_r(reform, point, tols.activity)?;
    let grads = active_gradients_r(reform, point, &pattern)?;
    let licq = check_licq(&grads.matrix, tols.rank_rel);
    let b = stationarity_rhs(reform, point)?;
    let (m, residual) = solve_multipliers(&grads, &b);
    let mults = split_r(&grads, &m, reform.problem().equalities().len());
    let signs = verify_t_stationary(&mults, &pattern, tols.stationarity);
    let stationary = residual <= tols.stationarity && signs.ok;

    let mut conditions = Vec::new();
    conditions.push(ConditionCheck {
        name: "NDT1",
        pass: licq.ok,
        witness: format!("min singular value {:.3e}", licq.min_singular_value),
    });

    let mut strict_entries: Vec<(String, f64)> = Vec::new();
    for mm in &mults.mu1 {
        strict_entries.push((format!("mu1[g{}]", mm.index + 1), mm.value));
    }
    for mm in &mults.mu2 {
        strict_entries.push((format!("mu2[y{}]", mm.index + 1), mm.value));
    }
    if pattern.sum_active {
        strict_entries.push(("mu3".into(), mults.mu3));
    }
    let ndt2 = strict_positive("multiplier", &strict_entries, tols.strict);
    conditions.push(ConditionCheck {
        name: "NDT2",
        pass: ndt2.pass,
        witness: if ndt2.pass {
            "all active multipliers strictly positive".into()
        } else {
            ndt2.witness.join("; ")
        },
    });

    let mut ndt3_pass = true;
    let mut ndt3_witness = Vec::new();
    for &i in &pattern.a00 {
        let r1 = mults.rho1_for(i).unwrap_or(0.0);
        let r2 = mults.rho2_for(i).unwrap_or(0.0);
        if r1.abs() <= tols.strict || r2 >= -tols.strict {
            ndt3_pass = false;
            ndt3_witness.push(format!("index {}: rho1 = {r1}, rho2 = {r2}", i + 1));
        }
    }
    conditions.push(ConditionCheck {
        name: "NDT3",
        pass: ndt3_pass,
        witness: if ndt3_pass {
            "rho1 != 0 and rho2 < 0 on every biactive index".into()
        } else {
            ndt3_witness.join("; ")
        },
    });

    let (tangent_dim, inertia, eigenvalues, ndt4_pass, ndt4_witness) = if licq.ok {
        let basis = tangent_basis(&grads.matrix, tols.rank_rel)?;
        let hess = lagrangian_hessian_r(reform, point, &mults)?;
        let (inertia, eigenvalues) = restricted_inertia(&hess, &basis, tols.eig_rel);
        let pass = inertia.zeros == 0;
        let witness = if basis.ncols() == 0 {
            "tangent space is trivial".to_string()
        } else {
            format!("{} zero eigenvalue(s)", inertia.zeros)
        };
        (
            Some(basis.ncols()),
            Some(inertia),
            Some(eigenvalues),
            pass,
            witness,
        )
    } else {
        (None, None, None, false, "undefined: LICQ fails".to_string())
    };
    conditions.push(ConditionCheck {
        name: "NDT4",
        pass: ndt4_pass,
        witness: ndt4_witness,
    });

    let mut ndt6_pass = true;
    let mut ndt6_witness = Vec::new();
    for &i in &pattern.a01 {
        let s1 = mults.sigma1_for(i).unwrap_or(0.0);
        if s1.abs() <= tols.strict {
            ndt6_pass = false;
            ndt6_witness.push(format!("sigma1[{}] = {s1}", i + 1));
        }
    }
    conditions.push(ConditionCheck {
        name: "NDT6",
        pass: ndt6_pass,
        witness: if ndt6_pass {
            "sigma1 nonvanishing on a01".into()
        } else {
            ndt6_witness.join("; ")
        },
    });

    let nondegenerate = stationary
        && conditions
            .iter()
            .filter(|c| c.name != "NDT6")
            .all(|c| c.pass);
    let quadratic_index = inertia.map(|i| i.negatives);
    let biactive_index = licq.ok.then_some(pattern.a00.len());
    let t_index = match (quadratic_index, biactive_index) {
        (Some(qi), Some(bi)) => Some(qi + bi),
        _ => None,
    };

    Ok(StationarityReport {
        kind: ReportKind::TStationaryR,
        stationary,
        stationarity_residual: residual,
        sign_failures: signs.failures,
        licq,
        num_active_gradients: grads.alpha(),
        tangent_dim,
        conditions,
        nondegenerate,
        inertia,
        eigenvalues,
        quadratic_index,
        biactive_index,
        t_index,
        multipliers_r: Some(mults),
        multipliers_s: None,
        pattern,
        point: point.clone(),
    })
}

/// Classify a point of S(t): verify the KKT conditions, check ND1-ND3, and
/// compute the restricted-Hessian inertia and quadratic index.
pub fn classify_s(
    scholtes: &ScholtesS<'_>,
    point: &PointXY,
    tols: &Tolerances,
) -> Result<StationarityReport, StationarityError> {
    let pattern = activesets::detect_s(scholtes, point, tols.activity)?;
    let grads = active_gradients_s(scholtes, point, &pattern)?;
    let licq = check_licq(&grads.matrix, tols.rank_rel);
    let b = stationarity_rhs(scholtes.reform(), point)?;
    let (m, residual) = solve_multipliers(&grads, &b);
    let mults = split_s(&grads, &m, scholtes.reform().problem().equalities().len());
    let signs = verify_kkt(&mults, &pattern, tols.stationarity);
    let stationary = residual <= tols.stationarity && signs.ok;

    let mut conditions = Vec::new();
    conditions.push(ConditionCheck {
        name: "ND1",
        pass: licq.ok,
        witness: format!("min singular value {:.3e}", licq.min_singular_value),
    });

    let mut strict_entries: Vec<(String, f64)> = Vec::new();
    for mm in &mults.mu1 {
        strict_entries.push((format!("mu1[g{}]", mm.index + 1), mm.value));
    }
    for mm in &mults.mu2 {
        strict_entries.push((format!("mu2[y{}]", mm.index + 1), mm.value));
    }
    if pattern.sum_active {
        strict_entries.push(("mu3".into(), mults.mu3));
    }
    for mm in &mults.eta_ge {
        strict_entries.push((format!("eta_ge[{}]", mm.index + 1), mm.value));
    }
    for mm in &mults.eta_le {
        strict_entries.push((format!("eta_le[{}]", mm.index + 1), mm.value));
    }
    for mm in &mults.nu {
        strict_entries.push((format!("nu[{}]", mm.index + 1), mm.value));
    }
    let nd2 = strict_positive("multiplier", &strict_entries, tols.strict);
    conditions.push(ConditionCheck {
        name: "ND2",
        pass: nd2.pass,
        witness: if nd2.pass {
            "all active multipliers strictly positive".into()
        } else {
            nd2.witness.join("; ")
        },
    });

    let (tangent_dim, inertia, eigenvalues, nd3_pass, nd3_witness) = if licq.ok {
        let basis = tangent_basis(&grads.matrix, tols.rank_rel)?;
        let hess = lagrangian_hessian_s(scholtes, point, &mults)?;
        let (inertia, eigenvalues) = restricted_inertia(&hess, &basis, tols.eig_rel);
        let pass = inertia.zeros == 0;
        let witness = if basis.ncols() == 0 {
            "tangent space is trivial".to_string()
        } else {
            format!("{} zero eigenvalue(s)", inertia.zeros)
        };
        (
            Some(basis.ncols()),
            Some(inertia),
            Some(eigenvalues),
            pass,
            witness,
        )
    } else {
        (None, None, None, false, "undefined: LICQ fails".to_string())
    };
    conditions.push(ConditionCheck {
        name: "ND3",
        pass: nd3_pass,
        witness: nd3_witness,
    });

    let nondegenerate = stationary && conditions.iter().all(|c| c.pass);
    let quadratic_index = inertia.map(|i| i.negatives);

    Ok(StationarityReport {
        kind: ReportKind::KktS,
        stationary,
        stationarity_residual: residual,
        sign_failures: signs.failures,
        licq,
        num_active_gradients: grads.alpha(),
        tangent_dim,
        conditions,
        nondegenerate,
        inertia,
        eigenvalues,
        quadratic_index,
        biactive_index: None,
        t_index: None,
        multipliers_s: Some(mults),
        multipliers_r: None,
        pattern,
        point: point.clone(),
    })
}

// ---------------------------------------------------------------------------
// Index bounds
// ---------------------------------------------------------------------------

/// Verdict of the index-persistence bounds
/// `max(m - |{i in a01 : sigma1_i = 0}|, 0) <= TI <= m`, with equality
/// `TI = m` additionally required when NDT6 holds at the limit.
#[derive(Debug, Clone, Serialize)]
pub struct IndexBoundVerdict {
    pub m: usize,
    pub t_index: usize,
    pub zero_sigma1_count: usize,
    pub lower: usize,
    pub upper: usize,
    pub bounds_hold: bool,
    pub ndt6_holds: bool,
    pub equality_holds: Option<bool>,
    pub lower_attained: bool,
    pub pass: bool,
}

pub fn index_bound_check(
    m: usize,
    report_r: &StationarityReport,
    tols: &Tolerances,
) -> Result<IndexBoundVerdict, StationarityError> {
    let ti = report_r.t_index.ok_or_else(|| {
        StationarityError::Invalid("limit report carries no T-index (LICQ failed?)".into())
    })?;
    let mults = report_r.multipliers_r.as_ref().ok_or_else(|| {
        StationarityError::Invalid("limit report carries no R multipliers".into())
    })?;
    let zero_sigma1_count = report_r
        .pattern
        .a01
        .iter()
        .filter(|&&i| mults.sigma1_for(i).unwrap_or(0.0).abs() <= tols.strict)
        .count();
    let lower = m.saturating_sub(zero_sigma1_count);
    let bounds_hold = lower <= ti && ti <= m;
    let ndt6_holds = report_r.condition_passes("NDT6");
    let equality_holds = ndt6_holds.then_some(ti == m);
    let pass = bounds_hold && equality_holds.unwrap_or(true);
    Ok(IndexBoundVerdict {
        m,
        t_index: ti,
        zero_sigma1_count,
        lower,
        upper: m,
        bounds_hold,
        ndt6_holds,
        equality_holds,
        lower_attained: ti == lower,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin, PointXY};
    use crate::Tolerances;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn point(x: &[f64], y: &[f64]) -> PointXY {
        PointXY::new(DVector::from_row_slice(x), DVector::from_row_slice(y))
    }

    fn tols() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn gradients_r_fixed_order_and_alpha() {
        let reform = builtin::vanishing_sigma1();
        let p = point(&[0.0, 1.0], &[1.0, 0.0]);
        let pat = activesets::detect_r(&reform, &p, 1e-8).unwrap();
        let g = active_gradients_r(&reform, &p, &pat).unwrap();
        assert_eq!(g.alpha(), 4);
        let expected = [
            (vec![1.0, 1.0, 0.0, 0.0], ColumnRole::Mu1(0)),
            (vec![0.0, 0.0, 1.0, 1.0], ColumnRole::Mu3),
            (vec![1.0, 0.0, 0.0, 0.0], ColumnRole::Sigma1(0)),
            (vec![0.0, 0.0, 0.0, 1.0], ColumnRole::Sigma2(1)),
        ];
        for (j, (col, role)) in expected.iter().enumerate() {
            assert_eq!(g.roles[j], *role);
            assert_eq!(g.matrix.column(j).as_slice(), col.as_slice());
        }
        // full rank: 4x4 determinant oracle
        let det = g.matrix.clone().determinant();
        assert!(det.abs() > 1e-12);
        assert!(check_licq(&g.matrix, 1e-10).ok);
    }

    #[test]
    fn gradients_r_biactive_contributes_two_columns() {
        let reform = builtin::separable_n4();
        // x = (0,0,3,4), y = (1.25, 0.75, 0, 0): a01 = {1,2}, a10 = {3,4}
        // move index 3 into a00 by zeroing x3 and y3
        let p = point(&[0.0, 0.0, 0.0, 4.0], &[1.25, 0.75, 0.0, 0.0]);
        let pat = activesets::detect_r(&reform, &p, 1e-8).unwrap();
        assert_eq!(pat.a00, vec![2]);
        let g = active_gradients_r(&reform, &p, &pat).unwrap();
        let rho1 = g
            .roles
            .iter()
            .filter(|r| matches!(r, ColumnRole::Rho1(2)))
            .count();
        let rho2 = g
            .roles
            .iter()
            .filter(|r| matches!(r, ColumnRole::Rho2(2)))
            .count();
        assert_eq!((rho1, rho2), (1, 1));
    }

    #[test]
    fn gradients_empty_without_activity() {
        let reform = builtin::index_persistence();
        // interior-ish feasible point: no x/y zeros, sum inactive, no g
        let p = point(&[0.0, 0.0], &[0.9, 0.8]);
        // x = 0 makes a01 nonempty; use nonzero x with y in the open band
        let s = reform.scholtes(10.0).unwrap();
        let p2 = point(&[0.5, 0.5], &[0.9, 0.8]);
        let pat = activesets::detect_s(&s, &p2, 1e-8).unwrap();
        let g = active_gradients_s(&s, &p2, &pat).unwrap();
        assert_eq!(g.alpha(), 0);
        assert!(check_licq(&g.matrix, 1e-10).ok, "empty matrix is vacuous");
        let _ = p;
    }

    #[test]
    fn gradients_s_coupled_band_columns() {
        let reform = builtin::strict_complementarity_failure();
        let t = 0.05;
        let s = reform.scholtes(t).unwrap();
        let p = point(&[t, 1.0], &[1.0, 0.0]);
        let pat = activesets::detect_s(&s, &p, 1e-8).unwrap();
        let g = active_gradients_s(&s, &p, &pat).unwrap();
        assert_eq!(g.alpha(), 3);
        // fixed order: summation direction, the coupled band column
        // (y1 e1, x1 e1) = (1, 0, t, 0), then the y-lower direction
        assert_eq!(g.roles[0], ColumnRole::Mu3);
        assert_eq!(g.matrix.column(0).as_slice(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(g.roles[1], ColumnRole::EtaLe(0));
        assert_eq!(g.matrix.column(1).as_slice(), &[1.0, 0.0, t, 0.0]);
        assert_eq!(g.roles[2], ColumnRole::Nu(1));
        assert_eq!(g.matrix.column(2).as_slice(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn licq_detects_duplicate_columns() {
        let m = DMatrix::from_columns(&[
            DVector::from_row_slice(&[1.0, 0.0, 0.5, 0.0]),
            DVector::from_row_slice(&[1.0, 0.0, 0.5, 0.0]),
        ]);
        assert!(!check_licq(&m, 1e-10).ok);
    }

    #[test]
    fn multipliers_r_match_closed_forms() {
        // vanishing-sigma1 instance, c = (1, 2)
        let reform = builtin::vanishing_sigma1();
        let p = point(&[0.0, 1.0], &[1.0, 0.0]);
        let pat = activesets::detect_r(&reform, &p, 1e-8).unwrap();
        let (m, residual) = estimate_multipliers_r(&reform, &p, &pat).unwrap();
        assert!(residual <= 1e-12, "residual {residual}");
        assert!(m.lambda.is_empty());
        assert_relative_eq!(m.mu1_for(0).unwrap(), 2.0, epsilon = 1e-10);
        assert_relative_eq!(m.mu3, 1.0, epsilon = 1e-10);
        assert_relative_eq!(m.sigma1_for(0).unwrap(), 0.0, epsilon = 1e-10);
        assert_relative_eq!(m.sigma2_for(1).unwrap(), 1.0, epsilon = 1e-10);

        // strict-complementarity-failure instance, c1 = 1
        let reform = builtin::strict_complementarity_failure();
        let p = point(&[0.0, 1.0], &[1.0, 0.0]);
        let pat = activesets::detect_r(&reform, &p, 1e-8).unwrap();
        let (m, residual) = estimate_multipliers_r(&reform, &p, &pat).unwrap();
        assert!(residual <= 1e-12);
        assert_relative_eq!(m.mu1_for(0).unwrap(), 0.0, epsilon = 1e-10);
        assert_relative_eq!(m.mu3, 1.0, epsilon = 1e-10);
        assert_relative_eq!(m.sigma1_for(0).unwrap(), -2.0, epsilon = 1e-10);
        assert_relative_eq!(m.sigma2_for(1).unwrap(), 5.0 / 36.0, epsilon = 1e-10);

        let verdict = verify_t_stationary(&m, &pat, 1e-8);
        assert!(verdict.ok, "{:?}", verdict.failures);
    }

    #[test]
    fn nonstationary_point_reports_positive_residual() {
        let reform = builtin::index_persistence();
        // feasible but not stationary: the x2 gradient row is unmatched
        let p = point(&[0.0, 0.4], &[1.0, 0.0]);
        let pat = activesets::detect_r(&reform, &p, 1e-8).unwrap();
        let (_, residual) = estimate_multipliers_r(&reform, &p, &pat).unwrap();
        assert!(residual > 0.1);
    }

    #[test]
    fn sign_verification_catches_violations() {
        let reform = builtin::strict_complementarity_failure();
        let p = point(&[0.0, 1.0], &[1.0, 0.0]);
        let pat = activesets::detect_r(&reform, &p, 1e-8).unwrap();
        let (mut m, _) = estimate_multipliers_r(&reform, &p, &pat).unwrap();
        m.mu1[0].value = -0.1;
        let verdict = verify_t_stationary(&m, &pat, 1e-8);
        assert!(!verdict.ok);
        assert!(verdict.failures[0].contains("mu1[g1]"));

        // fabricated biactive violation of the "rho1 = 0 or rho2 <= 0" rule
        let mut pat_b = pat.clone();
        pat_b.a00 = vec![0];
        m.mu1[0].value = 0.0;
        m.rho1 = vec![Indexed {
            index: 0,
            value: 1.0,
        }];
        m.rho2 = vec![Indexed {
            index: 0,
            value: 1.0,
        }];
        let verdict = verify_t_stationary(&m, &pat_b, 1e-8);
        assert!(!verdict.ok);
        assert!(verdict.failures.iter().any(|f| f.contains("biactive")));
    }

    #[test]
    fn multipliers_s_match_closed_forms() {
        let reform = builtin::strict_complementarity_failure();
        let t = 0.05;
        let s = reform.scholtes(t).unwrap();
        let p = point(&[t, 1.0], &[1.0, 0.0]);
        let pat = activesets::detect_s(&s, &p, 1e-8).unwrap();
        let (m, residual) = estimate_multipliers_s(&s, &p, &pat).unwrap();
        assert!(residual <= 1e-12);
        assert_relative_eq!(m.mu3, 1.0 + 2.0 * t - 2.0 * t * t, epsilon = 1e-10);
        assert_relative_eq!(m.eta_le_for(0).unwrap(), 2.0 - 2.0 * t, epsilon = 1e-10);
        assert_relative_eq!(
            m.nu_for(1).unwrap(),
            5.0 / 36.0 - 2.0 * t + 2.0 * t * t,
            epsilon = 1e-10
        );
        assert!(verify_kkt(&m, &pat, 1e-8).ok);

        let s_point = point(&[0.0, 1.0], &[1.0, 0.0]);
        let reform6 = builtin::vanishing_sigma1();
        let s6 = reform6.scholtes(0.01).unwrap();
        let pat6 = activesets::detect_s(&s6, &s_point, 1e-8).unwrap();
        let (m6, r6) = estimate_multipliers_s(&s6, &s_point, &pat6).unwrap();
        assert!(r6 <= 1e-12);
        assert_relative_eq!(m6.mu1_for(0).unwrap(), 2.0, epsilon = 1e-10);
        assert_relative_eq!(m6.mu3, 1.0, epsilon = 1e-10);
        assert_relative_eq!(m6.nu_for(1).unwrap(), 1.0, epsilon = 1e-10);

        let mut bad = m6.clone();
        bad.nu[0].value = -0.5;
        assert!(!verify_kkt(&bad, &pat6, 1e-8).ok);
    }

    #[test]
    fn tangent_basis_matches_hand_solutions() {
        let reform = builtin::vanishing_sigma1();
        let p = point(&[0.0, 1.0], &[1.0, 0.0]);
        let pat_r = activesets::detect_r(&reform, &p, 1e-8).unwrap();
        let g_r = active_gradients_r(&reform, &p, &pat_r).unwrap();
        let basis = tangent_basis(&g_r.matrix, 1e-10).unwrap();
        assert_eq!(basis.ncols(), 0, "alpha = 2n: trivial tangent space");

        let s = reform.scholtes(0.01).unwrap();
        let pat_s = activesets::detect_s(&s, &p, 1e-8).unwrap();
        let g_s = active_gradients_s(&s, &p, &pat_s).unwrap();
        let basis = tangent_basis(&g_s.matrix, 1e-10).unwrap();
        assert_eq!(basis.ncols(), 1);
        let v = basis.column(0);
        // span { xi : xi1 + xi2 = 0, xi3 = xi4 = 0 }
        assert_relative_eq!(v[0] + v[1], 0.0, epsilon = 1e-10);
        assert_relative_eq!(v[2], 0.0, epsilon = 1e-10);
        assert_relative_eq!(v[3], 0.0, epsilon = 1e-10);
        assert_relative_eq!(v.norm(), 1.0, epsilon = 1e-12);
        // annihilated by every active gradient
        let residual = (g_s.matrix.transpose() * &basis).norm();
        assert!(residual <= 1e-10);

        let empty = DMatrix::<f64>::zeros(4, 0);
        let b = tangent_basis(&empty, 1e-10).unwrap();
        assert_eq!(b, DMatrix::identity(4, 4));
    }

    #[test]
    fn tangent_basis_refuses_rank_deficiency() {
        let col = DVector::from_row_slice(&[1.0, 0.0, 0.0, 0.0]);
        let m = DMatrix::from_columns(&[col.clone(), col]);
        assert!(matches!(
            tangent_basis(&m, 1e-10),
            Err(StationarityError::LicqFailed { .. })
        ));
    }

    #[test]
    fn hessian_s_matches_displayed_matrices() {
        let reform = builtin::strict_complementarity_failure();
        let t = 0.05;
        let s = reform.scholtes(t).unwrap();
        let p = point(&[t, 1.0], &[1.0, 0.0]);
        let pat = activesets::detect_s(&s, &p, 1e-8).unwrap();
        let (m, _) = estimate_multipliers_s(&s, &p, &pat).unwrap();
        let h = lagrangian_hessian_s(&s, &p, &m).unwrap();
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                2.0,
                0.0,
                2.0 - 2.0 * t,
                0.0,
                0.0,
                2.0,
                0.0,
                0.0,
                2.0 - 2.0 * t,
                0.0,
                0.0,
                0.0,
                0.0,
                0.0,
                0.0,
                0.0,
            ],
        );
        assert_relative_eq!((h - expected).norm(), 0.0, epsilon = 1e-10);

        let reform6 = builtin::vanishing_sigma1();
        let s6 = reform6.scholtes(0.01).unwrap();
        let p6 = point(&[0.0, 1.0], &[1.0, 0.0]);
        let pat6 = activesets::detect_s(&s6, &p6, 1e-8).unwrap();
        let (m6, _) = estimate_multipliers_s(&s6, &p6, &pat6).unwrap();
        let h6 = lagrangian_hessian_s(&s6, &p6, &m6).unwrap();
        let expected6 = DMatrix::from_diagonal(&DVector::from_row_slice(&[2.0, -4.0, 0.0, 0.0]));
        assert_relative_eq!((h6 - expected6).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn hessian_with_zero_multipliers_is_objective_block() {
        let reform = builtin::index_persistence();
        let p = point(&[0.3, 0.7], &[0.5, 0.5]);
        let mults = MultiplierSetR {
            lambda: vec![],
            mu1: vec![],
            mu2: vec![],
            mu3: 0.0,
            sigma1: vec![],
            sigma2: vec![],
            rho1: vec![],
            rho2: vec![],
        };
        let h = lagrangian_hessian_r(&reform, &p, &mults).unwrap();
        let mut expected = DMatrix::zeros(4, 4);
        expected[(0, 0)] = 2.0;
        expected[(1, 1)] = 2.0;
        assert_relative_eq!((h - expected).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn classify_reproduces_both_worked_instances() {
        let tols = tols();

        // saddle of S with vanishing-sigma1 limit
        let reform = builtin::vanishing_sigma1();
        let p = point(&[0.0, 1.0], &[1.0, 0.0]);
        for &t in &[0.1, 0.01] {
            let s = reform.scholtes(t).unwrap();
            let rep = classify_s(&s, &p, &tols).unwrap();
            assert!(rep.stationary);
            assert!(rep.nondegenerate, "{:?}", rep.conditions);
            assert_eq!(rep.quadratic_index, Some(1));
        }
        let rep_r = classify_r(&reform, &p, &tols).unwrap();
        assert!(rep_r.stationary);
        assert!(rep_r.nondegenerate);
        assert_eq!(rep_r.t_index, Some(0));
        assert!(!rep_r.condition_passes("NDT6"));
        let sigma1 = rep_r.multipliers_r.as_ref().unwrap().sigma1_for(0).unwrap();
        assert!(sigma1.abs() <= 1e-10);

        // index bounds: m = 1 from the S side, TI = 0, one vanishing sigma1
        let verdict = index_bound_check(1, &rep_r, &tols).unwrap();
        assert!(verdict.bounds_hold);
        assert!(verdict.lower_attained);
        assert_eq!(verdict.lower, 0);
        assert!(!verdict.ndt6_holds);
        assert!(verdict.pass);

        // degenerate limit of the strict-complementarity instance
        let reform2 = builtin::strict_complementarity_failure();
        let rep2 = classify_r(&reform2, &p, &tols).unwrap();
        assert!(rep2.stationary, "T-stationary even though NDT2 fails");
        assert!(!rep2.condition_passes("NDT2"));
        assert!(!rep2.nondegenerate);
    }

    #[test]
    fn index_bound_check_rejects_fabricated_report() {
        let tols = tols();
        let reform = builtin::vanishing_sigma1();
        let p = point(&[0.0, 1.0], &[1.0, 0.0]);
        let mut rep = classify_r(&reform, &p, &tols).unwrap();
        rep.t_index = Some(5);
        let verdict = index_bound_check(1, &rep, &tols).unwrap();
        assert!(!verdict.bounds_hold, "TI > m violates the upper bound");
        assert!(!verdict.pass);
    }

    #[test]
    fn inertia_invariant_under_basis_rotation() {
        let tols = tols();
        let reform = builtin::index_persistence();
        let p = point(&[0.01, 1.0], &[1.0, 0.0]);
        let s = reform.scholtes(0.01).unwrap();
        let pat = activesets::detect_s(&s, &p, tols.activity).unwrap();
        let grads = active_gradients_s(&s, &p, &pat).unwrap();
        let basis = tangent_basis(&grads.matrix, tols.rank_rel).unwrap();
        let (m, _) = estimate_multipliers_s(&s, &p, &pat).unwrap();
        let h = lagrangian_hessian_s(&s, &p, &m).unwrap();
        let (i1, _) = restricted_inertia(&h, &basis, tols.eig_rel);
        // rotate the basis by an arbitrary orthogonal map of its span
        let d = basis.ncols();
        let seedm = DMatrix::from_fn(d, d, |i, j| ((3 * i + 5 * j + 1) as f64).sin());
        let q = seedm.qr().q();
        let rotated = &basis * q;
        let (i2, _) = restricted_inertia(&h, &rotated, tols.eig_rel);
        assert_eq!(
            (i1.negatives, i1.zeros, i1.positives),
            (i2.negatives, i2.zeros, i2.positives)
        );
    }

    #[test]
    fn multiplier_uniqueness_across_factorizations() {
        let reform = builtin::vanishing_sigma1();
        let p = point(&[0.0, 1.0], &[1.0, 0.0]);
        let pat = activesets::detect_r(&reform, &p, 1e-8).unwrap();
        let grads = active_gradients_r(&reform, &p, &pat).unwrap();
        let b = stationarity_rhs(&reform, &p).unwrap();
        let (m_svd, _) = solve_multipliers(&grads, &b);
        // normal equations route
        let a = grads.signed();
        let ata = a.transpose() * &a;
        let atb = a.transpose() * &b;
        let m_ne = ata.lu().solve(&atb).unwrap();
        assert!((m_svd - m_ne).norm() < 1e-10);
    }
}
