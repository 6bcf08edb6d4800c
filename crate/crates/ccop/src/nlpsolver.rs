//! Local solver for the smooth programs S(t) at desk scale.
//!
//! Sequential quadratic programming with an activity-based working set:
//! each iteration solves the equality-constrained QP of the current working
//! set by a null-space method (reduced Hessian regularized by adding tau*I
//! until positive definite), takes a backtracking line search on the l1
//! merit function, and drops working constraints by the most-negative
//! multiplier rule. Crisp active-set identification is the point here; the
//! classification stage consumes the active pattern, not just the point.
//!
//! [`newton_polish`] runs full Newton on the square KKT system of a frozen
//! active set to push solver outputs to ~1e-12 residual before
//! classification.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::activesets::ActivePattern;
use crate::expr::{Eval2, EvalError};
use crate::model::{ReformR, ScholtesS};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("evaluation failed at the current iterate: {0}")]
    Eval(#[from] EvalError),
    #[error("singular KKT matrix in Newton polish")]
    SingularKkt,
    #[error("Newton polish diverged (residual history: {0:?})")]
    PolishDiverged(Vec<f64>),
    #[error("{0}")]
    Invalid(String),
}

/// A small dense nonlinear program
/// `min F(z) s.t. h_j(z) = 0, c_k(z) >= 0`.
pub trait NlpProblem: Sync {
    fn dim(&self) -> usize;
    fn objective(&self, z: &DVector<f64>) -> Result<Eval2, EvalError>;
    fn num_eq(&self) -> usize;
    fn equality(&self, j: usize, z: &DVector<f64>) -> Result<Eval2, EvalError>;
    fn num_ineq(&self) -> usize;
    fn inequality(&self, k: usize, z: &DVector<f64>) -> Result<Eval2, EvalError>;
    /// Projection applied to the start point before the first iteration.
    fn project(&self, _z: &mut DVector<f64>) {}
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub kkt_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Backtracking factor for the line search.
    pub backtrack: f64,
    /// Factor by which the l1 penalty grows when it must.
    pub penalty_factor: f64,
    /// Steps below this norm count as zero.
    pub step_floor: f64,
    /// Activity threshold for the working set.
    pub activity_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 200,
            kkt_tol: 1e-10,
            armijo: 1e-4,
            backtrack: 0.5,
            penalty_factor: 10.0,
            step_floor: 1e-14,
            activity_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Converged,
    MaxIter,
    LineSearchFailure,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveOutcome {
    /// Final iterate, in the problem's own coordinates.
    pub z: DVector<f64>,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// True when the l1 merit never increased across accepted steps.
    pub merit_monotone: bool,
}

impl SolveOutcome {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// Interpret the iterate as an (x, y) point (even dimension).
    pub fn point_xy(&self) -> crate::model::PointXY {
        crate::model::PointXY::from_stacked(&self.z)
    }
}

// ---------------------------------------------------------------------------
// S(t) as an NlpProblem
// ---------------------------------------------------------------------------

/// S(t) over z = (x, y) with the inequality order: g_q, the summation
/// constraint, per-index band pairs (upper `t - x_i y_i`, lower
/// `x_i y_i + t`), then per-index bound pairs (`y_i`, `1+eps - y_i`).
pub struct ScholtesNlp<'a> {
    scholtes: ScholtesS<'a>,
}

impl<'a> ScholtesNlp<'a> {
    pub fn new(scholtes: ScholtesS<'a>) -> Self {
        ScholtesNlp { scholtes }
    }

    fn n(&self) -> usize {
        self.scholtes.reform().n()
    }

    fn num_g(&self) -> usize {
        self.scholtes.reform().problem().inequalities().len()
    }

    pub fn idx_sum(&self) -> usize {
        self.num_g()
    }

    pub fn idx_band_upper(&self, i: usize) -> usize {
        self.num_g() + 1 + 2 * i
    }

    pub fn idx_band_lower(&self, i: usize) -> usize {
        self.num_g() + 1 + 2 * i + 1
    }

    pub fn idx_y_lower(&self, i: usize) -> usize {
        self.num_g() + 1 + 2 * self.n() + 2 * i
    }

    pub fn idx_y_upper(&self, i: usize) -> usize {
        self.num_g() + 1 + 2 * self.n() + 2 * i + 1
    }

    /// Map a detected S-side pattern to the inequality indices it activates.
    pub fn frozen_indices(&self, pattern: &ActivePattern) -> Vec<usize> {
        let mut w = Vec::new();
        for &q in &pattern.q0 {
            w.push(q);
        }
        if pattern.sum_active {
            w.push(self.idx_sum());
        }
        for &i in &pattern.h_le {
            w.push(self.idx_band_upper(i));
        }
        for &i in &pattern.h_ge {
            w.push(self.idx_band_lower(i));
        }
        for &i in &pattern.n_zero {
            w.push(self.idx_y_lower(i));
        }
        for &i in &pattern.e_upper {
            w.push(self.idx_y_upper(i));
        }
        w.sort_unstable();
        w
    }
}

impl NlpProblem for ScholtesNlp<'_> {
    fn dim(&self) -> usize {
        2 * self.n()
    }

    fn objective(&self, z: &DVector<f64>) -> Result<Eval2, EvalError> {
        let n = self.n();
        let reform = self.scholtes.reform();
        let x = z.rows(0, n).into_owned();
        let fx = reform.problem().objective().eval2(&x)?;
        let mut out = fx.embed(2 * n);
        for i in 0..n {
            out.value += reform.c()[i] * z[n + i];
            out.gradient[n + i] = reform.c()[i];
        }
        Ok(out)
    }

    fn num_eq(&self) -> usize {
        self.scholtes.reform().problem().equalities().len()
    }

    fn equality(&self, j: usize, z: &DVector<f64>) -> Result<Eval2, EvalError> {
        let n = self.n();
        let x = z.rows(0, n).into_owned();
        Ok(self.scholtes.reform().problem().equalities()[j]
            .eval2(&x)?
            .embed(2 * n))
    }

    fn num_ineq(&self) -> usize {
        self.num_g() + 1 + 4 * self.n()
    }

    fn inequality(&self, k: usize, z: &DVector<f64>) -> Result<Eval2, EvalError> {
        let n = self.n();
        let reform = self.scholtes.reform();
        let t = self.scholtes.t();
        let num_g = self.num_g();
        if k < num_g {
            let x = z.rows(0, n).into_owned();
            return Ok(reform.problem().inequalities()[k].eval2(&x)?.embed(2 * n));
        }
        let mut out = Eval2::constant(0.0, 2 * n);
        if k == num_g {
            out.value = z.rows(n, n).sum() - reform.sum_rhs();
            for i in 0..n {
                out.gradient[n + i] = 1.0;
            }
            return Ok(out);
        }
        let k = k - num_g - 1;
        if k < 2 * n {
            let i = k / 2;
            let (xi, yi) = (z[i], z[n + i]);
            if k.is_multiple_of(2) {
                // t - x_i y_i >= 0
                out.value = t - xi * yi;
                out.gradient[i] = -yi;
                out.gradient[n + i] = -xi;
                out.hessian[(i, n + i)] = -1.0;
                out.hessian[(n + i, i)] = -1.0;
            } else {
                // x_i y_i + t >= 0
                out.value = xi * yi + t;
                out.gradient[i] = yi;
                out.gradient[n + i] = xi;
                out.hessian[(i, n + i)] = 1.0;
                out.hessian[(n + i, i)] = 1.0;
            }
            return Ok(out);
        }
        let k = k - 2 * n;
        let i = k / 2;
        if k.is_multiple_of(2) {
            out.value = z[n + i];
            out.gradient[n + i] = 1.0;
        } else {
            out.value = 1.0 + reform.epsilon() - z[n + i];
            out.gradient[n + i] = -1.0;
        }
        Ok(out)
    }

    fn project(&self, z: &mut DVector<f64>) {
        let n = self.n();
        let upper = 1.0 + self.scholtes.reform().epsilon();
        for i in 0..n {
            z[n + i] = z[n + i].clamp(0.0, upper);
        }
    }
}

/// Equality-constrained restriction of a reformulation to x-space: minimize
/// f over x subject to h = 0, selected inequalities pinned to equality, and
/// a set of coordinates pinned to zero. Used by the atlas.
pub struct RestrictedXNlp<'a> {
    reform: &'a ReformR,
    pinned_ineq: Vec<usize>,
    zero_coords: Vec<usize>,
}

impl<'a> RestrictedXNlp<'a> {
    pub fn new(reform: &'a ReformR, pinned_ineq: Vec<usize>, zero_coords: Vec<usize>) -> Self {
        RestrictedXNlp {
            reform,
            pinned_ineq,
            zero_coords,
        }
    }
}

impl NlpProblem for RestrictedXNlp<'_> {
    fn dim(&self) -> usize {
        self.reform.n()
    }

    fn objective(&self, z: &DVector<f64>) -> Result<Eval2, EvalError> {
        self.reform.problem().objective().eval2(z)
    }

    fn num_eq(&self) -> usize {
        self.reform.problem().equalities().len() + self.pinned_ineq.len() + self.zero_coords.len()
    }

    fn equality(&self, j: usize, z: &DVector<f64>) -> Result<Eval2, EvalError> {
        let hs = self.reform.problem().equalities();
        if j < hs.len() {
            return hs[j].eval2(z);
        }
        let j = j - hs.len();
        if j < self.pinned_ineq.len() {
            return self.reform.problem().inequalities()[self.pinned_ineq[j]].eval2(z);
        }
        let i = self.zero_coords[j - self.pinned_ineq.len()];
        let mut out = Eval2::constant(z[i], self.reform.n());
        out.gradient[i] = 1.0;
        Ok(out)
    }

    fn num_ineq(&self) -> usize {
        0
    }

    fn inequality(&self, _k: usize, _z: &DVector<f64>) -> Result<Eval2, EvalError> {
        unreachable!("restricted problem has no inequalities")
    }
}

// ---------------------------------------------------------------------------
// SQP machinery
// ---------------------------------------------------------------------------

struct EvalPoint {
    obj: Eval2,
    eqs: Vec<Eval2>,
    ineqs: Vec<Eval2>,
}

fn evaluate<P: NlpProblem>(nlp: &P, z: &DVector<f64>) -> Result<EvalPoint, EvalError> {
    Ok(EvalPoint {
        obj: nlp.objective(z)?,
        eqs: (0..nlp.num_eq())
            .map(|j| nlp.equality(j, z))
            .collect::<Result<_, _>>()?,
        ineqs: (0..nlp.num_ineq())
            .map(|k| nlp.inequality(k, z))
            .collect::<Result<_, _>>()?,
    })
}

fn violation_l1(eval: &EvalPoint) -> f64 {
    let eq: f64 = eval.eqs.iter().map(|e| e.value.abs()).sum();
    let ineq: f64 = eval.ineqs.iter().map(|c| (-c.value).max(0.0)).sum();
    eq + ineq
}

fn merit(eval: &EvalPoint, rho: f64) -> f64 {
    eval.obj.value + rho * violation_l1(eval)
}

/// Rows of the active constraint Jacobian: equalities first, then the
/// working inequalities.
fn active_rows(eval: &EvalPoint, working: &[usize], dim: usize) -> DMatrix<f64> {
    let m = eval.eqs.len() + working.len();
    let mut a = DMatrix::zeros(m, dim);
    for (r, e) in eval.eqs.iter().enumerate() {
        a.row_mut(r).copy_from(&e.gradient.transpose());
    }
    for (r, &k) in working.iter().enumerate() {
        a.row_mut(eval.eqs.len() + r)
            .copy_from(&eval.ineqs[k].gradient.transpose());
    }
    a
}

/// Least-squares multipliers for `A' m = grad F` and the KKT residual at the
/// current point.
fn kkt_estimate(eval: &EvalPoint, working: &[usize], dim: usize) -> (DVector<f64>, f64) {
    let a = active_rows(eval, working, dim);
    let m_act = a.nrows();
    let mults = if m_act == 0 {
        DVector::zeros(0)
    } else {
        a.transpose()
            .svd(true, true)
            .solve(&eval.obj.gradient, 1e-13)
            .expect("svd solve")
    };
    let stat = if m_act == 0 {
        eval.obj.gradient.amax()
    } else {
        (&eval.obj.gradient - a.transpose() * &mults).amax()
    };
    let mut res = stat;
    for e in &eval.eqs {
        res = res.max(e.value.abs());
    }
    for c in &eval.ineqs {
        res = res.max((-c.value).max(0.0));
    }
    for (r, &k) in working.iter().enumerate() {
        let mu = mults[eval.eqs.len() + r];
        res = res.max((-mu).clamp(0.0, 1.0)); // sign defect
        res = res.max((mu * eval.ineqs[k].value).abs());
    }
    (mults, res)
}

fn lagrangian_hessian(eval: &EvalPoint, working: &[usize], mults: &DVector<f64>) -> DMatrix<f64> {
    let mut b = eval.obj.hessian.clone();
    for (j, e) in eval.eqs.iter().enumerate() {
        b -= &e.hessian * mults[j];
    }
    for (r, &k) in working.iter().enumerate() {
        b -= &eval.ineqs[k].hessian * mults[eval.eqs.len() + r];
    }
    b
}

/// Orthonormal basis of the null space of `a` (rows as constraints).
fn null_basis(a: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return DMatrix::identity(dim, dim);
    }
    let svd = a.transpose().svd(true, false);
    let u = svd.u.as_ref().expect("svd with u");
    let smax = svd.singular_values.max().max(1.0);
    let mut range_cols = Vec::new();
    for (j, &sv) in svd.singular_values.iter().enumerate() {
        if sv > 1e-12 * smax {
            range_cols.push(u.column(j).into_owned());
        }
    }
    if range_cols.is_empty() {
        return DMatrix::identity(dim, dim);
    }
    let v_r = DMatrix::from_columns(&range_cols);
    let proj = DMatrix::identity(dim, dim) - &v_r * v_r.transpose();
    let eig = nalgebra::SymmetricEigen::new(proj);
    let mut cols = Vec::new();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > 0.5 {
            cols.push(eig.eigenvectors.column(j).into_owned());
        }
    }
    if cols.is_empty() {
        DMatrix::zeros(dim, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

const TAU_FIRST: f64 = 1e-6;
const TAU_MAX: f64 = 1e6;

struct QpSolution {
    d: DVector<f64>,
    mults: DVector<f64>,
}

/// Null-space solve of `min 1/2 d'Bd + g'd s.t. A d = r`, regularizing the
/// reduced Hessian by `tau * I` (starting from `tau_boost`, escalating by 10
/// until positive definite).
fn solve_eqp(
    b: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    r: &DVector<f64>,
    tau_boost: f64,
) -> Option<QpSolution> {
    let dim = g.len();
    let d_particular = if a.nrows() == 0 {
        DVector::zeros(dim)
    } else {
        a.clone()
            .svd(true, true)
            .solve(r, 1e-13)
            .expect("svd solve")
    };
    let z = null_basis(a, dim);
    let d = if z.ncols() == 0 {
        d_particular
    } else {
        let hr = z.transpose() * b * &z;
        let gr = z.transpose() * (g + b * &d_particular);
        let mut tau = tau_boost;
        let u = loop {
            let mut reg = hr.clone();
            for i in 0..reg.nrows() {
                reg[(i, i)] += tau;
            }
            if let Some(chol) = nalgebra::Cholesky::new(reg) {
                break chol.solve(&(-&gr));
            }
            tau = if tau == 0.0 { TAU_FIRST } else { tau * 10.0 };
            if tau > TAU_MAX {
                return None;
            }
        };
        d_particular + z * u
    };
    let mults = if a.nrows() == 0 {
        DVector::zeros(0)
    } else {
        let rhs = b * &d + g;
        a.transpose()
            .svd(true, true)
            .solve(&rhs, 1e-13)
            .expect("svd solve")
    };
    Some(QpSolution { d, mults })
}

/// Find a local KKT point of `nlp` starting from `start`. Never raises on
/// nonconvergence; the status tells the story.
pub fn solve_local<P: NlpProblem>(
    nlp: &P,
    start: &DVector<f64>,
    config: &SolverConfig,
) -> Result<SolveOutcome, SolverError> {
    let dim = nlp.dim();
    if start.len() != dim {
        return Err(SolverError::Invalid(format!(
            "start has dimension {}, problem has {dim}",
            start.len()
        )));
    }
    if !start.iter().all(|v| v.is_finite()) {
        return Err(SolverError::Invalid("start point is not finite".into()));
    }
    let mut z = start.clone();
    nlp.project(&mut z);
    let mut eval = evaluate(nlp, &z)?;
    let mut rho: f64 = 1.0;
    let mut tau_boost: f64 = 0.0;
    let mut merit_monotone = true;
    let mut stall = 0usize;

    let trace = std::env::var("CCOP_SOLVER_TRACE").is_ok();
    for iter in 0..config.max_iter {
        let working: Vec<usize> = (0..eval.ineqs.len())
            .filter(|&k| eval.ineqs[k].value <= config.activity_tol)
            .collect();
        let (mults, kkt_res) = kkt_estimate(&eval, &working, dim);
        if trace {
            eprintln!(
                "iter {iter}: z = {:?} kkt = {kkt_res:.3e} W = {working:?} viol = {:.3e} mults={:?}",
                z.as_slice(),
                violation_l1(&eval),
                mults.as_slice()
            );
        }
        if kkt_res <= config.kkt_tol {
            return Ok(SolveOutcome {
                z,
                status: SolveStatus::Converged,
                kkt_residual: kkt_res,
                iterations: iter,
                merit_monotone,
            });
        }

        let b = lagrangian_hessian(&eval, &working, &mults);
        let mut work = working.clone();
        let mut qp = None;
        for _ in 0..=working.len() {
            let a = active_rows(&eval, &work, dim);
            let mut r = DVector::zeros(a.nrows());
            for (j, e) in eval.eqs.iter().enumerate() {
                r[j] = -e.value;
            }
            for (j, &k) in work.iter().enumerate() {
                r[eval.eqs.len() + j] = -eval.ineqs[k].value;
            }
            let sol = match solve_eqp(&b, &eval.obj.gradient, &a, &r, tau_boost) {
                Some(s) => s,
                None => {
                    return Ok(SolveOutcome {
                        z,
                        status: SolveStatus::LineSearchFailure,
                        kkt_residual: kkt_res,
                        iterations: iter,
                        merit_monotone,
                    })
                }
            };
            if sol.d.norm() <= 1e-8 * z.norm().max(1.0) {
                // stationary for this working set: drop the most negative
                // working multiplier, if any
                let n_eq = eval.eqs.len();
                let worst = work
                    .iter()
                    .enumerate()
                    .map(|(j, &k)| (k, sol.mults[n_eq + j]))
                    .filter(|&(_, mu)| mu < -1e-9)
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
                if let Some((k_drop, _)) = worst {
                    work.retain(|&k| k != k_drop);
                    continue;
                }
            }
            qp = Some(sol);
            break;
        }
        let qp = match qp {
            Some(q) => q,
            None => {
                stall += 1;
                if stall >= 3 {
                    return Ok(SolveOutcome {
                        z,
                        status: SolveStatus::MaxIter,
                        kkt_residual: kkt_res,
                        iterations: iter,
                        merit_monotone,
                    });
                }
                continue;
            }
        };

        if qp.d.norm() <= config.step_floor.max(1e-13 * z.norm().max(1.0)) {
            // zero step with clean multipliers: either converged (caught at
            // the top next round) or numerically stuck
            stall += 1;
            if stall >= 3 {
                return Ok(SolveOutcome {
                    z,
                    status: SolveStatus::MaxIter,
                    kkt_residual: kkt_res,
                    iterations: iter + 1,
                    merit_monotone,
                });
            }
            continue;
        }
        stall = 0;

        let mult_scale = qp.mults.amax();
        if rho < 2.0 * mult_scale {
            rho = config.penalty_factor * mult_scale.max(rho);
        }
        let phi0 = merit(&eval, rho);
        let viol0 = violation_l1(&eval);
        let descent = eval.obj.gradient.dot(&qp.d) - rho * viol0;
        let descent = descent.min(-1e-16 * phi0.abs().max(1.0));

        // ratio test: cap the step at the first blocking inequality
        // (linearized; exact for bounds and other linear constraints, so the
        // blocking constraint lands on its boundary and joins the working
        // set next iteration)
        let mut alpha_cap = 1.0_f64;
        for (k, c) in eval.ineqs.iter().enumerate() {
            if working.contains(&k) || c.value <= 0.0 {
                continue;
            }
            let slope = c.gradient.dot(&qp.d);
            if slope < -1e-14 {
                alpha_cap = alpha_cap.min(c.value / (-slope));
            }
        }
        let mut alpha = alpha_cap.max(1e-10);
        let mut accepted = None;
        while alpha >= 1e-12 {
            let trial = &z + &qp.d * alpha;
            // domain violations count as +inf merit and just backtrack
            if let Ok(ev) = evaluate(nlp, &trial) {
                let phi = merit(&ev, rho);
                if phi <= phi0 + config.armijo * alpha * descent {
                    if phi > phi0 {
                        merit_monotone = false;
                    }
                    accepted = Some((trial, ev));
                    break;
                }
            }
            alpha *= config.backtrack;
        }
        match accepted {
            Some((trial, ev)) => {
                z = trial;
                eval = ev;
                tau_boost = 0.0;
            }
            None => {
                // the QP direction is not usable: stiffen the reduced Hessian
                tau_boost = if tau_boost == 0.0 {
                    TAU_FIRST
                } else {
                    tau_boost * 10.0
                };
                if tau_boost > TAU_MAX {
                    return Ok(SolveOutcome {
                        z,
                        status: SolveStatus::LineSearchFailure,
                        kkt_residual: kkt_res,
                        iterations: iter + 1,
                        merit_monotone,
                    });
                }
            }
        }
    }

    let working: Vec<usize> = (0..eval.ineqs.len())
        .filter(|&k| eval.ineqs[k].value <= config.activity_tol)
        .collect();
    let (_, kkt_res) = kkt_estimate(&eval, &working, dim);
    Ok(SolveOutcome {
        z,
        status: if kkt_res <= config.kkt_tol {
            SolveStatus::Converged
        } else {
            SolveStatus::MaxIter
        },
        kkt_residual: kkt_res,
        iterations: config.max_iter,
        merit_monotone,
    })
}

// ---------------------------------------------------------------------------
// Newton polish on a frozen active set
// ---------------------------------------------------------------------------

const POLISH_TOL: f64 = 1e-12;
const POLISH_MAX_ITER: usize = 25;

/// Full Newton on the square KKT system of the frozen working set `frozen`
/// (inequality indices treated as equalities). Quadratic local convergence;
/// divergence is detected by residual growth.
pub fn newton_polish<P: NlpProblem>(
    nlp: &P,
    z0: &DVector<f64>,
    frozen: &[usize],
    _config: &SolverConfig,
) -> Result<SolveOutcome, SolverError> {
    let dim = nlp.dim();
    let mut z = z0.clone();
    let mut eval = evaluate(nlp, &z)?;
    let n_eq = eval.eqs.len();
    let m_act = n_eq + frozen.len();
    let (mut mults, _) = kkt_estimate(&eval, frozen, dim);

    let residual = |eval: &EvalPoint, mults: &DVector<f64>| -> DVector<f64> {
        let a = active_rows(eval, frozen, dim);
        let mut r = DVector::zeros(dim + m_act);
        let stat = if m_act == 0 {
            eval.obj.gradient.clone()
        } else {
            &eval.obj.gradient - a.transpose() * mults
        };
        r.rows_mut(0, dim).copy_from(&stat);
        for (j, e) in eval.eqs.iter().enumerate() {
            r[dim + j] = e.value;
        }
        for (j, &k) in frozen.iter().enumerate() {
            r[dim + n_eq + j] = eval.ineqs[k].value;
        }
        r
    };

    let mut history = vec![residual(&eval, &mults).amax()];
    for iter in 0..POLISH_MAX_ITER {
        let res = residual(&eval, &mults);
        let res_norm = res.amax();
        if res_norm <= POLISH_TOL {
            return Ok(SolveOutcome {
                z,
                status: SolveStatus::Converged,
                kkt_residual: res_norm,
                iterations: iter,
                merit_monotone: true,
            });
        }
        let a = active_rows(&eval, frozen, dim);
        let b = lagrangian_hessian(&eval, frozen, &mults);
        let size = dim + m_act;
        let mut kkt = DMatrix::zeros(size, size);
        kkt.view_mut((0, 0), (dim, dim)).copy_from(&b);
        if m_act > 0 {
            kkt.view_mut((0, dim), (dim, m_act))
                .copy_from(&(-a.transpose()));
            kkt.view_mut((dim, 0), (m_act, dim)).copy_from(&a);
        }
        let delta = kkt.lu().solve(&(-&res)).ok_or(SolverError::SingularKkt)?;
        z += delta.rows(0, dim);
        if m_act > 0 {
            mults += delta.rows(dim, m_act);
        }
        eval = evaluate(nlp, &z)?;
        let new_norm = residual(&eval, &mults).amax();
        history.push(new_norm);
        if new_norm > 10.0 * res_norm && new_norm > POLISH_TOL * 10.0 {
            return Err(SolverError::PolishDiverged(history));
        }
    }
    let res_norm = residual(&eval, &mults).amax();
    if res_norm <= POLISH_TOL {
        Ok(SolveOutcome {
            z,
            status: SolveStatus::Converged,
            kkt_residual: res_norm,
            iterations: POLISH_MAX_ITER,
            merit_monotone: true,
        })
    } else {
        Err(SolverError::PolishDiverged(history))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activesets;
    use crate::model::builtin;
    use approx::assert_relative_eq;

    fn vec4(a: f64, b: f64, c: f64, d: f64) -> DVector<f64> {
        DVector::from_row_slice(&[a, b, c, d])
    }

    #[test]
    fn converges_to_band_boundary_point() {
        let reform = builtin::strict_complementarity_failure();
        let s = reform.scholtes(0.05).unwrap();
        let nlp = ScholtesNlp::new(s);
        let config = SolverConfig::default();
        let out = solve_local(&nlp, &vec4(0.04, 1.01, 0.99, 0.01), &config).unwrap();
        assert!(out.converged(), "status {:?}", out.status);
        assert!(out.kkt_residual <= 1e-10);
        let expected = vec4(0.05, 1.0, 1.0, 0.0);
        assert!((out.z - expected).norm() <= 1e-8);
        assert!(out.merit_monotone);
    }

    #[test]
    fn convex_instance_converges_fast_from_many_starts() {
        let file = crate::model::ProblemFile {
            n: 2,
            s: 1,
            objective: "x1^2+x2^2".into(),
            equalities: vec![],
            inequalities: vec![],
            c: None,
            epsilon: None,
        };
        let reform = file.build().unwrap();
        let s = reform.scholtes(0.1).unwrap();
        let nlp = ScholtesNlp::new(s);
        let config = SolverConfig::default();
        for start in [
            vec4(1.0, -1.0, 0.5, 0.5),
            vec4(-2.0, 2.0, 1.4, 0.1),
            vec4(0.0, 0.0, 0.0, 0.0),
            vec4(3.0, 3.0, 1.0, 1.0),
        ] {
            let out = solve_local(&nlp, &start, &config).unwrap();
            assert!(out.converged(), "start {start:?} status {:?}", out.status);
            assert!(out.iterations <= 50, "{} iterations", out.iterations);
        }
    }

    #[test]
    fn start_at_kkt_point_is_a_fixed_point() {
        let reform = builtin::vanishing_sigma1();
        let s = reform.scholtes(0.01).unwrap();
        let nlp = ScholtesNlp::new(s);
        let out = solve_local(&nlp, &vec4(0.0, 1.0, 1.0, 0.0), &SolverConfig::default()).unwrap();
        assert!(out.converged());
        assert!(out.iterations <= 2, "{} iterations", out.iterations);
        assert_relative_eq!((out.z - vec4(0.0, 1.0, 1.0, 0.0)).norm(), 0.0);
    }

    #[test]
    fn polish_reaches_high_accuracy() {
        let reform = builtin::strict_complementarity_failure();
        let s = reform.scholtes(0.05).unwrap();
        let nlp = ScholtesNlp::new(s);
        let config = SolverConfig::default();
        let out = solve_local(&nlp, &vec4(0.04, 1.01, 0.99, 0.01), &config).unwrap();
        let pattern = activesets::detect_s(&s, &out.point_xy(), config.activity_tol).unwrap();
        let frozen = nlp.frozen_indices(&pattern);
        let polished = newton_polish(&nlp, &out.z, &frozen, &config).unwrap();
        assert!(polished.kkt_residual <= 1e-12);
        assert!(polished.iterations <= 3, "{}", polished.iterations);
    }

    #[test]
    fn polish_zero_correction_at_exact_point() {
        let reform = builtin::vanishing_sigma1();
        let s = reform.scholtes(0.01).unwrap();
        let nlp = ScholtesNlp::new(s);
        let z = vec4(0.0, 1.0, 1.0, 0.0);
        let pattern =
            activesets::detect_s(&s, &crate::model::PointXY::from_stacked(&z), 1e-8).unwrap();
        let frozen = nlp.frozen_indices(&pattern);
        let polished = newton_polish(&nlp, &z, &frozen, &SolverConfig::default()).unwrap();
        assert_relative_eq!((polished.z - z).norm(), 0.0, epsilon = 1e-14);
        assert_eq!(polished.iterations, 0);
    }

    #[test]
    fn polish_detects_wrong_frozen_set() {
        let reform = builtin::strict_complementarity_failure();
        let s = reform.scholtes(0.05).unwrap();
        let nlp = ScholtesNlp::new(s);
        // freeze the wrong band side and a wrong bound at a non-matching point
        let frozen = vec![nlp.idx_band_lower(0), nlp.idx_y_lower(0)];
        let res = newton_polish(
            &nlp,
            &vec4(0.05, 1.0, 1.0, 0.0),
            &frozen,
            &SolverConfig::default(),
        );
        assert!(res.is_err());
    }

    #[test]
    fn deterministic_iterates() {
        let reform = builtin::index_persistence();
        let s = reform.scholtes(0.01).unwrap();
        let nlp = ScholtesNlp::new(s);
        let config = SolverConfig::default();
        let start = vec4(1.7, -0.3, 0.2, 1.1);
        let a = solve_local(&nlp, &start, &config).unwrap();
        let b = solve_local(&nlp, &start, &config).unwrap();
        assert_eq!(a.iterations, b.iterations);
        for (x, y) in a.z.iter().zip(b.z.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn restricted_problem_solves_pinned_system() {
        let reform = builtin::vanishing_sigma1();
        // min f s.t. g1 = 0 (pinned), x1 = 0  ->  x = (0, 1)
        let nlp = RestrictedXNlp::new(&reform, vec![0], vec![0]);
        let out = solve_local(
            &nlp,
            &DVector::from_row_slice(&[0.3, 0.2]),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(out.converged());
        assert!((out.z - DVector::from_row_slice(&[0.0, 1.0])).norm() <= 1e-9);
    }
}
