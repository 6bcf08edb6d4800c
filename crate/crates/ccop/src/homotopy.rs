//! The Scholtes-type regularization method: track KKT points of S(t) along a
//! decreasing t-schedule, diagnose the limit, verify multiplier convergence,
//! and run the predictor-corrector that follows a nondegenerate T-stationary
//! point into S(t).
//!
//! The multiplier combinations that converge as t -> 0 are:
//!
//! ```text
//!   lambda, mu                      -> directly
//!   (eta>= - eta<=) y_i             -> sigma1_i   (i in a01)
//!   nu_i + (eta>= - eta<=) x_i      -> sigma2_i   (i in a10)
//!   both combinations               -> rho1_i, rho2_i   (i in a00)
//! ```
//!
//! The corrector solves a square system mimicking stationarity and
//! feasibility whose biactive components scale like sqrt(t); its Jacobian is
//! nonsingular at t = 0 at a nondegenerate seed with nonvanishing sigma1, so
//! Newton converges for all small t.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::activesets::{self, PatternRelation, Side};
use crate::model::{PointXY, ReformR};
use crate::nlpsolver::{self, ScholtesNlp, SolverConfig};
use crate::stationarity::{
    self, classify_r, classify_s, IndexBoundVerdict, MultiplierSetR, MultiplierSetS,
    StationarityReport,
};
use crate::Tolerances;

#[derive(Debug, Error)]
pub enum HomotopyError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Solver(#[from] nlpsolver::SolverError),
    #[error(transparent)]
    Stationarity(#[from] stationarity::StationarityError),
    #[error(transparent)]
    ActiveSet(#[from] activesets::ActiveSetError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("corrector refused: {0}")]
    Refused(String),
    #[error("corrector Newton diverged (residual history {0:?})")]
    NewtonDiverged(Vec<f64>),
}

/// Geometric t-schedule `t_k = t0 * theta^k` down to `t_min` (inclusive).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Schedule {
    pub t0: f64,
    pub theta: f64,
    pub t_min: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            t0: 1e-1,
            theta: 0.1,
            t_min: 1e-8,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), HomotopyError> {
        if !(self.t_min > 0.0 && self.t0 > self.t_min) {
            return Err(HomotopyError::InvalidSchedule(format!(
                "need t0 > t_min > 0 (got t0 = {}, t_min = {})",
                self.t0, self.t_min
            )));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(HomotopyError::InvalidSchedule(format!(
                "need 0 < theta < 1 (got {})",
                self.theta
            )));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for k in 0..10_000 {
            let t = self.t0 * self.theta.powi(k);
            if t < self.t_min * (1.0 - 1e-9) {
                break;
            }
            out.push(t);
        }
        out
    }
}

/// One verified KKT point along the path.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub t: f64,
    pub point: PointXY,
    pub report: StationarityReport,
}

impl TraceRecord {
    pub fn multipliers(&self) -> &MultiplierSetS {
        self.report.multipliers_s.as_ref().expect("S-side record")
    }
}

/// The snapped limit with its R-side verification.
#[derive(Debug, Clone, Serialize)]
pub struct TraceTerminal {
    pub point: PointXY,
    pub report: StationarityReport,
}

impl TraceTerminal {
    pub fn multipliers(&self) -> &MultiplierSetR {
        self.report.multipliers_r.as_ref().expect("R-side terminal")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HomotopyTrace {
    pub records: Vec<TraceRecord>,
    pub terminal: Option<TraceTerminal>,
    /// Set when the path was cut short (solver failure at some t).
    pub aborted: Option<String>,
}

/// Snap near-pattern coordinates to their exact pattern values: x to 0, y to
/// 0, 1+eps, or the fractional level 1-(n-s-1)eps. The tolerance must cover
/// the sqrt(t) scale of near-biactive coordinates at the last path step.
pub fn snap_to_pattern(reform: &ReformR, point: &PointXY, snap_tol: f64) -> PointXY {
    let n = reform.n();
    let eps = reform.epsilon();
    let fractional = 1.0 - (n - reform.s() - 1) as f64 * eps;
    let mut x = point.x.clone();
    let mut y = point.y.clone();
    for i in 0..n {
        if x[i].abs() <= snap_tol {
            x[i] = 0.0;
        }
        for lvl in [0.0, 1.0 + eps, fractional] {
            if (y[i] - lvl).abs() <= snap_tol {
                y[i] = lvl;
                break;
            }
        }
    }
    PointXY::new(x, y)
}

/// Track KKT points of S(t_k) along the schedule, warm-starting each solve
/// from the previous point, then snap the final point and verify the limit's
/// T-stationarity. Solver failure yields a partial trace with `aborted` set;
/// a degenerate limit is a finding, not an error.
pub fn scholtes_path(
    reform: &ReformR,
    start: &PointXY,
    schedule: &Schedule,
    config: &SolverConfig,
    tols: &Tolerances,
) -> Result<HomotopyTrace, HomotopyError> {
    schedule.validate()?;
    if !start.is_finite() {
        return Err(HomotopyError::Invalid("start point is not finite".into()));
    }
    let mut trace = HomotopyTrace {
        records: Vec::new(),
        terminal: None,
        aborted: None,
    };
    let mut z = start.stacked();
    let mut t_last = schedule.t0;
    for t in schedule.values() {
        let scholtes = reform.scholtes(t)?;
        let nlp = ScholtesNlp::new(scholtes);
        let out = nlpsolver::solve_local(&nlp, &z, config)?;
        if !out.converged() {
            trace.aborted = Some(format!(
                "solver failed at t = {t:.3e}: {:?}, kkt residual {:.3e}",
                out.status, out.kkt_residual
            ));
            return Ok(trace);
        }
        // polish on the frozen active set before classification
        let mut zt = out.z.clone();
        if let Ok(pattern) = activesets::detect_s(&scholtes, &out.point_xy(), tols.activity) {
            let frozen = nlp.frozen_indices(&pattern);
            if let Ok(polished) = nlpsolver::newton_polish(&nlp, &zt, &frozen, config) {
                zt = polished.z;
            }
        }
        let point = PointXY::from_stacked(&zt);
        let report = classify_s(&scholtes, &point, tols)?;
        trace.records.push(TraceRecord {
            t,
            point: point.clone(),
            report,
        });
        z = zt;
        t_last = t;
    }

    let snap_tol = tols.activity.max(50.0 * t_last.sqrt());
    let mut limit = snap_to_pattern(reform, &PointXY::from_stacked(&z), snap_tol);
    polish_limit_x(reform, &mut limit, snap_tol, config);
    let report = classify_r(reform, &limit, tols)?;
    trace.terminal = Some(TraceTerminal {
        point: limit,
        report,
    });
    Ok(trace)
}

/// Snapping fixes the zero and level coordinates exactly, but nonzero
/// x-coordinates on equality manifolds (h = 0, active g = 0) still carry the
/// O(t) offset of the last path point. Re-solve the restricted x-system with
/// the snapped zeros pinned to land them exactly; a no-constraint instance
/// converges in zero iterations and nothing moves.
fn polish_limit_x(reform: &ReformR, limit: &mut PointXY, snap_tol: f64, config: &SolverConfig) {
    let problem = reform.problem();
    let zero_coords: Vec<usize> = (0..reform.n()).filter(|&i| limit.x[i] == 0.0).collect();
    let mut pinned = Vec::new();
    for (q, gexpr) in problem.inequalities().iter().enumerate() {
        if let Ok(v) = gexpr.eval(&limit.x) {
            if v.abs() <= snap_tol {
                pinned.push(q);
            }
        }
    }
    if problem.equalities().is_empty() && pinned.is_empty() {
        return;
    }
    let nlp = crate::nlpsolver::RestrictedXNlp::new(reform, pinned, zero_coords);
    if let Ok(out) = nlpsolver::solve_local(&nlp, &limit.x, config) {
        if out.converged() {
            limit.x = out.z;
        }
    }
}

// ---------------------------------------------------------------------------
// Multiplier limits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct LimitEntry {
    pub family: String,
    pub extrapolated: f64,
    pub direct: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiplierLimitReport {
    pub entries: Vec<LimitEntry>,
    pub max_error: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Quadratic Lagrange extrapolation to t = 0 through three samples, in the
/// variable s = sqrt(t): biactive path coordinates (and hence the multiplier
/// combinations touching them) expand in powers of sqrt(t), so the sqrt
/// abscissa is exact for the {1, sqrt(t), t} part of every family.
fn extrapolate(samples: &[(f64, f64); 3]) -> f64 {
    let [(t1, v1), (t2, v2), (t3, v3)] = *samples;
    let (s1, s2, s3) = (t1.sqrt(), t2.sqrt(), t3.sqrt());
    let l1 = (s2 * s3) / ((s1 - s2) * (s1 - s3));
    let l2 = (s1 * s3) / ((s2 - s1) * (s2 - s3));
    let l3 = (s1 * s2) / ((s3 - s1) * (s3 - s2));
    v1 * l1 + v2 * l2 + v3 * l3
}

fn eta_diff(mults: &MultiplierSetS, i: usize) -> f64 {
    mults.eta_ge_for(i).unwrap_or(0.0) - mults.eta_le_for(i).unwrap_or(0.0)
}

/// Extrapolate the multiplier combinations over the last three records and
/// compare against the directly estimated limit multipliers. The usual
/// comparison tolerance is 1e-4: the combinations mix diverging and
/// vanishing factors, so extrapolation error dominates machine precision.
pub fn multiplier_limits(
    trace: &HomotopyTrace,
    tol: f64,
) -> Result<MultiplierLimitReport, HomotopyError> {
    if trace.records.len() < 3 {
        return Err(HomotopyError::Invalid(format!(
            "multiplier limits need at least 3 records (got {})",
            trace.records.len()
        )));
    }
    let terminal = trace
        .terminal
        .as_ref()
        .ok_or_else(|| HomotopyError::Invalid("trace has no terminal record".into()))?;
    let last3 = &trace.records[trace.records.len() - 3..];
    let pattern = &terminal.report.pattern;
    let direct = terminal.multipliers();

    let mut entries = Vec::new();
    let mut push = |family: String, per_record: [f64; 3], direct_value: f64| {
        let samples = [
            (last3[0].t, per_record[0]),
            (last3[1].t, per_record[1]),
            (last3[2].t, per_record[2]),
        ];
        let extrapolated = extrapolate(&samples);
        entries.push(LimitEntry {
            family,
            extrapolated,
            direct: direct_value,
            error: (extrapolated - direct_value).abs(),
        });
    };

    let take = |f: &dyn Fn(&MultiplierSetS, &TraceRecord) -> f64| -> [f64; 3] {
        [
            f(last3[0].multipliers(), &last3[0]),
            f(last3[1].multipliers(), &last3[1]),
            f(last3[2].multipliers(), &last3[2]),
        ]
    };

    for (p, &lam) in direct.lambda.iter().enumerate() {
        push(
            format!("lambda[h{}]", p + 1),
            take(&|m, _| m.lambda[p]),
            lam,
        );
    }
    for m in &direct.mu1 {
        let q = m.index;
        push(
            format!("mu1[g{}]", q + 1),
            take(&|ms, _| ms.mu1_for(q).unwrap_or(0.0)),
            m.value,
        );
    }
    for m in &direct.mu2 {
        let i = m.index;
        push(
            format!("mu2[y{}]", i + 1),
            take(&|ms, _| {
                ms.mu2
                    .iter()
                    .find(|v| v.index == i)
                    .map(|v| v.value)
                    .unwrap_or(0.0)
            }),
            m.value,
        );
    }
    push("mu3".into(), take(&|ms, _| ms.mu3), direct.mu3);
    for &i in &pattern.a01 {
        push(
            format!("sigma1[{}]", i + 1),
            take(&|ms, r| eta_diff(ms, i) * r.point.y[i]),
            direct.sigma1_for(i).unwrap_or(0.0),
        );
    }
    for &i in &pattern.a10 {
        push(
            format!("sigma2[{}]", i + 1),
            take(&|ms, r| ms.nu_for(i).unwrap_or(0.0) + eta_diff(ms, i) * r.point.x[i]),
            direct.sigma2_for(i).unwrap_or(0.0),
        );
    }
    for &i in &pattern.a00 {
        push(
            format!("rho1[{}]", i + 1),
            take(&|ms, r| eta_diff(ms, i) * r.point.y[i]),
            direct.rho1_for(i).unwrap_or(0.0),
        );
        push(
            format!("rho2[{}]", i + 1),
            take(&|ms, r| ms.nu_for(i).unwrap_or(0.0) + eta_diff(ms, i) * r.point.x[i]),
            direct.rho2_for(i).unwrap_or(0.0),
        );
    }
    let max_error = entries.iter().map(|e| e.error).fold(0.0, f64::max);
    Ok(MultiplierLimitReport {
        pass: max_error <= tol,
        max_error,
        tol,
        entries,
    })
}

// ---------------------------------------------------------------------------
// Predictor-corrector
// ---------------------------------------------------------------------------

/// Outcome of one corrector solve at a fixed t.
#[derive(Debug, Clone, Serialize)]
pub struct CorrectorOutcome {
    pub t: f64,
    pub point: PointXY,
    /// Multipliers renamed into the KKT convention of S(t).
    pub multipliers: MultiplierSetS,
    pub newton_residual: f64,
    pub newton_iterations: usize,
    /// Verification of the output as a KKT point of S(t).
    pub report: StationarityReport,
}

struct CorrectorIndexData {
    q0: Vec<usize>,
    e_upper: Vec<usize>,
    a01: Vec<usize>,
    a10: Vec<usize>,
    a00: Vec<usize>,
    sigma1_sign: Vec<f64>,
    sigma2_sign: Vec<f64>,
    rho1_sign: Vec<f64>,
}

/// Square corrector system for the seed's pattern; unknown layout
/// `[x, y, lambda, mu1, mu2, mu3, sigma1, sigma2, rho1, rho2]`, row layout
/// `[stationarity, h, g, E, sum, a01 bands, a10 rows, a00 x rows, a00 y rows]`.
struct CorrectorSystem<'a> {
    reform: &'a ReformR,
    base: &'a PointXY,
    idx: CorrectorIndexData,
    t: f64,
}

impl CorrectorSystem<'_> {
    fn n(&self) -> usize {
        self.reform.n()
    }

    fn counts(&self) -> (usize, usize, usize, usize, usize, usize) {
        (
            self.reform.problem().equalities().len(),
            self.idx.q0.len(),
            self.idx.e_upper.len(),
            self.idx.a01.len(),
            self.idx.a10.len(),
            self.idx.a00.len(),
        )
    }

    fn size(&self) -> usize {
        let (p, q, e, a01, a10, a00) = self.counts();
        2 * self.n() + p + q + e + 1 + a01 + a10 + 2 * a00
    }

    fn off_lambda(&self) -> usize {
        2 * self.n()
    }
    fn off_mu1(&self) -> usize {
        self.off_lambda() + self.counts().0
    }
    fn off_mu2(&self) -> usize {
        self.off_mu1() + self.counts().1
    }
    fn off_mu3(&self) -> usize {
        self.off_mu2() + self.counts().2
    }
    fn off_sigma1(&self) -> usize {
        self.off_mu3() + 1
    }
    fn off_sigma2(&self) -> usize {
        self.off_sigma1() + self.counts().3
    }
    fn off_rho1(&self) -> usize {
        self.off_sigma2() + self.counts().4
    }
    fn off_rho2(&self) -> usize {
        self.off_rho1() + self.counts().5
    }

    fn residual(&self, u: &DVector<f64>) -> Result<DVector<f64>, HomotopyError> {
        let n = self.n();
        let x = u.rows(0, n).into_owned();
        let y = u.rows(n, n).into_owned();
        let problem = self.reform.problem();
        let sqrt_t = self.t.sqrt();
        let mut f = DVector::zeros(self.size());

        // stationarity rows
        let grad_f = problem.objective().eval2(&x).map_err(wrap_eval)?.gradient;
        for i in 0..n {
            f[i] = grad_f[i];
            f[n + i] = self.reform.c()[i];
        }
        for (p, hexpr) in problem.equalities().iter().enumerate() {
            let grad = hexpr.eval2(&x).map_err(wrap_eval)?.gradient;
            let lam = u[self.off_lambda() + p];
            for i in 0..n {
                f[i] -= lam * grad[i];
            }
        }
        for (j, &q) in self.idx.q0.iter().enumerate() {
            let grad = problem.inequalities()[q]
                .eval2(&x)
                .map_err(wrap_eval)?
                .gradient;
            let mu = u[self.off_mu1() + j];
            for i in 0..n {
                f[i] -= mu * grad[i];
            }
        }
        for (j, &i) in self.idx.e_upper.iter().enumerate() {
            f[n + i] += u[self.off_mu2() + j];
        }
        let mu3 = u[self.off_mu3()];
        for i in 0..n {
            f[n + i] -= mu3;
        }
        for (j, &i) in self.idx.a01.iter().enumerate() {
            let scale = u[self.off_sigma1() + j] / self.base.y[i];
            f[i] -= scale * y[i];
            f[n + i] -= scale * x[i];
        }
        for (j, &i) in self.idx.a10.iter().enumerate() {
            let s2 = u[self.off_sigma2() + j];
            if self.idx.sigma2_sign[j] < 0.0 {
                let scale = s2 / self.base.x[i];
                f[i] -= scale * y[i];
                f[n + i] -= scale * x[i];
            } else {
                f[n + i] -= s2;
            }
        }
        for (j, &i) in self.idx.a00.iter().enumerate() {
            f[i] -= u[self.off_rho1() + j];
            f[n + i] -= u[self.off_rho2() + j];
        }

        // feasibility rows
        let mut row = 2 * n;
        for hexpr in problem.equalities() {
            f[row] = hexpr.eval(&x).map_err(wrap_eval)?;
            row += 1;
        }
        for &q in &self.idx.q0 {
            f[row] = problem.inequalities()[q].eval(&x).map_err(wrap_eval)?;
            row += 1;
        }
        for &i in &self.idx.e_upper {
            f[row] = 1.0 + self.reform.epsilon() - y[i];
            row += 1;
        }
        f[row] = y.sum() - self.reform.sum_rhs();
        row += 1;
        for (j, &i) in self.idx.a01.iter().enumerate() {
            let target = if self.idx.sigma1_sign[j] < 0.0 {
                self.t
            } else {
                -self.t
            };
            f[row] = (x[i] * y[i] - target) / self.base.y[i];
            row += 1;
        }
        for (j, &i) in self.idx.a10.iter().enumerate() {
            if self.idx.sigma2_sign[j] < 0.0 {
                let sgn = self.base.x[i].signum();
                f[row] = (sgn * x[i] * y[i] - self.t) / self.base.x[i].abs();
            } else {
                f[row] = y[i];
            }
            row += 1;
        }
        for (j, &i) in self.idx.a00.iter().enumerate() {
            let r1 = u[self.off_rho1() + j];
            let r2 = u[self.off_rho2() + j];
            if self.idx.rho1_sign[j] < 0.0 {
                let p = (r1 * r2).sqrt();
                f[row] = x[i] + r2 * sqrt_t / p;
                f[row + 1] = y[i] + r1 * sqrt_t / p;
            } else {
                let m = (-r1 * r2).sqrt();
                f[row] = x[i] - r2 * sqrt_t / m;
                f[row + 1] = y[i] - r1 * sqrt_t / m;
            }
            row += 2;
        }
        debug_assert_eq!(row, self.size());
        Ok(f)
    }

    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>, HomotopyError> {
        let n = self.n();
        let x = u.rows(0, n).into_owned();
        let y = u.rows(n, n).into_owned();
        let problem = self.reform.problem();
        let size = self.size();
        let sqrt_t = self.t.sqrt();
        let mut jac = DMatrix::zeros(size, size);

        // d(stationarity)/d(x, y, multipliers)
        let hess_f = problem.objective().eval2(&x).map_err(wrap_eval)?.hessian;
        for i in 0..n {
            for k in 0..n {
                jac[(i, k)] = hess_f[(i, k)];
            }
        }
        for (p, hexpr) in problem.equalities().iter().enumerate() {
            let e2 = hexpr.eval2(&x).map_err(wrap_eval)?;
            let lam = u[self.off_lambda() + p];
            for i in 0..n {
                for k in 0..n {
                    jac[(i, k)] -= lam * e2.hessian[(i, k)];
                }
                jac[(i, self.off_lambda() + p)] = -e2.gradient[i];
            }
        }
        for (j, &q) in self.idx.q0.iter().enumerate() {
            let e2 = problem.inequalities()[q].eval2(&x).map_err(wrap_eval)?;
            let mu = u[self.off_mu1() + j];
            for i in 0..n {
                for k in 0..n {
                    jac[(i, k)] -= mu * e2.hessian[(i, k)];
                }
                jac[(i, self.off_mu1() + j)] = -e2.gradient[i];
            }
        }
        for (j, &i) in self.idx.e_upper.iter().enumerate() {
            jac[(n + i, self.off_mu2() + j)] = 1.0;
        }
        for i in 0..n {
            jac[(n + i, self.off_mu3())] = -1.0;
        }
        for (j, &i) in self.idx.a01.iter().enumerate() {
            let scale = u[self.off_sigma1() + j] / self.base.y[i];
            jac[(i, n + i)] -= scale;
            jac[(n + i, i)] -= scale;
            jac[(i, self.off_sigma1() + j)] = -y[i] / self.base.y[i];
            jac[(n + i, self.off_sigma1() + j)] = -x[i] / self.base.y[i];
        }
        for (j, &i) in self.idx.a10.iter().enumerate() {
            if self.idx.sigma2_sign[j] < 0.0 {
                let scale = u[self.off_sigma2() + j] / self.base.x[i];
                jac[(i, n + i)] -= scale;
                jac[(n + i, i)] -= scale;
                jac[(i, self.off_sigma2() + j)] = -y[i] / self.base.x[i];
                jac[(n + i, self.off_sigma2() + j)] = -x[i] / self.base.x[i];
            } else {
                jac[(n + i, self.off_sigma2() + j)] = -1.0;
            }
        }
        for (j, &i) in self.idx.a00.iter().enumerate() {
            jac[(i, self.off_rho1() + j)] = -1.0;
            jac[(n + i, self.off_rho2() + j)] = -1.0;
        }

        // d(feasibility)
        let mut row = 2 * n;
        for hexpr in problem.equalities() {
            let grad = hexpr.eval2(&x).map_err(wrap_eval)?.gradient;
            for k in 0..n {
                jac[(row, k)] = grad[k];
            }
            row += 1;
        }
        for &q in &self.idx.q0 {
            let grad = problem.inequalities()[q]
                .eval2(&x)
                .map_err(wrap_eval)?
                .gradient;
            for k in 0..n {
                jac[(row, k)] = grad[k];
            }
            row += 1;
        }
        for &i in &self.idx.e_upper {
            jac[(row, n + i)] = -1.0;
            row += 1;
        }
        for k in 0..n {
            jac[(row, n + k)] = 1.0;
        }
        row += 1;
        for &i in &self.idx.a01 {
            jac[(row, i)] = y[i] / self.base.y[i];
            jac[(row, n + i)] = x[i] / self.base.y[i];
            row += 1;
        }
        for (j, &i) in self.idx.a10.iter().enumerate() {
            if self.idx.sigma2_sign[j] < 0.0 {
                let sgn = self.base.x[i].signum();
                jac[(row, i)] = sgn * y[i] / self.base.x[i].abs();
                jac[(row, n + i)] = sgn * x[i] / self.base.x[i].abs();
            } else {
                jac[(row, n + i)] = 1.0;
            }
            row += 1;
        }
        for (j, &i) in self.idx.a00.iter().enumerate() {
            let r1 = u[self.off_rho1() + j];
            let r2 = u[self.off_rho2() + j];
            if self.idx.rho1_sign[j] < 0.0 {
                let p = (r1 * r2).sqrt();
                jac[(row, i)] = 1.0;
                jac[(row, self.off_rho1() + j)] = -sqrt_t * r2 * r2 / (2.0 * p * p * p);
                jac[(row, self.off_rho2() + j)] = sqrt_t / (2.0 * p);
                jac[(row + 1, n + i)] = 1.0;
                jac[(row + 1, self.off_rho1() + j)] = sqrt_t / (2.0 * p);
                jac[(row + 1, self.off_rho2() + j)] = -sqrt_t * r1 * r1 / (2.0 * p * p * p);
            } else {
                let m = (-r1 * r2).sqrt();
                jac[(row, i)] = 1.0;
                jac[(row, self.off_rho1() + j)] = -sqrt_t * r2 * r2 / (2.0 * m * m * m);
                jac[(row, self.off_rho2() + j)] = -sqrt_t / (2.0 * m);
                jac[(row + 1, n + i)] = 1.0;
                jac[(row + 1, self.off_rho1() + j)] = -sqrt_t / (2.0 * m);
                jac[(row + 1, self.off_rho2() + j)] = -sqrt_t * r1 * r1 / (2.0 * m * m * m);
            }
            row += 2;
        }
        debug_assert_eq!(row, size);
        Ok(jac)
    }
}

fn wrap_eval(e: crate::expr::EvalError) -> HomotopyError {
    HomotopyError::Invalid(format!("evaluation failed in corrector: {e}"))
}

/// Follow a nondegenerate T-stationary seed (with nonvanishing sigma1) into
/// a KKT point of S(t) by Newton on the square corrector system. Refuses
/// seeds violating the preconditions, naming the failing condition.
pub fn predictor_corrector_f(
    reform: &ReformR,
    seed: &StationarityReport,
    t: f64,
    tols: &Tolerances,
) -> Result<CorrectorOutcome, HomotopyError> {
    if t.is_nan() || t <= 0.0 {
        return Err(HomotopyError::Invalid(format!(
            "corrector needs t > 0 (got {t})"
        )));
    }
    if seed.pattern.side != Side::R {
        return Err(HomotopyError::Refused(
            "seed is not an R-side report".into(),
        ));
    }
    for name in ["NDT1", "NDT2", "NDT3", "NDT4", "NDT6"] {
        if let Some(c) = seed.condition(name) {
            if !c.pass {
                return Err(HomotopyError::Refused(format!(
                    "{name} fail, {}",
                    c.witness
                )));
            }
        }
    }
    if !seed.stationary {
        return Err(HomotopyError::Refused(
            "seed is not a verified T-stationary point".into(),
        ));
    }
    let mults = seed
        .multipliers_r
        .as_ref()
        .ok_or_else(|| HomotopyError::Refused("seed carries no multipliers".into()))?;
    let pattern = &seed.pattern;
    if !pattern.sum_active {
        return Err(HomotopyError::Refused(
            "summation constraint inactive at the seed".into(),
        ));
    }

    let sigma2: Vec<f64> = pattern
        .a10
        .iter()
        .map(|&i| mults.sigma2_for(i).unwrap_or(0.0))
        .collect();
    if sigma2.iter().any(|v| v.abs() <= tols.strict) {
        return Err(HomotopyError::Refused(
            "sigma2 vanishes on a10; sign split undefined".into(),
        ));
    }
    let idx = CorrectorIndexData {
        q0: pattern.q0.clone(),
        e_upper: pattern.e_upper.clone(),
        a01: pattern.a01.clone(),
        a10: pattern.a10.clone(),
        a00: pattern.a00.clone(),
        sigma1_sign: pattern
            .a01
            .iter()
            .map(|&i| mults.sigma1_for(i).unwrap_or(0.0).signum())
            .collect(),
        sigma2_sign: sigma2.iter().map(|v| v.signum()).collect(),
        rho1_sign: pattern
            .a00
            .iter()
            .map(|&i| mults.rho1_for(i).unwrap_or(0.0).signum())
            .collect(),
    };

    let system = CorrectorSystem {
        reform,
        base: &seed.point,
        idx,
        t,
    };

    // predictor: the seed with biactive coordinates moved to their sqrt(t)
    // closed forms and multipliers at their limit values
    let mut u = DVector::zeros(system.size());
    let n = reform.n();
    for i in 0..n {
        u[i] = seed.point.x[i];
        u[n + i] = seed.point.y[i];
    }
    for (p, &lam) in mults.lambda.iter().enumerate() {
        u[system.off_lambda() + p] = lam;
    }
    for (j, &q) in system.idx.q0.iter().enumerate() {
        u[system.off_mu1() + j] = mults.mu1_for(q).unwrap_or(0.0);
    }
    for (j, &i) in system.idx.e_upper.iter().enumerate() {
        u[system.off_mu2() + j] = mults.mu2_for(i).unwrap_or(0.0);
    }
    u[system.off_mu3()] = mults.mu3;
    for (j, &i) in system.idx.a01.iter().enumerate() {
        u[system.off_sigma1() + j] = mults.sigma1_for(i).unwrap_or(0.0);
    }
    for (j, &i) in system.idx.a10.iter().enumerate() {
        u[system.off_sigma2() + j] = mults.sigma2_for(i).unwrap_or(0.0);
    }
    let sqrt_t = t.sqrt();
    for (j, &i) in system.idx.a00.iter().enumerate() {
        let r1 = mults.rho1_for(i).unwrap_or(0.0);
        let r2 = mults.rho2_for(i).unwrap_or(0.0);
        u[system.off_rho1() + j] = r1;
        u[system.off_rho2() + j] = r2;
        if system.idx.rho1_sign[j] < 0.0 {
            let p = (r1 * r2).sqrt();
            u[i] = -r2 * sqrt_t / p;
            u[n + i] = -r1 * sqrt_t / p;
        } else {
            let m = (-r1 * r2).sqrt();
            u[i] = r2 * sqrt_t / m;
            u[n + i] = r1 * sqrt_t / m;
        }
    }

    let mut history = Vec::new();
    let mut iterations = 0usize;
    let newton_residual = loop {
        let f = system.residual(&u)?;
        let res = f.amax();
        history.push(res);
        if res <= 1e-12 {
            break res;
        }
        if iterations >= 50 || (history.len() >= 3 && res > 10.0 * history[history.len() - 2]) {
            return Err(HomotopyError::NewtonDiverged(history));
        }
        let jac = system.jacobian(&u)?;
        let delta = jac
            .lu()
            .solve(&(-&f))
            .ok_or_else(|| HomotopyError::Refused("singular corrector Jacobian".into()))?;
        u += delta;
        iterations += 1;
    };

    // rename multipliers into the KKT convention of S(t)
    let point = PointXY::new(u.rows(0, n).into_owned(), u.rows(n, n).into_owned());
    let mut out = MultiplierSetS {
        lambda: (0..mults.lambda.len())
            .map(|p| u[system.off_lambda() + p])
            .collect(),
        mu1: system
            .idx
            .q0
            .iter()
            .enumerate()
            .map(|(j, &q)| stationarity::Indexed {
                index: q,
                value: u[system.off_mu1() + j],
            })
            .collect(),
        mu2: system
            .idx
            .e_upper
            .iter()
            .enumerate()
            .map(|(j, &i)| stationarity::Indexed {
                index: i,
                value: u[system.off_mu2() + j],
            })
            .collect(),
        mu3: u[system.off_mu3()],
        eta_ge: vec![],
        eta_le: vec![],
        nu: vec![],
    };
    for (j, &i) in system.idx.a01.iter().enumerate() {
        let theta = u[system.off_sigma1() + j] / seed.point.y[i];
        if system.idx.sigma1_sign[j] > 0.0 {
            out.eta_ge.push(stationarity::Indexed {
                index: i,
                value: theta,
            });
        } else {
            out.eta_le.push(stationarity::Indexed {
                index: i,
                value: -theta,
            });
        }
    }
    for (j, &i) in system.idx.a10.iter().enumerate() {
        let s2 = u[system.off_sigma2() + j];
        if system.idx.sigma2_sign[j] < 0.0 {
            if seed.point.x[i] < 0.0 {
                out.eta_ge.push(stationarity::Indexed {
                    index: i,
                    value: s2 / seed.point.x[i],
                });
            } else {
                out.eta_le.push(stationarity::Indexed {
                    index: i,
                    value: -s2 / seed.point.x[i],
                });
            }
        } else {
            out.nu.push(stationarity::Indexed {
                index: i,
                value: s2,
            });
        }
    }
    for (j, &i) in system.idx.a00.iter().enumerate() {
        let r1 = u[system.off_rho1() + j];
        let r2 = u[system.off_rho2() + j];
        if system.idx.rho1_sign[j] < 0.0 {
            out.eta_le.push(stationarity::Indexed {
                index: i,
                value: (r1 * r2).sqrt() / sqrt_t,
            });
        } else {
            out.eta_ge.push(stationarity::Indexed {
                index: i,
                value: (-r1 * r2).sqrt() / sqrt_t,
            });
        }
    }
    out.eta_ge.sort_by_key(|m| m.index);
    out.eta_le.sort_by_key(|m| m.index);
    out.nu.sort_by_key(|m| m.index);

    let scholtes = reform.scholtes(t)?;
    let report = classify_s(&scholtes, &point, tols)?;
    Ok(CorrectorOutcome {
        t,
        point,
        multipliers: out,
        newton_residual,
        newton_iterations: iterations,
        report,
    })
}

// ---------------------------------------------------------------------------
// Index-persistence audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    /// Set when the audit does not apply (degenerate limit, missing data).
    pub skipped: Option<String>,
    pub bounds: Option<IndexBoundVerdict>,
    /// Active-set relations per record, smallest t last.
    pub relations: Vec<(f64, PatternRelation)>,
    /// All four relations hold on the three smallest-t records.
    pub relations_hold: bool,
    pub pass: bool,
}

/// Audit a finished trace: apply the index bounds with m taken from the
/// smallest-t record, and check the active-set relations between the limit
/// pattern and each path pattern. Skipped (with a reason) when the limit is
/// degenerate.
pub fn index_persistence_audit(
    trace: &HomotopyTrace,
    tols: &Tolerances,
) -> Result<AuditReport, HomotopyError> {
    let skip = |reason: String| AuditReport {
        skipped: Some(reason),
        bounds: None,
        relations: vec![],
        relations_hold: false,
        pass: false,
    };
    let terminal = match &trace.terminal {
        Some(t) => t,
        None => return Ok(skip("trace has no terminal record".into())),
    };
    if !terminal.report.nondegenerate {
        let cause = terminal
            .report
            .conditions
            .iter()
            .find(|c| c.name != "NDT6" && !c.pass)
            .map(|c| format!("{} violated ({})", c.name, c.witness))
            .unwrap_or_else(|| "stationarity not verified".into());
        return Ok(skip(format!("limit degenerate: {cause}")));
    }
    let last = trace
        .records
        .last()
        .ok_or_else(|| HomotopyError::Invalid("trace has no records".into()))?;
    let m = last
        .report
        .quadratic_index
        .ok_or_else(|| HomotopyError::Invalid("smallest-t record has no quadratic index".into()))?;
    let bounds = stationarity::index_bound_check(m, &terminal.report, tols)?;
    let mut relations = Vec::new();
    for rec in &trace.records {
        relations.push((
            rec.t,
            activesets::compare_patterns(&terminal.report.pattern, &rec.report.pattern)?,
        ));
    }
    let tail = relations.len().saturating_sub(3);
    let relations_hold = relations[tail..].iter().all(|(_, r)| r.all_hold());
    let pass = bounds.pass && relations_hold;
    Ok(AuditReport {
        skipped: None,
        bounds: Some(bounds),
        relations,
        relations_hold,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;
    use approx::assert_relative_eq;

    fn tols() -> Tolerances {
        Tolerances::default()
    }

    fn point(x: &[f64], y: &[f64]) -> PointXY {
        PointXY::new(DVector::from_row_slice(x), DVector::from_row_slice(y))
    }

    #[test]
    fn schedule_validation_and_values() {
        let s = Schedule {
            t0: 1e-2,
            theta: 0.1,
            t_min: 1e-8,
        };
        s.validate().unwrap();
        let v = s.values();
        assert_eq!(v.len(), 7);
        assert_relative_eq!(v[0], 1e-2);
        assert_relative_eq!(*v.last().unwrap(), 1e-8, max_relative = 1e-9);

        assert!(Schedule {
            t0: 1e-9,
            theta: 0.1,
            t_min: 1e-8
        }
        .validate()
        .is_err());
        assert!(Schedule {
            t0: 1e-1,
            theta: 1.5,
            t_min: 1e-8
        }
        .validate()
        .is_err());
    }

    #[test]
    fn path_on_degenerate_limit_instance() {
        let reform = builtin::strict_complementarity_failure();
        let schedule = Schedule {
            t0: 0.05,
            theta: 0.1,
            t_min: 1e-7,
        };
        let trace = scholtes_path(
            &reform,
            &point(&[0.1, 1.0], &[1.0, 0.0]),
            &schedule,
            &SolverConfig::default(),
            &tols(),
        )
        .unwrap();
        assert!(trace.aborted.is_none());
        assert_eq!(trace.records.len(), 6);
        for rec in &trace.records {
            assert!(rec.report.stationary, "t = {}", rec.t);
            // the path stays on the branch (t, 1, 1, 0)
            assert_relative_eq!(rec.point.x[0], rec.t, epsilon = 1e-8);
            assert_relative_eq!(rec.point.y[0], 1.0, epsilon = 1e-7);
        }
        let terminal = trace.terminal.as_ref().unwrap();
        assert_relative_eq!(
            (terminal.point.stacked() - DVector::from_row_slice(&[0.0, 1.0, 1.0, 0.0])).norm(),
            0.0,
            epsilon = 1e-12
        );
        assert!(terminal.report.stationary);
        assert!(!terminal.report.condition_passes("NDT2"));

        let audit = index_persistence_audit(&trace, &tols()).unwrap();
        assert!(audit.skipped.as_deref().unwrap().contains("NDT2"));

        // multiplier combinations are quadratic in t here, so three-point
        // extrapolation recovers the limit essentially exactly
        let limits = multiplier_limits(&trace, 1e-4).unwrap();
        assert!(limits.pass, "max error {}", limits.max_error);
        let sigma1 = limits
            .entries
            .iter()
            .find(|e| e.family == "sigma1[1]")
            .unwrap();
        assert_relative_eq!(sigma1.extrapolated, -2.0, epsilon = 1e-6);
        let sigma2 = limits
            .entries
            .iter()
            .find(|e| e.family == "sigma2[2]")
            .unwrap();
        assert_relative_eq!(sigma2.extrapolated, 5.0 / 36.0, epsilon = 1e-6);
    }

    #[test]
    fn path_on_nondegenerate_instance_persists_index() {
        let reform = builtin::index_persistence();
        let schedule = Schedule {
            t0: 1e-2,
            theta: 0.1,
            t_min: 1e-8,
        };
        let trace = scholtes_path(
            &reform,
            &point(&[0.05, 1.0], &[1.0, 0.0]),
            &schedule,
            &SolverConfig::default(),
            &tols(),
        )
        .unwrap();
        assert!(trace.aborted.is_none());
        let terminal = trace.terminal.as_ref().unwrap();
        assert!(terminal.report.nondegenerate);
        assert_eq!(terminal.report.t_index, Some(0));
        // the limit's x-projection satisfies the cardinality bound
        let ccop_feas =
            crate::model::feasibility_ccop(reform.problem(), &terminal.point.x, 1e-8).unwrap();
        assert!(ccop_feas.feasible);
        let audit = index_persistence_audit(&trace, &tols()).unwrap();
        assert!(audit.skipped.is_none());
        assert!(audit.pass, "{audit:?}");
        assert!(audit.relations_hold);
        let limits = multiplier_limits(&trace, 1e-4).unwrap();
        assert!(limits.pass, "max error {}", limits.max_error);
    }

    #[test]
    fn corrector_follows_nondegenerate_seed() {
        let reform = builtin::index_persistence();
        let seed = classify_r(&reform, &point(&[0.0, 1.0], &[1.0, 0.0]), &tols()).unwrap();
        assert!(seed.nondegenerate && seed.condition_passes("NDT6"));
        for &t in &[1e-2, 1e-4, 1e-6] {
            let out = predictor_corrector_f(&reform, &seed, t, &tols()).unwrap();
            assert!(out.newton_residual <= 1e-12);
            assert!(out.report.stationary, "t = {t}");
            assert!(out.report.nondegenerate);
            assert_eq!(out.report.quadratic_index, Some(0));
            // the branch is (t, 1, 1, 0)
            assert_relative_eq!(out.point.x[0], t, epsilon = 1e-10);
            let verdict = stationarity::verify_kkt(&out.multipliers, &out.report.pattern, 1e-8);
            assert!(verdict.ok, "{:?}", verdict.failures);
        }
    }

    #[test]
    fn corrector_agrees_with_direct_solve() {
        let reform = builtin::index_persistence();
        let seed = classify_r(&reform, &point(&[0.0, 1.0], &[1.0, 0.0]), &tols()).unwrap();
        let t = 1e-3;
        let out = predictor_corrector_f(&reform, &seed, t, &tols()).unwrap();
        let scholtes = reform.scholtes(t).unwrap();
        let nlp = ScholtesNlp::new(scholtes);
        let direct =
            nlpsolver::solve_local(&nlp, &seed.point.stacked(), &SolverConfig::default()).unwrap();
        assert!(direct.converged());
        assert!((direct.z - out.point.stacked()).norm() <= 1e-8);
    }

    #[test]
    fn corrector_refuses_vanishing_sigma1_seed() {
        let reform = builtin::vanishing_sigma1();
        let seed = classify_r(&reform, &point(&[0.0, 1.0], &[1.0, 0.0]), &tols()).unwrap();
        let err = predictor_corrector_f(&reform, &seed, 1e-3, &tols()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("NDT6"), "{msg}");
        assert!(msg.contains("sigma1"), "{msg}");
    }

    #[test]
    fn corrector_rejects_zero_t() {
        let reform = builtin::index_persistence();
        let seed = classify_r(&reform, &point(&[0.0, 1.0], &[1.0, 0.0]), &tols()).unwrap();
        assert!(predictor_corrector_f(&reform, &seed, 0.0, &tols()).is_err());
    }

    #[test]
    fn constant_multiplier_trace_extrapolates_to_constant() {
        // the vanishing-sigma1 instance has the exact same KKT point and
        // multipliers at every t, so every combination is constant in t
        let reform = builtin::vanishing_sigma1();
        let schedule = Schedule {
            t0: 1e-2,
            theta: 0.1,
            t_min: 1e-5,
        };
        let trace = scholtes_path(
            &reform,
            &point(&[0.0, 1.0], &[1.0, 0.0]),
            &schedule,
            &SolverConfig::default(),
            &tols(),
        )
        .unwrap();
        let limits = multiplier_limits(&trace, 1e-4).unwrap();
        assert!(limits.pass, "max error {}", limits.max_error);
        for e in &limits.entries {
            assert!(e.error <= 1e-9, "{}: {}", e.family, e.error);
        }
    }

    #[test]
    fn audit_on_vanishing_sigma1_trace() {
        let reform = builtin::vanishing_sigma1();
        let schedule = Schedule {
            t0: 1e-2,
            theta: 0.1,
            t_min: 1e-6,
        };
        let trace = scholtes_path(
            &reform,
            &point(&[0.0, 1.0], &[1.0, 0.0]),
            &schedule,
            &SolverConfig::default(),
            &tols(),
        )
        .unwrap();
        let audit = index_persistence_audit(&trace, &tols()).unwrap();
        assert!(audit.skipped.is_none());
        let bounds = audit.bounds.as_ref().unwrap();
        assert_eq!(bounds.m, 1);
        assert_eq!(bounds.t_index, 0);
        assert!(bounds.bounds_hold);
        assert!(bounds.lower_attained);
        assert!(!bounds.ndt6_holds, "equality not promised: NDT6 fails");
        assert!(audit.pass);
    }

    #[test]
    fn short_trace_is_rejected_for_limits() {
        let trace = HomotopyTrace {
            records: vec![],
            terminal: None,
            aborted: None,
        };
        assert!(multiplier_limits(&trace, 1e-4).is_err());
    }

    /// n = 5, s = 3 instance whose seed exercises every corrector branch at
    /// once: both sigma1 signs on a01, a10 with negative x and negative
    /// sigma2, both rho1 signs on the two biactive indices, and an active
    /// upper bound. Seed multipliers (c defaults to 1.1..1.5, eps = 0.25):
    /// mu3 = 1.5, mu2[4] = 0.1, sigma2[1] = -0.4, rho = (-2, -0.3) and
    /// (2, -0.2), sigma1 = (2, -2); TI = 0 + |a00| = 2.
    fn full_branch_instance() -> (crate::model::ReformR, PointXY) {
        let file = crate::model::ProblemFile {
            n: 5,
            s: 3,
            objective: "(x1+1)^2+(x2-1)^2+(x3+1)^2+(x4+1)^2+(x5-1)^2".into(),
            equalities: vec![],
            inequalities: vec![],
            c: None,
            epsilon: None,
        };
        let reform = file.build().unwrap();
        let seed_point = point(&[-1.0, 0.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 1.25, 0.75]);
        (reform, seed_point)
    }

    #[test]
    fn corrector_full_branch_coverage() {
        let tols = tols();
        let (reform, seed_point) = full_branch_instance();
        let seed = classify_r(&reform, &seed_point, &tols).unwrap();
        assert!(
            seed.stationary && seed.nondegenerate,
            "{:?}",
            seed.conditions
        );
        assert!(seed.condition_passes("NDT6"));
        assert_eq!(seed.t_index, Some(2), "QI = 0 plus two biactive indices");
        let m = seed.multipliers_r.as_ref().unwrap();
        assert_relative_eq!(m.mu3, 1.5, epsilon = 1e-10);
        assert_relative_eq!(m.mu2_for(3).unwrap(), 0.1, epsilon = 1e-10);
        assert_relative_eq!(m.sigma2_for(0).unwrap(), -0.4, epsilon = 1e-10);
        assert_relative_eq!(m.sigma1_for(3).unwrap(), 2.0, epsilon = 1e-10);
        assert_relative_eq!(m.sigma1_for(4).unwrap(), -2.0, epsilon = 1e-10);
        assert_relative_eq!(m.rho1_for(1).unwrap(), -2.0, epsilon = 1e-10);
        assert_relative_eq!(m.rho2_for(1).unwrap(), -0.3, epsilon = 1e-10);
        assert_relative_eq!(m.rho1_for(2).unwrap(), 2.0, epsilon = 1e-10);
        assert_relative_eq!(m.rho2_for(2).unwrap(), -0.2, epsilon = 1e-10);

        for &t in &[1e-3, 1e-5] {
            let out = predictor_corrector_f(&reform, &seed, t, &tols).unwrap();
            assert!(out.newton_residual <= 1e-12);
            assert!(out.report.stationary, "t = {t}");
            assert!(
                out.report.nondegenerate,
                "t = {t}: {:?}",
                out.report.conditions
            );
            // the quadratic index of the saddle persists: QI = TI = 2
            assert_eq!(out.report.quadratic_index, Some(2), "t = {t}");

            let p = &out.point;
            // band sides as the sign splits dictate
            assert_relative_eq!(-p.x[0] * p.y[0], t, epsilon = 1e-12); // a10^<, x < 0
            assert_relative_eq!(p.x[1] * p.y[1], t, epsilon = 1e-12); // a00^<
            assert_relative_eq!(-p.x[2] * p.y[2], t, epsilon = 1e-12); // a00^>
            assert_relative_eq!(-p.x[3] * p.y[3], t, epsilon = 1e-12); // a01^>
            assert_relative_eq!(p.x[4] * p.y[4], t, epsilon = 1e-12); // a01^<
            assert_relative_eq!(p.y[3], 1.25, epsilon = 1e-12); // E stays pinned
            assert_relative_eq!(p.y.sum(), 2.0, epsilon = 1e-12);
            // biactive coordinates follow the sqrt(t) closed forms:
            // x/y = rho2/rho1 entrywise
            let ms = &out.multipliers;
            assert!(p.x[1] > 0.0 && p.y[1] > 0.0 && p.x[2] < 0.0 && p.y[2] > 0.0);
            let verdict = stationarity::verify_kkt(ms, &out.report.pattern, 1e-8);
            assert!(verdict.ok, "{:?}", verdict.failures);
            assert!(ms.eta_ge_for(0).is_some(), "a10^< with x < 0 lands in H>=");
            assert!(ms.eta_le_for(1).is_some(), "a00^< lands in H<=");
            assert!(ms.eta_ge_for(2).is_some(), "a00^> lands in H>=");
            assert!(ms.eta_ge_for(3).is_some(), "a01^> lands in H>=");
            assert!(ms.eta_le_for(4).is_some(), "a01^< lands in H<=");
            assert!(ms.nu.is_empty());
        }
    }

    #[test]
    fn corrector_trace_audit_with_biactive_indices() {
        // saddle branches cannot be tracked by a descent solver, but the
        // corrector outputs form a legitimate trace of verified KKT points
        let tols = tols();
        let (reform, seed_point) = full_branch_instance();
        let seed = classify_r(&reform, &seed_point, &tols).unwrap();
        let mut records = Vec::new();
        for &t in &[1e-4, 1e-5, 1e-6] {
            let out = predictor_corrector_f(&reform, &seed, t, &tols).unwrap();
            records.push(TraceRecord {
                t,
                point: out.point.clone(),
                report: out.report,
            });
        }
        let trace = HomotopyTrace {
            records,
            terminal: Some(TraceTerminal {
                point: seed_point,
                report: seed,
            }),
            aborted: None,
        };
        let audit = index_persistence_audit(&trace, &tols).unwrap();
        assert!(audit.skipped.is_none());
        let bounds = audit.bounds.as_ref().unwrap();
        assert_eq!(bounds.m, 2);
        assert_eq!(bounds.t_index, 2);
        assert!(bounds.ndt6_holds);
        assert_eq!(bounds.equality_holds, Some(true));
        assert!(audit.relations_hold, "{:?}", audit.relations);
        assert!(audit.pass);

        // rho combinations expand in sqrt(t); the sqrt-abscissa
        // extrapolation must still hit the limits to 1e-4
        let limits = multiplier_limits(&trace, 1e-4).unwrap();
        assert!(limits.pass, "max error {}", limits.max_error);
        for family in ["rho1[2]", "rho2[2]", "rho1[3]", "rho2[3]", "sigma2[1]"] {
            let e = limits.entries.iter().find(|e| e.family == family).unwrap();
            assert!(e.error <= 1e-4, "{family}: error {}", e.error);
        }
    }

    #[test]
    fn transcendental_objective_path_and_corrector() {
        // non-polynomial objective: the Lagrangian Hessian varies along the
        // path, exercising the AD second-order sweep inside the solver, the
        // corrector and the classification
        let tols = tols();
        let file = crate::model::ProblemFile {
            n: 2,
            s: 1,
            objective: "(x1+1)^2 + exp(x2) - 2x2".into(),
            equalities: vec![],
            inequalities: vec![],
            c: Some(vec![1.0, 2.0]),
            epsilon: Some(0.5),
        };
        let reform = file.build().unwrap();
        let x2_star = 2.0_f64.ln();
        let seed_point = point(&[0.0, x2_star], &[1.0, 0.0]);
        let seed = classify_r(&reform, &seed_point, &tols).unwrap();
        assert!(
            seed.stationary && seed.nondegenerate,
            "{:?}",
            seed.conditions
        );
        assert!(seed.condition_passes("NDT6"));
        assert_eq!(seed.t_index, Some(0));
        let m = seed.multipliers_r.as_ref().unwrap();
        assert_relative_eq!(m.sigma1_for(0).unwrap(), 2.0, epsilon = 1e-10);
        assert_relative_eq!(m.sigma2_for(1).unwrap(), 1.0, epsilon = 1e-10);

        let t = 1e-4;
        let out = predictor_corrector_f(&reform, &seed, t, &tols).unwrap();
        assert!(out.report.stationary && out.report.nondegenerate);
        assert_eq!(out.report.quadratic_index, Some(0));
        // sigma1 > 0 puts the zero-x index on the lower band side
        assert_relative_eq!(out.point.x[0], -t, epsilon = 1e-10);

        let schedule = Schedule {
            t0: 1e-2,
            theta: 0.1,
            t_min: 1e-7,
        };
        let trace = scholtes_path(
            &reform,
            &seed_point,
            &schedule,
            &SolverConfig::default(),
            &tols,
        )
        .unwrap();
        assert!(trace.aborted.is_none(), "{:?}", trace.aborted);
        let terminal = trace.terminal.as_ref().unwrap();
        assert!(terminal.report.nondegenerate);
        assert_relative_eq!(terminal.point.x[1], x2_star, epsilon = 1e-9);
        let audit = index_persistence_audit(&trace, &tols).unwrap();
        assert!(audit.pass, "{audit:?}");
    }

    #[test]
    fn equality_constrained_path_and_corrector() {
        // h couples the support coordinate to the pinned zeros; the lambda
        // multiplier flows through estimation, the corrector, and the limits
        let tols = tols();
        let file = crate::model::ProblemFile {
            n: 3,
            s: 1,
            objective: "(x3-1)^2".into(),
            equalities: vec!["x1+x2+x3-2".into()],
            inequalities: vec![],
            c: None,
            epsilon: None,
        };
        let reform = file.build().unwrap();
        let seed_point = point(&[0.0, 0.0, 2.0], &[1.25, 0.75, 0.0]);
        let seed = classify_r(&reform, &seed_point, &tols).unwrap();
        assert!(seed.stationary && seed.nondegenerate);
        assert!(seed.condition_passes("NDT6"));
        let m = seed.multipliers_r.as_ref().unwrap();
        assert_relative_eq!(m.lambda[0], 2.0, epsilon = 1e-10);
        assert_relative_eq!(m.mu3, 4.0 / 3.0, epsilon = 1e-10);
        assert_relative_eq!(m.sigma1_for(0).unwrap(), -2.0, epsilon = 1e-10);
        assert_relative_eq!(m.sigma1_for(1).unwrap(), -2.0, epsilon = 1e-10);
        assert_relative_eq!(m.sigma2_for(2).unwrap(), 1.0 / 6.0, epsilon = 1e-10);
        assert_eq!(seed.t_index, Some(0));

        // corrector: sigma2 > 0 puts the support index in N (y3 = 0)
        let t = 1e-3;
        let out = predictor_corrector_f(&reform, &seed, t, &tols).unwrap();
        assert!(out.report.stationary && out.report.nondegenerate);
        assert_eq!(out.report.quadratic_index, Some(0));
        assert_relative_eq!(out.point.y[2], 0.0, epsilon = 1e-14);
        assert!(out.multipliers.nu_for(2).is_some());
        // h holds exactly at the corrector output
        assert_relative_eq!(out.point.x.sum(), 2.0, epsilon = 1e-12);

        // a minimizer branch: the direct solve agrees with the corrector
        let scholtes = reform.scholtes(t).unwrap();
        let nlp = ScholtesNlp::new(scholtes);
        let direct =
            nlpsolver::solve_local(&nlp, &seed_point.stacked(), &SolverConfig::default()).unwrap();
        assert!(direct.converged());
        assert!((direct.z - out.point.stacked()).norm() <= 1e-8);

        // the full path: the limit must land back on the equality manifold
        let schedule = Schedule {
            t0: 1e-2,
            theta: 0.1,
            t_min: 1e-6,
        };
        let trace = scholtes_path(
            &reform,
            &seed_point,
            &schedule,
            &SolverConfig::default(),
            &tols,
        )
        .unwrap();
        assert!(trace.aborted.is_none(), "{:?}", trace.aborted);
        let terminal = trace.terminal.as_ref().unwrap();
        assert!(terminal.report.stationary && terminal.report.nondegenerate);
        assert_eq!(terminal.report.t_index, Some(0));
        assert!((terminal.point.stacked() - seed_point.stacked()).norm() <= 1e-9);
        let audit = index_persistence_audit(&trace, &tols).unwrap();
        assert!(audit.pass, "{audit:?}");
        let limits = multiplier_limits(&trace, 1e-4).unwrap();
        assert!(limits.pass, "max error {}", limits.max_error);
        let lam = limits
            .entries
            .iter()
            .find(|e| e.family == "lambda[h1]")
            .unwrap();
        assert_relative_eq!(lam.extrapolated, 2.0, epsilon = 1e-6);
    }
}
