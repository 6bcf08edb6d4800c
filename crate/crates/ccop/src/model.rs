//! Problem model: the cardinality-constrained program, its regularized
//! continuous reformulation and the Scholtes-type regularization.
//!
//! ```text
//!   CCOP:    min f(x)          s.t. h(x) = 0, g(x) >= 0, ||x||_0 <= s
//!   R(c,e):  min f(x) + c'y    s.t. h = 0, g >= 0, sum(y) >= n－s,
//!                                   x_i y_i = 0, 0 <= y_i <= 1+e
//!   S(t):    min f(x) + c'y    s.t. h = 0, g >= 0, sum(y) >= n－s,
//!                                   -t <= x_i y_i <= t, 0 <= y_i <= 1+e
//! ```
//!
//! All model values are immutable after construction and freely shareable.

use std::fmt;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, Expr};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("expression '{text}': {source}")]
    Expr {
        text: String,
        source: expr::ParseError,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("problem file: {0}")]
    File(#[from] toml::de::Error),
}

/// The cardinality-constrained optimization problem data.
#[derive(Debug, Clone)]
pub struct ProblemCcop {
    n: usize,
    s: usize,
    objective: Expr,
    equalities: Vec<Expr>,
    inequalities: Vec<Expr>,
}

impl ProblemCcop {
    pub fn new(
        n: usize,
        s: usize,
        objective: Expr,
        equalities: Vec<Expr>,
        inequalities: Vec<Expr>,
    ) -> Result<Self, ModelError> {
        if n == 0 {
            return Err(ModelError::Invalid("n must be positive".into()));
        }
        if s >= n {
            return Err(ModelError::Invalid(format!(
                "s must lie in 0..=n-1 (got s = {s}, n = {n})"
            )));
        }
        for e in std::iter::once(&objective)
            .chain(equalities.iter())
            .chain(inequalities.iter())
        {
            if e.max_var() > n {
                return Err(ModelError::Invalid(format!(
                    "expression '{}' references x{} but n = {n}",
                    e.text(),
                    e.max_var()
                )));
            }
        }
        Ok(ProblemCcop {
            n,
            s,
            objective,
            equalities,
            inequalities,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn objective(&self) -> &Expr {
        &self.objective
    }

    pub fn equalities(&self) -> &[Expr] {
        &self.equalities
    }

    pub fn inequalities(&self) -> &[Expr] {
        &self.inequalities
    }

    /// All expressions of the problem (objective, then h, then g).
    pub fn expressions(&self) -> impl Iterator<Item = &Expr> {
        std::iter::once(&self.objective)
            .chain(self.equalities.iter())
            .chain(self.inequalities.iter())
    }
}

/// Regularization data for R(c,epsilon): positive pairwise-distinct `c`
/// and `0 < epsilon <= 1/(n-s)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularizationParams {
    pub c: DVector<f64>,
    pub epsilon: f64,
}

/// Deterministic default parameters: `c_i = 1 + i/(2n)` (strictly increasing,
/// hence pairwise distinct) and `epsilon = 1/(2(n-s))`. Deterministic so the
/// regression suite is bit-stable across runs.
pub fn default_params(problem: &ProblemCcop) -> RegularizationParams {
    let n = problem.n();
    let c = DVector::from_fn(n, |i, _| 1.0 + (i + 1) as f64 / (2.0 * n as f64));
    RegularizationParams {
        c,
        epsilon: 1.0 / (2.0 * (n - problem.s()) as f64),
    }
}

/// The regularized continuous reformulation R(c,epsilon).
#[derive(Debug, Clone)]
pub struct ReformR {
    problem: ProblemCcop,
    params: RegularizationParams,
}

/// Validate parameters and bind them to the problem.
pub fn build_reform(
    problem: ProblemCcop,
    params: RegularizationParams,
) -> Result<ReformR, ModelError> {
    let n = problem.n();
    if params.c.len() != n {
        return Err(ModelError::Invalid(format!(
            "c has {} entries, expected {n}",
            params.c.len()
        )));
    }
    for (i, &ci) in params.c.iter().enumerate() {
        if ci.is_nan() || ci <= 0.0 {
            return Err(ModelError::Invalid(format!(
                "c must be positive (c{} = {ci})",
                i + 1
            )));
        }
        for (j, &cj) in params.c.iter().enumerate().skip(i + 1) {
            if ci == cj {
                return Err(ModelError::Invalid(format!(
                    "c must be pairwise different (c{} = c{} = {ci})",
                    i + 1,
                    j + 1
                )));
            }
        }
    }
    let bound = 1.0 / (n - problem.s()) as f64;
    if !(params.epsilon > 0.0 && params.epsilon <= bound) {
        return Err(ModelError::Invalid(format!(
            "epsilon must lie in (0, 1/(n-s)] = (0, {bound}] (got {})",
            params.epsilon
        )));
    }
    Ok(ReformR { problem, params })
}

impl ReformR {
    pub fn problem(&self) -> &ProblemCcop {
        &self.problem
    }

    pub fn params(&self) -> &RegularizationParams {
        &self.params
    }

    pub fn n(&self) -> usize {
        self.problem.n()
    }

    pub fn s(&self) -> usize {
        self.problem.s()
    }

    pub fn epsilon(&self) -> f64 {
        self.params.epsilon
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.params.c
    }

    /// Right-hand side of the summation constraint, `n - s`.
    pub fn sum_rhs(&self) -> f64 {
        (self.n() - self.s()) as f64
    }

    /// The Scholtes-type regularization S(t) of this reformulation.
    pub fn scholtes(&self, t: f64) -> Result<ScholtesS<'_>, ModelError> {
        if t.is_nan() || t <= 0.0 {
            return Err(ModelError::Invalid(format!("t must be positive (got {t})")));
        }
        Ok(ScholtesS { reform: self, t })
    }
}

/// The Scholtes-type regularization S(t), borrowing its reformulation.
#[derive(Debug, Clone, Copy)]
pub struct ScholtesS<'a> {
    reform: &'a ReformR,
    t: f64,
}

impl<'a> ScholtesS<'a> {
    pub fn reform(&self) -> &'a ReformR {
        self.reform
    }

    pub fn t(&self) -> f64 {
        self.t
    }
}

/// A point (x, y) in R^{2n}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointXY {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

impl PointXY {
    pub fn new(x: DVector<f64>, y: DVector<f64>) -> Self {
        assert_eq!(x.len(), y.len());
        PointXY { x, y }
    }

    /// Split a stacked vector (x then y) of even length.
    pub fn from_stacked(z: &DVector<f64>) -> Self {
        assert!(z.len().is_multiple_of(2));
        let n = z.len() / 2;
        PointXY {
            x: z.rows(0, n).into_owned(),
            y: z.rows(n, n).into_owned(),
        }
    }

    /// Split a flat slice (x then y) of even length.
    pub fn from_flat(values: &[f64]) -> Self {
        Self::from_stacked(&DVector::from_row_slice(values))
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    /// Stack into a single vector (x then y).
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.n();
        let mut z = DVector::zeros(2 * n);
        z.rows_mut(0, n).copy_from(&self.x);
        z.rows_mut(n, n).copy_from(&self.y);
        z
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| v.is_finite())
    }
}

impl fmt::Display for PointXY {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x = [")?;
        for (i, v) in self.x.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        write!(f, "], y = [")?;
        for (i, v) in self.y.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        write!(f, "]")
    }
}

// ---------------------------------------------------------------------------
// Feasibility
// ---------------------------------------------------------------------------

/// Residuals of one constraint group or individual constraint.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualEntry {
    pub constraint: String,
    pub violation: f64,
}

/// Feasibility verdict: `feasible` iff the largest violation is within `tol`.
#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityReport {
    pub entries: Vec<ResidualEntry>,
    pub max_violation: f64,
    pub tol: f64,
    pub feasible: bool,
}

fn finish_report(entries: Vec<ResidualEntry>, tol: f64) -> FeasibilityReport {
    let max_violation = entries.iter().map(|e| e.violation).fold(0.0, f64::max);
    FeasibilityReport {
        feasible: max_violation <= tol,
        max_violation,
        tol,
        entries,
    }
}

fn shared_entries(
    reform: &ReformR,
    point: &PointXY,
    entries: &mut Vec<ResidualEntry>,
) -> Result<(), expr::EvalError> {
    let problem = reform.problem();
    for (p, hexpr) in problem.equalities().iter().enumerate() {
        entries.push(ResidualEntry {
            constraint: format!("h{}", p + 1),
            violation: hexpr.eval(&point.x)?.abs(),
        });
    }
    for (q, gexpr) in problem.inequalities().iter().enumerate() {
        entries.push(ResidualEntry {
            constraint: format!("g{}", q + 1),
            violation: (-gexpr.eval(&point.x)?).max(0.0),
        });
    }
    let sum: f64 = point.y.sum();
    entries.push(ResidualEntry {
        constraint: "sum(y) >= n-s".into(),
        violation: (reform.sum_rhs() - sum).max(0.0),
    });
    let upper = 1.0 + reform.epsilon();
    for i in 0..reform.n() {
        entries.push(ResidualEntry {
            constraint: format!("y{} >= 0", i + 1),
            violation: (-point.y[i]).max(0.0),
        });
        entries.push(ResidualEntry {
            constraint: format!("y{} <= 1+eps", i + 1),
            violation: (point.y[i] - upper).max(0.0),
        });
    }
    Ok(())
}

/// Residuals of all constraints of R at `point`.
pub fn feasibility_r(
    reform: &ReformR,
    point: &PointXY,
    tol: f64,
) -> Result<FeasibilityReport, expr::EvalError> {
    assert!(tol > 0.0);
    let mut entries = Vec::new();
    shared_entries(reform, point, &mut entries)?;
    for i in 0..reform.n() {
        entries.push(ResidualEntry {
            constraint: format!("x{0}*y{0} = 0", i + 1),
            violation: (point.x[i] * point.y[i]).abs(),
        });
    }
    Ok(finish_report(entries, tol))
}

/// Residuals of all constraints of S(t) at `point`; the orthogonality
/// constraint is replaced by the band `-t <= x_i y_i <= t`.
pub fn feasibility_s(
    scholtes: &ScholtesS<'_>,
    point: &PointXY,
    tol: f64,
) -> Result<FeasibilityReport, expr::EvalError> {
    assert!(tol > 0.0);
    let mut entries = Vec::new();
    shared_entries(scholtes.reform(), point, &mut entries)?;
    for i in 0..scholtes.reform().n() {
        entries.push(ResidualEntry {
            constraint: format!("|x{0}*y{0}| <= t", i + 1),
            violation: ((point.x[i] * point.y[i]).abs() - scholtes.t()).max(0.0),
        });
    }
    Ok(finish_report(entries, tol))
}

/// CCOP feasibility of a plain `x`: entries with `|x_i| > tol` count as
/// nonzero for the cardinality bound.
pub fn feasibility_ccop(
    problem: &ProblemCcop,
    x: &DVector<f64>,
    tol: f64,
) -> Result<FeasibilityReport, expr::EvalError> {
    assert!(tol > 0.0);
    let mut entries = Vec::new();
    for (p, hexpr) in problem.equalities().iter().enumerate() {
        entries.push(ResidualEntry {
            constraint: format!("h{}", p + 1),
            violation: hexpr.eval(x)?.abs(),
        });
    }
    for (q, gexpr) in problem.inequalities().iter().enumerate() {
        entries.push(ResidualEntry {
            constraint: format!("g{}", q + 1),
            violation: (-gexpr.eval(x)?).max(0.0),
        });
    }
    let nonzero = x.iter().filter(|v| v.abs() > tol).count();
    entries.push(ResidualEntry {
        constraint: format!("||x||_0 <= {}", problem.s()),
        violation: nonzero.saturating_sub(problem.s()) as f64,
    });
    Ok(finish_report(entries, tol))
}

// ---------------------------------------------------------------------------
// Problem files
// ---------------------------------------------------------------------------

/// On-disk problem description (UTF-8 key-value format, parsed as TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFile {
    pub n: usize,
    pub s: usize,
    pub objective: String,
    #[serde(default)]
    pub equalities: Vec<String>,
    #[serde(default)]
    pub inequalities: Vec<String>,
    #[serde(default)]
    pub c: Option<Vec<f64>>,
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl ProblemFile {
    pub fn parse_str(text: &str) -> Result<Self, ModelError> {
        Ok(toml::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self, ModelError> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Build the validated reformulation, filling in defaults where the file
    /// leaves `c` or `epsilon` out.
    pub fn build(&self) -> Result<ReformR, ModelError> {
        let parse1 = |text: &str| {
            expr::parse(text, self.n).map_err(|source| ModelError::Expr {
                text: text.to_string(),
                source,
            })
        };
        let objective = parse1(&self.objective)?;
        let equalities = self
            .equalities
            .iter()
            .map(|t| parse1(t))
            .collect::<Result<Vec<_>, _>>()?;
        let inequalities = self
            .inequalities
            .iter()
            .map(|t| parse1(t))
            .collect::<Result<Vec<_>, _>>()?;
        let problem = ProblemCcop::new(self.n, self.s, objective, equalities, inequalities)?;
        let defaults = default_params(&problem);
        let params = RegularizationParams {
            c: self
                .c
                .as_ref()
                .map(|c| DVector::from_row_slice(c))
                .unwrap_or(defaults.c),
            epsilon: self.epsilon.unwrap_or(defaults.epsilon),
        };
        build_reform(problem, params)
    }
}

/// Load a problem file and build its reformulation.
pub fn load_problem(path: &Path) -> Result<ReformR, ModelError> {
    ProblemFile::read(path)?.build()
}

// ---------------------------------------------------------------------------
// Built-in instances
// ---------------------------------------------------------------------------

/// The built-in worked instances used by the regression suite and shipped as
/// problem files.
pub mod builtin {
    use super::*;

    fn build(
        n: usize,
        s: usize,
        objective: &str,
        inequalities: &[&str],
        c: &[f64],
        epsilon: f64,
    ) -> ReformR {
        let obj = expr::parse(objective, n).unwrap();
        let gs = inequalities
            .iter()
            .map(|t| expr::parse(t, n).unwrap())
            .collect();
        let problem = ProblemCcop::new(n, s, obj, Vec::new(), gs).unwrap();
        build_reform(
            problem,
            RegularizationParams {
                c: DVector::from_row_slice(c),
                epsilon,
            },
        )
        .unwrap()
    }

    /// n = 2, s = 1 instance whose Scholtes path ends at a T-stationary
    /// point with a vanishing multiplier on the active inequality (strict
    /// complementarity fails at the limit).
    pub fn strict_complementarity_failure() -> ReformR {
        build(
            2,
            1,
            "(x1-1)^2+(x2-1)^2",
            &["1+x1-x2"],
            &[1.0, 1.0 + 5.0 / 36.0],
            0.5,
        )
    }

    /// n = 2, s = 1 instance where the S(t) points are saddle points (QI = 1)
    /// but the limit is a nondegenerate minimizer (TI = 0): the sigma1
    /// multiplier on the zero-x index vanishes, so the index drops.
    pub fn vanishing_sigma1() -> ReformR {
        build(
            2,
            1,
            "(1+x1)^2-0.5*(3-2x2)^2",
            &["x1+x2-1"],
            &[1.0, 2.0],
            0.5,
        )
    }

    /// n = 2, s = 1 unconstrained-in-g instance with a nondegenerate
    /// T-stationary point (0,1,1,0) where sigma1 = -2 is nonvanishing; the
    /// predictor-corrector applies and the index persists.
    pub fn index_persistence() -> ReformR {
        build(2, 1, "(x1-1)^2+(x2-1)^2", &[], &[1.0, 2.0], 0.5)
    }

    /// n = 4, s = 2 separable least-squares instance for atlas enumeration.
    pub fn separable_n4() -> ReformR {
        let n = 4;
        let obj = expr::parse("(x1-1)^2+(x2-2)^2+(x3-3)^2+(x4-4)^2", n).unwrap();
        let problem = ProblemCcop::new(n, 2, obj, Vec::new(), Vec::new()).unwrap();
        let params = default_params(&problem);
        build_reform(problem, params).unwrap()
    }
}
