//! Index-set detection at feasible points of R and S, plus the structural
//! checks on auxiliary y-variables and on active-set relations along a
//! Scholtes path.
//!
//! R-side sets at (x,y):
//!
//! ```text
//!   a01 = { i | x_i =  0, y_i != 0 }      Q0 = { q | g_q(x) = 0 }
//!   a10 = { i | x_i != 0, y_i  = 0 }      E  = { i | y_i = 1+eps }
//!   a00 = { i | x_i =  0, y_i  = 0 }
//! ```
//!
//! S-side sets: `N = { i | y_i = 0 }`, `H>= = { i | x_i y_i = -t }`,
//! `H<= = { i | x_i y_i = t }`, `O` the complement of `E ∪ N ∪ H`.
//!
//! All detection is pure and tolerance based; the underlying theory works
//! with exact zeros, so the tolerance is a deliberate artifact choice
//! (activity 1e-8 by default, see [`crate::Tolerances`]).

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::expr::EvalError;
use crate::model::{feasibility_r, feasibility_s, PointXY, ReformR, ScholtesS};

#[derive(Debug, Error)]
pub enum ActiveSetError {
    #[error("point is infeasible (max violation {max_violation:.3e} > tol {tol:.3e})")]
    Infeasible { max_violation: f64, tol: f64 },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("pattern is {found:?}-side, expected {expected:?}-side")]
    WrongSide { expected: Side, found: Side },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    R,
    S,
}

/// All index sets at a point. Indices are 0-based internally and sorted;
/// JSON serialization is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivePattern {
    pub side: Side,
    pub a01: Vec<usize>,
    pub a10: Vec<usize>,
    pub a00: Vec<usize>,
    pub q0: Vec<usize>,
    /// Indices with y at the relaxed upper bound 1+eps.
    pub e_upper: Vec<usize>,
    /// S-side: indices with y_i = 0.
    pub n_zero: Vec<usize>,
    /// S-side: band active at -t.
    pub h_ge: Vec<usize>,
    /// S-side: band active at +t.
    pub h_le: Vec<usize>,
    /// S-side: indices in none of E, N, H.
    pub o_free: Vec<usize>,
    pub sum_active: bool,
    /// Indices whose activity margin is within 10x of the tolerance:
    /// classification is deterministic, but these are worth a second look.
    pub borderline: Vec<usize>,
}

impl ActivePattern {
    pub fn h(&self) -> Vec<usize> {
        let mut h: Vec<usize> = self.h_ge.iter().chain(self.h_le.iter()).copied().collect();
        h.sort_unstable();
        h
    }

    /// Union of E, H>= and H<= (S-side).
    pub fn e_union_h(&self) -> Vec<usize> {
        let mut u: Vec<usize> = self
            .e_upper
            .iter()
            .chain(self.h_ge.iter())
            .chain(self.h_le.iter())
            .copied()
            .collect();
        u.sort_unstable();
        u.dedup();
        u
    }
}

fn one_based(v: &[usize]) -> Vec<usize> {
    v.iter().map(|i| i + 1).collect()
}

impl Serialize for ActivePattern {
    fn serialize<Ser: Serializer>(&self, serializer: Ser) -> Result<Ser::Ok, Ser::Error> {
        let mut st = serializer.serialize_struct("ActivePattern", 12)?;
        st.serialize_field("side", &self.side)?;
        st.serialize_field("a01", &one_based(&self.a01))?;
        st.serialize_field("a10", &one_based(&self.a10))?;
        st.serialize_field("a00", &one_based(&self.a00))?;
        st.serialize_field("q0", &one_based(&self.q0))?;
        st.serialize_field("e", &one_based(&self.e_upper))?;
        st.serialize_field("n", &one_based(&self.n_zero))?;
        st.serialize_field("h_ge", &one_based(&self.h_ge))?;
        st.serialize_field("h_le", &one_based(&self.h_le))?;
        st.serialize_field("o", &one_based(&self.o_free))?;
        st.serialize_field("sum_active", &self.sum_active)?;
        st.serialize_field("borderline", &one_based(&self.borderline))?;
        st.end()
    }
}

fn detect_q0(
    reform: &ReformR,
    point: &PointXY,
    tol: f64,
    borderline: &mut Vec<usize>,
) -> Result<Vec<usize>, EvalError> {
    let mut q0 = Vec::new();
    for (q, gexpr) in reform.problem().inequalities().iter().enumerate() {
        let v = gexpr.eval(&point.x)?;
        if v.abs() <= tol {
            q0.push(q);
        } else if v.abs() <= 10.0 * tol {
            borderline.push(q);
        }
    }
    Ok(q0)
}

fn margin_check(m: f64, tol: f64, idx: usize, borderline: &mut Vec<usize>) -> bool {
    if m <= tol {
        true
    } else {
        if m <= 10.0 * tol {
            borderline.push(idx);
        }
        false
    }
}

/// Detect the R-side pattern. The point must be feasible within `tol`.
pub fn detect_r(
    reform: &ReformR,
    point: &PointXY,
    tol: f64,
) -> Result<ActivePattern, ActiveSetError> {
    let feas = feasibility_r(reform, point, tol)?;
    if !feas.feasible {
        return Err(ActiveSetError::Infeasible {
            max_violation: feas.max_violation,
            tol,
        });
    }
    let n = reform.n();
    let upper = 1.0 + reform.epsilon();
    let mut pat = ActivePattern {
        side: Side::R,
        a01: vec![],
        a10: vec![],
        a00: vec![],
        q0: vec![],
        e_upper: vec![],
        n_zero: vec![],
        h_ge: vec![],
        h_le: vec![],
        o_free: vec![],
        sum_active: false,
        borderline: vec![],
    };
    for i in 0..n {
        let x_zero = margin_check(point.x[i].abs(), tol, i, &mut pat.borderline);
        let y_zero = margin_check(point.y[i].abs(), tol, i, &mut pat.borderline);
        match (x_zero, y_zero) {
            (true, true) => pat.a00.push(i),
            (true, false) => pat.a01.push(i),
            (false, true) => pat.a10.push(i),
            (false, false) => {}
        }
        if margin_check((point.y[i] - upper).abs(), tol, i, &mut pat.borderline) {
            pat.e_upper.push(i);
        }
    }
    pat.q0 = detect_q0(reform, point, tol, &mut pat.borderline)?;
    pat.sum_active = (point.y.sum() - reform.sum_rhs()).abs() <= tol;
    pat.borderline.sort_unstable();
    pat.borderline.dedup();
    Ok(pat)
}

/// Detect the S-side pattern. The point must be feasible for S(t) within
/// `tol`.
pub fn detect_s(
    scholtes: &ScholtesS<'_>,
    point: &PointXY,
    tol: f64,
) -> Result<ActivePattern, ActiveSetError> {
    let feas = feasibility_s(scholtes, point, tol)?;
    if !feas.feasible {
        return Err(ActiveSetError::Infeasible {
            max_violation: feas.max_violation,
            tol,
        });
    }
    let reform = scholtes.reform();
    let n = reform.n();
    let t = scholtes.t();
    let upper = 1.0 + reform.epsilon();
    let mut pat = ActivePattern {
        side: Side::S,
        a01: vec![],
        a10: vec![],
        a00: vec![],
        q0: vec![],
        e_upper: vec![],
        n_zero: vec![],
        h_ge: vec![],
        h_le: vec![],
        o_free: vec![],
        sum_active: false,
        borderline: vec![],
    };
    for i in 0..n {
        let prod = point.x[i] * point.y[i];
        let in_n = margin_check(point.y[i].abs(), tol, i, &mut pat.borderline);
        if in_n {
            pat.n_zero.push(i);
        }
        if margin_check((point.y[i] - upper).abs(), tol, i, &mut pat.borderline) {
            pat.e_upper.push(i);
        }
        // y_i = 0 forces x_i y_i = 0 != +-t, so an N index is never band
        // active; without this priority, t at the activity tolerance would
        // put the same index in both sets
        if in_n {
            continue;
        }
        let d_ge = (prod + t).abs();
        let d_le = (prod - t).abs();
        // for t above the tolerance at most one side can trigger; if both do
        // (only possible when t <= tol) take the nearer one
        let ge = margin_check(d_ge, tol, i, &mut pat.borderline);
        let le = margin_check(d_le, tol, i, &mut pat.borderline);
        match (ge, le) {
            (true, true) => {
                if d_ge <= d_le {
                    pat.h_ge.push(i)
                } else {
                    pat.h_le.push(i)
                }
            }
            (true, false) => pat.h_ge.push(i),
            (false, true) => pat.h_le.push(i),
            (false, false) => {}
        }
    }
    for i in 0..n {
        let in_any = pat.e_upper.contains(&i)
            || pat.n_zero.contains(&i)
            || pat.h_ge.contains(&i)
            || pat.h_le.contains(&i);
        if !in_any {
            pat.o_free.push(i);
        }
    }
    pat.q0 = detect_q0(reform, point, tol, &mut pat.borderline)?;
    pat.sum_active = (point.y.sum() - reform.sum_rhs()).abs() <= tol;
    pat.borderline.sort_unstable();
    pat.borderline.dedup();
    Ok(pat)
}

// ---------------------------------------------------------------------------
// Structural checks
// ---------------------------------------------------------------------------

/// Outcome of one structural lemma check.
#[derive(Debug, Clone, Serialize)]
pub struct StructureVerdict {
    pub pass: bool,
    /// Name of the first violated clause, with detail.
    pub violated: Option<String>,
}

impl StructureVerdict {
    fn pass() -> Self {
        StructureVerdict {
            pass: true,
            violated: None,
        }
    }

    fn fail(clause: &str, detail: String) -> Self {
        StructureVerdict {
            pass: false,
            violated: Some(format!("clause ({clause}): {detail}")),
        }
    }
}

/// Check the y-structure that T-stationarity of R forces: (a) the summation
/// constraint is active, (b) |a01| = n-s, and (c) n-s-1 components of y sit
/// at 1+eps, one at 1-(n-s-1)eps, and s at zero.
pub fn check_y_structure_r(
    pattern: &ActivePattern,
    y: &nalgebra::DVector<f64>,
    n: usize,
    s: usize,
    epsilon: f64,
    tol: f64,
) -> Result<StructureVerdict, ActiveSetError> {
    if pattern.side != Side::R {
        return Err(ActiveSetError::WrongSide {
            expected: Side::R,
            found: pattern.side,
        });
    }
    if !pattern.sum_active {
        return Ok(StructureVerdict::fail(
            "a",
            "summation constraint not active".into(),
        ));
    }
    if pattern.a01.len() != n - s {
        return Ok(StructureVerdict::fail(
            "b",
            format!("|a01| = {} but n-s = {}", pattern.a01.len(), n - s),
        ));
    }
    let upper = 1.0 + epsilon;
    let fractional = 1.0 - (n - s - 1) as f64 * epsilon;
    let mut at_upper = 0usize;
    let mut at_fractional = 0usize;
    let mut at_zero = 0usize;
    for (i, &yi) in y.iter().enumerate() {
        if (yi - upper).abs() <= tol {
            at_upper += 1;
        } else if (yi - fractional).abs() <= tol {
            at_fractional += 1;
        } else if yi.abs() <= tol {
            at_zero += 1;
        } else {
            return Ok(StructureVerdict::fail(
                "c",
                format!(
                    "y{} = {yi} is none of 1+eps = {upper}, 1-(n-s-1)eps = {fractional}, 0",
                    i + 1
                ),
            ));
        }
    }
    if at_upper != n - s - 1 || at_fractional != 1 || at_zero != s {
        return Ok(StructureVerdict::fail(
            "c",
            format!(
                "counts (1+eps, fractional, zero) = ({at_upper}, {at_fractional}, {at_zero}), \
                 expected ({}, 1, {s})",
                n - s - 1
            ),
        ));
    }
    Ok(StructureVerdict::pass())
}

/// Check the y-structure a KKT point of S forces: `|E ∪ H| >= n-s-1`,
/// `|N| <= s`, `|O| <= 1`, and the summation constraint is active.
pub fn check_e_and_h(
    pattern: &ActivePattern,
    n: usize,
    s: usize,
) -> Result<StructureVerdict, ActiveSetError> {
    if pattern.side != Side::S {
        return Err(ActiveSetError::WrongSide {
            expected: Side::S,
            found: pattern.side,
        });
    }
    let _ = n;
    if !pattern.sum_active {
        return Ok(StructureVerdict::fail(
            "a",
            "summation constraint not active".into(),
        ));
    }
    let eh = pattern.e_union_h().len();
    if n - s >= 1 && eh < n - s - 1 {
        return Ok(StructureVerdict::fail(
            "b",
            format!("|E u H| = {eh} < n-s-1 = {}", n - s - 1),
        ));
    }
    if pattern.n_zero.len() > s {
        return Ok(StructureVerdict::fail(
            "b",
            format!("|N| = {} > s = {s}", pattern.n_zero.len()),
        ));
    }
    if pattern.o_free.len() > 1 {
        return Ok(StructureVerdict::fail(
            "b",
            format!("|O| = {} > 1", pattern.o_free.len()),
        ));
    }
    Ok(StructureVerdict::pass())
}

/// Relations between the limit pattern (R-side) and a path pattern (S-side):
/// (a) Q0 equality, (b) E equality, (c) a00 ⊆ H, (d) N ⊆ a10 ⊆ N ∪ H.
#[derive(Debug, Clone, Serialize)]
pub struct PatternRelation {
    pub q0_equal: bool,
    pub e_equal: bool,
    pub a00_subset_h: bool,
    pub n_subset_a10: bool,
    pub a10_subset_n_union_h: bool,
}

impl PatternRelation {
    pub fn all_hold(&self) -> bool {
        self.q0_equal
            && self.e_equal
            && self.a00_subset_h
            && self.n_subset_a10
            && self.a10_subset_n_union_h
    }
}

fn is_subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|i| b.contains(i))
}

/// Compare a limit pattern with a path pattern.
pub fn compare_patterns(
    pattern_r: &ActivePattern,
    pattern_s: &ActivePattern,
) -> Result<PatternRelation, ActiveSetError> {
    if pattern_r.side != Side::R {
        return Err(ActiveSetError::WrongSide {
            expected: Side::R,
            found: pattern_r.side,
        });
    }
    if pattern_s.side != Side::S {
        return Err(ActiveSetError::WrongSide {
            expected: Side::S,
            found: pattern_s.side,
        });
    }
    let h = pattern_s.h();
    let mut n_union_h: Vec<usize> = pattern_s.n_zero.iter().chain(h.iter()).copied().collect();
    n_union_h.sort_unstable();
    n_union_h.dedup();
    Ok(PatternRelation {
        q0_equal: pattern_r.q0 == pattern_s.q0,
        e_equal: pattern_r.e_upper == pattern_s.e_upper,
        a00_subset_h: is_subset(&pattern_r.a00, &h),
        n_subset_a10: is_subset(&pattern_s.n_zero, &pattern_r.a10),
        a10_subset_n_union_h: is_subset(&pattern_r.a10, &n_union_h),
    })
}
