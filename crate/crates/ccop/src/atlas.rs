//! Exhaustive enumeration of T-stationary points of R for small instances.
//!
//! Stationarity pins the y-side completely: the summation constraint is
//! active, a01 has exactly n-s members, and y takes the values 1+eps
//! (on a01 minus one index), 1-(n-s-1)eps (at the a01 index with the largest
//! c entry, forced by the nonnegativity of the upper-bound multipliers), and
//! zero elsewhere. Enumerating the (a01, a10, a00) partitions and the active
//! inequality guesses therefore covers every candidate; the x-side reduces
//! to an equality-constrained solve per candidate.
//!
//! The point count grows combinatorially with n: one stationary x-support
//! can carry many (a01, a00) splits, each a separate stationary point of R.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{PointXY, ReformR};
use crate::nlpsolver::{self, RestrictedXNlp, SolverConfig};
use crate::stationarity::{classify_r, StationarityReport};
use crate::Tolerances;

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("instance too large for enumeration: n = {n} > 16")]
    SizeGuard { n: usize },
    #[error("too many inequalities for active-set guessing: |Q| = {q} > 8")]
    InequalityGuard { q: usize },
}

/// One enumeration candidate: a partition of the indices plus an active-set
/// guess for the inequalities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PatternCandidate {
    pub a01: Vec<usize>,
    /// The a10 candidate (support of x).
    pub support: Vec<usize>,
    pub a00: Vec<usize>,
    /// The a01 index carrying the fractional y-level; necessarily the argmax
    /// of c over a01, otherwise an upper-bound multiplier would go negative.
    pub i_star: usize,
    pub q0: Vec<usize>,
}

impl PatternCandidate {
    /// Deterministic sort key for merging parallel results.
    fn key(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        (self.a01.clone(), self.support.clone(), self.q0.clone())
    }
}

fn bit_indices(mask: u32, n: usize) -> Vec<usize> {
    (0..n).filter(|i| mask & (1 << i) != 0).collect()
}

/// Enumerate all pattern candidates: every (n-s)-subset as a01, every split
/// of the remainder into support and a00, and every subset of the
/// inequalities as the active guess.
pub fn enumerate_patterns(reform: &ReformR) -> Result<Vec<PatternCandidate>, AtlasError> {
    let n = reform.n();
    let s = reform.s();
    if n > 16 {
        return Err(AtlasError::SizeGuard { n });
    }
    let num_q = reform.problem().inequalities().len();
    if num_q > 8 {
        return Err(AtlasError::InequalityGuard { q: num_q });
    }
    let c = reform.c();
    let mut out = Vec::new();
    for a01_mask in 0u32..(1 << n) {
        if a01_mask.count_ones() as usize != n - s {
            continue;
        }
        let a01 = bit_indices(a01_mask, n);
        let i_star = *a01
            .iter()
            .max_by(|&&a, &&b| c[a].partial_cmp(&c[b]).unwrap())
            .expect("a01 nonempty since s <= n-1");
        let rest = bit_indices(!a01_mask & ((1 << n) - 1), n);
        let splits = 1u32 << rest.len();
        for split in 0..splits {
            let mut support = Vec::new();
            let mut a00 = Vec::new();
            for (bit, &i) in rest.iter().enumerate() {
                if split & (1 << bit) != 0 {
                    a00.push(i);
                } else {
                    support.push(i);
                }
            }
            for q_mask in 0u32..(1 << num_q) {
                out.push(PatternCandidate {
                    a01: a01.clone(),
                    support: support.clone(),
                    a00: a00.clone(),
                    i_star,
                    q0: bit_indices(q_mask, num_q),
                });
            }
        }
    }
    out.sort_by_key(|c| c.key());
    Ok(out)
}

/// Assemble the y-vector a candidate dictates.
pub fn candidate_y(reform: &ReformR, candidate: &PatternCandidate) -> DVector<f64> {
    let n = reform.n();
    let eps = reform.epsilon();
    let fractional = 1.0 - (n - reform.s() - 1) as f64 * eps;
    let mut y = DVector::zeros(n);
    for &i in &candidate.a01 {
        y[i] = if i == candidate.i_star {
            fractional
        } else {
            1.0 + eps
        };
    }
    y
}

/// Solve the restricted x-problem of a candidate and verify the assembled
/// point. Returns `None` when the restricted solve fails, the point does not
/// match the candidate's support, feasibility is violated, or the sign
/// conditions reject the candidate.
pub fn solve_pattern(
    reform: &ReformR,
    candidate: &PatternCandidate,
    config: &SolverConfig,
    tols: &Tolerances,
) -> Option<(PointXY, StationarityReport)> {
    let n = reform.n();
    let mut zero_coords: Vec<usize> = candidate
        .a01
        .iter()
        .chain(candidate.a00.iter())
        .copied()
        .collect();
    zero_coords.sort_unstable();
    let nlp = RestrictedXNlp::new(reform, candidate.q0.clone(), zero_coords);

    let mut ones = DVector::zeros(n);
    for &i in &candidate.support {
        ones[i] = 1.0;
    }
    let starts = [DVector::zeros(n), ones];
    let mut x = None;
    for start in &starts {
        match nlpsolver::solve_local(&nlp, start, config) {
            Ok(out) if out.converged() => {
                x = Some(out.z);
                break;
            }
            _ => {}
        }
    }
    let x = x?;

    // the support must actually be a support
    if candidate
        .support
        .iter()
        .any(|&i| x[i].abs() <= tols.activity)
    {
        return None;
    }
    // feasibility of the inequalities outside the active guess
    for (q, gexpr) in reform.problem().inequalities().iter().enumerate() {
        if !candidate.q0.contains(&q) {
            let v = gexpr.eval(&x).ok()?;
            if v < -tols.activity {
                return None;
            }
        }
    }
    let point = PointXY::new(x, candidate_y(reform, candidate));
    let report = classify_r(reform, &point, tols).ok()?;
    if !report.stationary {
        return None;
    }
    Some((point, report))
}

#[derive(Debug, Clone, Serialize)]
pub struct AtlasEntry {
    pub candidate: PatternCandidate,
    pub point: PointXY,
    pub report: StationarityReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct AtlasResult {
    pub entries: Vec<AtlasEntry>,
    /// Point counts by T-index.
    pub histogram: BTreeMap<usize, usize>,
    /// Points whose T-index is undefined (LICQ failure at the point).
    pub undefined_index: usize,
    /// Distinct x-projections with the number of (x, y) points sharing each.
    pub x_projection_counts: Vec<(Vec<f64>, usize)>,
}

/// Enumerate, solve and classify all candidates, deduplicate by point
/// distance, and summarize. Candidates run in parallel; the merge order is
/// the deterministic candidate order.
pub fn atlas(
    reform: &ReformR,
    config: &SolverConfig,
    tols: &Tolerances,
) -> Result<AtlasResult, AtlasError> {
    let candidates = enumerate_patterns(reform)?;
    let solved: Vec<Option<AtlasEntry>> = candidates
        .par_iter()
        .map(|cand| {
            solve_pattern(reform, cand, config, tols).map(|(point, report)| AtlasEntry {
                candidate: cand.clone(),
                point,
                report,
            })
        })
        .collect();

    let mut entries: Vec<AtlasEntry> = Vec::new();
    for entry in solved.into_iter().flatten() {
        let duplicate = entries
            .iter()
            .any(|e| (e.point.stacked() - entry.point.stacked()).norm() < 1e-6);
        if !duplicate {
            entries.push(entry);
        }
    }

    let mut histogram = BTreeMap::new();
    let mut undefined_index = 0;
    for e in &entries {
        match e.report.t_index {
            Some(ti) => *histogram.entry(ti).or_insert(0) += 1,
            None => undefined_index += 1,
        }
    }
    let mut x_projection_counts: Vec<(Vec<f64>, usize)> = Vec::new();
    for e in &entries {
        let xe = &e.point.x;
        match x_projection_counts
            .iter_mut()
            .find(|(gx, _)| (DVector::from_row_slice(gx) - xe).norm() < 1e-6)
        {
            Some((_, count)) => *count += 1,
            None => x_projection_counts.push((xe.as_slice().to_vec(), 1)),
        }
    }
    Ok(AtlasResult {
        entries,
        histogram,
        undefined_index,
        x_projection_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activesets::check_y_structure_r;
    use crate::model::{builtin, ProblemFile};
    use approx::assert_relative_eq;

    fn tols() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn enumeration_counts() {
        // n = 2, s = 1, no inequalities: two a01 singletons, each with the
        // complement in a10 or a00
        let reform = builtin::index_persistence();
        let cands = enumerate_patterns(&reform).unwrap();
        assert_eq!(cands.len(), 4);

        // n = 4, s = 2: C(4,2) a01 choices, 2^2 splits of the remainder
        let reform4 = builtin::separable_n4();
        assert_eq!(enumerate_patterns(&reform4).unwrap().len(), 24);

        // s = 0: a01 is everything, nothing to split
        let file = ProblemFile {
            n: 2,
            s: 0,
            objective: "x1^2+x2^2".into(),
            equalities: vec![],
            inequalities: vec![],
            c: None,
            epsilon: None,
        };
        let reform0 = file.build().unwrap();
        assert_eq!(enumerate_patterns(&reform0).unwrap().len(), 1);
    }

    #[test]
    fn i_star_is_argmax_of_c() {
        let reform = builtin::separable_n4();
        for cand in enumerate_patterns(&reform).unwrap() {
            let c = reform.c();
            let best = cand
                .a01
                .iter()
                .copied()
                .max_by(|&a, &b| c[a].partial_cmp(&c[b]).unwrap())
                .unwrap();
            assert_eq!(cand.i_star, best);
        }
    }

    #[test]
    fn solve_pattern_recovers_vanishing_sigma1_point() {
        let reform = builtin::vanishing_sigma1();
        let cand = PatternCandidate {
            a01: vec![0],
            support: vec![1],
            a00: vec![],
            i_star: 0,
            q0: vec![0],
        };
        let (point, report) = solve_pattern(&reform, &cand, &SolverConfig::default(), &tols())
            .expect("candidate solvable");
        assert_relative_eq!(
            (point.stacked() - DVector::from_row_slice(&[0.0, 1.0, 1.0, 0.0])).norm(),
            0.0,
            epsilon = 1e-9
        );
        assert_eq!(report.t_index, Some(0));
        let sigma1 = report
            .multipliers_r
            .as_ref()
            .unwrap()
            .sigma1_for(0)
            .unwrap();
        assert!(sigma1.abs() <= 1e-8);
    }

    #[test]
    fn solve_pattern_separable_support_is_closed_form() {
        // separable objective: the restricted solve lands on the target
        // entry for the support index and zero elsewhere
        let reform = builtin::separable_n4();
        let cand = PatternCandidate {
            a01: vec![0, 1],
            support: vec![2],
            a00: vec![3],
            i_star: 1,
            q0: vec![],
        };
        let solved = solve_pattern(&reform, &cand, &SolverConfig::default(), &tols());
        // a00 = {4} has rho2 = c4 - c2 > 0 while rho1 = -8 != 0: rejected
        assert!(solved.is_none());

        let cand = PatternCandidate {
            a01: vec![0, 3],
            support: vec![2],
            a00: vec![1],
            i_star: 3,
            q0: vec![],
        };
        let (point, report) = solve_pattern(&reform, &cand, &SolverConfig::default(), &tols())
            .expect("valid candidate");
        assert_relative_eq!(point.x[2], 3.0, epsilon = 1e-9);
        assert_relative_eq!(point.x[0].abs() + point.x[1].abs() + point.x[3].abs(), 0.0);
        assert_eq!(report.t_index, Some(1), "QI = 0 plus one biactive index");
    }

    #[test]
    fn atlas_contains_known_limit_point() {
        let reform = builtin::strict_complementarity_failure();
        let result = atlas(&reform, &SolverConfig::default(), &tols()).unwrap();
        let target = DVector::from_row_slice(&[0.0, 1.0, 1.0, 0.0]);
        assert!(
            result
                .entries
                .iter()
                .any(|e| (e.point.stacked() - &target).norm() < 1e-8),
            "limit point missing from atlas ({} entries)",
            result.entries.len()
        );
    }

    #[test]
    fn atlas_outputs_satisfy_y_structure() {
        let reform = builtin::separable_n4();
        let result = atlas(&reform, &SolverConfig::default(), &tols()).unwrap();
        assert!(!result.entries.is_empty());
        for e in &result.entries {
            let verdict = check_y_structure_r(
                &e.report.pattern,
                &e.point.y,
                reform.n(),
                reform.s(),
                reform.epsilon(),
                1e-12,
            )
            .unwrap();
            assert!(verdict.pass, "{:?}", verdict.violated);
        }
    }

    #[test]
    fn equality_constrained_atlas() {
        // h: x1 + x2 + x3 = 2 forces the support entry to carry the mass;
        // patterns pinning all three coordinates to zero are infeasible for
        // the restricted solve and drop out
        let file = ProblemFile {
            n: 3,
            s: 1,
            objective: "(x3-1)^2".into(),
            equalities: vec!["x1+x2+x3-2".into()],
            inequalities: vec![],
            c: None,
            epsilon: None,
        };
        let reform = file.build().unwrap();
        let result = atlas(&reform, &SolverConfig::default(), &tols()).unwrap();
        // one point per support singleton; a00 splits are h-infeasible
        assert_eq!(result.entries.len(), 3);
        for e in &result.entries {
            assert_relative_eq!(e.point.x.sum(), 2.0, epsilon = 1e-9);
        }
        let target = DVector::from_row_slice(&[0.0, 0.0, 2.0, 1.25, 0.75, 0.0]);
        let known = result
            .entries
            .iter()
            .find(|e| (e.point.stacked() - &target).norm() < 1e-8)
            .expect("nondegenerate point present");
        assert_eq!(known.report.t_index, Some(0));
        assert!(known.report.nondegenerate);
    }

    #[test]
    fn infeasible_instance_gives_empty_atlas() {
        let file = ProblemFile {
            n: 2,
            s: 1,
            objective: "x1^2+x2^2".into(),
            equalities: vec!["x1-1".into(), "x1-2".into()],
            inequalities: vec![],
            c: None,
            epsilon: None,
        };
        let reform = file.build().unwrap();
        let result = atlas(&reform, &SolverConfig::default(), &tols()).unwrap();
        assert!(result.entries.is_empty());
    }

    #[test]
    fn parallel_runs_merge_deterministically() {
        let reform = builtin::separable_n4();
        let a = atlas(&reform, &SolverConfig::default(), &tols()).unwrap();
        let b = atlas(&reform, &SolverConfig::default(), &tols()).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn size_guards() {
        let file = ProblemFile {
            n: 17,
            s: 1,
            objective: "x1^2".into(),
            equalities: vec![],
            inequalities: vec![],
            c: None,
            epsilon: None,
        };
        let reform = file.build().unwrap();
        assert!(matches!(
            enumerate_patterns(&reform),
            Err(AtlasError::SizeGuard { .. })
        ));
    }
}
