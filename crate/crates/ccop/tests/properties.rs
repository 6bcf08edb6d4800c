//! Property tests for the expression layer and the detection machinery.

use ccop::expr::{self, Expr};
use nalgebra::DVector;
use proptest::prelude::*;

/// Strategy for random expression trees over x1..x2 that stay inside the
/// function domains on the sampled box (log/sqrt arguments shifted positive,
/// divisors bounded away from zero).
fn arb_expr(depth: u32) -> BoxedStrategy<String> {
    let leaf = prop_oneof![
        (1..=2u32).prop_map(|k| format!("x{k}")),
        (-50i32..50).prop_map(|v| format!("{}", v as f64 / 10.0)),
    ];
    leaf.prop_recursive(depth, 64, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a})+({b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a})-({b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a})*({b})")),
            // divisor shifted away from zero on the sample box
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a})/(10+sin({b}))")),
            (inner.clone(), 1..=3i32).prop_map(|(a, k)| format!("({a})^{k}")),
            inner.clone().prop_map(|a| format!("sin({a})")),
            inner.clone().prop_map(|a| format!("cos({a})")),
            // keep exponent magnitudes moderate
            inner.clone().prop_map(|a| format!("exp(sin({a}))")),
            inner.clone().prop_map(|a| format!("log(3+sin({a}))")),
            inner.prop_map(|a| format!("sqrt(3+sin({a}))")),
        ]
    })
    .boxed()
}

fn sample_points(seed: u64, count: usize) -> Vec<DVector<f64>> {
    // deterministic low-discrepancy-ish points in [-2, 2]^2
    let mut pts = Vec::with_capacity(count);
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..count {
        pts.push(DVector::from_row_slice(&[
            4.0 * next() - 2.0,
            4.0 * next() - 2.0,
        ]));
    }
    pts
}

fn eval_ok(e: &Expr, p: &DVector<f64>) -> Option<f64> {
    e.eval(p).ok().filter(|v| v.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Printing and re-parsing preserves the evaluated function.
    #[test]
    fn print_parse_roundtrip(text in arb_expr(4), seed in 0u64..1_000) {
        let parsed = expr::parse(&text, 2).unwrap();
        let printed = parsed.to_string();
        let reparsed = expr::parse(&printed, 2)
            .unwrap_or_else(|e| panic!("printed form must re-parse: {printed}: {e}"));
        for p in sample_points(seed, 100) {
            match (eval_ok(&parsed, &p), eval_ok(&reparsed, &p)) {
                (Some(a), Some(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                (None, None) => {}
                (a, b) => prop_assert!(false, "domain mismatch: {:?} vs {:?}", a, b),
            }
        }
    }

    /// Forward AD agrees with central differences wherever both evaluate.
    #[test]
    fn ad_matches_finite_differences(text in arb_expr(3), seed in 0u64..1_000) {
        let parsed = expr::parse(&text, 2).unwrap();
        for p in sample_points(seed, 5) {
            if parsed.eval2(&p).is_err() {
                continue;
            }
            let check = expr::check_derivatives(&parsed, &p, 1e-5);
            if check.domain_violation.is_some() || check.nan_entries > 0 {
                continue;
            }
            // wild magnitudes make the FD comparison meaningless
            let val = parsed.eval(&p).unwrap();
            if !val.is_finite() || val.abs() > 1e6 {
                continue;
            }
            prop_assert!(
                check.grad_max_rel <= 1e-6,
                "grad mismatch {} for {}",
                check.grad_max_rel,
                text
            );
        }
    }

    /// The Hessian is exactly symmetric, bit for bit.
    #[test]
    fn hessian_symmetry_exact(text in arb_expr(4), seed in 0u64..1_000) {
        let parsed = expr::parse(&text, 2).unwrap();
        for p in sample_points(seed, 10) {
            if let Ok(r) = parsed.eval2(&p) {
                for i in 0..2 {
                    for j in 0..2 {
                        prop_assert_eq!(
                            r.hessian[(i, j)].to_bits(),
                            r.hessian[(j, i)].to_bits()
                        );
                    }
                }
            }
        }
    }
}
