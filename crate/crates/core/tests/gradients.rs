mod common;

use common::{gradient_cases, GRAD_TOLERANCE};

#[test]
fn every_case_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in gradient_cases() {
        let worst = (0..20u64).map(|s| (case.run)(s).unwrap()).fold(0.0, f64::max);
        if !(worst < GRAD_TOLERANCE) {
            failures.push((case.name, worst));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}
