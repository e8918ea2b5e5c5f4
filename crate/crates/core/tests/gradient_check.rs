mod common;

use common::{check_model, gradient_suite, op_cases, TOLERANCE};
use padme::model::Variant;

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..8 {
        for c in op_cases(seed) {
            let s = c.check();
            assert!(s.checked > 0, "{} checked nothing", c.name);
            assert!(s.max_rel < TOLERANCE, "{}: {:.3e} at {}", c.name, s.max_rel, s.worst);
        }
    }
}

#[test]
fn full_models_match_central_differences() {
    for v in Variant::ALL {
        for seed in 0..3 {
            let s = check_model(v, seed, 12);
            assert!(s.max_rel < TOLERANCE, "{v}#{seed}: {:.3e} at {}", s.max_rel, s.worst);
        }
    }
}

#[test]
fn suite_covers_at_least_100_cases() {
    let (cases, _, failures) = gradient_suite(7, 2);
    assert!(cases >= 100, "{cases}");
    assert!(failures.is_empty(), "{failures:?}");
}
