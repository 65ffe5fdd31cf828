mod common;

#[test]
fn every_primitive_matches_finite_differences() {
    let failed: Vec<_> = common::primitive_suite().into_iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn every_composite_matches_finite_differences() {
    let checks = common::composite_suite();
    assert!(checks.len() >= 5);
    let failed: Vec<_> = checks.into_iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn composite_checks_hold_across_seeds() {
    for seed in [1, 2, 3] {
        let worst = common::composite_check(semquant::Objective::TaskJsdPerceptual, seed);
        assert!(worst < common::COMPOSITE_TOL, "seed {seed}: {worst}");
    }
}
