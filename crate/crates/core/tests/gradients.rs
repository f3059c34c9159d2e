//! Analytic gradients against central finite differences (step 1e-4).

mod common;

use common::gradients::{self, TOL};

#[test]
fn head_terms_match_finite_differences() {
    let [base, alr, ali] = gradients::head_terms();
    for (name, worst) in [("base", base), ("ALR", alr), ("ALI", ali)] {
        assert!(worst <= TOL, "{name} term: worst relative error {worst:e}");
    }
}

#[test]
fn map_level_total_loss_matches_finite_differences() {
    let worst = gradients::map_level_total();
    assert!(worst <= TOL, "worst relative error {worst:e}");
}

#[test]
fn small_conv_end_to_end() {
    let worst = gradients::small_conv_end_to_end().expect("enough kink-free instances");
    assert!(worst <= TOL, "worst relative error {worst:e}");
}

#[test]
fn resnet12_end_to_end() {
    let worst = gradients::resnet12_end_to_end().expect("enough kink-free instances");
    assert!(worst <= TOL, "worst relative error {worst:e}");
}
