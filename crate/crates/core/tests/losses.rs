//! Loss values against direct summation, closed-form anchors, and autograd
//! gradients against central finite differences in f64.

mod common;

#[test]
fn gradients_match_finite_differences() {
    for (name, err) in common::gradient_report(1) {
        assert!(err < 1e-4, "{name}: relative gradient error {err:e}");
    }
}

#[test]
fn gradients_match_on_a_second_draw() {
    for (name, err) in common::gradient_report(2) {
        assert!(err < 1e-4, "{name}: relative gradient error {err:e}");
    }
}

#[test]
fn losses_match_direct_summation() {
    for (name, err) in common::loss_oracle_report(50, 7) {
        assert!(err < 1e-9, "{name}: deviation {err:e}");
    }
}

#[test]
fn closed_form_anchors() {
    for (name, got, want) in common::loss_anchors() {
        assert!((got - want).abs() < 1e-12, "{name}: {got} vs {want}");
    }
}
