mod common;

use common::*;

const TOL: f64 = 1e-4;

#[test]
fn lm_window_loss() {
    for (hidden, seed) in [(4, 0), (4, 1), (8, 2)] {
        let e = lm_gradient_error(hidden, seed);
        assert!(e < TOL, "hidden {hidden} seed {seed}: {e}");
    }
}

#[test]
fn repetition_ranking_loss() {
    let e = repetition_gradient_error(11);
    assert!(e < TOL, "{e}");
}

#[test]
fn relevance_ranking_loss() {
    let e = relevance_gradient_error(12);
    assert!(e < TOL, "{e}");
}

#[test]
fn style_ranking_loss() {
    let e = style_gradient_error(13);
    assert!(e < TOL, "{e}");
}

#[test]
fn nli_cross_entropy() {
    let e = nli_gradient_error(14);
    assert!(e < TOL, "{e}");
}

#[test]
fn mixture_weight_gradient() {
    let e = lambda_gradient_error(15);
    assert!(e < 1e-6, "{e}");
}
