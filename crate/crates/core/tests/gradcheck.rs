//! Analytic gradients checked against central finite differences (f64).
//!
//! The builder cases live in `support` so the acceptance suite can sweep the
//! same oracle across many seeds; here every case runs on a spread of seeds
//! and each aggregation scheme is checked end to end through a small video
//! model.

mod support;

use echoview_core::aggregation::SchemeKind;
use echoview_core::graph::Graph;
use echoview_core::tensor::Tensor;
use support::{differentiable_cases, run_case, video_scheme_gradcheck};

const TOL: f64 = 1e-6;

#[test]
fn every_op_family_matches_finite_differences() {
    for case in differentiable_cases() {
        for seed in [101, 202, 303] {
            run_case(&case, seed, TOL).unwrap();
        }
    }
}

#[test]
fn frameind_scheme_end_to_end() {
    video_scheme_gradcheck(SchemeKind::Frameind, 11, 1e-5).unwrap();
}

#[test]
fn rnn_scheme_end_to_end() {
    video_scheme_gradcheck(SchemeKind::Rnn, 12, 1e-5).unwrap();
}

#[test]
fn nonlocal_scheme_end_to_end() {
    video_scheme_gradcheck(SchemeKind::Nonlocal, 13, 1e-5).unwrap();
}

#[test]
fn temporal_scheme_end_to_end() {
    video_scheme_gradcheck(SchemeKind::Temporal, 15, 1e-5).unwrap();
}

#[test]
fn grads_accumulate_across_backward_calls() {
    let mut g: Graph<f64> = Graph::new();
    let p = g.param(Tensor::full(vec![3], 0.5)).unwrap();
    let l1 = g.sum(p);
    g.backward(l1).unwrap();
    let first = g.grad(p).unwrap().data().to_vec();
    g.reset();
    let l2 = g.sum(p);
    g.backward(l2).unwrap();
    let second = g.grad(p).unwrap().data().to_vec();
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(*b, 2.0 * *a, "second backward should add on top");
    }
    g.zero_grads();
    assert!(g.grad(p).is_none());
}
