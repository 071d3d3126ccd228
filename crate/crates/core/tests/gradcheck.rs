//! Central finite-difference checks of every differentiable op and of the
//! full training loss.

mod common;

use common::{Named, E2E_TOL, OP_TOL};

fn assert_all(results: Vec<Named>) {
    for (name, err) in results {
        assert!(err < OP_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn elementwise_and_reductions() {
    assert_all(common::elementwise(1));
}

#[test]
fn products() {
    assert_all(common::products(4));
}

#[test]
fn normalizations() {
    assert_all(common::normalizations(10));
}

#[test]
fn shape_ops() {
    assert_all(common::shape_ops(14));
}

#[test]
fn losses() {
    assert_all(common::losses(18));
}

#[test]
fn full_loss_matches_finite_differences() {
    for cfg in common::loss_variants() {
        let err = common::end_to_end(&cfg, 21);
        assert!(err < E2E_TOL, "{cfg:?}: relative error {err:e}");
    }
}
