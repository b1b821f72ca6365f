//! Analytic gradients of the three training losses, taken end to end through
//! a width-8 network, against central finite differences.

mod common;

use common::grad;

const TOL: f64 = 1e-4;

#[test]
fn ntxent_through_encoder_and_projection() {
    for dropout in [0.0, 0.1] {
        let e = grad::ntxent_error(dropout);
        assert!(e < TOL, "dropout {dropout}: relative error {e:e}");
    }
}

#[test]
fn proto_loss_through_encoder_and_classifier() {
    for dropout in [0.0, 0.1] {
        let e = grad::proto_error(dropout);
        assert!(e < TOL, "dropout {dropout}: relative error {e:e}");
    }
}

#[test]
fn consistency_loss_through_encoder_and_classifier() {
    for dropout in [0.0, 0.1] {
        let e = grad::consistency_error(dropout);
        assert!(e < TOL, "dropout {dropout}: relative error {e:e}");
    }
}
