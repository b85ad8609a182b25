mod common;

use common::checks;

#[test]
fn product_of_losses_gradient_identity() {
    checks::product_gradient_identity().unwrap();
}

#[test]
fn parameter_identities_hold_exactly() {
    checks::parameter_identities().unwrap();
}

#[test]
fn two_stream_models_share_one_encoder() {
    checks::multi_stream_structure().unwrap();
}

#[test]
fn layer_and_metric_oracles_agree() {
    checks::oracle_equivalence().unwrap();
}
