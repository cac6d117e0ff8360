mod common;

use common::*;

#[test]
fn bce_analytic_values() {
    bce_cases().unwrap();
}

#[test]
fn adam_matches_scalar_reference() {
    adam_reference().unwrap();
}

#[test]
fn generator_gradients_match_finite_differences() {
    generator_gradients().unwrap();
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    discriminator_gradients().unwrap();
}

#[test]
fn compressor_gradients_match_finite_differences() {
    compressor_gradients().unwrap();
}

#[test]
fn perceptual_gradients_match_finite_differences() {
    perceptual_gradients().unwrap();
}

#[test]
fn fid_self_distance_and_mean_shift() {
    fid_oracles().unwrap();
}

#[test]
fn published_rows_render_verbatim() {
    table_fixture().unwrap();
}

#[test]
fn architecture_contracts_hold() {
    architecture_contracts().unwrap();
}
