#[path = "oracles/value_zeroing.rs"]
mod value_zeroing;

#[test]
fn library_matrix_matches_brute_force_rebuild() {
    let err = value_zeroing::max_abs_error();
    assert!(err <= 1e-8, "largest elementwise gap {err:e}");
}
