mod common;

use std::time::Instant;

#[test]
fn every_op_and_composite_matches_central_differences() {
    let start = Instant::now();
    let results = common::gradcheck_suite();
    let failed: Vec<_> = results.iter().filter(|(_, e)| !(*e < common::GRAD_TOL)).collect();
    assert!(failed.is_empty(), "gradient mismatches: {failed:?}");
    assert!(results.len() >= 25);
    assert!(start.elapsed().as_secs() < 60);
}
