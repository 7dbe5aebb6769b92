use dehaze::selfcheck::{block_checks, end_to_end_check, TOL_BN};

#[test]
fn network_blocks_match_central_differences() {
    let checks = block_checks().unwrap();
    for c in &checks {
        println!("{c}");
    }
    assert!(checks.iter().all(|c| c.passed()));
}

#[test]
fn whole_network_matches_central_differences() {
    let c = end_to_end_check(32, 11).unwrap();
    println!("{c}");
    assert!(c.passed());
    assert_eq!(c.tol, TOL_BN);
}
