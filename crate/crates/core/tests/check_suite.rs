use cavg::check::run_all;

#[test]
fn every_self_check_passes() {
    let outcomes = run_all();
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "ok  " } else { "FAIL" }, o.name, o.detail);
    }
    assert!(outcomes.iter().all(|o| o.passed));
}
