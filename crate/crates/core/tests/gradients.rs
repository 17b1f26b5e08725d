use ofl_core::gradcheck::{run_suite, GradcheckOptions, CHECKS};

#[test]
fn every_check_passes() {
    let results = run_suite(&GradcheckOptions::default()).unwrap();
    assert_eq!(results.len(), CHECKS.len());
    for r in &results {
        println!(
            "{:<24} {:>4} checked  max rel {:.3e}  ({})",
            r.name, r.checked, r.max_relative_error, r.worst
        );
    }
    let failed: Vec<_> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name)
        .collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn corrupted_gradient_is_caught() {
    for name in ["seg_softmax", "end_to_end"] {
        let opts = GradcheckOptions {
            corrupt: Some(name.into()),
            filter: Some(name.into()),
            ..GradcheckOptions::default()
        };
        let results = run_suite(&opts).unwrap();
        let r = results.iter().find(|r| r.name == name).unwrap();
        assert!(!r.passed(), "{name} corruption went unnoticed");
    }
}
