mod common;

use common::gradients::gradient_suite;

#[test]
fn all_gradients_match_finite_differences() {
    let mut failures = Vec::new();
    for (name, r) in gradient_suite() {
        assert!(r.checked > 0, "{name}: nothing probed");
        if r.max_rel_err >= 1e-4 {
            failures.push(format!("{name}: {:.3e} at {:?}", r.max_rel_err, r.worst));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
