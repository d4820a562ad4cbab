mod common;

use common::{CHECKS, TOL};

#[test]
fn analytic_gradients_match_central_differences() {
    for (name, check) in CHECKS {
        let (seed, worst) = (0..100u64)
            .map(|s| (s, check(s)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert!(
            worst < TOL,
            "{name}: relative error {worst:e} at seed {seed}"
        );
    }
}
