use hoiu::selfcheck::{end_to_end_gradcheck, run_all, CheckOptions, END_TO_END_TOLERANCE};

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for case in 0..8 {
        let errs = end_to_end_gradcheck(case, 3).unwrap();
        for (name, e) in errs {
            assert!(e < END_TO_END_TOLERANCE, "case {case} {name}: {e:e}");
        }
    }
}

#[test]
fn quick_check_suite_passes() {
    let opts = CheckOptions {
        op_seeds: 5,
        model_cases: 4,
        matching_trials: 100,
    };
    for c in run_all(&opts) {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
}
