mod support;

use support::{end_to_end, op_errors, E2E_TOL, OP_TOL};

#[test]
fn every_op_matches_finite_differences() {
    let errors = op_errors();
    for (name, err) in &errors {
        eprintln!("{name:<14} {err:.2e}");
    }
    for (name, err) in errors {
        assert!(err < OP_TOL, "{name}: max relative error {err:e}");
    }
}

#[test]
fn end_to_end_model_at_64_pixels() {
    for (dfc, tff) in [(false, false), (true, true)] {
        let (report, inputs) = end_to_end(dfc, tff);
        eprintln!("dfc {dfc} tff {tff}: {report:?}");
        assert!(report.checked >= 2 * inputs, "{report:?}");
        assert!(report.max_rel_err < E2E_TOL, "dfc {dfc} tff {tff}: {report:?}");
    }
}
