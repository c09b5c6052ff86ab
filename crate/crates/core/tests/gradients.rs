#[path = "common/gradcases.rs"]
mod gradcases;

#[test]
fn every_op_matches_finite_differences() {
    for (name, r) in gradcases::run_all() {
        assert!(
            r.passes(gradcases::REL_TOL),
            "{name}: max rel err {:.3e} over {} entries",
            r.max_rel_err,
            r.entries
        );
    }
}
