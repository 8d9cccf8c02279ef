use pharmakit::oracle::{loss_graph_checks, primitive_checks, FD_REL_TOL};

#[test]
fn every_primitive_matches_finite_differences() {
    for r in primitive_checks(20, 2024).unwrap() {
        assert!(r.passed(), "{}: relative error {:e} over {} instances", r.name, r.worst, r.instances);
    }
}

#[test]
fn training_losses_match_finite_differences() {
    for r in loss_graph_checks(20, 7).unwrap() {
        assert!(r.worst < FD_REL_TOL, "{}: relative error {:e}", r.name, r.worst);
    }
}

