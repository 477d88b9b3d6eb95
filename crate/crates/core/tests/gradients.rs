use xdec_core::gradcheck::{self, CaseResult};

fn assert_all(cases: Vec<CaseResult>) {
    for c in &cases {
        println!("{:<32} worst relative error {:.3e}", c.name, c.worst);
    }
    let failed: Vec<_> = cases.iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "gradient mismatch: {failed:?}");
}

#[test]
fn primitive_operations() {
    assert_all(gradcheck::primitive_cases());
}

#[test]
fn losses_on_raw_inputs() {
    assert_all(gradcheck::loss_cases());
}

#[test]
fn losses_through_networks() {
    assert_all(gradcheck::network_cases());
}

#[test]
fn training_objectives() {
    assert_all(gradcheck::objective_cases());
}
