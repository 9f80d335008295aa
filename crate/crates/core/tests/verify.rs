use lhm::autodiff::set_gradient_fault;
use lhm::verify::{run_suite, SUITES};

fn report(name: &str) -> Vec<lhm::verify::CheckRow> {
    let rows = run_suite(name).unwrap();
    for r in &rows {
        println!("{}", r.line());
    }
    rows
}

#[test]
fn every_suite_passes() {
    for name in SUITES {
        let rows = report(name);
        assert!(!rows.is_empty());
        let bad: Vec<_> = rows.iter().filter(|r| !r.passed()).map(|r| r.line()).collect();
        assert!(bad.is_empty(), "{bad:#?}");
    }
}

#[test]
fn unknown_suite_is_an_error() {
    assert!(run_suite("everything").unwrap_err().contains("ops"));
}

#[test]
fn injected_fault_fails_the_named_op() {
    for op in ["softmax", "layer_norm", "gelu", "matmul"] {
        set_gradient_fault(Some(op));
        let rows = run_suite("ops").unwrap();
        set_gradient_fault(None);
        let row = rows.iter().find(|r| r.component == op).unwrap();
        assert!(!row.passed(), "{op} survived a corrupted backward rule");
        // unrelated primitives keep passing
        assert!(rows.iter().find(|r| r.component == "exp").unwrap().passed() || op == "exp");
    }
}
