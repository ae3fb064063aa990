//! Run the oracle and invariant checks, or a named subset of them.

fn main() {
    let only: Vec<String> = std::env::args().skip(1).collect();
    let report = qising::verify::run_all((!only.is_empty()).then_some(only.as_slice()));
    for c in &report.checks {
        println!("{} {:<26} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    std::process::exit(if report.passed() { 0 } else { 3 });
}
