//! Runs the built-in gradient, oracle and fixture checks and prints the
//! report. Same as `cooptrack check`.

use cooptrack::check::{format_report, run_checks, CheckOptions};

fn main() {
    let results = run_checks(&CheckOptions::default());
    print!("{}", format_report(&results));
    if results.iter().any(|r| !r.passed) {
        std::process::exit(3);
    }
}
