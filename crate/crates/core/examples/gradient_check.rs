//! Finite-difference checks of every differentiable operation.

use ktn::gradsuite::{run_gradient_suite, SUITE_TOL};

fn main() -> ktn::Result<()> {
    for e in run_gradient_suite(2, 0)? {
        println!(
            "{:<24} {} coordinates, max relative error {:.2e} {}",
            e.name,
            e.checked,
            e.max_rel_err,
            if e.passes() { "ok" } else { "FAILED" }
        );
    }
    println!("tolerance {SUITE_TOL:e}");
    Ok(())
}
