//! Finite-difference checks of every backward rule, the adapted attention
//! and the full losses, in f64. A deliberately broken backward pass shows
//! what a failure looks like.
//!
//! cargo run --example gradient_check

use zadapt::gradcheck::{adapter_suite, full_suite, primitive_suite};

fn main() -> zadapt::Result<()> {
    let mut reports = primitive_suite(0, None)?;
    reports.extend(adapter_suite(0, None)?);
    reports.extend(full_suite(0, None)?);
    for (name, r) in &reports {
        println!("{name:<32} max rel err {:.2e}  {}", r.max_rel_err(), if r.passed() { "ok" } else { "FAIL" });
    }

    println!("\nwith every analytic gradient scaled by 1.01:");
    for (name, r) in adapter_suite(0, Some(1.01))? {
        println!("{name:<32} max rel err {:.2e}  {}", r.max_rel_err(), if r.passed() { "ok" } else { "FAIL" });
    }
    Ok(())
}
