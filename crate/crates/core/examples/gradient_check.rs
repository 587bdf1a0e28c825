//! Compares reverse-mode gradients with central differences for every block
//! type and a small end-to-end model.
//!
//! Pass an op name (for example `softmax`) to corrupt its backward rule and
//! watch the affected components fail.

use transdae::gradcheck::{run_gradcheck, GradcheckOptions};

fn main() -> transdae::Result<()> {
    let opts = GradcheckOptions {
        inject_fault: std::env::args().nth(1),
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&opts)?;
    println!("{:<24} {:>12} {:>8}", "component", "max rel err", "coords");
    for c in &report.components {
        let mark = if c.passed { "ok" } else { "FAIL" };
        println!("{:<24} {:>12.3e} {:>8}  {mark}", c.component, c.max_rel_error, c.checked);
    }
    println!("tolerance {:.0e}, all passed: {}", report.tolerance, report.passed);
    Ok(())
}
