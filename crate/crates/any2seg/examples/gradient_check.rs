//! Numerical verification of the analytic gradients. Two levels:
//!
//! - `grad_check` on a hand-built composition, showing the raw mechanism
//!   (analytic tape gradients vs central finite differences).
//! - The full suite the `gradcheck` subcommand runs: supervised CE, both
//!   distillation losses, their sum, and a scalar functional of the
//!   fusion pipeline, each over 10 seeded random instances.
//!
//! Run with: cargo run --release --example gradient_check

use any2seg::cli::{gradcheck_suite, GRADCHECK_TOL};
use any2seg::label::LabelMap;
use any2seg::tensor::{grad_check_detailed, Tensor};
use any2seg::IGNORE_LABEL;

fn main() -> any2seg::Result<()> {
    // A supervised loss on a 3-class 2x2 problem. The watched input is
    // the logit map; labels (with one ignored pixel) are captured by the
    // closure.
    let logits = Tensor::from_vec(
        vec![3, 2, 2],
        vec![0.2, -0.4, 0.9, 0.1, -0.3, 0.8, -0.2, 0.5, 0.6, 0.0, 0.3, -0.7],
    )?;
    let labels = LabelMap::new(2, 2, vec![0, 2, IGNORE_LABEL, 1])?;
    let report = grad_check_detailed(
        |tape, xs| tape.cross_entropy(&xs[0], &labels, IGNORE_LABEL),
        &[logits],
        1e-5,
    )?;
    println!("cross-entropy gradients vs finite differences:");
    println!("  max relative error {:.3e}", report.max_rel_err);
    if let Some((input, coord, analytic, numeric)) = report.worst {
        println!(
            "  worst coordinate: input {}, index {} (analytic {:+.6e}, numeric {:+.6e})",
            input, coord, analytic, numeric
        );
    }

    // The full suite at the default step size. Each component checks 10
    // random instances with 8 channels on a 4x4 grid, 3 classes, and a
    // 16-dimensional teacher.
    println!("\nfull gradient suite (threshold {:e}):", GRADCHECK_TOL);
    let (rows, pass) = gradcheck_suite(0, 1e-4)?;
    for (name, err) in &rows {
        println!("  {:<6} max rel err {:.3e}", name, err);
    }
    println!("suite pass: {}", pass);
    assert!(pass);
    Ok(())
}
