//! Tensors, broadcasting, and reverse-mode gradients.
//!
//! ```sh
//! cargo run --release --example autodiff_basics
//! ```

use vclr::ndtensor::gradcheck::{check, GradCheckSettings};
use vclr::ndtensor::{no_grad, Tensor};

fn main() -> anyhow::Result<()> {
    // A two-input toy: loss = mean(sigmoid(x W + b)). The bias is a [2]
    // vector broadcast across the [2, 2] product's rows.
    let x = Tensor::param(vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75], &[2, 3])?;
    let w = Tensor::param(vec![0.3, -0.6, 0.9, 0.1, -0.2, 0.4], &[3, 2])?;
    let b = Tensor::param(vec![0.1, -0.2], &[2])?;

    let loss = x.matmul(&w)?.add(&b)?.sigmoid().mean_all()?;
    loss.backward()?;
    println!("loss        = {:.6}", loss.item()?);
    println!("dloss/db    = {:?}", b.grad().unwrap());

    // Inside no_grad nothing joins the tape, however the inputs were made.
    let detached = no_grad(|| x.mul_scalar(2.0));
    println!("tracked: x {} / detached {}", x.requires_grad(), detached.requires_grad());

    // The same gradients, audited element by element against central
    // differences.
    let report = check(&[x, w, b], GradCheckSettings::default(), |t| {
        t[0].matmul(&t[1])?.add(&t[2])?.sigmoid().mean_all()
    })?;
    println!(
        "gradcheck   = {} elements, max |analytic - numeric| = {:.2e}",
        report.checked, report.max_abs_diff
    );
    assert!(report.ok(), "{} mismatches", report.mismatches.len());
    Ok(())
}
