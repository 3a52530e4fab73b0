//! The reverse-mode tape from first principles: record a computation,
//! pull gradients back from a scalar loss, and cross-check them against
//! central finite differences.
//!
//! Run with: cargo run --release --example tensor_autodiff

use any2seg::tensor::{grad_check, Tape, Tensor};

fn main() -> any2seg::Result<()> {
    // Every differentiable op lives on a tape. Tensors are plain values
    // until `watch` registers them as leaves.
    let tape = Tape::new();
    let x = tape.watch(&Tensor::vector(&[1.0, -2.0, 3.0]));
    let w = tape.watch(&Tensor::vector(&[0.5, 0.25, -1.0]));

    // loss = sum(relu(x * w))  -- elementwise product, rectify, reduce.
    let prod = tape.mul(&x, &w)?;
    let active = tape.relu(&prod)?;
    let loss = tape.sum(&active)?;
    println!("loss           = {:.6}", loss.item()?);

    // Backward pass: gradients for every watched leaf.
    let grads = tape.backward(&loss)?;
    println!("dloss/dx       = {:?}", grads.wrt(&x).unwrap().data());
    println!("dloss/dw       = {:?}", grads.wrt(&w).unwrap().data());
    // x*w = [0.5, -0.5, -3.0]; only the first entry survives the relu,
    // so dloss/dx = [w0, 0, 0] and dloss/dw = [x0, 0, 0].

    // A softmax/KL pair, the shape distillation losses are built from.
    // One backward per tape: start a fresh one for a fresh loss.
    let tape = Tape::new();
    let logits = tape.watch(&Tensor::vector(&[0.3, -0.1, 0.7]));
    let p = tape.softmax(&logits, 0, 1.0)?;
    let target = Tensor::vector(&[0.6, 0.3, 0.1]);
    let q = tape.softmax(&target, 0, 1.0)?;
    let kl = tape.kl_div(&q, &p)?;
    println!("KL(q ‖ p)      = {:.6}", kl.item()?);
    let g = tape.backward(&kl)?;
    println!("dKL/dlogits    = {:?}", g.wrt(&logits).unwrap().data());

    // The same machinery, verified numerically. `grad_check` runs the
    // closure once for analytic gradients and 2N more times for central
    // differences, returning the worst relative disagreement.
    let inputs = [Tensor::vector(&[1.0, -2.0, 3.0]), Tensor::vector(&[0.5, 0.25, -1.0])];
    let max_rel = grad_check(
        |t, xs| {
            let prod = t.mul(&xs[0], &xs[1])?;
            let sq = t.mul(&prod, &prod)?;
            t.mean(&sq)
        },
        &inputs,
        1e-5,
    )?;
    println!("grad_check     = {:.3e} max relative error", max_rel);
    assert!(max_rel < 1e-6);
    Ok(())
}
