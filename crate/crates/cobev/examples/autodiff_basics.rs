//! Tour of the reverse-mode tensor core: build a small computation, pull
//! gradients back through it, and confirm them against central differences.

use cobev::tensor::{grad_check, Tensor};
use cobev::Result;

fn main() -> Result<()> {
    // A two-layer scalar pipeline: loss = sum(tanh(W2 relu(W1 x)) ^ 2).
    let x = Tensor::param(&[3, 1], vec![0.4, -1.1, 2.0])?;
    let w1 = Tensor::param(&[4, 3], (0..12).map(|i| (i as f64 * 1.7).sin() * 0.6).collect())?;
    let w2 = Tensor::param(&[2, 4], (0..8).map(|i| (i as f64 * 1.3).cos() * 0.5).collect())?;

    let loss = w2.matmul(&w1.matmul(&x)?.relu())?.tanh().square().sum();
    println!("loss = {:.6}", loss.item());

    loss.backward()?;
    let gx = x.grad().expect("x participates in the loss");
    println!("dloss/dx        = {:?}", gx.iter().map(|g| (g * 1e4).round() / 1e4).collect::<Vec<_>>());
    println!("dloss/dW1 rows  = {}", w1.grad().expect("W1 participates").len() / 3);

    // The same closure under the finite-difference harness. Every element of
    // every parameter is perturbed both ways; the report is the worst
    // relative disagreement with the reverse-mode sweep.
    let params = [x.clone(), w1.clone(), w2.clone()];
    let worst = grad_check(
        || Ok(w2.matmul(&w1.matmul(&x)?.relu())?.tanh().square().sum()),
        &params,
        1e-5,
    )?;
    println!("worst relative error vs central differences: {worst:.2e}");

    // Convolutions and normalization run through the same tape. Shapes are
    // [C, H, W]; conv2d is same-padded with its own learned bias.
    let img = Tensor::param(&[2, 5, 5], (0..50).map(|i| (i as f64 * 0.7).sin()).collect())?;
    let kernel = Tensor::param(&[2, 2, 3, 3], (0..36).map(|i| (i as f64 * 0.3).cos() * 0.2).collect())?;
    let bias = Tensor::param(&[2], vec![0.05, -0.02])?;
    let gamma = Tensor::param(&[2], vec![1.0, 1.0])?;
    let beta = Tensor::param(&[2], vec![0.0, 0.0])?;
    let conv_params = [img.clone(), kernel.clone(), bias.clone(), gamma.clone(), beta.clone()];
    let worst = grad_check(
        || {
            Ok(img
                .conv2d(&kernel, &bias, 1, 1)?
                .layer_norm(&gamma, &beta, 0, 1e-5)?
                .sigmoid()
                .mean())
        },
        &conv_params,
        1e-5,
    )?;
    println!("conv + layer-norm chain, worst relative error: {worst:.2e}");
    Ok(())
}
