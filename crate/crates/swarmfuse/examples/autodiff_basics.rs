//! The tensor substrate on its own: record a small graph, run backward,
//! compare one gradient against central finite differences, and take a few
//! descent steps.
//!
//! ```bash
//! cargo run --release -p swarmfuse --example autodiff_basics
//! ```

use swarmfuse::tensor::gradcheck::{check_gradients, random_tensor};
use swarmfuse::tensor::{sgd_step, Graph, ParamSet, Tensor};

fn main() {
    // y = relu(conv(x, w) + b), loss = sum(y * y)
    let mut g = Graph::new();
    let x = g.constant(random_tensor(&[1, 1, 5, 5], -1.0, 1.0, 1));
    let w = g.leaf(random_tensor(&[2, 1, 3, 3], -0.5, 0.5, 2));
    let b = g.leaf(Tensor::zeros(&[2]));
    let conv = g.conv2d(x, w, b, 1, 1).unwrap();
    let y = g.relu(conv);
    let sq = g.mul(y, y).unwrap();
    let loss = g.sum_all(sq);
    println!("loss = {:.4}", g.value(loss).data()[0]);

    g.backward(loss).unwrap();
    let gw = g.grad(w).unwrap();
    println!("d loss / d w[0..4] = {:?}", &gw[..4]);

    // The same gradient, checked against central differences.
    let report = check_gradients(
        &[random_tensor(&[2, 1, 3, 3], -0.5, 0.5, 2)],
        1e-3,
        7,
        |g, v| {
            let x = g.constant(random_tensor(&[1, 1, 5, 5], -1.0, 1.0, 1));
            let b = g.constant(Tensor::zeros(&[2]));
            let conv = g.conv2d(x, v[0], b, 1, 1).unwrap();
            let y = g.relu(conv);
            g.mul(y, y).unwrap()
        },
    );
    println!(
        "finite-difference check: {} elements, max relative error {:.2e}",
        report.elements_checked, report.max_rel_err
    );

    // Minimize f(p) = (p - 3)^2 through the parameter-set flow used by the
    // training harness: bind, backward, absorb, step.
    let mut params = ParamSet::new();
    params.insert("p", Tensor::scalar(0.0));
    for step in 0..20 {
        let mut g = Graph::new();
        let p = params.bind(&mut g, "p").unwrap();
        let shift = g.constant(Tensor::scalar(-3.0));
        let diff = g.add(p, shift).unwrap();
        let sq = g.mul(diff, diff).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        params.zero_grads();
        params.absorb_grads(&g).unwrap();
        sgd_step(&mut params, 0.2).unwrap();
        if step % 5 == 4 {
            println!("step {:>2}: p = {:.5}", step + 1, params.get("p").unwrap().data()[0]);
        }
    }
}
