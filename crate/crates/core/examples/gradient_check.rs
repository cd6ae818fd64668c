//! Compares the backward pass against central finite differences.
//!
//!     cargo run --example gradient_check

use gradient_remedy::net::{Network, NetworkShape, Section};
use gradient_remedy::SyntheticTask;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let shape = NetworkShape {
        input_dim: 8,
        trunk: vec![12, 12, 12],
        aux_hidden: vec![],
        dom_hidden: vec![10],
        num_classes: 3,
    };
    let mut net = Network::new(&shape, 11)?;
    let batch = SyntheticTask::new(11, 3, 8)?.sample(0, 5, 10.0)?;
    let (x, clean, labels) = (batch.noisy.view(), batch.clean.view(), &batch.labels[..]);
    let lambda = 0.7;

    let pass = net.forward(x)?;
    let grads = net.backward_two_task(&pass, clean, labels, lambda)?;
    let eps = 1e-5;

    // Trunk weights receive both tasks; check each against its own loss.
    let mut worst = 0.0f64;
    for layer in 0..net.section(Section::Trunk).len() {
        let (rows, cols) = net.section(Section::Trunk)[layer].weights.dim();
        for r in 0..rows {
            for c in 0..cols {
                let mut loss_at = |delta: f64| -> Result<(f64, f64), Box<dyn std::error::Error>> {
                    net.section_mut(Section::Trunk)[layer].weights[[r, c]] += delta;
                    let l = net.losses(&net.forward(x)?, clean, labels, lambda)?;
                    net.section_mut(Section::Trunk)[layer].weights[[r, c]] -= delta;
                    Ok(((1.0 - lambda) * l.loss_aux, lambda * l.loss_dom))
                };
                let (pa, pd) = loss_at(eps)?;
                let (ma, md) = loss_at(-eps)?;
                let g = &grads.trunk[layer];
                for (analytic, numeric) in [
                    (g.aux.weights[[r, c]], (pa - ma) / (2.0 * eps)),
                    (g.dom.weights[[r, c]], (pd - md) / (2.0 * eps)),
                ] {
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
        }
    }
    println!("trunk weights checked, worst relative error {worst:.2e}");
    Ok(())
}
